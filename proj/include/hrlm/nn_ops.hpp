#pragma once

// Model-level tape primitives: embedding lookup, rotary position coding,
// per-head attention contractions and the masked token NLL. All register
// reverse-mode rules like the core ops in tensor.hpp.

#include <cstdint>
#include <vector>

#include "hrlm/tensor.hpp"

namespace hrlm {

// Gather rows of the embedding table [V, d] for each id -> [t, d].
template <class S>
TensorT<S> embedding_lookup(const TensorT<S>& table,
                            const std::vector<int32_t>& ids) {
  if (table.rank() != 2)
    throw ShapeError("embedding_lookup: table must be [vocab, d]");
  const int64_t vocab = table.dim(0), d = table.dim(1);
  const int64_t t = static_cast<int64_t>(ids.size());
  for (int32_t id : ids)
    if (id < 0 || id >= vocab)
      throw ContractError("embedding_lookup: id " + std::to_string(id) +
                          " outside vocab " + std::to_string(vocab));
  TensorT<S> out = TensorT<S>::zeros({t, d});
  const auto& td = table.data();
  auto& od = out.mutable_data();
  for (int64_t i = 0; i < t; ++i)
    std::copy(td.begin() + ids[i] * d, td.begin() + (ids[i] + 1) * d,
              od.begin() + i * d);
  detail::check_finite(od, "embedding_lookup");

  if (Tape<S>* tape = detail::tape_for<S>({&table})) {
    const int64_t nt = tape->ensure_node(table);
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    auto ids_copy = ids;
    tape->record("embedding_lookup", [=](Tape<S>& tp) {
      const std::vector<S>* g = tp.find_grad(no);
      if (!g) return;
      std::vector<S>& gt = tp.grad_buffer(nt, vocab * d);
      for (int64_t i = 0; i < t; ++i) {
        const S* gr = g->data() + i * d;
        S* row = gt.data() + ids_copy[i] * d;
        for (int64_t j = 0; j < d; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

// Rotary position coding applied to every head block of x [t, d].
// Pair (2i, 2i+1) within each head rotates by pos * theta^(-2i/head_dim).
// The rotation is an isometry; backward rotates the gradient by the
// opposite angle.
template <class S>
TensorT<S> rope_pairs(const TensorT<S>& x, int64_t head_dim, double theta,
                      const std::vector<int64_t>& positions) {
  if (x.rank() != 2) throw ShapeError("rope_pairs: expects [t, d]");
  const int64_t t = x.dim(0), d = x.dim(1);
  if (head_dim <= 0 || head_dim % 2 != 0)
    throw ConfigError("rope_pairs: head_dim must be positive and even, got " +
                      std::to_string(head_dim));
  if (d % head_dim != 0)
    throw ShapeError("rope_pairs: d=" + std::to_string(d) +
                     " not a multiple of head_dim=" + std::to_string(head_dim));
  if (static_cast<int64_t>(positions.size()) != t)
    throw ShapeError("rope_pairs: positions size must equal t");

  const int64_t half = head_dim / 2;
  // cos/sin table per (position, pair)
  std::vector<S> cs(t * half), sn(t * half);
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t p = 0; p < half; ++p) {
      const double freq =
          std::pow(theta, -2.0 * static_cast<double>(p) /
                              static_cast<double>(head_dim));
      const double ang = static_cast<double>(positions[i]) * freq;
      cs[i * half + p] = static_cast<S>(std::cos(ang));
      sn[i * half + p] = static_cast<S>(std::sin(ang));
    }
  }

  TensorT<S> out = TensorT<S>::zeros({t, d});
  const auto& xd = x.data();
  auto& od = out.mutable_data();
  const int64_t heads = d / head_dim;
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t h = 0; h < heads; ++h) {
      const S* xr = xd.data() + i * d + h * head_dim;
      S* orow = od.data() + i * d + h * head_dim;
      for (int64_t p = 0; p < half; ++p) {
        const S c = cs[i * half + p], s = sn[i * half + p];
        const S x0 = xr[2 * p], x1 = xr[2 * p + 1];
        orow[2 * p] = x0 * c - x1 * s;
        orow[2 * p + 1] = x0 * s + x1 * c;
      }
    }
  }
  detail::check_finite(od, "rope_pairs");

  if (Tape<S>* tape = detail::tape_for<S>({&x})) {
    const int64_t nx = tape->ensure_node(x);
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    tape->record("rope_pairs", [=, cs = std::move(cs),
                                sn = std::move(sn)](Tape<S>& tp) {
      const std::vector<S>* g = tp.find_grad(no);
      if (!g) return;
      std::vector<S>& gx = tp.grad_buffer(nx, t * d);
      for (int64_t i = 0; i < t; ++i) {
        for (int64_t h = 0; h < heads; ++h) {
          const S* gr = g->data() + i * d + h * head_dim;
          S* gxr = gx.data() + i * d + h * head_dim;
          for (int64_t p = 0; p < half; ++p) {
            const S c = cs[i * half + p], s = sn[i * half + p];
            const S g0 = gr[2 * p], g1 = gr[2 * p + 1];
            gxr[2 * p] += g0 * c + g1 * s;
            gxr[2 * p + 1] += -g0 * s + g1 * c;
          }
        }
      }
    });
  }
  return out;
}

// Per-head score contraction: q, k [t, d] -> scores [heads, t, t] where
// scores[h,i,j] = <q_i, k_j> restricted to head block h. Scaling is the
// caller's job.
template <class S>
TensorT<S> multihead_scores(const TensorT<S>& q, const TensorT<S>& k,
                            int64_t head_dim) {
  if (q.rank() != 2 || k.rank() != 2 || q.shape() != k.shape())
    throw ShapeError("multihead_scores: q and k must both be [t, d]");
  const int64_t t = q.dim(0), d = q.dim(1);
  if (d % head_dim != 0)
    throw ShapeError("multihead_scores: d not a multiple of head_dim");
  const int64_t heads = d / head_dim;

  TensorT<S> out = TensorT<S>::zeros({heads, t, t});
  const auto& qd = q.data();
  const auto& kd = k.data();
  auto& od = out.mutable_data();
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < t; ++i) {
      const S* qr = qd.data() + i * d + h * head_dim;
      S* orow = od.data() + (h * t + i) * t;
      for (int64_t j = 0; j < t; ++j) {
        const S* kr = kd.data() + j * d + h * head_dim;
        S acc = S(0);
        for (int64_t c = 0; c < head_dim; ++c) acc += qr[c] * kr[c];
        orow[j] = acc;
      }
    }
  }
  detail::check_finite(od, "multihead_scores");

  if (Tape<S>* tape = detail::tape_for<S>({&q, &k})) {
    const int64_t nq = q.impl_->requires_grad ? tape->ensure_node(q) : -1;
    const int64_t nk = k.impl_->requires_grad ? tape->ensure_node(k) : -1;
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    auto qi = q.impl_;
    auto ki = k.impl_;
    tape->record("multihead_scores", [=](Tape<S>& tp) {
      const std::vector<S>* g = tp.find_grad(no);
      if (!g) return;
      const auto& qv = *qi->data;
      const auto& kv = *ki->data;
      std::vector<S>* gq = nq >= 0 ? &tp.grad_buffer(nq, t * d) : nullptr;
      std::vector<S>* gk = nk >= 0 ? &tp.grad_buffer(nk, t * d) : nullptr;
      for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < t; ++i) {
          const S* gr = g->data() + (h * t + i) * t;
          for (int64_t j = 0; j < t; ++j) {
            const S gv = gr[j];
            if (gv == S(0)) continue;
            if (gq) {
              S* gqr = gq->data() + i * d + h * head_dim;
              const S* kr = kv.data() + j * d + h * head_dim;
              for (int64_t c = 0; c < head_dim; ++c) gqr[c] += gv * kr[c];
            }
            if (gk) {
              S* gkr = gk->data() + j * d + h * head_dim;
              const S* qr = qv.data() + i * d + h * head_dim;
              for (int64_t c = 0; c < head_dim; ++c) gkr[c] += gv * qr[c];
            }
          }
        }
      }
    });
  }
  return out;
}

// Per-head value mixing: probs [heads, t, t], v [t, d] -> [t, d] where
// out[i, h*hd + c] = sum_j probs[h,i,j] * v[j, h*hd + c].
template <class S>
TensorT<S> multihead_mix(const TensorT<S>& probs, const TensorT<S>& v,
                         int64_t head_dim) {
  if (probs.rank() != 3) throw ShapeError("multihead_mix: probs must be [h,t,t]");
  if (v.rank() != 2) throw ShapeError("multihead_mix: v must be [t,d]");
  const int64_t heads = probs.dim(0), t = probs.dim(1), d = v.dim(1);
  if (probs.dim(2) != t || v.dim(0) != t || heads * head_dim != d)
    throw ShapeError("multihead_mix: inconsistent shapes " +
                     shape_str(probs.shape()) + " and " + shape_str(v.shape()));

  TensorT<S> out = TensorT<S>::zeros({t, d});
  const auto& pd = probs.data();
  const auto& vd = v.data();
  auto& od = out.mutable_data();
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < t; ++i) {
      const S* pr = pd.data() + (h * t + i) * t;
      S* orow = od.data() + i * d + h * head_dim;
      for (int64_t j = 0; j < t; ++j) {
        const S pv = pr[j];
        if (pv == S(0)) continue;
        const S* vr = vd.data() + j * d + h * head_dim;
        for (int64_t c = 0; c < head_dim; ++c) orow[c] += pv * vr[c];
      }
    }
  }
  detail::check_finite(od, "multihead_mix");

  if (Tape<S>* tape = detail::tape_for<S>({&probs, &v})) {
    const int64_t np = probs.impl_->requires_grad ? tape->ensure_node(probs) : -1;
    const int64_t nv = v.impl_->requires_grad ? tape->ensure_node(v) : -1;
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    auto pi = probs.impl_;
    auto vi = v.impl_;
    tape->record("multihead_mix", [=](Tape<S>& tp) {
      const std::vector<S>* g = tp.find_grad(no);
      if (!g) return;
      const auto& pv = *pi->data;
      const auto& vv = *vi->data;
      std::vector<S>* gp = np >= 0 ? &tp.grad_buffer(np, heads * t * t) : nullptr;
      std::vector<S>* gv = nv >= 0 ? &tp.grad_buffer(nv, t * d) : nullptr;
      for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < t; ++i) {
          const S* gr = g->data() + i * d + h * head_dim;
          for (int64_t j = 0; j < t; ++j) {
            const S* vr = vv.data() + j * d + h * head_dim;
            if (gp) {
              S acc = S(0);
              for (int64_t c = 0; c < head_dim; ++c) acc += gr[c] * vr[c];
              (*gp)[(h * t + i) * t + j] += acc;
            }
            if (gv) {
              const S pvij = pv[(h * t + i) * t + j];
              if (pvij != S(0)) {
                S* gvr = gv->data() + j * d + h * head_dim;
                for (int64_t c = 0; c < head_dim; ++c) gvr[c] += pvij * gr[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Summed next-token NLL over selected rows of logits [t, V]. Row i
// contributes -log softmax(logits[i])[targets[i]] when include[i] is set.
// Returns the scalar sum; the caller divides by the row count it wants.
template <class S>
TensorT<S> masked_nll_sum(const TensorT<S>& logits,
                          const std::vector<int32_t>& targets,
                          const std::vector<uint8_t>& include) {
  if (logits.rank() != 2) throw ShapeError("masked_nll_sum: logits must be [t,V]");
  const int64_t t = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != t ||
      static_cast<int64_t>(include.size()) != t)
    throw ShapeError("masked_nll_sum: targets/include must have length t");
  int64_t count = 0;
  for (int64_t i = 0; i < t; ++i) {
    if (!include[i]) continue;
    ++count;
    if (targets[i] < 0 || targets[i] >= vocab)
      throw ContractError("masked_nll_sum: target id out of vocab at row " +
                          std::to_string(i));
  }
  if (count == 0)
    throw ContractError("masked_nll_sum: no rows selected (empty response)");

  TensorT<S> out = TensorT<S>::zeros({});
  const auto& xd = logits.data();
  S acc = S(0);
  for (int64_t i = 0; i < t; ++i) {
    if (!include[i]) continue;
    const S* x = xd.data() + i * vocab;
    S mx = x[0];
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
    S denom = S(0);
    for (int64_t j = 0; j < vocab; ++j) denom += std::exp(x[j] - mx);
    acc += (mx + std::log(denom)) - x[targets[i]];
  }
  out.mutable_data()[0] = acc;
  detail::check_finite(out.data(), "masked_nll_sum");

  if (Tape<S>* tape = detail::tape_for<S>({&logits})) {
    const int64_t nx = tape->ensure_node(logits);
    const int64_t no = tape->assign_output_node(out);
    out.impl_->requires_grad = true;
    auto xi = logits.impl_;
    auto tg = targets;
    auto inc = include;
    tape->record("masked_nll_sum", [=](Tape<S>& tp) {
      const std::vector<S>* g = tp.find_grad(no);
      if (!g) return;
      const S gv = (*g)[0];
      std::vector<S>& gx = tp.grad_buffer(nx, t * vocab);
      const auto& xv = *xi->data;
      for (int64_t i = 0; i < t; ++i) {
        if (!inc[i]) continue;
        const S* x = xv.data() + i * vocab;
        S* gr = gx.data() + i * vocab;
        S mx = x[0];
        for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
        S denom = S(0);
        for (int64_t j = 0; j < vocab; ++j) denom += std::exp(x[j] - mx);
        const S inv = S(1) / denom;
        for (int64_t j = 0; j < vocab; ++j)
          gr[j] += gv * std::exp(x[j] - mx) * inv;
        gr[tg[i]] -= gv;
      }
    });
  }
  return out;
}

}  // namespace hrlm
