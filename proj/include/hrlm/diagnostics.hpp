#pragma once

// Measurement apparatus: gradient-magnitude statistics, Jacobian growth
// probes, effective-depth metrics (block diffs, cosines, logit-lens KL)
// and FLOPs accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hrlm/model.hpp"
#include "hrlm/rng.hpp"
#include "hrlm/tensor.hpp"

namespace hrlm {

// ---------------------------------------------------------------------------
// Gradient magnitude statistics.
// ---------------------------------------------------------------------------

struct GradStats {
  double mean_abs = 0.0;
  double median_abs = 0.0;
  double log_dispersion = 0.0;   // Std(log(|g| + eps_g))
  double tail_to_median = 1.0;   // p99.9 / p50 of |g|
  int64_t count = 0;
  int64_t step = -1;
  std::string component;
  bool all_zero = false;
};

namespace detail {

// Linear-interpolation quantile (type 7) on a sorted vector.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double pos = q * static_cast<double>(n - 1);
  const size_t lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, n - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace detail

inline GradStats grad_magnitude_stats(const std::vector<double>& grads,
                                      double eps_g = 1e-12,
                                      double tail_q = 0.999) {
  if (grads.empty()) throw ContractError("grad_magnitude_stats: empty gradients");
  GradStats s;
  s.count = static_cast<int64_t>(grads.size());
  std::vector<double> mags(grads.size());
  double mean = 0.0, log_mean = 0.0;
  bool any_nonzero = false;
  for (size_t i = 0; i < grads.size(); ++i) {
    mags[i] = std::abs(grads[i]);
    if (mags[i] != 0.0) any_nonzero = true;
    mean += mags[i];
    log_mean += std::log(mags[i] + eps_g);
  }
  const double n = static_cast<double>(mags.size());
  s.mean_abs = mean / n;
  log_mean /= n;
  double log_var = 0.0;
  for (double m : mags) {
    const double d = std::log(m + eps_g) - log_mean;
    log_var += d * d;
  }
  s.log_dispersion = std::sqrt(log_var / n);
  std::sort(mags.begin(), mags.end());
  s.median_abs = detail::quantile_sorted(mags, 0.5);
  const double tail = detail::quantile_sorted(mags, tail_q);
  if (s.median_abs > 0.0) {
    s.tail_to_median = tail / s.median_abs;
  } else {
    s.tail_to_median = tail == 0.0 ? 1.0 : tail / eps_g;
    s.all_zero = !any_nonzero;
  }
  if (!any_nonzero) s.all_zero = true;
  return s;
}

// ---------------------------------------------------------------------------
// Jacobian growth of a repeated step map.
// ---------------------------------------------------------------------------

struct JacobianGrowthResult {
  std::vector<double> growth;  // spectral-norm estimate per depth 1..max_depth
  bool converged = true;
  int iterations = 0;
};

// Power iteration on J^T J of the d-fold composed step map around x0.
// The J v product comes from central finite differences of two plain
// forward evaluations; the J^T u product is the exact reverse-mode VJP.
template <class S>
JacobianGrowthResult jacobian_growth(
    const std::function<TensorT<S>(const TensorT<S>&)>& step_fn,
    const TensorT<S>& x0, int64_t max_depth, int probes, uint64_t seed,
    int max_iters = 60, double tol = 1e-9, double fd_h = 1e-5) {
  if (max_depth < 1) throw ContractError("jacobian_growth: depth must be >= 1");
  const int64_t dim = x0.size();
  Rng rng(seed);
  JacobianGrowthResult result;

  const auto apply_depth = [&](const TensorT<S>& x, int64_t depth) {
    TensorT<S> y = x;
    for (int64_t i = 0; i < depth; ++i) y = step_fn(y);
    return y;
  };

  for (int64_t depth = 1; depth <= max_depth; ++depth) {
    std::vector<double> estimates;
    for (int probe = 0; probe < probes; ++probe) {
      std::vector<double> w(dim);
      double nrm = 0.0;
      for (auto& v : w) {
        v = rng.normal();
        nrm += v * v;
      }
      nrm = std::sqrt(nrm);
      for (auto& v : w) v /= nrm;

      double sigma = 0.0, sigma_prev = -1.0;
      int iters = 0;
      for (; iters < max_iters; ++iters) {
        // u = J w via central differences
        std::vector<S> plus(x0.data().begin(), x0.data().end());
        std::vector<S> minus(plus);
        for (int64_t i = 0; i < dim; ++i) {
          plus[i] += static_cast<S>(fd_h * w[i]);
          minus[i] -= static_cast<S>(fd_h * w[i]);
        }
        TensorT<S> yp = apply_depth(
            TensorT<S>::from_data(x0.shape(), std::move(plus)), depth);
        TensorT<S> ym = apply_depth(
            TensorT<S>::from_data(x0.shape(), std::move(minus)), depth);
        std::vector<S> u(yp.size());
        for (int64_t i = 0; i < yp.size(); ++i)
          u[i] = static_cast<S>((static_cast<double>(yp.data()[i]) -
                                 static_cast<double>(ym.data()[i])) /
                                (2.0 * fd_h));

        // z = J^T u via the tape
        std::vector<S> z;
        {
          Tape<S> tape;
          TensorT<S> x = TensorT<S>::from_data(
              x0.shape(), std::vector<S>(x0.data()), true);
          TensorT<S> y = apply_depth(x, depth);
          TensorT<S> cot = TensorT<S>::from_data(y.shape(), std::move(u));
          tape.backward(sum(mul(y, cot)));
          z = tape.grad(x);
        }
        double lam = 0.0;
        for (const S v : z) lam += static_cast<double>(v) * static_cast<double>(v);
        lam = std::sqrt(lam);  // |J^T J w|
        if (lam == 0.0) {
          sigma = 0.0;
          break;
        }
        sigma = std::sqrt(lam);
        for (int64_t i = 0; i < dim; ++i) w[i] = static_cast<double>(z[i]) / lam;
        if (sigma_prev >= 0.0 &&
            std::abs(sigma - sigma_prev) <= tol * std::max(1.0, sigma))
          break;
        sigma_prev = sigma;
      }
      if (iters == max_iters) result.converged = false;
      result.iterations = std::max(result.iterations, iters);
      estimates.push_back(sigma);
    }
    std::sort(estimates.begin(), estimates.end());
    result.growth.push_back(estimates[estimates.size() / 2]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Effective-depth probes over a forward trace.
// ---------------------------------------------------------------------------

template <class S>
struct ProbeSequence {
  int64_t t = 0;
  int64_t d = 0;
  std::vector<std::shared_ptr<const std::vector<S>>> states;
};

// Probe states of one forward pass. For recurrent variants these are the
// module-step exits. For the standard variant they are per-layer block
// exits taken every `stride` layers, passed through the final parameterless
// norm (the last probe is the exact head input recorded in the trace, so
// final-step logit-lens KL is zero by construction).
template <class S>
ProbeSequence<S> extract_probes(const RecurrentTraceT<S>& trace,
                                const ModelConfig& cfg, int64_t stride = 0) {
  ProbeSequence<S> seq;
  seq.t = trace.seq_len;
  seq.d = cfg.d_model;
  if (trace.steps.size() > 1) {
    for (const auto& s : trace.steps) seq.states.push_back(s.state);
    return seq;
  }
  if (trace.steps.empty())
    throw ContractError("extract_probes: trace has no step records");
  if (stride <= 0) stride = cfg.layers_per_module;
  if (trace.blocks.empty())
    throw ContractError(
        "extract_probes: standard variant needs record_block_states");
  const int64_t n_blocks = static_cast<int64_t>(trace.blocks.size());
  for (int64_t b = stride - 1; b < n_blocks; b += stride) {
    if (b == n_blocks - 1) break;  // replaced by the exact final state below
    const auto& blk = trace.blocks[b];
    GradPause<S> pause;
    TensorT<S> x = TensorT<S>::from_data(blk.shape, *blk.state);
    TensorT<S> normed = rms_norm(x, cfg.norm_eps);
    seq.states.push_back(normed.impl_->data);
  }
  seq.states.push_back(trace.steps[0].state);
  return seq;
}

// Position-averaged Euclidean norm of consecutive state differences.
template <class S>
std::vector<double> block_diff_norms(const ProbeSequence<S>& seq) {
  if (seq.states.size() < 2)
    throw ContractError("block_diff_norms: need at least 2 probe states");
  std::vector<double> out;
  for (size_t i = 1; i < seq.states.size(); ++i) {
    const auto& a = *seq.states[i - 1];
    const auto& b = *seq.states[i];
    double acc = 0.0;
    for (int64_t r = 0; r < seq.t; ++r) {
      double sq = 0.0;
      for (int64_t j = 0; j < seq.d; ++j) {
        const double dlt = static_cast<double>(b[r * seq.d + j]) -
                           static_cast<double>(a[r * seq.d + j]);
        sq += dlt * dlt;
      }
      acc += std::sqrt(sq);
    }
    out.push_back(acc / static_cast<double>(seq.t));
  }
  return out;
}

struct CosineResult {
  std::vector<double> values;
  int64_t skipped_positions = 0;  // zero-norm states are flagged and skipped
};

// Position-wise cosine between consecutive states, averaged over positions.
template <class S>
CosineResult block_cosine(const ProbeSequence<S>& seq) {
  if (seq.states.size() < 2)
    throw ContractError("block_cosine: need at least 2 probe states");
  CosineResult res;
  for (size_t i = 1; i < seq.states.size(); ++i) {
    const auto& a = *seq.states[i - 1];
    const auto& b = *seq.states[i];
    double acc = 0.0;
    int64_t used = 0;
    for (int64_t r = 0; r < seq.t; ++r) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int64_t j = 0; j < seq.d; ++j) {
        const double av = a[r * seq.d + j], bv = b[r * seq.d + j];
        dot += av * bv;
        na += av * av;
        nb += bv * bv;
      }
      if (na == 0.0 || nb == 0.0) {
        ++res.skipped_positions;
        continue;
      }
      acc += dot / (std::sqrt(na) * std::sqrt(nb));
      ++used;
    }
    res.values.push_back(used > 0 ? acc / static_cast<double>(used) : 0.0);
  }
  return res;
}

// Hand-rolled KL between two discrete distributions given as logits rows.
inline double kl_from_logits_rows(const std::vector<double>& p_logits,
                                  const std::vector<double>& q_logits) {
  const size_t n = p_logits.size();
  double pmax = p_logits[0], qmax = q_logits[0];
  for (size_t j = 1; j < n; ++j) {
    pmax = std::max(pmax, p_logits[j]);
    qmax = std::max(qmax, q_logits[j]);
  }
  double pz = 0.0, qz = 0.0;
  for (size_t j = 0; j < n; ++j) {
    pz += std::exp(p_logits[j] - pmax);
    qz += std::exp(q_logits[j] - qmax);
  }
  double kl = 0.0;
  for (size_t j = 0; j < n; ++j) {
    const double lp = p_logits[j] - pmax - std::log(pz);
    const double lq = q_logits[j] - qmax - std::log(qz);
    kl += std::exp(lp) * (lp - lq);
  }
  return kl;
}

// Logit-lens: decode every probe state through the shared head and report
// KL(probe || final) averaged over positions. The direction can be flipped.
template <class S>
std::vector<double> logit_lens_kl(const ProbeSequence<S>& seq,
                                  const TensorT<S>& head,
                                  const TensorT<S>& final_logits,
                                  bool flip_direction = false) {
  const int64_t vocab = head.dim(1);
  std::vector<double> out;
  GradPause<S> pause;
  for (const auto& state : seq.states) {
    TensorT<S> x = TensorT<S>::from_data({seq.t, seq.d}, *state);
    TensorT<S> probe = matmul(x, head);
    double acc = 0.0;
    for (int64_t r = 0; r < seq.t; ++r) {
      // exact-zero KL at the final probe requires bit-identical logits, so
      // compare the raw rows before converting to double
      bool identical = true;
      for (int64_t j = 0; j < vocab; ++j) {
        if (probe.data()[r * vocab + j] != final_logits.data()[r * vocab + j]) {
          identical = false;
          break;
        }
      }
      if (identical) continue;
      std::vector<double> pl(vocab), ql(vocab);
      for (int64_t j = 0; j < vocab; ++j) {
        pl[j] = static_cast<double>(probe.data()[r * vocab + j]);
        ql[j] = static_cast<double>(final_logits.data()[r * vocab + j]);
      }
      acc += flip_direction ? kl_from_logits_rows(ql, pl)
                            : kl_from_logits_rows(pl, ql);
    }
    out.push_back(acc / static_cast<double>(seq.t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// FLOPs accounting.
// ---------------------------------------------------------------------------

inline double flops_dense(double n_params, double tokens) {
  if (n_params < 0 || tokens < 0)
    throw ContractError("flops_dense: N and D must be >= 0");
  return 6.0 * n_params * tokens;
}

// Forward counts 2ND and backward 4ND, each scaled by its recurrent-step
// equivalent (module steps weighted by the fraction of core parameters
// they touch). fwd = bwd = 1 recovers the dense formula.
inline double flops_recurrent(double n_params, double tokens, double fwd_step_equiv,
                              double bwd_step_equiv) {
  if (n_params < 0 || tokens < 0 || fwd_step_equiv < 0 || bwd_step_equiv < 0)
    throw ContractError("flops_recurrent: arguments must be >= 0");
  return (2.0 * fwd_step_equiv + 4.0 * bwd_step_equiv) * n_params * tokens;
}

}  // namespace hrlm
