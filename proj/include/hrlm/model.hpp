#pragma once

// Hierarchical recurrent language model core: dual-timescale H/L modules
// built from PreNorm blocks capped by a parameterless RMS norm at each
// module exit, sigmoid-gated attention, SwiGLU, RoPE. Plus standard and
// looped (weight-shared) transformer variants for comparative diagnostics.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hrlm/nn_ops.hpp"
#include "hrlm/objective.hpp"
#include "hrlm/rng.hpp"
#include "hrlm/tensor.hpp"

namespace hrlm {

enum class Variant { hrm, standard, looped };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::hrm: return "hrm";
    case Variant::standard: return "standard";
    case Variant::looped: return "looped";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "hrm") return Variant::hrm;
  if (s == "standard") return Variant::standard;
  if (s == "looped") return Variant::looped;
  throw ConfigError("unknown variant: " + s);
}

struct ModelConfig {
  Variant variant = Variant::hrm;
  int64_t d_model = 1536;
  int64_t layers_per_module = 16;
  int64_t head_dim = 128;
  int64_t vocab_size = 65536;
  int64_t context_len = 4096;
  double rope_theta = 10000.0;
  double norm_eps = 1e-6;
  int64_t h_cycles = 2;
  int64_t l_steps_per_cycle = 3;
  int64_t loop_count = 4;   // looped variant only
  int64_t mlp_hidden = 0;   // 0 = 8/3 * d_model rounded up to a multiple of 64
  bool train_z_l0 = true;   // learned initial L state (frozen if false)
  bool exit_norm = true;    // module exit norm; false = pure-PreNorm ablation

  int64_t n_heads() const { return d_model / head_dim; }

  int64_t mlp_hidden_dim() const {
    if (mlp_hidden > 0) return mlp_hidden;
    const int64_t raw = (8 * d_model + 2) / 3;
    return ((raw + 63) / 64) * 64;
  }

  int64_t total_module_steps() const {
    switch (variant) {
      case Variant::hrm: return h_cycles * (l_steps_per_cycle + 1);
      case Variant::looped: return loop_count;
      case Variant::standard: return 1;
    }
    return 1;
  }

  void validate() const {
    if (d_model <= 0 || layers_per_module <= 0 || vocab_size <= 0 ||
        context_len <= 0 || head_dim <= 0)
      throw ConfigError("model: extents must be positive");
    if (head_dim % 2 != 0)
      throw ConfigError("model: head_dim must be even (RoPE pairs)");
    if (d_model % head_dim != 0)
      throw ConfigError("model: d_model must be a multiple of head_dim");
    if (rope_theta <= 0.0 || norm_eps <= 0.0)
      throw ConfigError("model: rope_theta and norm_eps must be positive");
    if (variant == Variant::hrm && (h_cycles <= 0 || l_steps_per_cycle <= 0))
      throw ConfigError("model: h_cycles and l_steps_per_cycle must be positive");
    if (variant == Variant::looped && loop_count <= 0)
      throw ConfigError("model: loop_count must be positive");
  }
};

// Named parameter set. Entry order is fixed at construction and drives
// deterministic optimizer iteration.
template <class S>
struct ParametersT {
  struct Entry {
    std::string name;
    TensorT<S> tensor;
  };
  std::vector<Entry> entries;
  std::unordered_map<std::string, size_t> index;

  void add(const std::string& name, TensorT<S> t) {
    index.emplace(name, entries.size());
    entries.push_back({name, std::move(t)});
  }

  bool has(const std::string& name) const { return index.count(name) != 0; }

  TensorT<S>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ContractError("parameters: no entry " + name);
    return entries[it->second].tensor;
  }
  const TensorT<S>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ContractError("parameters: no entry " + name);
    return entries[it->second].tensor;
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.tensor.size();
    return n;
  }

  ParametersT clone() const {
    ParametersT out;
    for (const auto& e : entries) {
      TensorT<S> t = TensorT<S>::from_data(e.tensor.shape(), e.tensor.data(),
                                           e.tensor.requires_grad());
      out.add(e.name, std::move(t));
    }
    return out;
  }

  static std::vector<std::string> module_prefixes(const ModelConfig& cfg) {
    if (cfg.variant == Variant::hrm) return {"h", "l"};
    return {"core"};
  }

  // LeCun normal init (variance 1/fan_in) for every matrix; gate biases
  // start at zero. For W[k,n] applied as x*W, fan_in = k; the embedding
  // table and initial L state use fan_in = d_model.
  static ParametersT init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const int64_t d = cfg.d_model;
    const int64_t hidden = cfg.mlp_hidden_dim();
    const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double sd_h = 1.0 / std::sqrt(static_cast<double>(hidden));

    ParametersT p;
    p.add("embed", TensorT<S>::randn({cfg.vocab_size, d}, rng, sd_d, true));
    if (cfg.variant == Variant::hrm)
      p.add("z_l0", TensorT<S>::randn({d}, rng, sd_d, cfg.train_z_l0));
    for (const std::string& m : module_prefixes(cfg)) {
      for (int64_t l = 0; l < cfg.layers_per_module; ++l) {
        const std::string base = m + "." + std::to_string(l) + ".";
        p.add(base + "attn.wq", TensorT<S>::randn({d, d}, rng, sd_d, true));
        p.add(base + "attn.wk", TensorT<S>::randn({d, d}, rng, sd_d, true));
        p.add(base + "attn.wv", TensorT<S>::randn({d, d}, rng, sd_d, true));
        p.add(base + "attn.wo", TensorT<S>::randn({d, d}, rng, sd_d, true));
        p.add(base + "attn.wgate", TensorT<S>::randn({d, d}, rng, sd_d, true));
        p.add(base + "attn.bgate", TensorT<S>::zeros({d}, true));
        p.add(base + "mlp.wa", TensorT<S>::randn({d, hidden}, rng, sd_d, true));
        p.add(base + "mlp.wb", TensorT<S>::randn({d, hidden}, rng, sd_d, true));
        p.add(base + "mlp.wc", TensorT<S>::randn({hidden, d}, rng, sd_h, true));
      }
    }
    p.add("head", TensorT<S>::randn({d, cfg.vocab_size}, rng, sd_d, true));
    return p;
  }
};

using Parameters = ParametersT<float>;

// Per-layer parameter handles (cheap shared copies).
template <class S>
struct LayerView {
  TensorT<S> wq, wk, wv, wo, wgate, bgate, wa, wb, wc;
};

template <class S>
LayerView<S> layer_view(const ParametersT<S>& p, const std::string& module,
                        int64_t layer) {
  const std::string base = module + "." + std::to_string(layer) + ".";
  return {p.at(base + "attn.wq"),    p.at(base + "attn.wk"),
          p.at(base + "attn.wv"),    p.at(base + "attn.wo"),
          p.at(base + "attn.wgate"), p.at(base + "attn.bgate"),
          p.at(base + "mlp.wa"),     p.at(base + "mlp.wb"),
          p.at(base + "mlp.wc")};
}

// ---------------------------------------------------------------------------
// Trace of one forward pass.
// ---------------------------------------------------------------------------

template <class S>
struct TraceStep {
  int64_t index = 0;
  char tag = '?';  // 'L' / 'H' (hrm), 'O' (looped), 'S' (standard)
  Shape shape;
  std::shared_ptr<const std::vector<S>> state;
};

template <class S>
struct BlockSnapshot {
  int64_t block_index = 0;
  Shape shape;
  std::shared_ptr<const std::vector<S>> state;
};

template <class S>
struct RecurrentTraceT {
  int64_t seq_len = 0;
  std::vector<TraceStep<S>> steps;
  std::vector<BlockSnapshot<S>> blocks;     // opt-in, every prenorm block exit
  std::vector<AttnProbs<S>> attention;      // opt-in
};

using RecurrentTrace = RecurrentTraceT<float>;

struct ForwardOptions {
  // TBPTT horizon K: gradients flow through the last K module steps only.
  // 0 disables the truncation machinery entirely (full backprop).
  int64_t grad_horizon = 0;
  bool record_steps = true;
  bool record_block_states = false;
  bool record_attention = false;
};

template <class S>
struct ForwardResult {
  TensorT<S> logits;
  RecurrentTraceT<S> trace;
};

// Counts forward passes process-wide; lets tests assert that guidance adds
// zero extra passes.
inline int64_t& forward_pass_counter() {
  static int64_t counter = 0;
  return counter;
}

namespace detail {

template <class S>
struct TraceSink {
  RecurrentTraceT<S>* trace = nullptr;
  bool blocks = false;
  bool attention = false;
  int64_t block_counter = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Building blocks.
// ---------------------------------------------------------------------------

// Parameterless RMS norm: y = x / sqrt(mean(x^2) + eps). No learned scale.
template <class S>
TensorT<S> rms_norm(const TensorT<S>& x, double eps) {
  TensorT<S> ms = add_scalar(row_mean(mul(x, x)), static_cast<S>(eps));
  return mul(x, rsqrt(ms));
}

// Convenience for q/k of every head at absolute positions 0..t-1.
template <class S>
std::pair<TensorT<S>, TensorT<S>> rope_apply(const TensorT<S>& q,
                                             const TensorT<S>& k,
                                             int64_t head_dim, double theta,
                                             const std::vector<int64_t>& pos) {
  return {rope_pairs(q, head_dim, theta, pos),
          rope_pairs(k, head_dim, theta, pos)};
}

// Multi-head attention with RoPE on q/k, masked softmax over scores scaled
// by 1/sqrt(head_dim), and a per-head sigmoid output gate computed from x.
template <class S>
TensorT<S> gated_attention(const TensorT<S>& x, const Mask& mask,
                           const LayerView<S>& lp, const ModelConfig& cfg,
                           detail::TraceSink<S>* sink = nullptr) {
  const int64_t t = x.dim(0);
  std::vector<int64_t> pos(t);
  for (int64_t i = 0; i < t; ++i) pos[i] = i;

  TensorT<S> q = matmul(x, lp.wq);
  TensorT<S> k = matmul(x, lp.wk);
  TensorT<S> v = matmul(x, lp.wv);
  auto [qr, kr] = rope_apply(q, k, cfg.head_dim, cfg.rope_theta, pos);
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim)));
  TensorT<S> scores = scale(multihead_scores(qr, kr, cfg.head_dim), inv_sqrt);
  TensorT<S> probs = masked_softmax(scores, mask);
  if (sink && sink->attention) {
    sink->trace->attention.push_back(
        {sink->block_counter, probs.shape(), probs.impl_->data});
  }
  TensorT<S> mixed = multihead_mix(probs, v, cfg.head_dim);
  TensorT<S> gate = sigmoid(add(matmul(x, lp.wgate), lp.bgate));
  return matmul(mul(mixed, gate), lp.wo);
}

// SwiGLU feed-forward: (silu(x Wa) . (x Wb)) Wc.
template <class S>
TensorT<S> swiglu_mlp(const TensorT<S>& x, const LayerView<S>& lp) {
  return matmul(mul(silu(matmul(x, lp.wa)), matmul(x, lp.wb)), lp.wc);
}

// PreNorm block: h = x + Attn(Norm(x)); out = h + Mlp(Norm(h)).
// With all sublayer weights zero this is exactly the identity map.
template <class S>
TensorT<S> prenorm_block(const TensorT<S>& x, const Mask& mask,
                         const LayerView<S>& lp, const ModelConfig& cfg,
                         detail::TraceSink<S>* sink = nullptr) {
  TensorT<S> h = add(x, gated_attention(rms_norm(x, cfg.norm_eps), mask, lp, cfg, sink));
  TensorT<S> out = add(h, swiglu_mlp(rms_norm(h, cfg.norm_eps), lp));
  if (sink) {
    if (sink->blocks)
      sink->trace->blocks.push_back(
          {sink->block_counter, out.shape(), out.impl_->data});
    ++sink->block_counter;
  }
  return out;
}

// One recurrent module application: input z + injection runs through the
// module's PreNorm blocks, then the exit RMS norm caps the state scale.
template <class S>
TensorT<S> module_apply(const TensorT<S>& z, const TensorT<S>& injection,
                        const Mask& mask, const ParametersT<S>& params,
                        const std::string& module, const ModelConfig& cfg,
                        detail::TraceSink<S>* sink = nullptr) {
  TensorT<S> x = add(z, injection);
  for (int64_t l = 0; l < cfg.layers_per_module; ++l)
    x = prenorm_block(x, mask, layer_view(params, module, l), cfg, sink);
  if (cfg.exit_norm) x = rms_norm(x, cfg.norm_eps);
  return x;
}

// ---------------------------------------------------------------------------
// Forward passes.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_sequence(const std::vector<int32_t>& tokens,
                           int64_t prefix_len, const ModelConfig& cfg) {
  const int64_t t = static_cast<int64_t>(tokens.size());
  if (t < 1) throw ContractError("forward: empty token sequence");
  if (t > cfg.context_len)
    throw LengthError("forward: sequence length " + std::to_string(t) +
                      " exceeds context " + std::to_string(cfg.context_len));
  if (prefix_len < 0 || prefix_len > t)
    throw ContractError("forward: prefix_len outside [0, t]");
}

}  // namespace detail

// HRM forward. Module-step schedule is (L x l_steps, H) repeated h_cycles
// times. States produced before the last K module steps are detached where
// consumed, and the pre-horizon steps run without recording, which realizes
// the truncated backward horizon without tape surgery.
template <class S>
ForwardResult<S> hrm_forward(const std::vector<int32_t>& tokens,
                             int64_t prefix_len, const ModelConfig& cfg,
                             const ParametersT<S>& params,
                             const ForwardOptions& opts = {}) {
  cfg.validate();
  if (cfg.variant != Variant::hrm)
    throw ContractError("hrm_forward: config variant is not hrm");
  detail::check_sequence(tokens, prefix_len, cfg);
  const int64_t total = cfg.total_module_steps();
  const int64_t horizon = opts.grad_horizon;
  if (horizon != 0 && (horizon < 2 || horizon > total))
    throw ConfigError("hrm_forward: grad_horizon " + std::to_string(horizon) +
                      " outside [2, " + std::to_string(total) + "]");
  ++forward_pass_counter();

  const int64_t t = static_cast<int64_t>(tokens.size());
  const Mask mask = build_prefixlm_mask(prefix_len, t);
  // Steps with index < cut are outside the backward horizon.
  const int64_t cut = horizon == 0 ? 0 : total - horizon;

  ForwardResult<S> result;
  result.trace.seq_len = t;
  detail::TraceSink<S> sink{&result.trace, opts.record_block_states,
                            opts.record_attention, 0};
  detail::TraceSink<S>* sinkp =
      (opts.record_block_states || opts.record_attention) ? &sink : nullptr;

  TensorT<S> emb = embedding_lookup(params.at("embed"), tokens);
  TensorT<S> z_h = rms_norm(emb, cfg.norm_eps);
  TensorT<S> z_l = broadcast_rows(params.at("z_l0"), t);
  int64_t prod_h = -1, prod_l = -1;  // producing module-step of each state

  // Any state produced before the horizon is value-transparent but
  // gradient-severed at every consumption.
  const auto sever = [&](const TensorT<S>& state, int64_t producer) {
    if (cut > 0 && producer < cut) return hrlm::detach(state);
    return state;
  };

  const auto record_step = [&](int64_t index, char tag, const TensorT<S>& s) {
    if (opts.record_steps)
      result.trace.steps.push_back({index, tag, s.shape(), s.impl_->data});
  };

  int64_t step = 0;
  for (int64_t cycle = 0; cycle < cfg.h_cycles; ++cycle) {
    for (int64_t ls = 0; ls < cfg.l_steps_per_cycle; ++ls) {
      std::optional<GradPause<S>> pause;
      if (step < cut) pause.emplace();
      TensorT<S> zin = sever(z_l, prod_l);
      TensorT<S> inj = add(sever(z_h, prod_h), emb);
      z_l = module_apply(zin, inj, mask, params, "l", cfg, sinkp);
      prod_l = step;
      record_step(step, 'L', z_l);
      ++step;
    }
    std::optional<GradPause<S>> pause;
    if (step < cut) pause.emplace();
    TensorT<S> zin = sever(z_h, prod_h);
    TensorT<S> inj = sever(z_l, prod_l);
    z_h = module_apply(zin, inj, mask, params, "h", cfg, sinkp);
    prod_h = step;
    record_step(step, 'H', z_h);
    ++step;
  }

  result.logits = matmul(z_h, params.at("head"));
  return result;
}

// Standard and looped variants.
template <class S>
ForwardResult<S> variant_forward(const std::vector<int32_t>& tokens,
                                 int64_t prefix_len, const ModelConfig& cfg,
                                 const ParametersT<S>& params,
                                 const ForwardOptions& opts = {}) {
  cfg.validate();
  if (cfg.variant == Variant::hrm)
    throw ContractError("variant_forward: use hrm_forward for the hrm variant");
  detail::check_sequence(tokens, prefix_len, cfg);
  ++forward_pass_counter();

  const int64_t t = static_cast<int64_t>(tokens.size());
  const Mask mask = build_prefixlm_mask(prefix_len, t);

  ForwardResult<S> result;
  result.trace.seq_len = t;
  detail::TraceSink<S> sink{&result.trace, opts.record_block_states,
                            opts.record_attention, 0};
  detail::TraceSink<S>* sinkp =
      (opts.record_block_states || opts.record_attention) ? &sink : nullptr;

  TensorT<S> emb = embedding_lookup(params.at("embed"), tokens);
  if (cfg.variant == Variant::standard) {
    TensorT<S> x = emb;
    for (int64_t l = 0; l < cfg.layers_per_module; ++l)
      x = prenorm_block(x, mask, layer_view(params, "core", l), cfg, sinkp);
    x = rms_norm(x, cfg.norm_eps);
    if (opts.record_steps)
      result.trace.steps.push_back({0, 'S', x.shape(), x.impl_->data});
    result.logits = matmul(x, params.at("head"));
  } else {
    TensorT<S> z = TensorT<S>::zeros({t, cfg.d_model});
    for (int64_t loop = 0; loop < cfg.loop_count; ++loop) {
      z = module_apply(z, emb, mask, params, "core", cfg, sinkp);
      if (opts.record_steps)
        result.trace.steps.push_back({loop, 'O', z.shape(), z.impl_->data});
    }
    result.logits = matmul(z, params.at("head"));
  }
  return result;
}

// Dispatch by config variant.
template <class S>
ForwardResult<S> model_forward(const std::vector<int32_t>& tokens,
                               int64_t prefix_len, const ModelConfig& cfg,
                               const ParametersT<S>& params,
                               const ForwardOptions& opts = {}) {
  if (cfg.variant == Variant::hrm)
    return hrm_forward(tokens, prefix_len, cfg, params, opts);
  return variant_forward(tokens, prefix_len, cfg, params, opts);
}

}  // namespace hrlm
