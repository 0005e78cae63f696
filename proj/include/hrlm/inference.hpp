#pragma once

// Deterministic greedy decoding with PrefixLM prefill semantics and
// auto-guidance across recursion depths. Both guidance logit sets come
// from the same forward pass's trace, so guidance adds zero passes.

#include <cstdint>
#include <vector>

#include "hrlm/model.hpp"
#include "hrlm/objective.hpp"

namespace hrlm {

struct DecodeConfig {
  int64_t max_new_tokens = 256;
  bool use_guidance = false;
  double guidance_w = 0.0;        // grid used in reports: -0.5 -0.1 0 0.1 0.5
  int64_t shallow_probe_step = 0; // which earlier H/loop exit supplies h'
  int64_t context_cap = 3072;
  int32_t eot_id = 1;

  void validate() const {
    if (max_new_tokens < 1)
      throw ConfigError("decode: max_new_tokens must be >= 1");
    if (context_cap < 1) throw ConfigError("decode: context_cap must be >= 1");
  }
};

// logits_w = (1+w) * logits(h) - w * logits(h'). w = 0 returns the final
// logits bitwise.
template <class S>
std::vector<S> guided_logits(const std::vector<S>& final_logits,
                             const std::vector<S>& shallow_logits, double w) {
  if (final_logits.size() != shallow_logits.size())
    throw ShapeError("guided_logits: shapes disagree");
  std::vector<S> out(final_logits.size());
  const S a = static_cast<S>(1.0 + w);
  const S b = static_cast<S>(w);
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = a * final_logits[i] - b * shallow_logits[i];
  return out;
}

// Lowest token id wins ties, which keeps decoding a pure function of
// (prompt, weights, config).
template <class S>
int32_t argmax_lowest(const std::vector<S>& v) {
  int32_t best = 0;
  for (size_t j = 1; j < v.size(); ++j)
    if (v[j] > v[best]) best = static_cast<int32_t>(j);
  return best;
}

struct DecodeResult {
  std::vector<int32_t> tokens;  // generated tokens, including eot if emitted
  int64_t forward_passes = 0;
  bool stopped_at_eot = false;
};

namespace detail {

// Last-row logits of a probe state through the head, same matmul kernel as
// the forward pass so w=0 guidance is bit-identical to the final logits.
template <class S>
std::vector<S> head_logits_last_row(const std::shared_ptr<const std::vector<S>>& state,
                                    const Shape& shape, const TensorT<S>& head) {
  GradPause<S> pause;
  const int64_t t = shape[0], d = shape[1];
  std::vector<S> last(state->begin() + (t - 1) * d, state->end());
  TensorT<S> row = TensorT<S>::from_data({1, d}, std::move(last));
  TensorT<S> logits = matmul(row, head);
  return logits.data();
}

}  // namespace detail

// Greedy decode: per emitted token one full forward over the prompt plus
// everything generated so far, with the PrefixLM mask fixed to the original
// prefix_len. Stops at eot or max_new_tokens.
template <class S>
DecodeResult greedy_decode(const std::vector<int32_t>& prompt,
                           int64_t prefix_len, const ModelConfig& cfg,
                           const ParametersT<S>& params,
                           const DecodeConfig& dc) {
  dc.validate();
  const int64_t cap = std::min<int64_t>(dc.context_cap, cfg.context_len);
  if (static_cast<int64_t>(prompt.size()) > cap)
    throw LengthError("decode: prompt length " + std::to_string(prompt.size()) +
                      " exceeds context cap " + std::to_string(cap));
  if (dc.use_guidance && cfg.variant == Variant::standard)
    throw ConfigError("decode: guidance needs a recurrent variant (hrm/looped)");

  GradPause<S> pause;
  DecodeResult result;
  const int64_t passes_before = forward_pass_counter();
  std::vector<int32_t> ctx = prompt;
  const char probe_tag = cfg.variant == Variant::hrm ? 'H' : 'O';

  for (int64_t emitted = 0; emitted < dc.max_new_tokens; ++emitted) {
    if (static_cast<int64_t>(ctx.size()) > cap)
      throw LengthError("decode: context overflow at " +
                        std::to_string(ctx.size()) + " tokens (cap " +
                        std::to_string(cap) + ")");
    ForwardOptions opts;
    opts.record_steps = dc.use_guidance;
    ForwardResult<S> fwd = model_forward(ctx, prefix_len, cfg, params, opts);
    const int64_t t = static_cast<int64_t>(ctx.size());
    const int64_t vocab = cfg.vocab_size;
    std::vector<S> final_row(fwd.logits.data().begin() + (t - 1) * vocab,
                             fwd.logits.data().end());
    int32_t next;
    if (dc.use_guidance) {
      std::vector<const TraceStep<S>*> exits;
      for (const auto& s : fwd.trace.steps)
        if (s.tag == probe_tag) exits.push_back(&s);
      if (dc.shallow_probe_step < 0 ||
          dc.shallow_probe_step >= static_cast<int64_t>(exits.size()))
        throw ConfigError("decode: shallow_probe_step outside recorded exits");
      const TraceStep<S>* shallow = exits[dc.shallow_probe_step];
      std::vector<S> shallow_row = detail::head_logits_last_row(
          shallow->state, shallow->shape, params.at("head"));
      std::vector<S> guided =
          guided_logits(final_row, shallow_row, dc.guidance_w);
      next = argmax_lowest(guided);
    } else {
      next = argmax_lowest(final_row);
    }
    ctx.push_back(next);
    result.tokens.push_back(next);
    if (next == dc.eot_id) {
      result.stopped_at_eot = true;
      break;
    }
  }
  result.forward_passes = forward_pass_counter() - passes_before;
  return result;
}

}  // namespace hrlm
