#pragma once

// Synthetic copy/reverse instruction task used by the trainer tests, the
// acceptance suite and the CLI's --synthetic mode. Examples are built
// directly over a small fixed vocabulary:
//   0 pad, 1 eot, 2..5 condition tags, 6 copy-op, 7 reverse-op, 8.. symbols.
// Instruction: [tag, op, s1..sp]; response: the symbols (possibly
// reversed) followed by eot. Reversal over variable lengths is the part a
// causal prefix cannot encode (a prefix token never sees its distance from
// the instruction's end), which separates PrefixLM from causal training.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "hrlm/inference.hpp"
#include "hrlm/objective.hpp"
#include "hrlm/rng.hpp"

namespace hrlm {

struct SyntheticTaskConfig {
  int64_t min_payload = 4;
  int64_t max_payload = 8;
  int64_t n_symbols = 16;
  double reverse_prob = 0.5;
  uint64_t seed = 0;

  int64_t vocab_size() const { return 8 + n_symbols; }
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kEot = 1;
  static constexpr int32_t kTagBase = 2;  // direct/cot/synth/noisy = 2..5
  static constexpr int32_t kOpCopy = 6;
  static constexpr int32_t kOpReverse = 7;
  static constexpr int32_t kSymBase = 8;
};

inline PackedExample synthetic_example(const SyntheticTaskConfig& cfg, Rng& rng) {
  const int64_t span = cfg.max_payload - cfg.min_payload + 1;
  const int64_t p = cfg.min_payload + static_cast<int64_t>(rng.uniform_int(span));
  const bool rev = rng.uniform() < cfg.reverse_prob;

  PackedExample ex;
  ex.condition = Condition::direct;
  ex.token_ids.push_back(SyntheticTaskConfig::kTagBase +
                         static_cast<int32_t>(Condition::direct));
  ex.token_ids.push_back(rev ? SyntheticTaskConfig::kOpReverse
                             : SyntheticTaskConfig::kOpCopy);
  std::vector<int32_t> payload(p);
  for (auto& s : payload)
    s = SyntheticTaskConfig::kSymBase +
        static_cast<int32_t>(rng.uniform_int(cfg.n_symbols));
  for (int32_t s : payload) ex.token_ids.push_back(s);
  ex.prefix_len = static_cast<int64_t>(ex.token_ids.size());
  if (rev) {
    for (int64_t i = p - 1; i >= 0; --i) ex.token_ids.push_back(payload[i]);
  } else {
    for (int32_t s : payload) ex.token_ids.push_back(s);
  }
  ex.token_ids.push_back(SyntheticTaskConfig::kEot);
  ex.loss_mask.assign(ex.token_ids.size(), 0);
  for (size_t i = ex.prefix_len; i < ex.token_ids.size(); ++i)
    ex.loss_mask[i] = 1;
  return ex;
}

// Expected response (including eot) for a synthetic prompt.
inline std::vector<int32_t> synthetic_expected_response(
    const std::vector<int32_t>& prompt) {
  std::vector<int32_t> out(prompt.begin() + 2, prompt.end());
  if (prompt[1] == SyntheticTaskConfig::kOpReverse)
    std::reverse(out.begin(), out.end());
  out.push_back(SyntheticTaskConfig::kEot);
  return out;
}

// Fraction of held-out prompts whose greedy decode reproduces the expected
// response exactly (token-for-token, including the terminator).
template <class S>
double synthetic_exact_match(const SyntheticTaskConfig& task,
                             const ModelConfig& mcfg,
                             const ParametersT<S>& params, int64_t n_eval,
                             uint64_t eval_seed) {
  Rng rng(eval_seed);
  DecodeConfig dc;
  dc.context_cap = mcfg.context_len;
  dc.eot_id = SyntheticTaskConfig::kEot;
  int64_t hits = 0;
  for (int64_t i = 0; i < n_eval; ++i) {
    PackedExample ex = synthetic_example(task, rng);
    std::vector<int32_t> prompt(ex.token_ids.begin(),
                                ex.token_ids.begin() + ex.prefix_len);
    dc.max_new_tokens = static_cast<int64_t>(prompt.size());  // payload + eot
    DecodeResult res = greedy_decode(prompt, ex.prefix_len, mcfg, params, dc);
    if (res.tokens == synthetic_expected_response(prompt)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n_eval);
}

}  // namespace hrlm
