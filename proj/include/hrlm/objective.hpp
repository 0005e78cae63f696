#pragma once

// PrefixLM / causal masks, the response-only token NLL, and attention
// entropy measurement.

#include <cstdint>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "hrlm/nn_ops.hpp"
#include "hrlm/tensor.hpp"

namespace hrlm {

enum class Condition : int32_t { direct = 0, cot = 1, synth = 2, noisy = 3 };

inline const char* condition_name(Condition c) {
  switch (c) {
    case Condition::direct: return "direct";
    case Condition::cot: return "cot";
    case Condition::synth: return "synth";
    case Condition::noisy: return "noisy";
  }
  return "?";
}

// One training unit: token ids, instruction length, response loss mask.
struct PackedExample {
  std::vector<int32_t> token_ids;
  int64_t prefix_len = 0;           // tagged-instruction token count
  std::vector<uint8_t> loss_mask;   // true exactly on response positions
  Condition condition = Condition::direct;
};

// Position i may attend to j iff j < prefix_len (bidirectional instruction)
// or j <= i (causal elsewhere). prefix_len = 0 is exactly the causal mask.
inline Mask build_prefixlm_mask(int64_t prefix_len, int64_t seq_len) {
  if (seq_len < 1)
    throw ContractError("build_prefixlm_mask: seq_len must be >= 1");
  if (prefix_len < 0 || prefix_len > seq_len)
    throw ContractError("build_prefixlm_mask: prefix_len " +
                        std::to_string(prefix_len) + " outside [0, " +
                        std::to_string(seq_len) + "]");
  Mask m{{seq_len, seq_len}, std::vector<uint8_t>(seq_len * seq_len, 0)};
  for (int64_t i = 0; i < seq_len; ++i)
    for (int64_t j = 0; j < seq_len; ++j)
      m.allow[i * seq_len + j] = (j < prefix_len || j <= i) ? 1 : 0;
  return m;
}

inline Mask build_causal_mask(int64_t seq_len) {
  return build_prefixlm_mask(0, seq_len);
}

// Summed next-token NLL over response target positions, plus the count.
// logits row i scores token_ids[i+1]; the pair (i, i+1) participates iff
// loss_mask[i+1] is set. Instruction rows contribute exactly zero.
template <class S>
std::pair<TensorT<S>, int64_t> response_nll_sum(
    const TensorT<S>& logits, const std::vector<int32_t>& token_ids,
    const std::vector<uint8_t>& loss_mask) {
  if (logits.rank() != 2) throw ShapeError("response_nll: logits must be [t,V]");
  const int64_t t = logits.dim(0);
  if (static_cast<int64_t>(token_ids.size()) != t ||
      static_cast<int64_t>(loss_mask.size()) != t)
    throw ShapeError("response_nll: token_ids/loss_mask must have length t");
  std::vector<int32_t> targets(t, 0);
  std::vector<uint8_t> include(t, 0);
  int64_t count = 0;
  for (int64_t i = 0; i + 1 < t; ++i) {
    if (loss_mask[i + 1]) {
      include[i] = 1;
      targets[i] = token_ids[i + 1];
      ++count;
    }
  }
  if (count == 0)
    throw ContractError("response_nll: no response target positions");
  return {masked_nll_sum(logits, targets, include), count};
}

// Mean NLL over response target positions.
template <class S>
TensorT<S> response_nll(const TensorT<S>& logits,
                        const std::vector<int32_t>& token_ids,
                        const std::vector<uint8_t>& loss_mask) {
  auto [s, count] = response_nll_sum(logits, token_ids, loss_mask);
  return scale(s, S(1) / static_cast<S>(count));
}

// One attention application's probabilities, [heads, t, t].
template <class S>
struct AttnProbs {
  int64_t layer = 0;  // block application index within the forward pass
  Shape shape;
  std::shared_ptr<const std::vector<S>> probs;
};

// Mean Shannon entropy -sum(p ln p) over heads and query rows, grouped by
// layer. Zero probabilities (masked positions) contribute nothing.
template <class S>
std::vector<std::pair<int64_t, double>> attention_entropy(
    const std::vector<AttnProbs<S>>& snapshots) {
  std::map<int64_t, std::pair<double, int64_t>> acc;  // layer -> (sum, rows)
  for (const auto& snap : snapshots) {
    if (snap.shape.size() != 3)
      throw ShapeError("attention_entropy: snapshot must be [h,t,t]");
    const int64_t cols = snap.shape[2];
    const int64_t rows = snap.shape[0] * snap.shape[1];
    const std::vector<S>& p = *snap.probs;
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
      double h = 0.0;
      const S* row = p.data() + r * cols;
      for (int64_t j = 0; j < cols; ++j) {
        const double pj = static_cast<double>(row[j]);
        if (pj > 0.0) h -= pj * std::log(pj);
      }
      total += h;
    }
    auto& slot = acc[snap.layer];
    slot.first += total;
    slot.second += rows;
  }
  std::vector<std::pair<int64_t, double>> out;
  out.reserve(acc.size());
  for (const auto& [layer, sr] : acc)
    out.emplace_back(layer, sr.first / static_cast<double>(sr.second));
  return out;
}

}  // namespace hrlm
