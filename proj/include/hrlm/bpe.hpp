#pragma once

// Byte-level BPE tokenizer. Vocabulary layout: reserved specials first
// (pad, end-of-text, four condition tags), then the 256 byte tokens, then
// merged tokens in merge order. Decode of any encode is the identity on
// arbitrary byte input; special surface forms encode to their single ids.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace hrlm {

class Tokenizer {
 public:
  static constexpr int32_t kPadId = 0;
  static constexpr int32_t kEotId = 1;
  static constexpr int32_t kDirectId = 2;
  static constexpr int32_t kCotId = 3;
  static constexpr int32_t kSynthId = 4;
  static constexpr int32_t kNoisyId = 5;
  static constexpr int32_t kNumSpecials = 6;
  static constexpr int32_t kByteBase = kNumSpecials;

  static const std::vector<std::string>& special_surfaces();

  // Greedy highest-frequency pair merging from the byte alphabet until the
  // target vocabulary is reached. Raw adjacent pairs are counted within
  // each corpus document (never across); ties break on the smaller
  // (left_id, right_id) pair. Raises if the corpus runs out of pairs.
  static Tokenizer train(const std::vector<std::string>& corpus,
                         int64_t target_vocab);

  std::vector<int32_t> encode(const std::string& text) const;
  std::string decode(const std::vector<int32_t>& ids) const;

  int64_t vocab_size() const {
    return kNumSpecials + 256 + static_cast<int64_t>(merges_.size());
  }
  const std::vector<std::pair<int32_t, int32_t>>& merges() const {
    return merges_;
  }
  int32_t condition_id(int32_t condition_index) const {
    return kDirectId + condition_index;
  }

  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);

 private:
  void rebuild_tables();
  std::vector<int32_t> encode_segment(const std::string& bytes) const;

  std::vector<std::pair<int32_t, int32_t>> merges_;
  // derived tables
  std::vector<std::string> token_text_;  // id -> byte expansion / surface
  std::unordered_map<int64_t, std::pair<int32_t, int32_t>> merge_rank_;
  // pair (a,b) keyed as (a << 21) | b -> (rank, new_id)
};

}  // namespace hrlm
