#include "hrlm/bpe.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "hrlm/errors.hpp"

namespace hrlm {

namespace {

int64_t pair_key(int32_t a, int32_t b) {
  return (static_cast<int64_t>(a) << 21) | static_cast<int64_t>(b);
}

}  // namespace

const std::vector<std::string>& Tokenizer::special_surfaces() {
  static const std::vector<std::string> surfaces = {
      "<|pad|>", "<|endoftext|>", "<|direct|>", "<|cot|>", "<|synth|>",
      "<|noisy|>"};
  return surfaces;
}

Tokenizer Tokenizer::train(const std::vector<std::string>& corpus,
                           int64_t target_vocab) {
  const int64_t base = kNumSpecials + 256;
  if (target_vocab < base + 1)
    throw ConfigError("bpe_train: target vocab must exceed " +
                      std::to_string(base) + " (specials + byte alphabet)");
  if (corpus.empty()) throw DataError("bpe_train: empty corpus");

  std::vector<std::vector<int32_t>> docs;
  docs.reserve(corpus.size());
  for (const std::string& text : corpus) {
    std::vector<int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(kByteBase + c);
    docs.push_back(std::move(ids));
  }

  Tokenizer tok;
  const int64_t n_merges = target_vocab - base;
  for (int64_t m = 0; m < n_merges; ++m) {
    // count raw adjacent pairs; std::map iteration order doubles as the
    // lexicographic tie-break
    std::map<std::pair<int32_t, int32_t>, int64_t> counts;
    for (const auto& doc : docs)
      for (size_t i = 0; i + 1 < doc.size(); ++i)
        ++counts[{doc[i], doc[i + 1]}];
    if (counts.empty())
      throw DataError("bpe_train: corpus exhausted after " +
                      std::to_string(m) + " merges; cannot reach target vocab " +
                      std::to_string(target_vocab));
    std::pair<int32_t, int32_t> best;
    int64_t best_count = -1;
    for (const auto& [pair, count] : counts) {
      if (count > best_count) {
        best = pair;
        best_count = count;
      }
    }
    const int32_t new_id = static_cast<int32_t>(base + m);
    tok.merges_.push_back(best);
    // left-to-right non-overlapping replacement
    for (auto& doc : docs) {
      std::vector<int32_t> out;
      out.reserve(doc.size());
      size_t i = 0;
      while (i < doc.size()) {
        if (i + 1 < doc.size() && doc[i] == best.first &&
            doc[i + 1] == best.second) {
          out.push_back(new_id);
          i += 2;
        } else {
          out.push_back(doc[i]);
          ++i;
        }
      }
      doc = std::move(out);
    }
  }
  tok.rebuild_tables();
  return tok;
}

void Tokenizer::rebuild_tables() {
  token_text_.clear();
  merge_rank_.clear();
  for (const std::string& s : special_surfaces()) token_text_.push_back(s);
  for (int32_t b = 0; b < 256; ++b)
    token_text_.push_back(std::string(1, static_cast<char>(b)));
  for (size_t r = 0; r < merges_.size(); ++r) {
    const auto [a, b] = merges_[r];
    if (a < 0 || b < 0 || a >= static_cast<int32_t>(token_text_.size()) ||
        b >= static_cast<int32_t>(token_text_.size()))
      throw DataError("tokenizer: merge rule references unknown token");
    token_text_.push_back(token_text_[a] + token_text_[b]);
    merge_rank_[pair_key(a, b)] = {static_cast<int32_t>(r),
                                   static_cast<int32_t>(kNumSpecials + 256 + r)};
  }
}

std::vector<int32_t> Tokenizer::encode_segment(const std::string& bytes) const {
  std::vector<int32_t> ids;
  ids.reserve(bytes.size());
  for (unsigned char c : bytes) ids.push_back(kByteBase + c);
  // repeatedly apply the lowest-ranked applicable merge
  while (ids.size() >= 2) {
    int32_t best_rank = -1;
    size_t best_pos = 0;
    int32_t best_new = -1;
    for (size_t i = 0; i + 1 < ids.size(); ++i) {
      auto it = merge_rank_.find(pair_key(ids[i], ids[i + 1]));
      if (it == merge_rank_.end()) continue;
      if (best_rank < 0 || it->second.first < best_rank) {
        best_rank = it->second.first;
        best_pos = i;
        best_new = it->second.second;
      }
    }
    if (best_rank < 0) break;
    ids[best_pos] = best_new;
    ids.erase(ids.begin() + static_cast<int64_t>(best_pos) + 1);
  }
  return ids;
}

std::vector<int32_t> Tokenizer::encode(const std::string& text) const {
  if (token_text_.empty())
    throw ContractError("tokenizer: not trained or loaded");
  std::vector<int32_t> out;
  size_t pos = 0;
  while (pos < text.size()) {
    // earliest special occurrence from pos
    size_t next_special = std::string::npos;
    int32_t special_id = -1;
    for (int32_t s = 0; s < kNumSpecials; ++s) {
      const size_t found = text.find(special_surfaces()[s], pos);
      if (found != std::string::npos &&
          (next_special == std::string::npos || found < next_special)) {
        next_special = found;
        special_id = s;
      }
    }
    if (next_special == std::string::npos) {
      std::vector<int32_t> seg = encode_segment(text.substr(pos));
      out.insert(out.end(), seg.begin(), seg.end());
      break;
    }
    if (next_special > pos) {
      std::vector<int32_t> seg =
          encode_segment(text.substr(pos, next_special - pos));
      out.insert(out.end(), seg.begin(), seg.end());
    }
    out.push_back(special_id);
    pos = next_special + special_surfaces()[special_id].size();
  }
  return out;
}

std::string Tokenizer::decode(const std::vector<int32_t>& ids) const {
  if (token_text_.empty())
    throw ContractError("tokenizer: not trained or loaded");
  std::string out;
  for (int32_t id : ids) {
    if (id < 0 || id >= static_cast<int32_t>(token_text_.size()))
      throw ContractError("decode: id " + std::to_string(id) +
                          " outside vocab " +
                          std::to_string(token_text_.size()));
    out += token_text_[id];
  }
  return out;
}

void Tokenizer::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("tokenizer: cannot open " + path + " for writing");
  os << "hrlm-bpe v1\n";
  os << "vocab " << vocab_size() << "\n";
  os << "specials " << kNumSpecials << "\n";
  for (const std::string& s : special_surfaces()) os << s << "\n";
  os << "merges " << merges_.size() << "\n";
  for (const auto& [a, b] : merges_) os << a << " " << b << "\n";
  if (!os) throw DataError("tokenizer: write failed for " + path);
}

Tokenizer Tokenizer::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("tokenizer: cannot open " + path);
  std::string line;
  std::getline(is, line);
  if (line != "hrlm-bpe v1")
    throw DataError("tokenizer: bad header in " + path);
  int64_t vocab = 0, n_specials = 0, n_merges = 0;
  std::string word;
  is >> word >> vocab;
  if (word != "vocab") throw DataError("tokenizer: expected vocab count");
  is >> word >> n_specials;
  if (word != "specials" || n_specials != kNumSpecials)
    throw DataError("tokenizer: special token set mismatch");
  std::getline(is, line);  // eat newline
  for (int32_t s = 0; s < kNumSpecials; ++s) {
    std::getline(is, line);
    if (line != special_surfaces()[s])
      throw DataError("tokenizer: special surface mismatch: " + line);
  }
  is >> word >> n_merges;
  if (word != "merges") throw DataError("tokenizer: expected merges count");
  Tokenizer tok;
  for (int64_t m = 0; m < n_merges; ++m) {
    int32_t a = 0, b = 0;
    is >> a >> b;
    if (!is) throw DataError("tokenizer: truncated merges in " + path);
    tok.merges_.emplace_back(a, b);
  }
  tok.rebuild_tables();
  if (tok.vocab_size() != vocab)
    throw DataError("tokenizer: vocab count disagrees with merge list");
  return tok;
}

}  // namespace hrlm
