#pragma once

// Corpus ingestion and mixture construction: condition tagging, think-tag
// stripping, stratified sampling with caps/upsampling, example packing.
// Corpus interchange format: line-delimited JSON records with fields
// instruction / response / dataset / task / condition.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hrlm/bpe.hpp"
#include "hrlm/objective.hpp"

namespace hrlm {

struct Document {
  std::string instruction;
  std::string response;
  std::string dataset;
  std::string task;
  Condition condition = Condition::direct;

  void validate() const;
};

Condition condition_from_name(const std::string& name);

// JSONL record IO.
Document parse_corpus_record(const std::string& json_line);
std::string format_corpus_record(const Document& doc);
std::vector<Document> read_corpus_file(const std::string& path);

struct StripResult {
  std::string text;
  bool unclosed = false;  // an opening tag without a close strips to the end
};

// Remove every well-formed <think>...</think> span, tags included,
// left to right. Idempotent.
StripResult strip_think(const std::string& text);

// "<|condition|>" + instruction; the tag is part of the prefix region.
std::string prepend_condition(const Document& doc);

struct MixtureSpec {
  std::map<std::string, int64_t> dataset_caps;  // docs per dataset
  std::map<std::string, int64_t> task_caps;     // docs per task, per dataset
  std::map<std::string, int64_t> upsample;      // explicit per-dataset multiplier
  int64_t small_threshold = 50000;              // strata at or below repeat
  int64_t small_multiplier = 10;
  uint64_t seed = 0;
};

struct MixtureStats {
  int64_t input_docs = 0;
  int64_t unique_docs_emitted = 0;  // after caps, before upsampling
  int64_t total_docs_emitted = 0;
  int64_t strata = 0;
};

// Deterministic mixture stream: per-(dataset,task) stratum caps by seeded
// sampling without replacement, small-stratum upsampling, then one seeded
// shuffle of the union. Byte-identical for equal (corpus, spec, seed).
std::vector<Document> stratified_sample(const std::vector<Document>& corpus,
                                        const MixtureSpec& spec,
                                        MixtureStats* stats = nullptr);

struct PackResult {
  PackedExample example;
  bool truncated = false;  // response tail cut to fit max_len
};

// token_ids = encode(tag + instruction) ++ encode(response) ++ eot;
// loss covers the response and the terminator. Rejects documents whose
// tagged instruction leaves no room for any response token.
PackResult pack_example(const Document& doc, const Tokenizer& tok,
                        int64_t max_len);

}  // namespace hrlm
