#include "hrlm/data.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "hrlm/errors.hpp"
#include "hrlm/rng.hpp"

namespace hrlm {

Condition condition_from_name(const std::string& name) {
  if (name == "direct") return Condition::direct;
  if (name == "cot") return Condition::cot;
  if (name == "synth") return Condition::synth;
  if (name == "noisy") return Condition::noisy;
  throw DataError("unknown condition tag: " + name);
}

void Document::validate() const {
  if (response.empty()) throw DataError("document: empty response");
  if (dataset.empty() || task.empty())
    throw DataError("document: missing dataset/task labels");
}

Document parse_corpus_record(const std::string& json_line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corpus record: invalid JSON: ") + e.what());
  }
  Document doc;
  try {
    doc.instruction = j.at("instruction").get<std::string>();
    doc.response = j.at("response").get<std::string>();
    doc.dataset = j.at("dataset").get<std::string>();
    doc.task = j.at("task").get<std::string>();
    doc.condition = condition_from_name(j.at("condition").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corpus record: missing field: ") + e.what());
  }
  doc.validate();
  return doc;
}

std::string format_corpus_record(const Document& doc) {
  nlohmann::ordered_json j;
  j["instruction"] = doc.instruction;
  j["response"] = doc.response;
  j["dataset"] = doc.dataset;
  j["task"] = doc.task;
  j["condition"] = condition_name(doc.condition);
  return j.dump();
}

std::vector<Document> read_corpus_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("corpus: cannot open " + path);
  std::vector<Document> docs;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      docs.push_back(parse_corpus_record(line));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

StripResult strip_think(const std::string& text) {
  static const std::string kOpen = "<think>";
  static const std::string kClose = "</think>";
  StripResult res;
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t open = text.find(kOpen, pos);
    if (open == std::string::npos) {
      res.text.append(text, pos, std::string::npos);
      break;
    }
    res.text.append(text, pos, open - pos);
    const size_t close = text.find(kClose, open + kOpen.size());
    if (close == std::string::npos) {
      res.unclosed = true;  // strip to end of text
      break;
    }
    pos = close + kClose.size();
  }
  return res;
}

std::string prepend_condition(const Document& doc) {
  const int32_t idx = static_cast<int32_t>(doc.condition);
  return Tokenizer::special_surfaces()[Tokenizer::kDirectId + idx] +
         doc.instruction;
}

namespace {

// Seeded uniform sample of k positions without replacement, returned in
// ascending original order.
std::vector<size_t> sample_without_replacement(size_t n, size_t k, Rng& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  for (size_t i = 0; i < k; ++i) {
    const size_t j = i + static_cast<size_t>(rng.uniform_int(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::vector<Document> stratified_sample(const std::vector<Document>& corpus,
                                        const MixtureSpec& spec,
                                        MixtureStats* stats) {
  for (const Document& d : corpus) d.validate();

  // strata in sorted (dataset, task) order; documents keep corpus order
  std::map<std::pair<std::string, std::string>, std::vector<size_t>> strata;
  for (size_t i = 0; i < corpus.size(); ++i)
    strata[{corpus[i].dataset, corpus[i].task}].push_back(i);

  // per-task caps within each stratum
  std::map<std::string, std::vector<size_t>> by_dataset;
  for (auto& [key, docs] : strata) {
    const auto& [dataset, task] = key;
    auto cap_it = spec.task_caps.find(dataset);
    if (cap_it != spec.task_caps.end() &&
        static_cast<int64_t>(docs.size()) > cap_it->second) {
      Rng rng(spec.seed ^ fnv1a64(dataset + "\x1f" + task));
      std::vector<size_t> chosen = sample_without_replacement(
          docs.size(), static_cast<size_t>(cap_it->second), rng);
      std::vector<size_t> kept;
      kept.reserve(chosen.size());
      for (size_t c : chosen) kept.push_back(docs[c]);
      docs = std::move(kept);
    }
    auto& sink = by_dataset[dataset];
    sink.insert(sink.end(), docs.begin(), docs.end());
  }

  // per-dataset caps over the task-capped union
  for (auto& [dataset, docs] : by_dataset) {
    auto cap_it = spec.dataset_caps.find(dataset);
    if (cap_it != spec.dataset_caps.end() &&
        static_cast<int64_t>(docs.size()) > cap_it->second) {
      Rng rng(spec.seed ^ fnv1a64(dataset));
      std::vector<size_t> chosen = sample_without_replacement(
          docs.size(), static_cast<size_t>(cap_it->second), rng);
      std::vector<size_t> kept;
      kept.reserve(chosen.size());
      for (size_t c : chosen) kept.push_back(docs[c]);
      docs = std::move(kept);
    }
  }

  // survivors per stratum (post caps), for the smallness rule
  std::map<std::pair<std::string, std::string>, std::vector<size_t>> final_strata;
  for (const auto& [dataset, docs] : by_dataset)
    for (size_t i : docs)
      final_strata[{dataset, corpus[i].task}].push_back(i);

  std::vector<size_t> emissions;
  int64_t unique = 0;
  for (const auto& [key, docs] : final_strata) {
    const auto& [dataset, task] = key;
    int64_t mult = 1;
    auto up_it = spec.upsample.find(dataset);
    if (up_it != spec.upsample.end()) mult = std::max(mult, up_it->second);
    if (static_cast<int64_t>(docs.size()) <= spec.small_threshold)
      mult = std::max(mult, spec.small_multiplier);
    unique += static_cast<int64_t>(docs.size());
    for (int64_t m = 0; m < mult; ++m)
      emissions.insert(emissions.end(), docs.begin(), docs.end());
  }

  // single deterministic shuffle of the union
  Rng rng(spec.seed);
  for (size_t i = emissions.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.uniform_int(i));
    std::swap(emissions[i - 1], emissions[j]);
  }

  if (stats) {
    stats->input_docs = static_cast<int64_t>(corpus.size());
    stats->unique_docs_emitted = unique;
    stats->total_docs_emitted = static_cast<int64_t>(emissions.size());
    stats->strata = static_cast<int64_t>(final_strata.size());
  }

  std::vector<Document> out;
  out.reserve(emissions.size());
  for (size_t i : emissions) out.push_back(corpus[i]);
  return out;
}

PackResult pack_example(const Document& doc, const Tokenizer& tok,
                        int64_t max_len) {
  doc.validate();
  PackResult res;
  const std::string tagged = prepend_condition(doc);
  std::vector<int32_t> ids = tok.encode(tagged);
  const int64_t prefix = static_cast<int64_t>(ids.size());
  if (prefix >= max_len)
    throw DataError("pack_example: tagged instruction occupies " +
                    std::to_string(prefix) + " tokens, no room for a response in max_len " +
                    std::to_string(max_len));
  std::vector<int32_t> resp = tok.encode(doc.response);
  ids.insert(ids.end(), resp.begin(), resp.end());
  ids.push_back(Tokenizer::kEotId);
  if (static_cast<int64_t>(ids.size()) > max_len) {
    ids.resize(max_len);
    res.truncated = true;
  }
  res.example.token_ids = std::move(ids);
  res.example.prefix_len = prefix;
  res.example.condition = doc.condition;
  res.example.loss_mask.assign(res.example.token_ids.size(), 0);
  for (size_t i = prefix; i < res.example.token_ids.size(); ++i)
    res.example.loss_mask[i] = 1;
  return res;
}

}  // namespace hrlm
