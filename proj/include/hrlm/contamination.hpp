#pragma once

// n-gram contamination measurement and the four-subset Z significance test.

#include <array>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

namespace hrlm {

// Exact-membership set of every n-gram in a token stream. Keys are the raw
// bytes of the n token ids, so queries are exact (no hash-only collisions).
class NgramIndex {
 public:
  NgramIndex(const std::vector<int32_t>& stream, int64_t n);

  bool contains(const int32_t* window) const;
  int64_t n() const { return n_; }
  size_t size() const { return set_.size(); }

 private:
  int64_t n_;
  std::unordered_set<std::string> set_;
};

// Percent of sample tokens covered by at least one indexed n-gram window.
// Samples shorter than n score 0.
double contamination_pct(const std::vector<int32_t>& sample,
                         const NgramIndex& index);

// Subsets are overlapping by construction: Clean/NotClean split at lo,
// NotDirty/Dirty split at hi (strict below / inclusive at-or-above).
struct SubsetPartition {
  std::vector<size_t> clean;      // pct <  lo
  std::vector<size_t> not_clean;  // pct >= lo
  std::vector<size_t> not_dirty;  // pct <  hi
  std::vector<size_t> dirty;      // pct >= hi
};

SubsetPartition partition_subsets(const std::vector<double>& percents,
                                  double lo = 20.0, double hi = 80.0);

struct ZResult {
  double xbar = 0.0;     // subset mean score
  double mu = 0.0;       // population mean
  double sigma_k = 0.0;  // population sd / sqrt(k)
  double z = 0.0;
  size_t k = 0;
  bool sigma_zero = false;
};

ZResult z_statistic(const std::vector<double>& scores,
                    const std::vector<size_t>& subset);

// Significant only if |Z| > 2 on all four subsets AND the signs follow the
// directional rule: Clean and NotDirty below average, NotClean and Dirty
// above.
bool significance_verdict(const ZResult& clean, const ZResult& not_clean,
                          const ZResult& not_dirty, const ZResult& dirty);

struct SubsetRow {
  std::string name;
  double avg_contamination = 0.0;
  size_t k = 0;
  double xbar = 0.0;
  double mu = 0.0;
  double z = 0.0;
  bool sigma_zero = false;
};

struct ContaminationReport {
  int64_t n = 0;
  std::vector<double> percents;   // per eval sample
  bool has_scores = false;
  std::array<SubsetRow, 4> rows;  // Clean, NotClean, NotDirty, Dirty
  bool significant = false;
};

// Full pipeline: index the corpus, score each eval sample, partition, and
// (when scores are provided, one per sample) run the Z test.
ContaminationReport contamination_analyze(
    const std::vector<int32_t>& corpus_stream,
    const std::vector<std::vector<int32_t>>& eval_samples,
    const std::vector<double>& scores, int64_t n);

// Columnar text table: subset, avg contamination %, k, X-bar, mu, Z.
std::string format_contamination_report(const ContaminationReport& report);

}  // namespace hrlm
