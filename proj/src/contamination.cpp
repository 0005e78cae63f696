#include "hrlm/contamination.hpp"

#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "hrlm/errors.hpp"

namespace hrlm {

namespace {

std::string key_of(const int32_t* window, int64_t n) {
  std::string key(static_cast<size_t>(n) * sizeof(int32_t), '\0');
  std::memcpy(key.data(), window, key.size());
  return key;
}

}  // namespace

NgramIndex::NgramIndex(const std::vector<int32_t>& stream, int64_t n) : n_(n) {
  if (n < 1) throw ContractError("ngram_index: n must be >= 1");
  const int64_t len = static_cast<int64_t>(stream.size());
  for (int64_t i = 0; i + n <= len; ++i) set_.insert(key_of(stream.data() + i, n));
}

bool NgramIndex::contains(const int32_t* window) const {
  return set_.count(key_of(window, n_)) != 0;
}

double contamination_pct(const std::vector<int32_t>& sample,
                         const NgramIndex& index) {
  const int64_t n = index.n();
  const int64_t len = static_cast<int64_t>(sample.size());
  if (len == 0 || len < n) return 0.0;
  std::vector<uint8_t> covered(len, 0);
  for (int64_t i = 0; i + n <= len; ++i) {
    if (index.contains(sample.data() + i)) {
      for (int64_t j = i; j < i + n; ++j) covered[j] = 1;
    }
  }
  int64_t marked = 0;
  for (uint8_t c : covered) marked += c;
  return 100.0 * static_cast<double>(marked) / static_cast<double>(len);
}

SubsetPartition partition_subsets(const std::vector<double>& percents,
                                  double lo, double hi) {
  SubsetPartition p;
  for (size_t i = 0; i < percents.size(); ++i) {
    if (percents[i] < lo) p.clean.push_back(i);
    else p.not_clean.push_back(i);
    if (percents[i] < hi) p.not_dirty.push_back(i);
    else p.dirty.push_back(i);
  }
  return p;
}

ZResult z_statistic(const std::vector<double>& scores,
                    const std::vector<size_t>& subset) {
  if (subset.empty()) throw ContractError("z_statistic: empty subset");
  const size_t n = scores.size();
  double mu = 0.0;
  for (double s : scores) mu += s;
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double s : scores) var += (s - mu) * (s - mu);
  var /= static_cast<double>(n);  // population variance

  ZResult r;
  r.k = subset.size();
  r.mu = mu;
  double xbar = 0.0;
  for (size_t i : subset) xbar += scores.at(i);
  r.xbar = xbar / static_cast<double>(r.k);
  r.sigma_k = std::sqrt(var) / std::sqrt(static_cast<double>(r.k));
  if (r.sigma_k == 0.0) {
    r.sigma_zero = true;
    r.z = 0.0;
  } else {
    r.z = (r.xbar - r.mu) / r.sigma_k;
  }
  return r;
}

bool significance_verdict(const ZResult& clean, const ZResult& not_clean,
                          const ZResult& not_dirty, const ZResult& dirty) {
  const bool magnitudes = std::abs(clean.z) > 2.0 &&
                          std::abs(not_clean.z) > 2.0 &&
                          std::abs(not_dirty.z) > 2.0 &&
                          std::abs(dirty.z) > 2.0;
  const bool signs =
      clean.z < 0.0 && not_clean.z > 0.0 && not_dirty.z < 0.0 && dirty.z > 0.0;
  return magnitudes && signs;
}

ContaminationReport contamination_analyze(
    const std::vector<int32_t>& corpus_stream,
    const std::vector<std::vector<int32_t>>& eval_samples,
    const std::vector<double>& scores, int64_t n) {
  if (!scores.empty() && scores.size() != eval_samples.size())
    throw ContractError("contamination_analyze: scores must align 1:1 with samples");

  NgramIndex index(corpus_stream, n);
  ContaminationReport report;
  report.n = n;
  report.has_scores = !scores.empty();
  report.percents.reserve(eval_samples.size());
  for (const auto& sample : eval_samples)
    report.percents.push_back(contamination_pct(sample, index));

  SubsetPartition part = partition_subsets(report.percents);
  const std::array<const std::vector<size_t>*, 4> sets = {
      &part.clean, &part.not_clean, &part.not_dirty, &part.dirty};
  const std::array<const char*, 4> names = {"Clean", "NotClean", "NotDirty",
                                            "Dirty"};
  std::array<ZResult, 4> zs;
  for (size_t s = 0; s < 4; ++s) {
    SubsetRow& row = report.rows[s];
    row.name = names[s];
    row.k = sets[s]->size();
    double avg = 0.0;
    for (size_t i : *sets[s]) avg += report.percents[i];
    row.avg_contamination = row.k ? avg / static_cast<double>(row.k) : 0.0;
    if (report.has_scores && row.k > 0) {
      zs[s] = z_statistic(scores, *sets[s]);
      row.xbar = zs[s].xbar;
      row.mu = zs[s].mu;
      row.z = zs[s].z;
      row.sigma_zero = zs[s].sigma_zero;
    }
  }
  if (report.has_scores && !part.clean.empty() && !part.not_clean.empty() &&
      !part.not_dirty.empty() && !part.dirty.empty()) {
    report.significant = significance_verdict(zs[0], zs[1], zs[2], zs[3]);
  }
  return report;
}

std::string format_contamination_report(const ContaminationReport& report) {
  std::ostringstream os;
  os << "subset\tavg_contam_pct\tk\txbar\tmu\tZ\n";
  for (const SubsetRow& row : report.rows) {
    os << row.name << '\t' << std::fixed << std::setprecision(1)
       << row.avg_contamination << '\t' << row.k << '\t'
       << std::setprecision(4) << row.xbar << '\t' << row.mu << '\t'
       << std::setprecision(2) << row.z << '\n';
  }
  os << "n\t" << report.n << "\n";
  os << "significant\t" << (report.significant ? "yes" : "no") << "\n";
  return os.str();
}

}  // namespace hrlm
