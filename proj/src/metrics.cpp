#include "ood/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "ood/errors.hpp"
#include "ood/fmtnum.hpp"

namespace ood::metrics {

namespace {

using scores::ScoredSample;

// Sorted sample indices plus class counts, shared by both ranking metrics.
struct Ranked {
  std::vector<std::size_t> order; // ascending id_score
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
};

Ranked rank_samples(std::span<const ScoredSample> samples, const char* metric) {
  Ranked r;
  for (const auto& s : samples) {
    if (!std::isfinite(s.id_score)) {
      throw ValueError(std::string(metric) + ": non-finite id_score");
    }
    (s.is_ood ? r.n_ood : r.n_id)++;
  }
  if (r.n_id == 0 || r.n_ood == 0) {
    throw UsageError(std::string(metric) +
                     ": needs both in-distribution and out-of-distribution samples");
  }
  r.order.resize(samples.size());
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) {
    return samples[a].id_score < samples[b].id_score;
  });
  return r;
}

} // namespace

double auroc(std::span<const ScoredSample> samples) {
  const Ranked r = rank_samples(samples, "auroc");
  // Mann-Whitney on ascending id_score with average ranks for ties; the
  // ID samples should occupy the high ranks.
  double id_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < r.order.size()) {
    std::size_t j = i;
    while (j + 1 < r.order.size() &&
           samples[r.order[j + 1]].id_score == samples[r.order[i]].id_score) {
      ++j;
    }
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      if (!samples[r.order[k]].is_ood) id_rank_sum += avg_rank;
    }
    i = j + 1;
  }
  const double n_id = static_cast<double>(r.n_id);
  const double n_ood = static_cast<double>(r.n_ood);
  const double u = id_rank_sum - n_id * (n_id + 1.0) / 2.0;
  return u / (n_id * n_ood);
}

double aucpr(std::span<const ScoredSample> samples) {
  const Ranked r = rank_samples(samples, "aucpr");
  // Walk thresholds from the most OOD-looking score down, one step per
  // distinct value, accumulating precision * recall-increment.
  double ap = 0.0;
  double tp = 0.0, fp = 0.0;
  double prev_recall = 0.0;
  const double n_ood = static_cast<double>(r.n_ood);
  std::size_t i = 0;
  while (i < r.order.size()) {
    std::size_t j = i;
    std::size_t group_ood = 0, group_id = 0;
    while (true) {
      (samples[r.order[j]].is_ood ? group_ood : group_id)++;
      if (j + 1 >= r.order.size() ||
          samples[r.order[j + 1]].id_score != samples[r.order[i]].id_score) {
        break;
      }
      ++j;
    }
    tp += static_cast<double>(group_ood);
    fp += static_cast<double>(group_id);
    const double recall = tp / n_ood;
    const double precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j + 1;
  }
  return ap;
}

EceResult ece(std::span<const double> confidences, std::span<const std::uint8_t> correct,
              std::size_t n_bins) {
  if (n_bins == 0) throw ValueError("ece: need at least one bin");
  if (confidences.size() != correct.size()) {
    throw UsageError("ece: " + std::to_string(confidences.size()) + " confidences vs " +
                     std::to_string(correct.size()) + " correctness flags");
  }
  if (confidences.empty()) throw UsageError("ece: no samples");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  EceResult result;
  result.bins.bins.resize(n_bins);
  std::vector<double> conf_sum(n_bins, 0.0);
  std::vector<std::size_t> hit(n_bins, 0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    result.bins.bins[b].lower = static_cast<double>(b) / static_cast<double>(n_bins);
    result.bins.bins[b].upper = static_cast<double>(b + 1) / static_cast<double>(n_bins);
  }
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) {
      throw ValueError("ece: confidence " + format_double(c) + " outside [0, 1]");
    }
    std::size_t b = static_cast<std::size_t>(c * static_cast<double>(n_bins));
    if (b >= n_bins) b = n_bins - 1; // c == 1.0 falls into the closed last bin
    result.bins.bins[b].count++;
    conf_sum[b] += c;
    hit[b] += correct[i] ? 1 : 0;
  }
  result.bins.total = confidences.size();

  double e = 0.0;
  for (std::size_t b = 0; b < n_bins; ++b) {
    BinStat& bin = result.bins.bins[b];
    if (bin.count == 0) {
      bin.mean_conf = nan;
      bin.accuracy = nan;
      continue;
    }
    bin.mean_conf = conf_sum[b] / static_cast<double>(bin.count);
    bin.accuracy = static_cast<double>(hit[b]) / static_cast<double>(bin.count);
    const double weight = static_cast<double>(bin.count) / static_cast<double>(result.bins.total);
    e += weight * std::fabs(bin.accuracy - bin.mean_conf);
  }
  result.ece = e;
  return result;
}

double id_accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) {
    throw UsageError("id_accuracy: " + std::to_string(predicted.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (predicted.empty()) throw UsageError("id_accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["auroc"] = report.auroc;
  j["aucpr"] = report.aucpr;
  j["id_accuracy"] = report.id_accuracy;
  if (report.has_ece) {
    j["ece"] = report.ece;
  } else {
    j["ece"] = nullptr;
  }
  j["n_id"] = report.n_id;
  j["n_ood"] = report.n_ood;
  j["method"] = report.method;
  j["config_fingerprint"] = report.config_fingerprint;
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
  EvalReport r;
  try {
    r.auroc = j.at("auroc").get<double>();
    r.aucpr = j.at("aucpr").get<double>();
    r.id_accuracy = j.at("id_accuracy").get<double>();
    if (j.at("ece").is_null()) {
      r.has_ece = false;
    } else {
      r.ece = j.at("ece").get<double>();
    }
    r.n_id = j.at("n_id").get<std::size_t>();
    r.n_ood = j.at("n_ood").get<std::size_t>();
    r.method = j.at("method").get<std::string>();
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
  return r;
}

void write_reliability_csv(std::ostream& out, const ReliabilityBins& bins) {
  out << "bin_lower,bin_upper,mean_conf,accuracy,count\n";
  for (const BinStat& b : bins.bins) {
    out << format_double(b.lower) << ',' << format_double(b.upper) << ',';
    if (b.count > 0) {
      out << format_double(b.mean_conf) << ',' << format_double(b.accuracy);
    } else {
      out << ',';
    }
    out << ',' << b.count << '\n';
  }
}

} // namespace ood::metrics
