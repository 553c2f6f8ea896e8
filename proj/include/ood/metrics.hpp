#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ood/score_types.hpp"

// Detection and calibration metrics. Detection treats out-of-distribution as
// the positive class and ranks by descending id_score, i.e. the detector
// score is -id_score; tied pairs count half.
namespace ood::metrics {

struct BinStat {
  double lower = 0.0;
  double upper = 0.0;
  // NaN when the bin is empty
  double mean_conf = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

struct ReliabilityBins {
  std::vector<BinStat> bins;
  std::size_t total = 0;
};

struct EceResult {
  double ece = 0.0;
  ReliabilityBins bins;
};

struct EvalReport {
  double auroc = 0.0;
  double aucpr = 0.0;
  double id_accuracy = 0.0;
  double ece = 0.0;
  // False when the method's scores carry no probability semantics; the JSON
  // field is then null.
  bool has_ece = true;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
  std::string method;
  std::string config_fingerprint;
};

// Probability that a random OOD sample ranks more OOD than a random ID
// sample, ties counted half (rank-based, O(n log n)). Requires at least one
// sample of each kind and finite scores.
double auroc(std::span<const scores::ScoredSample> samples);

// Average precision for the OOD-positive detector: precision summed over
// recall increments, thresholds taken at distinct score values.
double aucpr(std::span<const scores::ScoredSample> samples);

// Expected calibration error over equal-width confidence bins [l, u), the
// last bin closed. confidences must lie in [0, 1].
EceResult ece(std::span<const double> confidences, std::span<const std::uint8_t> correct,
              std::size_t n_bins);

double id_accuracy(std::span<const int> predicted, std::span<const int> labels);

// Serialized with exactly these fields: auroc, aucpr, id_accuracy, ece,
// n_id, n_ood, method, config_fingerprint.
std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

// Header bin_lower,bin_upper,mean_conf,accuracy,count; empty bins leave the
// mean_conf and accuracy cells empty.
void write_reliability_csv(std::ostream& out, const ReliabilityBins& bins);

} // namespace ood::metrics
