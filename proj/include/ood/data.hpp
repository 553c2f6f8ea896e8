#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

// Synthetic desk-scale benchmarks: labeled in-distribution clusters plus an
// out-of-distribution test set at a controlled distance, with per-feature
// z-score normalization fitted on the training split only. Generation is
// bit-reproducible for a fixed spec.
namespace ood::data {

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev; // population convention; floored at 1 for constant columns
};

struct LabeledSet {
  std::vector<double> features; // row-major n x dim
  std::size_t n = 0;
  std::size_t dim = 0;
  std::vector<int> labels; // empty for unlabeled sets

  const double* row(std::size_t i) const { return features.data() + i * dim; }
};

struct OodBenchmark {
  LabeledSet train;
  LabeledSet test_id;
  LabeledSet test_ood; // unlabeled
  Normalization norm;  // fitted on train, already applied to all three splits
  std::string separation; // "far" or "overlapping"
  std::uint64_t seed = 0;
};

// Spherical Gaussian class clusters. Centers are drawn uniformly in the box
// [-10*spread, 10*spread]^dim and redrawn until all pairwise distances reach
// 8*spread. The OOD cluster sits at distance ood_shift from one anchor
// center, placed so the anchor stays its nearest class center.
struct GaussianSpec {
  std::size_t dim = 2;
  std::size_t classes = 3;
  std::size_t n_train_per_class = 500;
  std::size_t n_test_per_class = 200;
  std::size_t n_ood = 400;
  double spread = 1.0;     // cluster standard deviation
  double ood_shift = 10.0; // absolute distance of the OOD center from its anchor
  std::uint64_t seed = 42;
};

OodBenchmark gen_gaussian_benchmark(const GaussianSpec& spec);

// Two interleaved half-moons with Gaussian noise; the OOD set lies on a ring
// of the given radius around the data centroid.
struct MoonsSpec {
  std::size_t n_train_per_class = 500;
  std::size_t n_test_per_class = 200;
  std::size_t n_ood = 400;
  double noise = 0.1;
  double ood_ring_radius = 2.5;
  std::uint64_t seed = 42;
};

OodBenchmark gen_moons_benchmark(const MoonsSpec& spec);

Normalization fit_normalization(const LabeledSet& train);
void apply_normalization(const Normalization& norm, LabeledSet& set);

// Header f0,...,f{dim-1} plus a trailing label column when labels exist.
void write_features_csv(std::ostream& out, const LabeledSet& set);

struct CsvSchema {
  std::vector<std::string> feature_columns;
  std::optional<std::string> label_column;
};

// Strict: the header must match the schema exactly and every cell must parse
// fully. Errors cite `name` and the 1-based row.
LabeledSet ingest_csv(std::istream& in, const CsvSchema& schema, const std::string& name);

// Schema implied by a header row of the write_features_csv layout.
CsvSchema infer_schema(std::istream& in, const std::string& name);

// Writes train.csv, test_id.csv, test_ood.csv and manifest.json into dir.
// params_json must be a JSON object describing the generator arguments.
void write_benchmark_dir(const std::string& dir, const OodBenchmark& bench,
                         const std::string& generator, const std::string& params_json);

} // namespace ood::data
