#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ood/data.hpp"
#include "ood/metrics.hpp"
#include "ood/nn.hpp"
#include "ood/scores.hpp"

// Experiment driver: a single declarative config names a benchmark, a model,
// a list of detection methods and a list of seeds; run() trains the minimal
// set of models, scores every method on every seed, and aggregates the
// results into one report. Reruns of the same config are byte-identical
// apart from the wall-clock field.
namespace ood::harness {

// One detection method entry. Fields beyond `name` apply only to the
// methods that read them; the parser rejects parameters a method does not
// take.
struct MethodSpec {
  std::string name;  // canonical: mcp, odin, odin_pert_only, odin_temp_only,
                     // mahalanobis, mcdp, ensemble_mcp, ensemble_mahalanobis, duq
  std::string label; // report key, defaults to name; must be unique per config

  double epsilon = 0.01;      // odin, odin_pert_only
  double tau_prime = 1000.0;  // odin, odin_temp_only
  std::size_t n_passes = 32;  // mcdp
  std::size_t members = 5;    // ensemble_mcp, ensemble_mahalanobis
  scores::Consensus consensus = scores::Consensus::Mean; // ensemble_mahalanobis
  std::optional<scores::PoolSpec> pool; // mahalanobis, ensemble_mahalanobis

  // duq head, plus optional overrides of the shared model's optimizer
  // settings for the duq training run
  std::size_t embedding_dim = 16;
  double length_scale = 0.0;
  double centroid_momentum = 0.999;
  double penalty_weight = 0.5;
  double fd_epsilon = 1e-3;
  std::optional<double> lr;
  std::optional<std::size_t> epochs;
};

struct BenchmarkSpec {
  enum class Kind { Gaussian, Moons, Csv };
  Kind kind = Kind::Gaussian;
  data::GaussianSpec gaussian;
  data::MoonsSpec moons;
  // csv benchmarks: labeled train and test_id, unlabeled test_ood, all in
  // the write_features_csv layout; normalization is refitted on train
  std::string train_csv;
  std::string test_id_csv;
  std::string test_ood_csv;
};

struct ExperimentConfig {
  BenchmarkSpec benchmark;
  // input_dim, num_classes and seed are derived from the benchmark and the
  // run seed, never from the config file
  nn::MlpConfig model;
  std::vector<MethodSpec> methods;
  std::vector<std::uint64_t> seeds;
  std::string out_dir; // optional; consumers fall back to --out

  static ExperimentConfig from_file(const std::string& path);
  // `name` labels parse errors, usually the file name
  static ExperimentConfig from_json_text(const std::string& text, const std::string& name);

  // FNV-1a over the canonical re-serialization, so two files that parse to
  // the same experiment share a fingerprint regardless of formatting
  std::string fingerprint() const;
};

// The benchmark realized for one run seed. Generated benchmarks are redrawn
// from the seed; csv benchmarks load the same files every time and only the
// model seed varies across runs.
data::OodBenchmark make_benchmark(const BenchmarkSpec& spec, std::uint64_t seed);

// The config's model completed for one concrete benchmark and run seed:
// input_dim and num_classes come from the training split, seed from the run.
nn::MlpConfig resolve_model(const ExperimentConfig& config, const data::OodBenchmark& bench,
                            std::uint64_t seed);

// The duq head settings of one method entry applied over the shared model.
nn::DuqConfig resolve_duq(const MethodSpec& method, const nn::MlpConfig& model);

struct MethodScores {
  std::vector<scores::ScoredSample> id;  // is_ood false
  std::vector<scores::ScoredSample> ood; // is_ood true
  std::vector<int> id_true_class;
  std::string params_json; // resolved parameters, including fitted values
  std::vector<std::string> notices;
};

// Trains exactly the models one method needs on one seed and scores both
// test splits. Rows carry the canonical method name.
MethodScores score_method(const ExperimentConfig& config, const MethodSpec& method,
                          std::uint64_t seed);

struct Cell {
  std::uint64_t seed = 0;
  std::string method; // canonical name
  std::string label;
  std::string params_json; // resolved parameters, including fitted values
  bool ok = false;
  std::string error; // empty when ok
  metrics::EvalReport report;
  std::vector<std::string> notices;
};

struct Aggregate {
  std::string label;
  std::string method;
  std::size_t n_seeds = 0; // cells that scored successfully
  double auroc = 0.0;
  double aucpr = 0.0;
  double id_accuracy = 0.0;
  double ece = 0.0;
  bool has_ece = false;
};

struct RunReport {
  std::string config_fingerprint;
  std::string separation;
  std::vector<std::uint64_t> seeds;
  std::uint64_t planned_training_runs = 0;
  std::vector<Cell> cells;
  std::vector<Aggregate> aggregates; // arithmetic means over successful cells
  std::vector<std::string> notices;
  double wall_clock_sec = 0.0;

  bool all_ok() const;
  // include_wall_clock=false yields a rerun-stable serialization
  std::string to_json(bool include_wall_clock = true) const;
  // One row per method, ordered mcp, mcdp, ensemble_mcp, mahalanobis,
  // ensemble_mahalanobis, odin, odin_pert_only, odin_temp_only, duq.
  std::string markdown_table() const;
};

// Trains each required model once per seed, reuses it across the methods
// that share it, and records a failed cell instead of aborting when a
// method raises. Throws only on config-level errors.
RunReport run(const ExperimentConfig& config);

// Metrics over an already-scored sample file: detection metrics over all
// rows, accuracy over the labeled ID rows, calibration only when the
// method's score is a probability. All rows must share one method.
metrics::EvalReport eval_scores(const scores::ScoresFile& file,
                                const std::string& config_fingerprint);

struct TempSweepRow {
  double tau = 1.0;
  std::string method; // "baseline" or "odin"
  double ece = 0.0;
  double auroc = 0.0;
  metrics::ReliabilityBins bins;
};

struct TempSweep {
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  std::vector<TempSweepRow> rows; // per tau: baseline row then odin row
  std::string to_json() const;
  std::string markdown_table() const;
};

// Calibration against the temperature knob on the first seed: the baseline
// scores the unperturbed input at tau, the odin rows perturb with the
// config's epsilon and score at tau_prime = tau. On binary benchmarks every
// row of a family must share its AUROC to 1e-12; a violation raises.
TempSweep sweep_temperature(const ExperimentConfig& config, const std::vector<double>& taus);

struct PoolSweepRow {
  std::string pool; // "none" or e.g. "2x2s2"
  bool applicable = true;
  std::size_t feature_dim = 0;
  double auroc = 0.0; // meaningless when not applicable
};

struct PoolSweep {
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  std::vector<PoolSweepRow> rows;
  std::string to_json() const;
  std::string markdown_table() const;
};

// Mahalanobis AUROC against feature pooling on the first seed. Pools that
// need a spatial view of a model without one yield a not-applicable row
// rather than an error.
PoolSweep sweep_pooling(const ExperimentConfig& config,
                        const std::vector<std::optional<scores::PoolSpec>>& pools);

// "none" or "KHxKWsS", e.g. "2x2s4"; used by the sweep CLI and reports
std::string pool_token(const std::optional<scores::PoolSpec>& pool);
std::optional<scores::PoolSpec> parse_pool_token(const std::string& token);

} // namespace ood::harness
