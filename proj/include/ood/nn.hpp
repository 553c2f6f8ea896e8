#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ood/autodiff.hpp"
#include "ood/data.hpp"

// Small dense relu classifiers trained with SGD, plus the deterministic
// uncertainty model that replaces the softmax head with per-class RBF
// kernels. Everything is seeded and bit-reproducible.
namespace ood::nn {

struct MlpConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims = {32, 32};
  std::size_t num_classes = 2;
  double dropout_p = 0.3;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  // Optional [channels, height, width] view of the last hidden activation
  // for consumers that pool spatially; the product must equal the feature
  // dimension.
  std::optional<std::array<std::size_t, 3>> feature_shape;

  void validate() const;
};

struct ForwardOut {
  std::vector<double> logits;     // n x classes
  std::vector<double> posteriors; // n x classes, softmax at the given temperature
  std::vector<double> hidden;     // n x feature_dim, last hidden activation
  std::size_t n = 0;
  std::size_t classes = 0;
  std::size_t feature_dim = 0;
};

class Classifier {
public:
  explicit Classifier(MlpConfig cfg);

  const MlpConfig& config() const { return cfg_; }
  // Dimension of the last hidden activation (input_dim with no hidden layers).
  std::size_t feature_dim() const;

  struct Layer {
    std::vector<double> w; // in x out, row-major
    std::vector<double> b; // out
    std::size_t in = 0;
    std::size_t out = 0;
  };
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  // Parameters entered on a tape as leaves, for building training or
  // perturbation graphs.
  struct TapeParams {
    std::vector<autodiff::Tensor> weights;
    std::vector<autodiff::Tensor> biases;
  };
  TapeParams params_on(autodiff::Tape& tape, bool requires_grad) const;

  // Last hidden activation for a batch tensor x. Dropout, when active,
  // draws its masks from rng.
  autodiff::Tensor build_hidden(autodiff::Tape& tape, autodiff::Tensor x,
                                const TapeParams& params, bool dropout_active,
                                std::mt19937_64* rng) const;
  autodiff::Tensor build_logits(autodiff::Tape& tape, autodiff::Tensor x,
                                const TapeParams& params, bool dropout_active,
                                std::mt19937_64* rng) const;

  // Plain inference for a row-major batch: logits, softmax(tau) posteriors
  // and hidden features. rng is required only when dropout_active.
  ForwardOut forward(const double* x, std::size_t n, double tau = 1.0,
                     bool dropout_active = false, std::mt19937_64* rng = nullptr) const;

  void save(const std::string& path) const;
  static Classifier load(const std::string& path);

private:
  MlpConfig cfg_;
  std::vector<Layer> layers_;
};

struct TrainResult {
  std::vector<double> epoch_loss; // mean cross-entropy per epoch
};

// SGD with momentum and weight decay applied in the update rule (the loss
// trace stays pure cross-entropy). Shuffling, dropout and init derive from
// cfg.seed, so a rerun reproduces parameters bit for bit.
TrainResult train(Classifier& clf, const data::LabeledSet& train_set);

// Count of completed training runs (train and duq_train), for asserting that
// a planned schedule ran exactly the expected jobs.
std::uint64_t training_run_count();
void reset_training_run_count();

// Independently trained copies of the same architecture. Member m gets its
// own seed derived from base.seed, which varies both the init and the data
// order.
std::vector<Classifier> train_ensemble(const MlpConfig& base, const data::LabeledSet& train_set,
                                       std::size_t members);

struct DuqConfig {
  MlpConfig backbone; // num_classes doubles as the kernel/centroid count
  std::size_t embedding_dim = 16;
  double length_scale = 0.0; // 0 resolves to 0.1 * sqrt(feature_dim)
  double centroid_momentum = 0.999;
  double penalty_weight = 0.5;
  double fd_epsilon = 1e-3;

  void validate() const;
};

class DuqModel {
public:
  explicit DuqModel(DuqConfig cfg);

  const DuqConfig& config() const { return cfg_; }
  double length_scale() const { return sigma_; }
  Classifier& backbone() { return backbone_; }
  const Classifier& backbone() const { return backbone_; }

  // Per-class projections, each feature_dim x embedding_dim.
  std::vector<std::vector<double>>& class_weights() { return class_w_; }
  const std::vector<std::vector<double>>& class_weights() const { return class_w_; }
  // num_classes x embedding_dim, row-major.
  std::vector<double>& centroids() { return centroids_; }
  const std::vector<double>& centroids() const { return centroids_; }

  // K[i*C + c] = exp(-|W_c' f_i - mu_c|^2 / (2 sigma^2)), in (0, 1].
  std::vector<double> kernels(const double* x, std::size_t n) const;

  void save(const std::string& path) const;
  static DuqModel load(const std::string& path);

private:
  DuqConfig cfg_;
  Classifier backbone_;
  std::vector<std::vector<double>> class_w_;
  std::vector<double> centroids_;
  double sigma_ = 0.0;
};

struct DuqStepResult {
  double bce = 0.0;
  double penalty = 0.0; // already scaled by the penalty weight
};

struct SgdState {
  // One velocity buffer per parameter vector, allocated on first use.
  std::vector<std::vector<double>> velocity;
};

// One optimization step: binary cross-entropy against one-hot labels plus
// the two-sided finite-difference gradient penalty, then an SGD update and
// the exponential centroid update (computed from post-step embeddings;
// classes absent from the batch keep their centroid).
DuqStepResult duq_train_step(DuqModel& model, const double* x, const int* labels,
                             std::size_t n, SgdState& opt, std::mt19937_64& rng);

struct DuqTrainResult {
  std::vector<double> epoch_loss; // mean bce + penalty per epoch
};

DuqTrainResult duq_train(DuqModel& model, const data::LabeledSet& train_set);

struct DuqScores {
  std::vector<double> max_kernel; // one per sample
  std::vector<int> predicted;    // argmax kernel class
};

DuqScores duq_score(const DuqModel& model, const double* x, std::size_t n);

// "mlp" or "duq", without loading the full model.
std::string checkpoint_kind(const std::string& path);

} // namespace ood::nn
