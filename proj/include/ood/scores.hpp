#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ood/data.hpp"
#include "ood/nn.hpp"
#include "ood/score_types.hpp"

// The scoring methods: maximum class probability, Mahalanobis distance to
// class-conditional Gaussians over hidden features, input-perturbation
// scoring with a separate prediction temperature, Monte-Carlo dropout, and
// ensembles. Every scorer returns one ScoredSample per input row with
// is_ood left false; the caller labels the rows it knows to be OOD.
namespace ood::scores {

// Strided max pooling over a [channels, height, width] view of the feature
// vector, one window per output cell, applied per channel.
struct PoolSpec {
  std::size_t kernel_h = 2;
  std::size_t kernel_w = 2;
  std::size_t stride = 2;
};

// Pools each row of features (n x prod(shape)) and returns the pooled rows.
// out_shape, when given, receives the pooled [c, h, w]. The kernel must fit
// inside the spatial dims.
std::vector<double> max_pool(const double* features, std::size_t n,
                             const std::array<std::size_t, 3>& shape, const PoolSpec& pool,
                             std::array<std::size_t, 3>* out_shape = nullptr);

// Per-class means and one tied covariance of the hidden features, held as
// the lower Cholesky factor of (cov + ridge*I). The ridge starts at
// 1e-6 * trace/dim and grows tenfold until the factorization succeeds, so
// singular covariances (constant features, tiny classes) stay scoreable.
struct GaussianStats {
  std::vector<double> class_means; // classes x dim
  std::vector<double> tied_cov;    // dim x dim, before the ridge
  std::vector<double> chol;        // dim x dim, lower triangular
  double ridge = 0.0;
  std::size_t dim = 0;
  std::size_t classes = 0;
  // Pooling applied to the features at fit time; scoring reuses it so the
  // two sides can never disagree.
  std::optional<PoolSpec> pool;

  // Builds the factorization from externally computed moments.
  static GaussianStats from_moments(std::vector<double> means, std::vector<double> cov,
                                    std::size_t classes, std::size_t dim);

  // max_c of -(z - mu_c)' (cov + ridge*I)^-1 (z - mu_c), via triangular
  // solves against the stored factor. Never positive. closest, when given,
  // receives the argmax class.
  double score_one(const double* z, int* closest = nullptr) const;
};

GaussianStats fit_gaussian_stats(const nn::Classifier& clf, const data::LabeledSet& train_set,
                                 const std::optional<PoolSpec>& pool = std::nullopt,
                                 std::vector<std::string>* notices = nullptr);

// id_score = max class posterior at temperature tau; prediction = argmax.
std::vector<ScoredSample> mcp_score(const nn::Classifier& clf, const double* x, std::size_t n,
                                    double tau = 1.0);

// id_score = score_one over the (optionally pooled) hidden features. The
// predicted class stays the classifier's own argmax posterior; the distance
// only ranks in-distribution-ness.
std::vector<ScoredSample> mahalanobis_score(const GaussianStats& stats,
                                            const nn::Classifier& clf, const double* x,
                                            std::size_t n);

// x - epsilon * sign(-grad_x log max_c posterior(x; tau_train)), with
// sign(0) = 0. epsilon = 0 returns the input bytes unchanged.
std::vector<double> odin_perturb(const nn::Classifier& clf, const double* x, std::size_t n,
                                 double epsilon, double tau_train = 1.0);

// Max posterior of the perturbed input at temperature tau_prime. The two
// single-knob variants are epsilon = 0 (temperature only) and tau_prime = 1
// (perturbation only).
std::vector<ScoredSample> odin_score(const nn::Classifier& clf, const double* x, std::size_t n,
                                     double epsilon = 0.01, double tau_prime = 1000.0);

// Max of the posterior averaged over n_passes dropout-active forwards. With
// dropout_p = 0 this collapses to mcp_score exactly, and a notice is
// recorded.
std::vector<ScoredSample> mcdp_score(const nn::Classifier& clf, const double* x, std::size_t n,
                                     std::size_t n_passes = 32, std::uint64_t seed = 0,
                                     std::vector<std::string>* notices = nullptr);

// How ensemble members' Mahalanobis scores combine into one.
enum class Consensus { Mean, Min, Median };

const char* consensus_name(Consensus c);

// Max of the member-averaged posterior.
std::vector<ScoredSample> ensemble_mcp_score(std::span<const nn::Classifier> members,
                                             const double* x, std::size_t n, double tau = 1.0);

// Combines per-member score_one values; the prediction is the argmax of the
// member-averaged posterior, as in the mcp variant.
std::vector<ScoredSample> ensemble_mahalanobis_score(std::span<const nn::Classifier> members,
                                                     std::span<const GaussianStats> stats,
                                                     const double* x, std::size_t n,
                                                     Consensus consensus = Consensus::Mean);

// Whether a method's id_score is a probability (usable as an ECE
// confidence). Distance-based scores are not.
bool probability_scored(const std::string& method);

// CSV with one row per sample: sample_id,method,id_score,is_ood,
// predicted_class,true_class. id_score carries 17 significant digits so the
// exact double survives a round trip; true_class is -1 for unlabeled rows.
void write_scores_csv(std::ostream& out, std::span<const ScoredSample> samples,
                      std::span<const int> true_class);

struct ScoresFile {
  std::vector<ScoredSample> samples;
  std::vector<int> true_class;
};

ScoresFile read_scores_csv(std::istream& in, const std::string& name);

} // namespace ood::scores
