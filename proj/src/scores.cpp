#include "ood/scores.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>

#include "ood/autodiff.hpp"
#include "ood/errors.hpp"
#include "ood/kernels.hpp"

namespace ood::scores {

namespace ad = ood::autodiff;
namespace ker = ood::kernels;

namespace {

// Lower Cholesky factor of a; false when a is not positive definite.
bool cholesky_lower(const std::vector<double>& a, std::size_t z, std::vector<double>& l) {
  l.assign(z * z, 0.0);
  for (std::size_t j = 0; j < z; ++j) {
    double d = a[j * z + j];
    for (std::size_t k = 0; k < j; ++k) d -= l[j * z + k] * l[j * z + k];
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    l[j * z + j] = ljj;
    for (std::size_t i = j + 1; i < z; ++i) {
      double s = a[i * z + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * z + k] * l[j * z + k];
      l[i * z + j] = s / ljj;
    }
  }
  return true;
}

int argmax_row(const double* row, std::size_t c) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < c; ++i) {
    if (row[i] > row[best]) best = i;
  }
  return static_cast<int>(best);
}

// Feature rows a scorer should hand to score_one: the hidden activations,
// pooled the same way the stats were fitted.
std::vector<double> stats_features(const GaussianStats& stats, const nn::Classifier& clf,
                                   const nn::ForwardOut& fo) {
  if (!stats.pool) {
    if (fo.feature_dim != stats.dim) {
      throw ShapeError("mahalanobis: feature dim " + std::to_string(fo.feature_dim) +
                       " does not match the fitted stats dim " + std::to_string(stats.dim));
    }
    return fo.hidden;
  }
  if (!clf.config().feature_shape) {
    throw UsageError("mahalanobis: stats were fitted on pooled features but the classifier "
                     "has no feature shape");
  }
  auto pooled = max_pool(fo.hidden.data(), fo.n, *clf.config().feature_shape, *stats.pool);
  if (pooled.size() != fo.n * stats.dim) {
    throw ShapeError("mahalanobis: pooled feature dim does not match the fitted stats");
  }
  return pooled;
}

void format_score(double v, std::string& out) {
  char buf[64];
  const int len = std::snprintf(buf, sizeof buf, "%.17g", v);
  out.append(buf, static_cast<std::size_t>(len));
}

} // namespace

std::vector<double> max_pool(const double* features, std::size_t n,
                             const std::array<std::size_t, 3>& shape, const PoolSpec& pool,
                             std::array<std::size_t, 3>* out_shape) {
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  if (c == 0 || h == 0 || w == 0) throw ValueError("max_pool: feature shape must be positive");
  if (pool.kernel_h == 0 || pool.kernel_w == 0 || pool.stride == 0) {
    throw ValueError("max_pool: kernel and stride must be positive");
  }
  if (pool.kernel_h > h || pool.kernel_w > w) {
    throw UsageError("max_pool: kernel " + std::to_string(pool.kernel_h) + "x" +
                     std::to_string(pool.kernel_w) + " does not fit in " + std::to_string(h) +
                     "x" + std::to_string(w));
  }
  const std::size_t oh = (h - pool.kernel_h) / pool.stride + 1;
  const std::size_t ow = (w - pool.kernel_w) / pool.stride + 1;
  if (out_shape) *out_shape = {c, oh, ow};

  std::vector<double> out(n * c * oh * ow);
  for (std::size_t row = 0; row < n; ++row) {
    const double* in = features + row * c * h * w;
    double* dst = out.data() + row * c * oh * ow;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = in + ch * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double m = plane[oy * pool.stride * w + ox * pool.stride];
          for (std::size_t ky = 0; ky < pool.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < pool.kernel_w; ++kx) {
              const double v = plane[(oy * pool.stride + ky) * w + (ox * pool.stride + kx)];
              if (v > m) m = v;
            }
          }
          dst[ch * oh * ow + oy * ow + ox] = m;
        }
      }
    }
  }
  return out;
}

GaussianStats GaussianStats::from_moments(std::vector<double> means, std::vector<double> cov,
                                          std::size_t classes, std::size_t dim) {
  if (classes == 0 || dim == 0) throw ValueError("gaussian stats: empty moments");
  if (means.size() != classes * dim || cov.size() != dim * dim) {
    throw ShapeError("gaussian stats: moment sizes do not match classes x dim");
  }
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = i + 1; j < dim; ++j) {
      const double a = cov[i * dim + j], b = cov[j * dim + i];
      if (std::abs(a - b) > 1e-10 * std::max({1.0, std::abs(a), std::abs(b)})) {
        throw ValueError("gaussian stats: covariance is not symmetric");
      }
    }
  }

  double trace = 0.0;
  for (std::size_t i = 0; i < dim; ++i) trace += cov[i * dim + i];

  GaussianStats stats;
  stats.classes = classes;
  stats.dim = dim;
  stats.class_means = std::move(means);
  stats.tied_cov = std::move(cov);

  // A zero covariance (single-point classes) has zero trace, so start from
  // an absolute floor in that case.
  double ridge = 1e-6 * trace / static_cast<double>(dim);
  if (!(ridge > 0.0)) ridge = 1e-6;
  std::vector<double> work(dim * dim);
  for (int attempt = 0; attempt < 64; ++attempt) {
    work = stats.tied_cov;
    for (std::size_t i = 0; i < dim; ++i) work[i * dim + i] += ridge;
    if (cholesky_lower(work, dim, stats.chol)) {
      stats.ridge = ridge;
      return stats;
    }
    ridge *= 10.0;
  }
  throw TrainError("gaussian stats: covariance could not be factorized even with ridge");
}

GaussianStats fit_gaussian_stats(const nn::Classifier& clf, const data::LabeledSet& train_set,
                                 const std::optional<PoolSpec>& pool,
                                 std::vector<std::string>* notices) {
  if (train_set.n == 0) throw UsageError("gaussian stats: empty training set");
  if (train_set.labels.size() != train_set.n) {
    throw UsageError("gaussian stats: training set must be fully labeled");
  }
  const std::size_t classes = clf.config().num_classes;
  for (int label : train_set.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ValueError("gaussian stats: label " + std::to_string(label) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }

  const auto fo = clf.forward(train_set.features.data(), train_set.n);
  std::vector<double> feats = fo.hidden;
  std::size_t dim = fo.feature_dim;
  std::optional<PoolSpec> applied;
  if (pool) {
    if (clf.config().feature_shape) {
      std::array<std::size_t, 3> pooled_shape{};
      feats = max_pool(feats.data(), train_set.n, *clf.config().feature_shape, *pool,
                       &pooled_shape);
      dim = pooled_shape[0] * pooled_shape[1] * pooled_shape[2];
      applied = pool;
    } else if (notices) {
      notices->push_back("pooling skipped: features carry no spatial shape");
    }
  }

  std::vector<std::size_t> counts(classes, 0);
  for (int label : train_set.labels) ++counts[static_cast<std::size_t>(label)];
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) {
      throw ValueError("gaussian stats: class " + std::to_string(c) +
                       " has no training samples");
    }
  }

  std::vector<double> means(classes * dim, 0.0);
  for (std::size_t i = 0; i < train_set.n; ++i) {
    const auto c = static_cast<std::size_t>(train_set.labels[i]);
    ker::add(means.data() + c * dim, feats.data() + i * dim, means.data() + c * dim, dim);
  }
  for (std::size_t c = 0; c < classes; ++c) {
    const double inv = 1.0 / static_cast<double>(counts[c]);
    for (std::size_t j = 0; j < dim; ++j) means[c * dim + j] *= inv;
  }

  // Tied covariance: centered second moment pooled over all classes,
  // normalized by the total count.
  std::vector<double> cov(dim * dim, 0.0);
  std::vector<double> diff(dim);
  for (std::size_t i = 0; i < train_set.n; ++i) {
    const auto c = static_cast<std::size_t>(train_set.labels[i]);
    ker::sub(feats.data() + i * dim, means.data() + c * dim, diff.data(), dim);
    for (std::size_t a = 0; a < dim; ++a) {
      for (std::size_t b = 0; b <= a; ++b) cov[a * dim + b] += diff[a] * diff[b];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(train_set.n);
  for (std::size_t a = 0; a < dim; ++a) {
    for (std::size_t b = 0; b <= a; ++b) {
      cov[a * dim + b] *= inv_n;
      cov[b * dim + a] = cov[a * dim + b];
    }
  }

  GaussianStats stats = GaussianStats::from_moments(std::move(means), std::move(cov), classes,
                                                    dim);
  stats.pool = applied;
  return stats;
}

double GaussianStats::score_one(const double* z, int* closest) const {
  std::vector<double> diff(dim), y(dim), w(dim);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t best_c = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    ker::sub(z, class_means.data() + c * dim, diff.data(), dim);
    // forward solve L y = diff, then back solve L' w = y
    for (std::size_t i = 0; i < dim; ++i) {
      double s = diff[i];
      for (std::size_t j = 0; j < i; ++j) s -= chol[i * dim + j] * y[j];
      y[i] = s / chol[i * dim + i];
    }
    for (std::size_t ii = dim; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t j = ii + 1; j < dim; ++j) s -= chol[j * dim + ii] * w[j];
      w[ii] = s / chol[ii * dim + ii];
    }
    double d2 = ker::dot(diff.data(), w.data(), dim);
    if (d2 < 0.0) d2 = 0.0;
    if (-d2 > best) {
      best = -d2;
      best_c = c;
    }
  }
  if (!std::isfinite(best)) throw ScoreError("mahalanobis: non-finite distance");
  if (closest) *closest = static_cast<int>(best_c);
  return best;
}

std::vector<ScoredSample> mcp_score(const nn::Classifier& clf, const double* x, std::size_t n,
                                    double tau) {
  const auto fo = clf.forward(x, n, tau);
  std::vector<ScoredSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = fo.posteriors.data() + i * fo.classes;
    const int pred = argmax_row(row, fo.classes);
    out[i] = {row[pred], false, pred, "mcp"};
  }
  return out;
}

std::vector<ScoredSample> mahalanobis_score(const GaussianStats& stats,
                                            const nn::Classifier& clf, const double* x,
                                            std::size_t n) {
  const auto fo = clf.forward(x, n);
  const auto feats = stats_features(stats, clf, fo);
  std::vector<ScoredSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double score = stats.score_one(feats.data() + i * stats.dim);
    const int pred = argmax_row(fo.posteriors.data() + i * fo.classes, fo.classes);
    out[i] = {score, false, pred, "mahalanobis"};
  }
  return out;
}

std::vector<double> odin_perturb(const nn::Classifier& clf, const double* x, std::size_t n,
                                 double epsilon, double tau_train) {
  if (n == 0) throw UsageError("odin_perturb: empty batch");
  if (epsilon < 0.0 || !std::isfinite(epsilon)) {
    throw ValueError("odin_perturb: epsilon must be finite and >= 0");
  }
  const std::size_t dim = clf.config().input_dim;
  std::vector<double> out(x, x + n * dim);
  if (epsilon == 0.0) return out;

  ad::Tape tape;
  const auto params = clf.params_on(tape, false);
  ad::Tensor xt = tape.leaf({n, dim}, out, true);
  ad::Tensor logits = clf.build_logits(tape, xt, params, false, nullptr);
  ad::Tensor conf = tape.row_max(tape.softmax(logits, tau_train));
  // One scalar whose per-row gradients are independent, so a single
  // backward covers the batch.
  tape.backward(tape.sum(tape.log(conf)));

  const auto g = xt.grad();
  for (std::size_t i = 0; i < n * dim; ++i) {
    if (!std::isfinite(g[i])) throw ScoreError("odin_perturb: non-finite input gradient");
    const double descent = -g[i];
    const double step = descent > 0.0 ? 1.0 : (descent < 0.0 ? -1.0 : 0.0);
    out[i] -= epsilon * step;
  }
  return out;
}

std::vector<ScoredSample> odin_score(const nn::Classifier& clf, const double* x, std::size_t n,
                                     double epsilon, double tau_prime) {
  const auto perturbed = odin_perturb(clf, x, n, epsilon);
  const auto fo = clf.forward(perturbed.data(), n, tau_prime);
  std::vector<ScoredSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = fo.posteriors.data() + i * fo.classes;
    const int pred = argmax_row(row, fo.classes);
    out[i] = {row[pred], false, pred, "odin"};
  }
  return out;
}

std::vector<ScoredSample> mcdp_score(const nn::Classifier& clf, const double* x, std::size_t n,
                                     std::size_t n_passes, std::uint64_t seed,
                                     std::vector<std::string>* notices) {
  if (n_passes == 0) throw ValueError("mcdp: need at least one pass");
  const std::size_t classes = clf.config().num_classes;
  std::vector<double> avg(n * classes, 0.0);
  if (clf.config().dropout_p == 0.0) {
    if (notices) notices->push_back("mcdp: dropout_p is 0, scores equal plain mcp");
    avg = clf.forward(x, n).posteriors;
  } else {
    std::mt19937_64 rng(seed);
    for (std::size_t pass = 0; pass < n_passes; ++pass) {
      const auto fo = clf.forward(x, n, 1.0, true, &rng);
      ker::add(avg.data(), fo.posteriors.data(), avg.data(), avg.size());
    }
    ker::scale(avg.data(), 1.0 / static_cast<double>(n_passes), avg.data(), avg.size());
  }
  std::vector<ScoredSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = avg.data() + i * classes;
    const int pred = argmax_row(row, classes);
    out[i] = {row[pred], false, pred, "mcdp"};
  }
  return out;
}

const char* consensus_name(Consensus c) {
  switch (c) {
  case Consensus::Mean: return "mean";
  case Consensus::Min: return "min";
  case Consensus::Median: return "median";
  }
  throw ValueError("unknown consensus");
}

namespace {

void check_members(std::span<const nn::Classifier> members) {
  if (members.empty()) throw UsageError("ensemble: need at least one member");
  for (const auto& m : members) {
    if (m.config().input_dim != members[0].config().input_dim ||
        m.config().num_classes != members[0].config().num_classes) {
      throw UsageError("ensemble: members have mismatched input or class dims");
    }
  }
}

// Posterior averaged over members at temperature tau.
std::vector<double> mean_posterior(std::span<const nn::Classifier> members, const double* x,
                                   std::size_t n, double tau) {
  const std::size_t classes = members[0].config().num_classes;
  std::vector<double> avg(n * classes, 0.0);
  for (const auto& m : members) {
    const auto fo = m.forward(x, n, tau);
    ker::add(avg.data(), fo.posteriors.data(), avg.data(), avg.size());
  }
  ker::scale(avg.data(), 1.0 / static_cast<double>(members.size()), avg.data(), avg.size());
  return avg;
}

} // namespace

std::vector<ScoredSample> ensemble_mcp_score(std::span<const nn::Classifier> members,
                                             const double* x, std::size_t n, double tau) {
  check_members(members);
  const std::size_t classes = members[0].config().num_classes;
  const auto avg = mean_posterior(members, x, n, tau);
  std::vector<ScoredSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = avg.data() + i * classes;
    const int pred = argmax_row(row, classes);
    out[i] = {row[pred], false, pred, "ensemble_mcp"};
  }
  return out;
}

std::vector<ScoredSample> ensemble_mahalanobis_score(std::span<const nn::Classifier> members,
                                                     std::span<const GaussianStats> stats,
                                                     const double* x, std::size_t n,
                                                     Consensus consensus) {
  check_members(members);
  if (stats.size() != members.size()) {
    throw UsageError("ensemble: need one fitted stats object per member");
  }

  // member_scores[i] holds sample i's score under every member
  std::vector<std::vector<double>> member_scores(n, std::vector<double>(members.size()));
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto fo = members[m].forward(x, n);
    const auto feats = stats_features(stats[m], members[m], fo);
    for (std::size_t i = 0; i < n; ++i) {
      member_scores[i][m] = stats[m].score_one(feats.data() + i * stats[m].dim);
    }
  }

  const std::size_t classes = members[0].config().num_classes;
  const auto avg = mean_posterior(members, x, n, 1.0);
  std::vector<ScoredSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = member_scores[i];
    double score = 0.0;
    switch (consensus) {
    case Consensus::Mean: {
      for (double v : s) score += v;
      score /= static_cast<double>(s.size());
      break;
    }
    case Consensus::Min:
      score = *std::min_element(s.begin(), s.end());
      break;
    case Consensus::Median: {
      std::sort(s.begin(), s.end());
      const std::size_t mid = s.size() / 2;
      score = s.size() % 2 == 1 ? s[mid] : 0.5 * (s[mid - 1] + s[mid]);
      break;
    }
    }
    const int pred = argmax_row(avg.data() + i * classes, classes);
    out[i] = {score, false, pred, "ensemble_mahalanobis"};
  }
  return out;
}

bool probability_scored(const std::string& method) {
  return method.find("mahalanobis") == std::string::npos;
}

void write_scores_csv(std::ostream& out, std::span<const ScoredSample> samples,
                      std::span<const int> true_class) {
  if (samples.size() != true_class.size()) {
    throw UsageError("scores csv: one true class per sample required");
  }
  std::string line;
  out << "sample_id,method,id_score,is_ood,predicted_class,true_class\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    line.clear();
    line += std::to_string(i);
    line += ',';
    line += samples[i].method;
    line += ',';
    format_score(samples[i].id_score, line);
    line += ',';
    line += samples[i].is_ood ? '1' : '0';
    line += ',';
    line += std::to_string(samples[i].predicted_class);
    line += ',';
    line += std::to_string(true_class[i]);
    line += '\n';
    out << line;
  }
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename T>
T parse_number(const std::string& field, const std::string& name, std::size_t row,
               const char* what) {
  T value{};
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last) {
    throw ParseError(name + " row " + std::to_string(row) + ": bad " + what + " '" + field +
                     "'");
  }
  return value;
}

} // namespace

ScoresFile read_scores_csv(std::istream& in, const std::string& name) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(name + ": empty file");
  if (line == "sample_id,method,id_score,is_ood,predicted_class,true_class\r") {
    line.pop_back();
  }
  if (line != "sample_id,method,id_score,is_ood,predicted_class,true_class") {
    throw ParseError(name + ": unexpected header '" + line + "'");
  }

  ScoresFile file;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != 6) {
      throw ParseError(name + " row " + std::to_string(row) + ": expected 6 fields, got " +
                       std::to_string(fields.size()));
    }
    parse_number<long>(fields[0], name, row, "sample_id");
    ScoredSample s;
    s.method = fields[1];
    if (s.method.empty()) {
      throw ParseError(name + " row " + std::to_string(row) + ": empty method");
    }
    s.id_score = parse_number<double>(fields[2], name, row, "id_score");
    if (fields[3] == "0") {
      s.is_ood = false;
    } else if (fields[3] == "1") {
      s.is_ood = true;
    } else {
      throw ParseError(name + " row " + std::to_string(row) + ": bad is_ood '" + fields[3] +
                       "'");
    }
    s.predicted_class = parse_number<int>(fields[4], name, row, "predicted_class");
    file.true_class.push_back(parse_number<int>(fields[5], name, row, "true_class"));
    file.samples.push_back(std::move(s));
  }
  return file;
}

} // namespace ood::scores
