#include "ood/nn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ood/errors.hpp"
#include "ood/kernels.hpp"
#include "ood/seeding.hpp"

namespace ood::nn {

namespace ad = ood::autodiff;
namespace ker = ood::kernels;

namespace {

std::atomic<std::uint64_t> g_training_runs{0};

void he_uniform(std::vector<double>& w, std::size_t fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& x : w) x = dist(rng);
}

void sgd_step(std::vector<double>& p, std::span<const double> g, std::vector<double>& v,
              double lr, double momentum, double weight_decay) {
  if (v.empty()) v.assign(p.size(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i] + weight_decay * p[i];
    v[i] = momentum * v[i] + gi;
    p[i] -= lr * v[i];
  }
}

void check_finite(const std::vector<double>& p, const char* what) {
  for (double x : p) {
    if (!std::isfinite(x)) throw TrainError(std::string(what) + " became non-finite");
  }
}

nlohmann::json config_to_json(const MlpConfig& cfg) {
  nlohmann::json j;
  j["input_dim"] = cfg.input_dim;
  j["hidden_dims"] = cfg.hidden_dims;
  j["num_classes"] = cfg.num_classes;
  j["dropout_p"] = cfg.dropout_p;
  j["lr"] = cfg.lr;
  j["momentum"] = cfg.momentum;
  j["weight_decay"] = cfg.weight_decay;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  if (cfg.feature_shape) {
    j["feature_shape"] = *cfg.feature_shape;
  } else {
    j["feature_shape"] = nullptr;
  }
  return j;
}

MlpConfig config_from_json(const nlohmann::json& j) {
  MlpConfig cfg;
  cfg.input_dim = j.at("input_dim").get<std::size_t>();
  cfg.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  cfg.num_classes = j.at("num_classes").get<std::size_t>();
  cfg.dropout_p = j.at("dropout_p").get<double>();
  cfg.lr = j.at("lr").get<double>();
  cfg.momentum = j.at("momentum").get<double>();
  cfg.weight_decay = j.at("weight_decay").get<double>();
  cfg.epochs = j.at("epochs").get<std::size_t>();
  cfg.batch_size = j.at("batch_size").get<std::size_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("feature_shape").is_null()) {
    cfg.feature_shape = j.at("feature_shape").get<std::array<std::size_t, 3>>();
  }
  return cfg;
}

nlohmann::json layers_to_json(const std::vector<Classifier::Layer>& layers) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& l : layers) {
    out.push_back({{"in", l.in}, {"out", l.out}, {"w", l.w}, {"b", l.b}});
  }
  return out;
}

std::vector<Classifier::Layer> layers_from_json(const nlohmann::json& j) {
  std::vector<Classifier::Layer> layers;
  for (const auto& lj : j) {
    Classifier::Layer l;
    l.in = lj.at("in").get<std::size_t>();
    l.out = lj.at("out").get<std::size_t>();
    l.w = lj.at("w").get<std::vector<double>>();
    l.b = lj.at("b").get<std::vector<double>>();
    if (l.w.size() != l.in * l.out || l.b.size() != l.out) {
      throw ParseError("checkpoint: layer value counts do not match its dimensions");
    }
    layers.push_back(std::move(l));
  }
  return layers;
}

nlohmann::json load_checkpoint_json(const std::string& path, const char* expected_kind) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("checkpoint " + path + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "oodkit-model") {
      throw ParseError("checkpoint " + path + ": unrecognized format tag");
    }
    if (j.at("version").get<int>() != 1) {
      throw ParseError("checkpoint " + path + ": unsupported version");
    }
    if (expected_kind && j.at("kind").get<std::string>() != expected_kind) {
      throw ParseError("checkpoint " + path + ": kind is '" +
                       j.at("kind").get<std::string>() + "', expected '" + expected_kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path + ": " + e.what());
  }
  return j;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::vector<double> gather_rows(const double* x, std::size_t dim,
                                const std::vector<std::size_t>& idx, std::size_t begin,
                                std::size_t end) {
  std::vector<double> out;
  out.reserve((end - begin) * dim);
  for (std::size_t i = begin; i < end; ++i) {
    const double* row = x + idx[i] * dim;
    out.insert(out.end(), row, row + dim);
  }
  return out;
}

} // namespace

void MlpConfig::validate() const {
  if (input_dim == 0) throw ValueError("model config: input_dim must be positive");
  if (num_classes < 2) throw ValueError("model config: need at least 2 classes");
  for (std::size_t h : hidden_dims) {
    if (h == 0) throw ValueError("model config: hidden layer width must be positive");
  }
  if (!(dropout_p >= 0.0) || dropout_p >= 1.0) {
    throw ValueError("model config: dropout_p must be in [0, 1)");
  }
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValueError("model config: lr must be positive");
  if (!(momentum >= 0.0) || momentum > 1.0) {
    throw ValueError("model config: momentum must be in [0, 1]");
  }
  if (!(weight_decay >= 0.0)) throw ValueError("model config: weight_decay must be >= 0");
  if (epochs == 0) throw ValueError("model config: epochs must be positive");
  if (batch_size == 0) throw ValueError("model config: batch_size must be positive");
  if (feature_shape) {
    const std::size_t feat = hidden_dims.empty() ? input_dim : hidden_dims.back();
    const std::size_t prod = (*feature_shape)[0] * (*feature_shape)[1] * (*feature_shape)[2];
    if (prod != feat) {
      throw ValueError("model config: feature_shape product " + std::to_string(prod) +
                       " does not match the feature dimension " + std::to_string(feat));
    }
  }
}

Classifier::Classifier(MlpConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(derive_seed(cfg_.seed, 0));
  std::size_t in = cfg_.input_dim;
  auto add_layer = [&](std::size_t out) {
    Layer l;
    l.in = in;
    l.out = out;
    l.w.resize(in * out);
    l.b.assign(out, 0.0);
    he_uniform(l.w, in, rng);
    layers_.push_back(std::move(l));
    in = out;
  };
  for (std::size_t h : cfg_.hidden_dims) add_layer(h);
  add_layer(cfg_.num_classes);
}

std::size_t Classifier::feature_dim() const {
  return cfg_.hidden_dims.empty() ? cfg_.input_dim : cfg_.hidden_dims.back();
}

Classifier::TapeParams Classifier::params_on(ad::Tape& tape, bool requires_grad) const {
  TapeParams p;
  for (const Layer& l : layers_) {
    p.weights.push_back(tape.leaf({l.in, l.out}, l.w, requires_grad));
    p.biases.push_back(tape.leaf({l.out}, l.b, requires_grad));
  }
  return p;
}

ad::Tensor Classifier::build_hidden(ad::Tape& tape, ad::Tensor x, const TapeParams& params,
                                    bool dropout_active, std::mt19937_64* rng) const {
  if (dropout_active && cfg_.dropout_p > 0.0 && !rng) {
    throw UsageError("build_hidden: dropout requires an rng");
  }
  ad::Tensor h = x;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
    h = tape.relu(tape.add_rowvec(tape.matmul(h, params.weights[l]), params.biases[l]));
    if (dropout_active && cfg_.dropout_p > 0.0) {
      h = tape.dropout(h, cfg_.dropout_p, *rng);
    }
  }
  return h;
}

ad::Tensor Classifier::build_logits(ad::Tape& tape, ad::Tensor x, const TapeParams& params,
                                    bool dropout_active, std::mt19937_64* rng) const {
  ad::Tensor h = build_hidden(tape, x, params, dropout_active, rng);
  const std::size_t last = layers_.size() - 1;
  return tape.add_rowvec(tape.matmul(h, params.weights[last]), params.biases[last]);
}

ForwardOut Classifier::forward(const double* x, std::size_t n, double tau, bool dropout_active,
                               std::mt19937_64* rng) const {
  if (n == 0) throw UsageError("forward: empty batch");
  ad::Tape tape;
  const TapeParams params = params_on(tape, false);
  ad::Tensor xt = tape.leaf({n, cfg_.input_dim},
                            std::vector<double>(x, x + n * cfg_.input_dim), false);
  ad::Tensor h = build_hidden(tape, xt, params, dropout_active, rng);
  const std::size_t last = layers_.size() - 1;
  ad::Tensor logits = tape.add_rowvec(tape.matmul(h, params.weights[last]), params.biases[last]);
  ad::Tensor post = tape.softmax(logits, tau);

  ForwardOut out;
  out.n = n;
  out.classes = cfg_.num_classes;
  out.feature_dim = feature_dim();
  out.logits.assign(logits.values().begin(), logits.values().end());
  out.posteriors.assign(post.values().begin(), post.values().end());
  out.hidden.assign(h.values().begin(), h.values().end());
  return out;
}

void Classifier::save(const std::string& path) const {
  nlohmann::json j;
  j["format"] = "oodkit-model";
  j["version"] = 1;
  j["kind"] = "mlp";
  j["config"] = config_to_json(cfg_);
  j["layers"] = layers_to_json(layers_);
  write_json_file(path, j);
}

Classifier Classifier::load(const std::string& path) {
  const auto j = load_checkpoint_json(path, "mlp");
  try {
    Classifier clf(config_from_json(j.at("config")));
    auto layers = layers_from_json(j.at("layers"));
    if (layers.size() != clf.layers_.size()) {
      throw ParseError("checkpoint " + path + ": layer count does not match the config");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].in != clf.layers_[i].in || layers[i].out != clf.layers_[i].out) {
        throw ParseError("checkpoint " + path + ": layer dimensions do not match the config");
      }
    }
    clf.layers_ = std::move(layers);
    return clf;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path + ": " + e.what());
  }
}

TrainResult train(Classifier& clf, const data::LabeledSet& train_set) {
  const MlpConfig& cfg = clf.config();
  if (train_set.n == 0) throw UsageError("train: empty training set");
  if (train_set.labels.size() != train_set.n) {
    throw UsageError("train: training set must be fully labeled");
  }
  if (train_set.dim != cfg.input_dim) {
    throw ShapeError("train: data dim " + std::to_string(train_set.dim) +
                     " does not match model input_dim " + std::to_string(cfg.input_dim));
  }
  for (int label : train_set.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= cfg.num_classes) {
      throw ValueError("train: label " + std::to_string(label) + " outside [0, " +
                       std::to_string(cfg.num_classes) + ")");
    }
  }

  std::mt19937_64 rng(derive_seed(cfg.seed, 1));
  std::vector<std::size_t> order(train_set.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::vector<double>> velocity(2 * clf.layers().size());

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < train_set.n; start += cfg.batch_size) {
      const std::size_t end = std::min(train_set.n, start + cfg.batch_size);
      const std::size_t b = end - start;
      auto batch_x = gather_rows(train_set.features.data(), train_set.dim, order, start, end);
      std::vector<int> batch_y(b);
      for (std::size_t i = 0; i < b; ++i) batch_y[i] = train_set.labels[order[start + i]];

      ad::Tape tape;
      const auto params = clf.params_on(tape, true);
      ad::Tensor x = tape.leaf({b, train_set.dim}, std::move(batch_x), false);
      ad::Tensor logits = clf.build_logits(tape, x, params, cfg.dropout_p > 0.0, &rng);
      ad::Tensor loss = tape.cross_entropy_with_logits(logits, batch_y);
      tape.backward(loss);
      loss_sum += loss.value() * static_cast<double>(b);

      for (std::size_t l = 0; l < clf.layers().size(); ++l) {
        sgd_step(clf.layers()[l].w, params.weights[l].grad(), velocity[2 * l], cfg.lr,
                 cfg.momentum, cfg.weight_decay);
        sgd_step(clf.layers()[l].b, params.biases[l].grad(), velocity[2 * l + 1], cfg.lr,
                 cfg.momentum, cfg.weight_decay);
      }
    }
    const double mean_loss = loss_sum / static_cast<double>(train_set.n);
    if (!std::isfinite(mean_loss)) {
      throw TrainError("training diverged at epoch " + std::to_string(epoch));
    }
    result.epoch_loss.push_back(mean_loss);
  }
  for (const auto& l : clf.layers()) {
    check_finite(l.w, "layer weights");
    check_finite(l.b, "layer biases");
  }
  ++g_training_runs;
  return result;
}

std::uint64_t training_run_count() { return g_training_runs.load(); }
void reset_training_run_count() { g_training_runs.store(0); }

std::vector<Classifier> train_ensemble(const MlpConfig& base, const data::LabeledSet& train_set,
                                       std::size_t members) {
  if (members == 0) throw UsageError("train_ensemble: need at least one member");
  std::vector<Classifier> out;
  out.reserve(members);
  for (std::size_t m = 0; m < members; ++m) {
    MlpConfig cfg = base;
    cfg.seed = derive_seed(base.seed, 100 + m);
    Classifier clf(cfg);
    train(clf, train_set);
    out.push_back(std::move(clf));
  }
  return out;
}

void DuqConfig::validate() const {
  backbone.validate();
  if (embedding_dim == 0) throw ValueError("duq config: embedding_dim must be positive");
  if (length_scale < 0.0) throw ValueError("duq config: length_scale must be >= 0");
  if (!(centroid_momentum >= 0.0) || centroid_momentum > 1.0) {
    throw ValueError("duq config: centroid_momentum must be in [0, 1]");
  }
  if (penalty_weight < 0.0) throw ValueError("duq config: penalty_weight must be >= 0");
  if (!(fd_epsilon > 0.0)) throw ValueError("duq config: fd_epsilon must be positive");
}

DuqModel::DuqModel(DuqConfig cfg) : cfg_(std::move(cfg)), backbone_(cfg_.backbone) {
  cfg_.validate();
  const std::size_t f = backbone_.feature_dim();
  const std::size_t c = cfg_.backbone.num_classes;
  sigma_ = cfg_.length_scale > 0.0 ? cfg_.length_scale : 0.1 * std::sqrt(static_cast<double>(f));
  std::mt19937_64 rng(derive_seed(cfg_.backbone.seed, 2));
  // Projection scale is tied to the length scale: with unit-variance
  // features this puts initial embedding distances near sigma, so the
  // kernels start in a range where the loss still has gradient instead of
  // underflowing to zero.
  const double limit =
      sigma_ * std::sqrt(3.0 / static_cast<double>(f * cfg_.embedding_dim));
  std::uniform_real_distribution<double> dist(-limit, limit);
  class_w_.resize(c);
  for (auto& w : class_w_) {
    w.resize(f * cfg_.embedding_dim);
    for (double& v : w) v = dist(rng);
  }
  centroids_.assign(c * cfg_.embedding_dim, 0.0);
}

namespace {

struct DuqGraphParams {
  Classifier::TapeParams backbone;
  std::vector<ad::Tensor> class_w;
  std::vector<ad::Tensor> neg_centroids;
};

DuqGraphParams duq_params_on(ad::Tape& tape, const DuqModel& m, bool requires_grad) {
  DuqGraphParams p;
  p.backbone = m.backbone().params_on(tape, requires_grad);
  const std::size_t f = m.backbone().feature_dim();
  const std::size_t e = m.config().embedding_dim;
  const std::size_t c = m.config().backbone.num_classes;
  for (std::size_t k = 0; k < c; ++k) {
    p.class_w.push_back(tape.leaf({f, e}, m.class_weights()[k], requires_grad));
    std::vector<double> neg_mu(e);
    for (std::size_t i = 0; i < e; ++i) neg_mu[i] = -m.centroids()[k * e + i];
    p.neg_centroids.push_back(tape.leaf({e}, std::move(neg_mu), false));
  }
  return p;
}

// K columns, one per class: exp(-|W_c' h - mu_c|^2 / (2 sigma^2))
ad::Tensor duq_kernel_graph(ad::Tape& tape, const DuqModel& m, const DuqGraphParams& p,
                            ad::Tensor x, bool dropout_active, std::mt19937_64* rng) {
  ad::Tensor h = m.backbone().build_hidden(tape, x, p.backbone, dropout_active, rng);
  const double inv = -1.0 / (2.0 * m.length_scale() * m.length_scale());
  std::vector<ad::Tensor> cols;
  for (std::size_t c = 0; c < p.class_w.size(); ++c) {
    ad::Tensor diff = tape.add_rowvec(tape.matmul(h, p.class_w[c]), p.neg_centroids[c]);
    ad::Tensor d2 = tape.sum_rows(tape.mul(diff, diff));
    cols.push_back(tape.exp(tape.scale(d2, inv)));
  }
  return tape.hstack(cols);
}

// Post-step class means of the embeddings, for the centroid update.
std::vector<double> embed_class(const DuqModel& m, const std::vector<double>& hidden,
                                std::size_t n, std::size_t cls) {
  const std::size_t f = m.backbone().feature_dim();
  const std::size_t e = m.config().embedding_dim;
  const std::vector<double>& w = m.class_weights()[cls];
  std::vector<double> out(n * e, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* h = hidden.data() + i * f;
    double* row = out.data() + i * e;
    for (std::size_t p = 0; p < f; ++p) {
      ker::axpy(h[p], w.data() + p * e, row, e);
    }
  }
  return out;
}

} // namespace

std::vector<double> DuqModel::kernels(const double* x, std::size_t n) const {
  if (n == 0) throw UsageError("duq kernels: empty batch");
  ad::Tape tape;
  const auto p = duq_params_on(tape, *this, false);
  ad::Tensor xt = tape.leaf({n, cfg_.backbone.input_dim},
                            std::vector<double>(x, x + n * cfg_.backbone.input_dim), false);
  ad::Tensor k = duq_kernel_graph(tape, *this, p, xt, false, nullptr);
  return {k.values().begin(), k.values().end()};
}

DuqStepResult duq_train_step(DuqModel& model, const double* x, const int* labels, std::size_t n,
                             SgdState& opt, std::mt19937_64& rng) {
  if (n == 0) throw UsageError("duq step: empty batch");
  const DuqConfig& dcfg = model.config();
  const MlpConfig& hp = dcfg.backbone;
  const std::size_t classes = hp.num_classes;
  const std::size_t dim = hp.input_dim;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ValueError("duq step: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }

  ad::Tape tape;
  auto p = duq_params_on(tape, model, true);
  std::vector<double> xv(x, x + n * dim);
  ad::Tensor xt = tape.leaf({n, dim}, xv, false);
  const bool use_dropout = hp.dropout_p > 0.0;
  ad::Tensor k = duq_kernel_graph(tape, model, p, xt, use_dropout, &rng);

  std::vector<double> targets(n * classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) targets[i * classes + labels[i]] = 1.0;
  ad::Tensor bce = tape.bce_mean(k, targets);

  ad::Tensor loss = bce;
  double penalty_value = 0.0;
  if (dcfg.penalty_weight > 0.0) {
    // two-sided finite difference of E(x) = sum_c K_c along every input
    // axis; the difference forwards run without dropout so both sides see
    // the same function
    const double eps = dcfg.fd_epsilon;
    ad::Tensor grad_sq;
    for (std::size_t d = 0; d < dim; ++d) {
      std::vector<double> xp = xv, xm = xv;
      for (std::size_t i = 0; i < n; ++i) {
        xp[i * dim + d] += eps;
        xm[i * dim + d] -= eps;
      }
      ad::Tensor ep = tape.sum_rows(
          duq_kernel_graph(tape, model, p, tape.leaf({n, dim}, std::move(xp), false), false,
                           nullptr));
      ad::Tensor em = tape.sum_rows(
          duq_kernel_graph(tape, model, p, tape.leaf({n, dim}, std::move(xm), false), false,
                           nullptr));
      ad::Tensor gd = tape.scale(tape.sub(ep, em), 1.0 / (2.0 * eps));
      ad::Tensor sq = tape.mul(gd, gd);
      grad_sq = grad_sq.valid() ? tape.add(grad_sq, sq) : sq;
    }
    ad::Tensor excess = tape.add_scalar(grad_sq, -1.0);
    ad::Tensor pen = tape.scale(tape.sum(tape.mul(excess, excess)),
                                dcfg.penalty_weight / static_cast<double>(n));
    penalty_value = pen.value();
    loss = tape.add(bce, pen);
  }

  tape.backward(loss);

  // hidden layers of the backbone plus the per-class projections; the unused
  // softmax head stays untouched
  const std::size_t n_hidden = model.backbone().layers().size() - 1;
  if (opt.velocity.empty()) opt.velocity.resize(2 * n_hidden + classes);
  for (std::size_t l = 0; l < n_hidden; ++l) {
    sgd_step(model.backbone().layers()[l].w, p.backbone.weights[l].grad(), opt.velocity[2 * l],
             hp.lr, hp.momentum, hp.weight_decay);
    sgd_step(model.backbone().layers()[l].b, p.backbone.biases[l].grad(),
             opt.velocity[2 * l + 1], hp.lr, hp.momentum, hp.weight_decay);
  }
  for (std::size_t c = 0; c < classes; ++c) {
    sgd_step(model.class_weights()[c], p.class_w[c].grad(), opt.velocity[2 * n_hidden + c],
             hp.lr, hp.momentum, hp.weight_decay);
  }

  // exponential centroid update from post-step embeddings; absent classes
  // keep their centroid
  const double gamma = dcfg.centroid_momentum;
  if (gamma < 1.0) {
    const ForwardOut post = model.backbone().forward(x, n);
    const std::size_t e = dcfg.embedding_dim;
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < n; ++i) {
        if (static_cast<std::size_t>(labels[i]) == c) members.push_back(i);
      }
      if (members.empty()) continue;
      const auto emb = embed_class(model, post.hidden, n, c);
      std::vector<double> mean(e, 0.0);
      for (std::size_t i : members) {
        ker::add(mean.data(), emb.data() + i * e, mean.data(), e);
      }
      const double inv = 1.0 / static_cast<double>(members.size());
      for (double& v : mean) v *= inv;
      double* mu = model.centroids().data() + c * e;
      for (std::size_t i = 0; i < e; ++i) mu[i] = gamma * mu[i] + (1.0 - gamma) * mean[i];
    }
  }

  return {bce.value(), penalty_value};
}

DuqTrainResult duq_train(DuqModel& model, const data::LabeledSet& train_set) {
  const MlpConfig& hp = model.config().backbone;
  if (train_set.n == 0) throw UsageError("duq train: empty training set");
  if (train_set.labels.size() != train_set.n) {
    throw UsageError("duq train: training set must be fully labeled");
  }
  if (train_set.dim != hp.input_dim) {
    throw ShapeError("duq train: data dim " + std::to_string(train_set.dim) +
                     " does not match model input_dim " + std::to_string(hp.input_dim));
  }

  // seed the centroids with the initial class means so the exponential
  // update tracks from a sensible origin instead of zero
  {
    const ForwardOut fo = model.backbone().forward(train_set.features.data(), train_set.n);
    const std::size_t e = model.config().embedding_dim;
    for (std::size_t c = 0; c < hp.num_classes; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < train_set.n; ++i) {
        if (train_set.labels[i] == static_cast<int>(c)) members.push_back(i);
      }
      if (members.empty()) continue;
      const auto emb = embed_class(model, fo.hidden, train_set.n, c);
      double* mu = model.centroids().data() + c * e;
      std::fill(mu, mu + e, 0.0);
      for (std::size_t i : members) ker::add(mu, emb.data() + i * e, mu, e);
      const double inv = 1.0 / static_cast<double>(members.size());
      for (std::size_t i = 0; i < e; ++i) mu[i] *= inv;
    }
  }

  std::mt19937_64 rng(derive_seed(hp.seed, 3));
  std::vector<std::size_t> order(train_set.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SgdState opt;

  DuqTrainResult result;
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < train_set.n; start += hp.batch_size) {
      const std::size_t end = std::min(train_set.n, start + hp.batch_size);
      const std::size_t b = end - start;
      auto batch_x = gather_rows(train_set.features.data(), train_set.dim, order, start, end);
      std::vector<int> batch_y(b);
      for (std::size_t i = 0; i < b; ++i) batch_y[i] = train_set.labels[order[start + i]];
      const DuqStepResult step = duq_train_step(model, batch_x.data(), batch_y.data(), b, opt, rng);
      loss_sum += (step.bce + step.penalty) * static_cast<double>(b);
    }
    const double mean_loss = loss_sum / static_cast<double>(train_set.n);
    if (!std::isfinite(mean_loss)) {
      throw TrainError("duq training diverged at epoch " + std::to_string(epoch));
    }
    result.epoch_loss.push_back(mean_loss);
  }
  ++g_training_runs;
  return result;
}

DuqScores duq_score(const DuqModel& model, const double* x, std::size_t n) {
  const std::size_t classes = model.config().backbone.num_classes;
  const auto k = model.kernels(x, n);
  DuqScores out;
  out.max_kernel.resize(n);
  out.predicted.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = k.data() + i * classes;
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out.max_kernel[i] = row[best];
    out.predicted[i] = static_cast<int>(best);
  }
  return out;
}

void DuqModel::save(const std::string& path) const {
  nlohmann::json j;
  j["format"] = "oodkit-model";
  j["version"] = 1;
  j["kind"] = "duq";
  j["config"] = config_to_json(cfg_.backbone);
  j["layers"] = layers_to_json(backbone_.layers());
  j["duq"] = {{"embedding_dim", cfg_.embedding_dim},
              {"length_scale", sigma_},
              {"centroid_momentum", cfg_.centroid_momentum},
              {"penalty_weight", cfg_.penalty_weight},
              {"fd_epsilon", cfg_.fd_epsilon},
              {"class_weights", class_w_},
              {"centroids", centroids_}};
  write_json_file(path, j);
}

DuqModel DuqModel::load(const std::string& path) {
  const auto j = load_checkpoint_json(path, "duq");
  try {
    DuqConfig cfg;
    cfg.backbone = config_from_json(j.at("config"));
    const auto& dj = j.at("duq");
    cfg.embedding_dim = dj.at("embedding_dim").get<std::size_t>();
    cfg.length_scale = dj.at("length_scale").get<double>();
    cfg.centroid_momentum = dj.at("centroid_momentum").get<double>();
    cfg.penalty_weight = dj.at("penalty_weight").get<double>();
    cfg.fd_epsilon = dj.at("fd_epsilon").get<double>();

    DuqModel model(cfg);
    auto layers = layers_from_json(j.at("layers"));
    if (layers.size() != model.backbone_.layers().size()) {
      throw ParseError("checkpoint " + path + ": layer count does not match the config");
    }
    model.backbone_.layers() = std::move(layers);
    auto cw = dj.at("class_weights").get<std::vector<std::vector<double>>>();
    auto mu = dj.at("centroids").get<std::vector<double>>();
    const std::size_t f = model.backbone_.feature_dim();
    if (cw.size() != cfg.backbone.num_classes ||
        mu.size() != cfg.backbone.num_classes * cfg.embedding_dim) {
      throw ParseError("checkpoint " + path + ": head value counts do not match the config");
    }
    for (const auto& w : cw) {
      if (w.size() != f * cfg.embedding_dim) {
        throw ParseError("checkpoint " + path + ": head value counts do not match the config");
      }
    }
    model.class_w_ = std::move(cw);
    model.centroids_ = std::move(mu);
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path + ": " + e.what());
  }
}

std::string checkpoint_kind(const std::string& path) {
  const auto j = load_checkpoint_json(path, nullptr);
  return j.at("kind").get<std::string>();
}

} // namespace ood::nn
