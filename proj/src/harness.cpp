#include "ood/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "ood/errors.hpp"
#include "ood/fmtnum.hpp"
#include "ood/seeding.hpp"

namespace ood::harness {

using nlohmann::json;

namespace {

constexpr std::size_t kEceBins = 15;

// Methods in the order the report tables use.
const char* const kMethodOrder[] = {
    "mcp",  "mcdp",        "ensemble_mcp",   "mahalanobis", "ensemble_mahalanobis",
    "odin", "odin_pert_only", "odin_temp_only", "duq",
};

std::size_t method_rank(const std::string& name) {
  for (std::size_t i = 0; i < std::size(kMethodOrder); ++i)
    if (name == kMethodOrder[i]) return i;
  return std::size(kMethodOrder);
}

const char* display_name(const std::string& name) {
  if (name == "mcp") return "MCP (baseline)";
  if (name == "mcdp") return "MCDP";
  if (name == "ensemble_mcp") return "Deep Ensemble";
  if (name == "mahalanobis") return "Mahalanobis";
  if (name == "ensemble_mahalanobis") return "Mahalanobis Ens.";
  if (name == "odin") return "ODIN";
  if (name == "odin_pert_only") return "ODIN (pert. only)";
  if (name == "odin_temp_only") return "ODIN (temp. only)";
  if (name == "duq") return "DUQ";
  return name.c_str();
}

bool known_method(const std::string& name) {
  return method_rank(name) < std::size(kMethodOrder);
}

// ---- config parsing --------------------------------------------------------

[[noreturn]] void bad(const std::string& name, const std::string& what) {
  throw ParseError(name + ": " + what);
}

void reject_unknown(const json& obj, const std::string& name, const std::string& where,
                    std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        ok = true;
        break;
      }
    if (!ok) bad(name, where + ": unknown key \"" + item.key() + "\"");
  }
}

double get_number(const json& obj, const std::string& name, const std::string& where,
                  const char* key, double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) bad(name, where + "." + key + " must be a number");
  return v.get<double>();
}

std::uint64_t get_count(const json& obj, const std::string& name, const std::string& where,
                        const char* key, std::uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_unsigned()) bad(name, where + "." + key + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

std::string get_string(const json& obj, const std::string& name, const std::string& where,
                       const char* key, const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) bad(name, where + "." + key + " must be a string");
  return v.get<std::string>();
}

std::string require_string(const json& obj, const std::string& name, const std::string& where,
                           const char* key) {
  if (!obj.contains(key)) bad(name, where + "." + key + " is required");
  return get_string(obj, name, where, key, "");
}

scores::PoolSpec parse_pool_json(const json& v, const std::string& name,
                                 const std::string& where) {
  if (v.is_string()) {
    auto pool = parse_pool_token(v.get<std::string>());
    if (!pool) bad(name, where + ": \"none\" is spelled by omitting the pool key");
    return *pool;
  }
  if (!v.is_object()) bad(name, where + " must be an object or a token like \"2x2s2\"");
  reject_unknown(v, name, where, {"kernel", "stride"});
  if (!v.contains("kernel") || !v.at("kernel").is_array() || v.at("kernel").size() != 2)
    bad(name, where + ".kernel must be a [h, w] pair");
  for (const auto& k : v.at("kernel"))
    if (!k.is_number_unsigned()) bad(name, where + ".kernel entries must be positive integers");
  scores::PoolSpec pool;
  pool.kernel_h = v.at("kernel").at(0).get<std::uint64_t>();
  pool.kernel_w = v.at("kernel").at(1).get<std::uint64_t>();
  pool.stride = get_count(v, name, where, "stride", 2);
  if (pool.kernel_h == 0 || pool.kernel_w == 0 || pool.stride == 0)
    bad(name, where + ": kernel and stride must be positive");
  return pool;
}

MethodSpec parse_method(const json& v, const std::string& name, std::size_t index) {
  const std::string where = "methods[" + std::to_string(index) + "]";
  if (!v.is_object()) bad(name, where + " must be an object");
  MethodSpec m;
  m.name = require_string(v, name, where, "name");
  if (!known_method(m.name)) {
    std::string known;
    for (const char* k : kMethodOrder) {
      if (!known.empty()) known += ", ";
      known += k;
    }
    bad(name, where + ": unknown method \"" + m.name + "\" (known: " + known + ")");
  }
  m.label = get_string(v, name, where, "label", m.name);
  if (m.label.empty()) bad(name, where + ".label must not be empty");

  std::vector<const char*> allowed = {"name", "label"};
  if (m.name == "odin") {
    allowed.insert(allowed.end(), {"epsilon", "tau_prime"});
  } else if (m.name == "odin_pert_only") {
    allowed.push_back("epsilon");
  } else if (m.name == "odin_temp_only") {
    allowed.push_back("tau_prime");
  } else if (m.name == "mahalanobis") {
    allowed.push_back("pool");
  } else if (m.name == "mcdp") {
    allowed.push_back("n_passes");
  } else if (m.name == "ensemble_mcp") {
    allowed.push_back("members");
  } else if (m.name == "ensemble_mahalanobis") {
    allowed.insert(allowed.end(), {"members", "consensus", "pool"});
  } else if (m.name == "duq") {
    allowed.insert(allowed.end(), {"embedding_dim", "length_scale", "centroid_momentum",
                                   "penalty_weight", "fd_epsilon", "lr", "epochs"});
  }
  for (const auto& item : v.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        ok = true;
        break;
      }
    if (!ok) bad(name, where + ": " + m.name + " does not take \"" + item.key() + "\"");
  }

  m.epsilon = get_number(v, name, where, "epsilon", m.epsilon);
  m.tau_prime = get_number(v, name, where, "tau_prime", m.tau_prime);
  m.n_passes = get_count(v, name, where, "n_passes", m.n_passes);
  m.members = get_count(v, name, where, "members", m.members);
  if (v.contains("consensus")) {
    const std::string c = require_string(v, name, where, "consensus");
    if (c == "mean")
      m.consensus = scores::Consensus::Mean;
    else if (c == "min")
      m.consensus = scores::Consensus::Min;
    else if (c == "median")
      m.consensus = scores::Consensus::Median;
    else
      bad(name, where + ".consensus must be mean, min or median");
  }
  if (v.contains("pool")) m.pool = parse_pool_json(v.at("pool"), name, where + ".pool");
  m.embedding_dim = get_count(v, name, where, "embedding_dim", m.embedding_dim);
  m.length_scale = get_number(v, name, where, "length_scale", m.length_scale);
  m.centroid_momentum = get_number(v, name, where, "centroid_momentum", m.centroid_momentum);
  m.penalty_weight = get_number(v, name, where, "penalty_weight", m.penalty_weight);
  m.fd_epsilon = get_number(v, name, where, "fd_epsilon", m.fd_epsilon);
  if (v.contains("lr")) m.lr = get_number(v, name, where, "lr", 0.0);
  if (v.contains("epochs")) m.epochs = get_count(v, name, where, "epochs", 0);
  return m;
}

BenchmarkSpec parse_benchmark(const json& v, const std::string& name) {
  if (!v.is_object()) bad(name, "benchmark must be an object");
  BenchmarkSpec b;
  const std::string gen = require_string(v, name, "benchmark", "generator");
  if (gen == "gaussian") {
    b.kind = BenchmarkSpec::Kind::Gaussian;
    reject_unknown(v, name, "benchmark",
                   {"generator", "dim", "classes", "n_train_per_class", "n_test_per_class",
                    "n_ood", "spread", "ood_shift", "seed"});
    auto& g = b.gaussian;
    g.dim = get_count(v, name, "benchmark", "dim", g.dim);
    g.classes = get_count(v, name, "benchmark", "classes", g.classes);
    g.n_train_per_class = get_count(v, name, "benchmark", "n_train_per_class", g.n_train_per_class);
    g.n_test_per_class = get_count(v, name, "benchmark", "n_test_per_class", g.n_test_per_class);
    g.n_ood = get_count(v, name, "benchmark", "n_ood", g.n_ood);
    g.spread = get_number(v, name, "benchmark", "spread", g.spread);
    g.ood_shift = get_number(v, name, "benchmark", "ood_shift", g.ood_shift);
    g.seed = get_count(v, name, "benchmark", "seed", g.seed);
  } else if (gen == "moons") {
    b.kind = BenchmarkSpec::Kind::Moons;
    reject_unknown(v, name, "benchmark",
                   {"generator", "n_train_per_class", "n_test_per_class", "n_ood", "noise",
                    "ood_ring_radius", "seed"});
    auto& g = b.moons;
    g.n_train_per_class = get_count(v, name, "benchmark", "n_train_per_class", g.n_train_per_class);
    g.n_test_per_class = get_count(v, name, "benchmark", "n_test_per_class", g.n_test_per_class);
    g.n_ood = get_count(v, name, "benchmark", "n_ood", g.n_ood);
    g.noise = get_number(v, name, "benchmark", "noise", g.noise);
    g.ood_ring_radius = get_number(v, name, "benchmark", "ood_ring_radius", g.ood_ring_radius);
    g.seed = get_count(v, name, "benchmark", "seed", g.seed);
  } else if (gen == "csv") {
    b.kind = BenchmarkSpec::Kind::Csv;
    reject_unknown(v, name, "benchmark", {"generator", "train_csv", "test_id_csv", "test_ood_csv"});
    b.train_csv = require_string(v, name, "benchmark", "train_csv");
    b.test_id_csv = require_string(v, name, "benchmark", "test_id_csv");
    b.test_ood_csv = require_string(v, name, "benchmark", "test_ood_csv");
  } else {
    bad(name, "benchmark.generator must be gaussian, moons or csv");
  }
  return b;
}

nn::MlpConfig parse_model(const json& v, const std::string& name) {
  nn::MlpConfig m;
  if (v.is_null()) return m;
  if (!v.is_object()) bad(name, "model must be an object");
  for (const char* derived : {"input_dim", "num_classes", "seed"})
    if (v.contains(derived))
      bad(name, std::string("model.") + derived +
                    " is derived from the benchmark and the run seed; remove it");
  reject_unknown(v, name, "model",
                 {"hidden_dims", "dropout_p", "lr", "momentum", "weight_decay", "epochs",
                  "batch_size", "feature_shape"});
  if (v.contains("hidden_dims")) {
    if (!v.at("hidden_dims").is_array()) bad(name, "model.hidden_dims must be an array");
    m.hidden_dims.clear();
    for (const auto& h : v.at("hidden_dims")) {
      if (!h.is_number_unsigned()) bad(name, "model.hidden_dims entries must be positive integers");
      m.hidden_dims.push_back(h.get<std::uint64_t>());
    }
  }
  m.dropout_p = get_number(v, name, "model", "dropout_p", m.dropout_p);
  m.lr = get_number(v, name, "model", "lr", m.lr);
  m.momentum = get_number(v, name, "model", "momentum", m.momentum);
  m.weight_decay = get_number(v, name, "model", "weight_decay", m.weight_decay);
  m.epochs = get_count(v, name, "model", "epochs", m.epochs);
  m.batch_size = get_count(v, name, "model", "batch_size", m.batch_size);
  if (v.contains("feature_shape")) {
    const json& fs = v.at("feature_shape");
    if (!fs.is_array() || fs.size() != 3)
      bad(name, "model.feature_shape must be [channels, height, width]");
    std::array<std::size_t, 3> shape{};
    for (std::size_t i = 0; i < 3; ++i) {
      if (!fs.at(i).is_number_unsigned())
        bad(name, "model.feature_shape entries must be positive integers");
      shape[i] = fs.at(i).get<std::uint64_t>();
    }
    m.feature_shape = shape;
  }
  return m;
}

// ---- canonical serialization and fingerprint -------------------------------

json pool_to_json(const std::optional<scores::PoolSpec>& pool) {
  return json(pool_token(pool));
}

json method_to_json(const MethodSpec& m, const nn::MlpConfig& model) {
  json v;
  v["name"] = m.name;
  v["label"] = m.label;
  if (m.name == "odin" || m.name == "odin_pert_only") v["epsilon"] = m.epsilon;
  if (m.name == "odin" || m.name == "odin_temp_only") v["tau_prime"] = m.tau_prime;
  if (m.name == "mcdp") v["n_passes"] = m.n_passes;
  if (m.name == "ensemble_mcp" || m.name == "ensemble_mahalanobis") v["members"] = m.members;
  if (m.name == "ensemble_mahalanobis") v["consensus"] = scores::consensus_name(m.consensus);
  if (m.name == "mahalanobis" || m.name == "ensemble_mahalanobis") v["pool"] = pool_to_json(m.pool);
  if (m.name == "duq") {
    v["embedding_dim"] = m.embedding_dim;
    v["length_scale"] = m.length_scale;
    v["centroid_momentum"] = m.centroid_momentum;
    v["penalty_weight"] = m.penalty_weight;
    v["fd_epsilon"] = m.fd_epsilon;
    v["lr"] = m.lr.value_or(model.lr);
    v["epochs"] = m.epochs.value_or(model.epochs);
  }
  return v;
}

json canonical_json(const ExperimentConfig& c) {
  json v;
  json b;
  switch (c.benchmark.kind) {
    case BenchmarkSpec::Kind::Gaussian: {
      const auto& g = c.benchmark.gaussian;
      b["generator"] = "gaussian";
      b["dim"] = g.dim;
      b["classes"] = g.classes;
      b["n_train_per_class"] = g.n_train_per_class;
      b["n_test_per_class"] = g.n_test_per_class;
      b["n_ood"] = g.n_ood;
      b["spread"] = g.spread;
      b["ood_shift"] = g.ood_shift;
      b["seed"] = g.seed;
      break;
    }
    case BenchmarkSpec::Kind::Moons: {
      const auto& g = c.benchmark.moons;
      b["generator"] = "moons";
      b["n_train_per_class"] = g.n_train_per_class;
      b["n_test_per_class"] = g.n_test_per_class;
      b["n_ood"] = g.n_ood;
      b["noise"] = g.noise;
      b["ood_ring_radius"] = g.ood_ring_radius;
      b["seed"] = g.seed;
      break;
    }
    case BenchmarkSpec::Kind::Csv:
      b["generator"] = "csv";
      b["train_csv"] = c.benchmark.train_csv;
      b["test_id_csv"] = c.benchmark.test_id_csv;
      b["test_ood_csv"] = c.benchmark.test_ood_csv;
      break;
  }
  v["benchmark"] = b;
  json m;
  m["hidden_dims"] = c.model.hidden_dims;
  m["dropout_p"] = c.model.dropout_p;
  m["lr"] = c.model.lr;
  m["momentum"] = c.model.momentum;
  m["weight_decay"] = c.model.weight_decay;
  m["epochs"] = c.model.epochs;
  m["batch_size"] = c.model.batch_size;
  if (c.model.feature_shape) m["feature_shape"] = *c.model.feature_shape;
  v["model"] = m;
  json methods = json::array();
  for (const auto& spec : c.methods) methods.push_back(method_to_json(spec, c.model));
  v["methods"] = methods;
  v["seeds"] = c.seeds;
  return v;
}

// ---- shared run machinery ---------------------------------------------------

data::LabeledSet load_features_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  std::istringstream probe(text);
  const data::CsvSchema schema = data::infer_schema(probe, path);
  std::istringstream body(text);
  return data::ingest_csv(body, schema, path);
}

struct Models {
  const nn::Classifier* base = nullptr;
  std::span<const nn::Classifier> members;
  const nn::DuqModel* duq = nullptr;
};

struct MethodOutcome {
  std::vector<scores::ScoredSample> id;
  std::vector<scores::ScoredSample> ood;
  json params;
  std::vector<std::string> notices;
};

const nn::Classifier& need_base(const Models& models) {
  if (!models.base) throw UsageError("method needs the shared base model");
  return *models.base;
}

// Scoring for one method over both test splits; the models were trained by
// the caller. is_ood flags are stamped here.
MethodOutcome score_cell(const MethodSpec& m, const Models& models,
                         const data::OodBenchmark& bench, std::uint64_t seed) {
  MethodOutcome out;
  const double* xi = bench.test_id.features.data();
  const std::size_t ni = bench.test_id.n;
  const double* xo = bench.test_ood.features.data();
  const std::size_t no = bench.test_ood.n;

  if (m.name == "mcp") {
    const auto& clf = need_base(models);
    out.id = scores::mcp_score(clf, xi, ni);
    out.ood = scores::mcp_score(clf, xo, no);
    out.params["tau"] = 1.0;
  } else if (m.name == "odin" || m.name == "odin_pert_only" || m.name == "odin_temp_only") {
    const auto& clf = need_base(models);
    const double eps = m.name == "odin_temp_only" ? 0.0 : m.epsilon;
    const double tau_prime = m.name == "odin_pert_only" ? 1.0 : m.tau_prime;
    out.id = scores::odin_score(clf, xi, ni, eps, tau_prime);
    out.ood = scores::odin_score(clf, xo, no, eps, tau_prime);
    out.params["epsilon"] = eps;
    out.params["tau_prime"] = tau_prime;
  } else if (m.name == "mahalanobis") {
    const auto& clf = need_base(models);
    const auto stats = scores::fit_gaussian_stats(clf, bench.train, m.pool, &out.notices);
    out.id = scores::mahalanobis_score(stats, clf, xi, ni);
    out.ood = scores::mahalanobis_score(stats, clf, xo, no);
    out.params["pool"] = pool_to_json(stats.pool);
    out.params["feature_dim"] = stats.dim;
    out.params["ridge"] = stats.ridge;
  } else if (m.name == "mcdp") {
    const auto& clf = need_base(models);
    // streams 0..3 of the run seed belong to the model; the dropout passes
    // draw from their own stream
    const std::uint64_t pass_seed = derive_seed(seed, 4);
    out.id = scores::mcdp_score(clf, xi, ni, m.n_passes, pass_seed, &out.notices);
    out.ood = scores::mcdp_score(clf, xo, no, m.n_passes, pass_seed, &out.notices);
    out.params["n_passes"] = m.n_passes;
    out.params["pass_seed"] = pass_seed;
  } else if (m.name == "ensemble_mcp") {
    if (models.members.size() < m.members)
      throw UsageError("method needs " + std::to_string(m.members) + " trained members");
    const auto members = models.members.subspan(0, m.members);
    out.id = scores::ensemble_mcp_score(members, xi, ni);
    out.ood = scores::ensemble_mcp_score(members, xo, no);
    out.params["members"] = m.members;
  } else if (m.name == "ensemble_mahalanobis") {
    if (models.members.size() < m.members)
      throw UsageError("method needs " + std::to_string(m.members) + " trained members");
    const auto members = models.members.subspan(0, m.members);
    std::vector<scores::GaussianStats> stats;
    stats.reserve(members.size());
    json ridges = json::array();
    for (const auto& member : members) {
      stats.push_back(scores::fit_gaussian_stats(member, bench.train, m.pool, &out.notices));
      ridges.push_back(stats.back().ridge);
    }
    out.id = scores::ensemble_mahalanobis_score(members, stats, xi, ni, m.consensus);
    out.ood = scores::ensemble_mahalanobis_score(members, stats, xo, no, m.consensus);
    out.params["members"] = m.members;
    out.params["consensus"] = scores::consensus_name(m.consensus);
    out.params["pool"] = pool_to_json(m.pool);
    out.params["ridge"] = ridges;
  } else if (m.name == "duq") {
    if (!models.duq) throw UsageError("method needs a trained duq model");
    const auto score = [&](const double* x, std::size_t n) {
      const nn::DuqScores s = nn::duq_score(*models.duq, x, n);
      std::vector<scores::ScoredSample> rows(n);
      for (std::size_t i = 0; i < n; ++i) {
        rows[i].id_score = s.max_kernel[i];
        rows[i].predicted_class = s.predicted[i];
        rows[i].method = "duq";
      }
      return rows;
    };
    out.id = score(xi, ni);
    out.ood = score(xo, no);
    const auto& dc = models.duq->config();
    out.params["embedding_dim"] = dc.embedding_dim;
    out.params["length_scale"] = models.duq->length_scale();
    out.params["centroid_momentum"] = dc.centroid_momentum;
    out.params["penalty_weight"] = dc.penalty_weight;
    out.params["fd_epsilon"] = dc.fd_epsilon;
    out.params["lr"] = dc.backbone.lr;
    out.params["epochs"] = dc.backbone.epochs;
  } else {
    throw UsageError("unknown method " + m.name);
  }

  for (auto& row : out.ood) row.is_ood = true;
  // repeated fits emit the same notice once per member; keep one copy
  std::vector<std::string> unique;
  std::set<std::string> seen;
  for (auto& note : out.notices)
    if (seen.insert(note).second) unique.push_back(note);
  out.notices = std::move(unique);
  return out;
}

metrics::EvalReport evaluate_cell(const MethodOutcome& out, const std::string& method_name,
                                  const std::string& label, const data::LabeledSet& test_id,
                                  const std::string& fingerprint) {
  metrics::EvalReport er;
  std::vector<scores::ScoredSample> combined = out.id;
  combined.insert(combined.end(), out.ood.begin(), out.ood.end());
  er.auroc = metrics::auroc(combined);
  er.aucpr = metrics::aucpr(combined);
  std::vector<int> predicted(out.id.size());
  for (std::size_t i = 0; i < out.id.size(); ++i) predicted[i] = out.id[i].predicted_class;
  er.id_accuracy = metrics::id_accuracy(predicted, test_id.labels);
  er.has_ece = scores::probability_scored(method_name);
  if (er.has_ece) {
    std::vector<double> conf(out.id.size());
    std::vector<std::uint8_t> correct(out.id.size());
    for (std::size_t i = 0; i < out.id.size(); ++i) {
      conf[i] = out.id[i].id_score;
      correct[i] = out.id[i].predicted_class == test_id.labels[i] ? 1 : 0;
    }
    er.ece = metrics::ece(conf, correct, kEceBins).ece;
  }
  er.n_id = out.id.size();
  er.n_ood = out.ood.size();
  er.method = label;
  er.config_fingerprint = fingerprint;
  return er;
}

json bins_to_json(const metrics::ReliabilityBins& bins) {
  json rows = json::array();
  for (const auto& b : bins.bins) {
    json r;
    r["lower"] = b.lower;
    r["upper"] = b.upper;
    // nlohmann serializes NaN as null, which is what an empty bin should say
    r["mean_conf"] = b.mean_conf;
    r["accuracy"] = b.accuracy;
    r["count"] = b.count;
    rows.push_back(std::move(r));
  }
  json v;
  v["bins"] = std::move(rows);
  v["total"] = bins.total;
  return v;
}

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

} // namespace

// ---- config ------------------------------------------------------------------

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str(), path);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text,
                                                  const std::string& name) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(name + ": " + e.what());
  }
  if (!root.is_object()) bad(name, "top level must be an object");
  reject_unknown(root, name, "config", {"benchmark", "model", "methods", "seeds", "out_dir"});
  if (!root.contains("benchmark")) bad(name, "benchmark is required");
  if (!root.contains("methods")) bad(name, "methods is required");
  if (!root.contains("seeds")) bad(name, "seeds is required");

  ExperimentConfig c;
  c.benchmark = parse_benchmark(root.at("benchmark"), name);
  c.model = parse_model(root.contains("model") ? root.at("model") : json(), name);

  const json& methods = root.at("methods");
  if (!methods.is_array() || methods.empty()) bad(name, "methods must be a non-empty array");
  std::set<std::string> labels;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    c.methods.push_back(parse_method(methods.at(i), name, i));
    if (!labels.insert(c.methods.back().label).second)
      bad(name, "duplicate method label \"" + c.methods.back().label +
                    "\"; give repeated methods distinct labels");
  }

  const json& seeds = root.at("seeds");
  if (!seeds.is_array() || seeds.empty()) bad(name, "seeds must be a non-empty array");
  std::set<std::uint64_t> seen_seeds;
  for (const auto& s : seeds) {
    if (!s.is_number_unsigned()) bad(name, "seeds entries must be non-negative integers");
    const std::uint64_t v = s.get<std::uint64_t>();
    if (!seen_seeds.insert(v).second) bad(name, "duplicate seed " + std::to_string(v));
    c.seeds.push_back(v);
  }

  c.out_dir = get_string(root, name, "config", "out_dir", "");
  return c;
}

// out_dir names where results land, not what the experiment is, so it stays
// outside the fingerprint
std::string ExperimentConfig::fingerprint() const {
  const std::string dump = canonical_json(*this).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

data::OodBenchmark make_benchmark(const BenchmarkSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case BenchmarkSpec::Kind::Gaussian: {
      data::GaussianSpec g = spec.gaussian;
      g.seed = seed;
      return data::gen_gaussian_benchmark(g);
    }
    case BenchmarkSpec::Kind::Moons: {
      data::MoonsSpec g = spec.moons;
      g.seed = seed;
      return data::gen_moons_benchmark(g);
    }
    case BenchmarkSpec::Kind::Csv:
      break;
  }
  data::OodBenchmark bench;
  bench.train = load_features_file(spec.train_csv);
  bench.test_id = load_features_file(spec.test_id_csv);
  bench.test_ood = load_features_file(spec.test_ood_csv);
  if (bench.train.labels.empty()) throw UsageError(spec.train_csv + ": train split needs labels");
  if (bench.test_id.labels.empty())
    throw UsageError(spec.test_id_csv + ": in-distribution test split needs labels");
  // any labels on the ood split are ground truth we must not see
  bench.test_ood.labels.clear();
  if (bench.test_id.dim != bench.train.dim || bench.test_ood.dim != bench.train.dim)
    throw ShapeError("csv splits disagree on the feature dimension");
  bench.norm = data::fit_normalization(bench.train);
  data::apply_normalization(bench.norm, bench.train);
  data::apply_normalization(bench.norm, bench.test_id);
  data::apply_normalization(bench.norm, bench.test_ood);
  bench.separation = "unknown";
  bench.seed = seed;
  return bench;
}

// input_dim, class count and seed come from the data and the run seed; the
// config only carries the architecture and optimizer settings
nn::MlpConfig resolve_model(const ExperimentConfig& config, const data::OodBenchmark& bench,
                            std::uint64_t seed) {
  nn::MlpConfig m = config.model;
  m.input_dim = bench.train.dim;
  int max_label = -1;
  for (int l : bench.train.labels) {
    if (l < 0) throw ValueError("train labels must be non-negative");
    max_label = std::max(max_label, l);
  }
  if (max_label < 1) throw ValueError("the training split must cover at least 2 classes");
  m.num_classes = static_cast<std::size_t>(max_label) + 1;
  m.seed = seed;
  m.validate();
  return m;
}

nn::DuqConfig resolve_duq(const MethodSpec& method, const nn::MlpConfig& model) {
  nn::DuqConfig dc;
  dc.backbone = model;
  if (method.lr) dc.backbone.lr = *method.lr;
  if (method.epochs) dc.backbone.epochs = *method.epochs;
  dc.embedding_dim = method.embedding_dim;
  dc.length_scale = method.length_scale;
  dc.centroid_momentum = method.centroid_momentum;
  dc.penalty_weight = method.penalty_weight;
  dc.fd_epsilon = method.fd_epsilon;
  return dc;
}

MethodScores score_method(const ExperimentConfig& config, const MethodSpec& method,
                          std::uint64_t seed) {
  const data::OodBenchmark bench = make_benchmark(config.benchmark, seed);
  const nn::MlpConfig model_cfg = resolve_model(config, bench, seed);

  Models models;
  std::optional<nn::Classifier> base;
  std::vector<nn::Classifier> members;
  std::optional<nn::DuqModel> duq;
  if (method.name == "duq") {
    duq.emplace(resolve_duq(method, model_cfg));
    nn::duq_train(*duq, bench.train);
    models.duq = &*duq;
  } else if (method.name == "ensemble_mcp" || method.name == "ensemble_mahalanobis") {
    members = nn::train_ensemble(model_cfg, bench.train, method.members);
    models.members = members;
  } else {
    base.emplace(model_cfg);
    nn::train(*base, bench.train);
    models.base = &*base;
  }

  MethodOutcome out = score_cell(method, models, bench, seed);
  MethodScores result;
  result.id = std::move(out.id);
  result.ood = std::move(out.ood);
  // the scorer stamps its own family; the row keeps the requested variant so
  // a later eval can still tell the odin ablations apart
  for (auto& s : result.id) s.method = method.name;
  for (auto& s : result.ood) s.method = method.name;
  result.id_true_class = bench.test_id.labels;
  result.params_json = out.params.dump();
  result.notices = std::move(out.notices);
  return result;
}

// ---- the run -----------------------------------------------------------------

bool RunReport::all_ok() const {
  for (const auto& cell : cells)
    if (!cell.ok) return false;
  return !cells.empty();
}

RunReport run(const ExperimentConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  RunReport rep;
  rep.config_fingerprint = config.fingerprint();
  rep.seeds = config.seeds;

  bool want_base = false;
  std::size_t ens_members = 0;
  std::size_t duq_jobs = 0;
  for (const auto& m : config.methods) {
    if (m.name == "ensemble_mcp" || m.name == "ensemble_mahalanobis")
      ens_members = std::max(ens_members, m.members);
    else if (m.name == "duq")
      ++duq_jobs;
    else
      want_base = true;
  }
  rep.planned_training_runs =
      config.seeds.size() * ((want_base ? 1 : 0) + ens_members + duq_jobs);

  const std::uint64_t runs_before = nn::training_run_count();
  // planned jobs that aborted; the plan check below discounts them
  std::uint64_t failed_trainings = 0;

  for (const std::uint64_t seed : config.seeds) {
    const data::OodBenchmark bench = make_benchmark(config.benchmark, seed);
    if (rep.separation.empty()) rep.separation = bench.separation;
    const nn::MlpConfig model_cfg = resolve_model(config, bench, seed);

    std::optional<nn::Classifier> base;
    std::string base_error;
    if (want_base) {
      try {
        base.emplace(model_cfg);
        nn::train(*base, bench.train);
      } catch (const Error& e) {
        base.reset();
        base_error = e.what();
        ++failed_trainings;
      }
    }

    std::vector<nn::Classifier> members;
    std::string members_error;
    if (ens_members > 0) {
      const std::uint64_t before = nn::training_run_count();
      try {
        members = nn::train_ensemble(model_cfg, bench.train, ens_members);
      } catch (const Error& e) {
        members.clear();
        members_error = e.what();
        failed_trainings += ens_members - (nn::training_run_count() - before);
      }
    }

    for (const auto& m : config.methods) {
      Cell cell;
      cell.seed = seed;
      cell.method = m.name;
      cell.label = m.label;
      try {
        Models models;
        std::optional<nn::DuqModel> duq;
        if (m.name == "duq") {
          const std::uint64_t before = nn::training_run_count();
          try {
            duq.emplace(resolve_duq(m, model_cfg));
            nn::duq_train(*duq, bench.train);
          } catch (const Error&) {
            if (nn::training_run_count() == before) ++failed_trainings;
            throw;
          }
          models.duq = &*duq;
        } else if (m.name == "ensemble_mcp" || m.name == "ensemble_mahalanobis") {
          if (!members_error.empty()) throw TrainError(members_error);
          models.members = members;
        } else {
          if (!base_error.empty()) throw TrainError(base_error);
          models.base = base ? &*base : nullptr;
        }
        MethodOutcome out = score_cell(m, models, bench, seed);
        cell.report = evaluate_cell(out, m.name, m.label, bench.test_id, rep.config_fingerprint);
        cell.params_json = out.params.dump();
        cell.notices = std::move(out.notices);
        cell.ok = true;
      } catch (const Error& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      rep.cells.push_back(std::move(cell));
    }
  }

  const std::uint64_t ran = nn::training_run_count() - runs_before;
  if (ran + failed_trainings != rep.planned_training_runs)
    throw Error("internal: training plan violated (planned " +
                std::to_string(rep.planned_training_runs) + ", ran " + std::to_string(ran) +
                ", aborted " + std::to_string(failed_trainings) + ")");

  for (const auto& m : config.methods) {
    Aggregate agg;
    agg.label = m.label;
    agg.method = m.name;
    for (const auto& cell : rep.cells) {
      if (cell.label != m.label || !cell.ok) continue;
      ++agg.n_seeds;
      agg.auroc += cell.report.auroc;
      agg.aucpr += cell.report.aucpr;
      agg.id_accuracy += cell.report.id_accuracy;
      agg.ece += cell.report.ece;
      agg.has_ece = cell.report.has_ece;
    }
    if (agg.n_seeds > 0) {
      const double n = static_cast<double>(agg.n_seeds);
      agg.auroc /= n;
      agg.aucpr /= n;
      agg.id_accuracy /= n;
      agg.ece /= n;
    } else {
      agg.has_ece = false;
    }
    rep.aggregates.push_back(std::move(agg));
  }

  rep.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

std::string RunReport::to_json(bool include_wall_clock) const {
  json v;
  v["config_fingerprint"] = config_fingerprint;
  v["separation"] = separation;
  v["orientation"] = "ood positive, detector ranks by descending id_score";
  v["seeds"] = seeds;
  v["planned_training_runs"] = planned_training_runs;
  json cell_rows = json::array();
  for (const auto& cell : cells) {
    json r;
    r["seed"] = cell.seed;
    r["method"] = cell.method;
    r["label"] = cell.label;
    r["ok"] = cell.ok;
    r["error"] = cell.error;
    r["params"] = cell.params_json.empty() ? json() : json::parse(cell.params_json);
    r["report"] = cell.ok ? json::parse(metrics::report_to_json(cell.report)) : json();
    r["notices"] = cell.notices;
    cell_rows.push_back(std::move(r));
  }
  v["cells"] = std::move(cell_rows);
  json agg_rows = json::array();
  for (const auto& agg : aggregates) {
    json r;
    r["label"] = agg.label;
    r["method"] = agg.method;
    r["n_seeds"] = agg.n_seeds;
    if (agg.n_seeds > 0) {
      r["auroc"] = agg.auroc;
      r["aucpr"] = agg.aucpr;
      r["id_accuracy"] = agg.id_accuracy;
      r["ece"] = agg.has_ece ? json(agg.ece) : json();
    } else {
      r["auroc"] = json();
      r["aucpr"] = json();
      r["id_accuracy"] = json();
      r["ece"] = json();
    }
    agg_rows.push_back(std::move(r));
  }
  v["aggregates"] = std::move(agg_rows);
  v["notices"] = notices;
  if (include_wall_clock) v["wall_clock_sec"] = wall_clock_sec;
  return v.dump(2) + "\n";
}

std::string RunReport::markdown_table() const {
  std::vector<const Aggregate*> rows;
  for (const auto& agg : aggregates) rows.push_back(&agg);
  std::stable_sort(rows.begin(), rows.end(), [](const Aggregate* a, const Aggregate* b) {
    return method_rank(a->method) < method_rank(b->method);
  });
  std::string out = "| Method | AUROC | AUCPR | ID Acc. | ECE |\n"
                    "|---|---|---|---|---|\n";
  const std::size_t total = seeds.size();
  for (const Aggregate* agg : rows) {
    std::string name =
        agg->label == agg->method ? display_name(agg->method) : agg->label;
    if (agg->n_seeds > 0 && agg->n_seeds < total)
      name += " (" + std::to_string(agg->n_seeds) + "/" + std::to_string(total) + " seeds)";
    out += "| " + name + " | ";
    if (agg->n_seeds == 0) {
      out += "failed | failed | failed | failed |\n";
      continue;
    }
    out += fixed3(agg->auroc) + " | " + fixed3(agg->aucpr) + " | " + fixed3(agg->id_accuracy) +
           " | " + (agg->has_ece ? fixed3(agg->ece) : std::string("-")) + " |\n";
  }
  return out;
}

// ---- standalone evaluation -----------------------------------------------------

metrics::EvalReport eval_scores(const scores::ScoresFile& file,
                                const std::string& config_fingerprint) {
  if (file.samples.empty()) throw UsageError("scores file is empty");
  const std::string& method = file.samples.front().method;
  for (const auto& s : file.samples)
    if (s.method != method)
      throw UsageError("scores file mixes methods " + method + " and " + s.method);

  std::vector<int> predicted;
  std::vector<int> labels;
  std::size_t n_ood = 0;
  for (std::size_t i = 0; i < file.samples.size(); ++i) {
    if (file.samples[i].is_ood) {
      ++n_ood;
      continue;
    }
    if (file.true_class[i] < 0)
      throw UsageError("in-distribution row " + std::to_string(i) + " has no label");
    predicted.push_back(file.samples[i].predicted_class);
    labels.push_back(file.true_class[i]);
  }
  if (predicted.empty() || n_ood == 0)
    throw UsageError("scores file needs both in-distribution and ood rows");

  metrics::EvalReport er;
  er.auroc = metrics::auroc(file.samples);
  er.aucpr = metrics::aucpr(file.samples);
  er.id_accuracy = metrics::id_accuracy(predicted, labels);
  er.has_ece = scores::probability_scored(method);
  if (er.has_ece) {
    std::vector<double> conf;
    std::vector<std::uint8_t> correct;
    for (std::size_t i = 0; i < file.samples.size(); ++i) {
      if (file.samples[i].is_ood) continue;
      conf.push_back(file.samples[i].id_score);
      correct.push_back(file.samples[i].predicted_class == file.true_class[i] ? 1 : 0);
    }
    er.ece = metrics::ece(conf, correct, kEceBins).ece;
  }
  er.n_id = predicted.size();
  er.n_ood = n_ood;
  er.method = method;
  er.config_fingerprint = config_fingerprint;
  return er;
}

// ---- sweeps ---------------------------------------------------------------------

TempSweep sweep_temperature(const ExperimentConfig& config, const std::vector<double>& taus) {
  if (taus.empty()) throw ValueError("no temperatures to sweep");
  for (double t : taus)
    if (!(t > 0.0) || !std::isfinite(t))
      throw ValueError("temperatures must be positive and finite");

  TempSweep sweep;
  sweep.seed = config.seeds.front();
  sweep.config_fingerprint = config.fingerprint();
  const data::OodBenchmark bench = make_benchmark(config.benchmark, sweep.seed);
  const nn::MlpConfig model_cfg = resolve_model(config, bench, sweep.seed);
  nn::Classifier clf(model_cfg);
  nn::train(clf, bench.train);

  // perturbation strength comes from the config's odin entry when present
  double epsilon = 0.01;
  for (const auto& m : config.methods)
    if (m.name == "odin" || m.name == "odin_pert_only") {
      epsilon = m.epsilon;
      break;
    }

  const double* xi = bench.test_id.features.data();
  const std::size_t ni = bench.test_id.n;
  const double* xo = bench.test_ood.features.data();
  const std::size_t no = bench.test_ood.n;

  const auto add_row = [&](double tau, const char* family,
                           std::vector<scores::ScoredSample> id,
                           std::vector<scores::ScoredSample> ood) {
    for (auto& s : ood) s.is_ood = true;
    std::vector<scores::ScoredSample> combined = id;
    combined.insert(combined.end(), ood.begin(), ood.end());
    TempSweepRow row;
    row.tau = tau;
    row.method = family;
    row.auroc = metrics::auroc(combined);
    std::vector<double> conf(id.size());
    std::vector<std::uint8_t> correct(id.size());
    for (std::size_t i = 0; i < id.size(); ++i) {
      conf[i] = id[i].id_score;
      correct[i] = id[i].predicted_class == bench.test_id.labels[i] ? 1 : 0;
    }
    const metrics::EceResult ece = metrics::ece(conf, correct, kEceBins);
    row.ece = ece.ece;
    row.bins = ece.bins;
    sweep.rows.push_back(std::move(row));
  };

  for (const double tau : taus) {
    add_row(tau, "baseline", scores::mcp_score(clf, xi, ni, tau),
            scores::mcp_score(clf, xo, no, tau));
    add_row(tau, "odin", scores::odin_score(clf, xi, ni, epsilon, tau),
            scores::odin_score(clf, xo, no, epsilon, tau));
  }

  // with two classes the max posterior is monotone in the logit margin at
  // any temperature, so the ranking cannot move
  if (model_cfg.num_classes == 2) {
    for (const char* family : {"baseline", "odin"}) {
      double lo = 1.0, hi = 0.0;
      for (const auto& row : sweep.rows) {
        if (row.method != family) continue;
        lo = std::min(lo, row.auroc);
        hi = std::max(hi, row.auroc);
      }
      if (hi - lo > 1e-12)
        throw ScoreError(std::string("temperature changed a binary ranking for ") + family +
                         " (auroc spread " + format_double(hi - lo) + ")");
    }
  }
  return sweep;
}

std::string TempSweep::to_json() const {
  json v;
  v["seed"] = seed;
  v["config_fingerprint"] = config_fingerprint;
  json rows_json = json::array();
  for (const auto& row : rows) {
    json r;
    r["tau"] = row.tau;
    r["method"] = row.method;
    r["ece"] = row.ece;
    r["auroc"] = row.auroc;
    r["reliability"] = bins_to_json(row.bins);
    rows_json.push_back(std::move(r));
  }
  v["rows"] = std::move(rows_json);
  return v.dump(2) + "\n";
}

std::string TempSweep::markdown_table() const {
  std::string out = "| tau | method | AUROC | ECE |\n|---|---|---|---|\n";
  for (const auto& row : rows)
    out += "| " + format_double(row.tau) + " | " + row.method + " | " + fixed3(row.auroc) +
           " | " + fixed3(row.ece) + " |\n";
  return out;
}

PoolSweep sweep_pooling(const ExperimentConfig& config,
                        const std::vector<std::optional<scores::PoolSpec>>& pools) {
  if (pools.empty()) throw ValueError("no pooling settings to sweep");

  PoolSweep sweep;
  sweep.seed = config.seeds.front();
  sweep.config_fingerprint = config.fingerprint();
  const data::OodBenchmark bench = make_benchmark(config.benchmark, sweep.seed);
  const nn::MlpConfig model_cfg = resolve_model(config, bench, sweep.seed);
  nn::Classifier clf(model_cfg);
  nn::train(clf, bench.train);

  const double* xi = bench.test_id.features.data();
  const std::size_t ni = bench.test_id.n;
  const double* xo = bench.test_ood.features.data();
  const std::size_t no = bench.test_ood.n;

  for (const auto& pool : pools) {
    PoolSweepRow row;
    row.pool = pool_token(pool);
    if (pool && !model_cfg.feature_shape) {
      row.applicable = false;
      row.feature_dim = clf.feature_dim();
      sweep.rows.push_back(std::move(row));
      continue;
    }
    const auto stats = scores::fit_gaussian_stats(clf, bench.train, pool);
    std::vector<scores::ScoredSample> id = scores::mahalanobis_score(stats, clf, xi, ni);
    std::vector<scores::ScoredSample> ood = scores::mahalanobis_score(stats, clf, xo, no);
    for (auto& s : ood) s.is_ood = true;
    id.insert(id.end(), ood.begin(), ood.end());
    row.applicable = true;
    row.feature_dim = stats.dim;
    row.auroc = metrics::auroc(id);
    sweep.rows.push_back(std::move(row));
  }
  return sweep;
}

std::string PoolSweep::to_json() const {
  json v;
  v["seed"] = seed;
  v["config_fingerprint"] = config_fingerprint;
  json rows_json = json::array();
  for (const auto& row : rows) {
    json r;
    r["pool"] = row.pool;
    r["applicable"] = row.applicable;
    r["feature_dim"] = row.feature_dim;
    r["auroc"] = row.applicable ? json(row.auroc) : json();
    rows_json.push_back(std::move(r));
  }
  v["rows"] = std::move(rows_json);
  return v.dump(2) + "\n";
}

std::string PoolSweep::markdown_table() const {
  std::string out = "| pooling | feature dim | AUROC |\n|---|---|---|\n";
  for (const auto& row : rows)
    out += "| " + row.pool + " | " + std::to_string(row.feature_dim) + " | " +
           (row.applicable ? fixed3(row.auroc) : std::string("n/a")) + " |\n";
  return out;
}

std::string pool_token(const std::optional<scores::PoolSpec>& pool) {
  if (!pool) return "none";
  return std::to_string(pool->kernel_h) + "x" + std::to_string(pool->kernel_w) + "s" +
         std::to_string(pool->stride);
}

std::optional<scores::PoolSpec> parse_pool_token(const std::string& token) {
  if (token == "none") return std::nullopt;
  const auto parse_part = [&](std::size_t from, std::size_t to) {
    std::size_t value = 0;
    const char* first = token.data() + from;
    const char* last = token.data() + to;
    const auto res = std::from_chars(first, last, value);
    if (res.ec != std::errc() || res.ptr != last || value == 0)
      throw ParseError("bad pool token \"" + token + "\" (want e.g. 2x2s2 or none)");
    return value;
  };
  const std::size_t x = token.find('x');
  const std::size_t s = token.find('s', x == std::string::npos ? 0 : x);
  if (x == std::string::npos || s == std::string::npos || x == 0 || s <= x + 1 ||
      s + 1 >= token.size())
    throw ParseError("bad pool token \"" + token + "\" (want e.g. 2x2s2 or none)");
  scores::PoolSpec pool;
  pool.kernel_h = parse_part(0, x);
  pool.kernel_w = parse_part(x + 1, s);
  pool.stride = parse_part(s + 1, token.size());
  return pool;
}

} // namespace ood::harness
