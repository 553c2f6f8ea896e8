#include "ood/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ood/errors.hpp"
#include "ood/fmtnum.hpp"

namespace ood::data {

namespace {

using Point = std::vector<double>;

double dist(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

Point random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  while (true) {
    Point u(dim);
    double norm2 = 0.0;
    for (double& x : u) {
      x = gauss(rng);
      norm2 += x * x;
    }
    if (norm2 > 1e-12) {
      const double inv = 1.0 / std::sqrt(norm2);
      for (double& x : u) x *= inv;
      return u;
    }
  }
}

std::vector<Point> place_centers(std::mt19937_64& rng, const GaussianSpec& spec) {
  const double half = 10.0 * spec.spread;
  const double min_dist = 8.0 * spec.spread;
  std::uniform_real_distribution<double> box(-half, half);
  for (int restart = 0; restart < 200; ++restart) {
    std::vector<Point> centers;
    bool ok = true;
    for (std::size_t c = 0; c < spec.classes && ok; ++c) {
      ok = false;
      for (int attempt = 0; attempt < 500; ++attempt) {
        Point cand(spec.dim);
        for (double& x : cand) x = box(rng);
        const bool clear = std::all_of(centers.begin(), centers.end(), [&](const Point& p) {
          return dist(cand, p) >= min_dist;
        });
        if (clear) {
          centers.push_back(std::move(cand));
          ok = true;
          break;
        }
      }
    }
    if (ok) return centers;
  }
  throw UsageError("gaussian benchmark: could not place " + std::to_string(spec.classes) +
                   " class centers at least 8*spread apart in " + std::to_string(spec.dim) +
                   " dimensions; fewer classes or more dimensions needed");
}

Point place_ood_center(std::mt19937_64& rng, const std::vector<Point>& centers,
                       std::size_t anchor, double shift) {
  const Point& a = centers[anchor];
  if (shift == 0.0) return a;

  // first preference: straight away from the centroid of the other centers,
  // then random directions until the anchor is the nearest center
  Point u;
  if (centers.size() > 1) {
    Point centroid(a.size(), 0.0);
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (c == anchor) continue;
      for (std::size_t i = 0; i < a.size(); ++i) centroid[i] += centers[c][i];
    }
    double norm2 = 0.0;
    u.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      u[i] = a[i] - centroid[i] / static_cast<double>(centers.size() - 1);
      norm2 += u[i] * u[i];
    }
    if (norm2 > 1e-12) {
      const double inv = 1.0 / std::sqrt(norm2);
      for (double& x : u) x *= inv;
    } else {
      u = random_unit(rng, a.size());
    }
  } else {
    u = random_unit(rng, a.size());
  }

  for (int attempt = 0; attempt < 1000; ++attempt) {
    Point cand(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) cand[i] = a[i] + shift * u[i];
    const bool anchored = std::all_of(centers.begin(), centers.end(), [&](const Point& p) {
      return dist(cand, p) >= shift - 1e-9;
    });
    if (anchored) return cand;
    u = random_unit(rng, a.size());
  }
  throw UsageError("gaussian benchmark: could not place the OOD center with its anchor nearest");
}

void draw_cluster(std::mt19937_64& rng, const Point& center, double spread, std::size_t count,
                  int label, LabeledSet& out) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t s = 0; s < count; ++s) {
    for (std::size_t i = 0; i < center.size(); ++i) {
      out.features.push_back(center[i] + spread * gauss(rng));
    }
    if (label >= 0) out.labels.push_back(label);
    out.n++;
  }
}

void finalize(OodBenchmark& bench) {
  bench.norm = fit_normalization(bench.train);
  apply_normalization(bench.norm, bench.train);
  apply_normalization(bench.norm, bench.test_id);
  apply_normalization(bench.norm, bench.test_ood);
}

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  cells.push_back(cur);
  return cells;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

double parse_cell_double(const std::string& cell, const std::string& name, std::size_t row) {
  double v = 0.0;
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size()) {
    throw ParseError(name + " row " + std::to_string(row) + ": bad numeric cell '" + cell + "'");
  }
  return v;
}

int parse_cell_int(const std::string& cell, const std::string& name, std::size_t row) {
  int v = 0;
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size()) {
    throw ParseError(name + " row " + std::to_string(row) + ": bad label cell '" + cell + "'");
  }
  return v;
}

} // namespace

OodBenchmark gen_gaussian_benchmark(const GaussianSpec& spec) {
  if (spec.dim == 0) throw ValueError("gaussian benchmark: dim must be positive");
  if (spec.classes < 2) throw ValueError("gaussian benchmark: need at least 2 classes");
  if (spec.n_train_per_class == 0 || spec.n_test_per_class == 0 || spec.n_ood == 0) {
    throw ValueError("gaussian benchmark: all split sizes must be positive");
  }
  if (!(spec.spread > 0.0)) throw ValueError("gaussian benchmark: spread must be positive");
  if (spec.ood_shift < 0.0) throw ValueError("gaussian benchmark: ood_shift must be >= 0");

  std::mt19937_64 rng(spec.seed);
  const auto centers = place_centers(rng, spec);
  std::uniform_int_distribution<std::size_t> pick(0, spec.classes - 1);
  const std::size_t anchor = pick(rng);
  const Point ood_center = place_ood_center(rng, centers, anchor, spec.ood_shift);

  OodBenchmark bench;
  bench.seed = spec.seed;
  bench.separation = spec.ood_shift >= 5.0 * spec.spread ? "far" : "overlapping";
  bench.train.dim = bench.test_id.dim = bench.test_ood.dim = spec.dim;

  for (std::size_t c = 0; c < spec.classes; ++c) {
    draw_cluster(rng, centers[c], spec.spread, spec.n_train_per_class, static_cast<int>(c),
                 bench.train);
  }
  for (std::size_t c = 0; c < spec.classes; ++c) {
    draw_cluster(rng, centers[c], spec.spread, spec.n_test_per_class, static_cast<int>(c),
                 bench.test_id);
  }
  draw_cluster(rng, ood_center, spec.spread, spec.n_ood, -1, bench.test_ood);

  finalize(bench);
  return bench;
}

OodBenchmark gen_moons_benchmark(const MoonsSpec& spec) {
  if (spec.n_train_per_class == 0 || spec.n_test_per_class == 0 || spec.n_ood == 0) {
    throw ValueError("moons benchmark: all split sizes must be positive");
  }
  if (spec.noise < 0.0) throw ValueError("moons benchmark: noise must be >= 0");
  if (!(spec.ood_ring_radius > 0.0)) {
    throw ValueError("moons benchmark: ood_ring_radius must be positive");
  }

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> angle(0.0, 3.14159265358979323846);
  std::uniform_real_distribution<double> full_angle(0.0, 2.0 * 3.14159265358979323846);
  std::normal_distribution<double> gauss(0.0, 1.0);

  OodBenchmark bench;
  bench.seed = spec.seed;
  bench.separation = spec.ood_ring_radius >= 2.0 ? "far" : "overlapping";
  bench.train.dim = bench.test_id.dim = bench.test_ood.dim = 2;

  auto moon_point = [&](int label, LabeledSet& out) {
    const double t = angle(rng);
    double x, y;
    if (label == 0) {
      x = std::cos(t);
      y = std::sin(t);
    } else {
      x = 1.0 - std::cos(t);
      y = 0.5 - std::sin(t);
    }
    out.features.push_back(x + spec.noise * gauss(rng));
    out.features.push_back(y + spec.noise * gauss(rng));
    out.labels.push_back(label);
    out.n++;
  };

  for (int label = 0; label < 2; ++label) {
    for (std::size_t i = 0; i < spec.n_train_per_class; ++i) moon_point(label, bench.train);
  }
  for (int label = 0; label < 2; ++label) {
    for (std::size_t i = 0; i < spec.n_test_per_class; ++i) moon_point(label, bench.test_id);
  }

  // ring around the centroid of the two ideal moons
  const double cx = 0.5, cy = 0.25;
  for (std::size_t i = 0; i < spec.n_ood; ++i) {
    const double t = full_angle(rng);
    bench.test_ood.features.push_back(cx + spec.ood_ring_radius * std::cos(t) +
                                      spec.noise * gauss(rng));
    bench.test_ood.features.push_back(cy + spec.ood_ring_radius * std::sin(t) +
                                      spec.noise * gauss(rng));
    bench.test_ood.n++;
  }

  finalize(bench);
  return bench;
}

Normalization fit_normalization(const LabeledSet& train) {
  if (train.n == 0 || train.dim == 0) throw UsageError("normalization: empty training set");
  Normalization norm;
  norm.mean.assign(train.dim, 0.0);
  norm.stddev.assign(train.dim, 0.0);
  for (std::size_t i = 0; i < train.n; ++i) {
    const double* row = train.row(i);
    for (std::size_t j = 0; j < train.dim; ++j) norm.mean[j] += row[j];
  }
  for (double& m : norm.mean) m /= static_cast<double>(train.n);
  for (std::size_t i = 0; i < train.n; ++i) {
    const double* row = train.row(i);
    for (std::size_t j = 0; j < train.dim; ++j) {
      const double d = row[j] - norm.mean[j];
      norm.stddev[j] += d * d;
    }
  }
  for (double& s : norm.stddev) {
    s = std::sqrt(s / static_cast<double>(train.n));
    if (s < 1e-12) s = 1.0; // constant column, left unscaled
  }
  return norm;
}

void apply_normalization(const Normalization& norm, LabeledSet& set) {
  if (set.dim != norm.mean.size()) {
    throw ShapeError("normalization: set has dim " + std::to_string(set.dim) +
                     ", normalization has " + std::to_string(norm.mean.size()));
  }
  for (std::size_t i = 0; i < set.n; ++i) {
    double* row = set.features.data() + i * set.dim;
    for (std::size_t j = 0; j < set.dim; ++j) {
      row[j] = (row[j] - norm.mean[j]) / norm.stddev[j];
    }
  }
}

void write_features_csv(std::ostream& out, const LabeledSet& set) {
  for (std::size_t j = 0; j < set.dim; ++j) {
    if (j) out << ',';
    out << 'f' << j;
  }
  const bool labeled = !set.labels.empty();
  if (labeled) out << ",label";
  out << '\n';
  for (std::size_t i = 0; i < set.n; ++i) {
    const double* row = set.row(i);
    for (std::size_t j = 0; j < set.dim; ++j) {
      if (j) out << ',';
      out << format_double(row[j]);
    }
    if (labeled) out << ',' << set.labels[i];
    out << '\n';
  }
}

LabeledSet ingest_csv(std::istream& in, const CsvSchema& schema, const std::string& name) {
  if (schema.feature_columns.empty()) {
    throw UsageError("csv schema: no feature columns");
  }
  std::string line;
  if (!std::getline(in, line)) throw ParseError(name + ": empty file");

  std::vector<std::string> expected = schema.feature_columns;
  if (schema.label_column) expected.push_back(*schema.label_column);
  const auto header = split_csv_row(strip_cr(line));
  if (header != expected) {
    std::string want;
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (i) want += ',';
      want += expected[i];
    }
    throw ParseError(name + " row 1: header mismatch, expected '" + want + "'");
  }

  LabeledSet set;
  set.dim = schema.feature_columns.size();
  std::size_t row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv_row(line);
    if (cells.size() != expected.size()) {
      throw ParseError(name + " row " + std::to_string(row_no) + ": expected " +
                       std::to_string(expected.size()) + " cells, got " +
                       std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j < set.dim; ++j) {
      set.features.push_back(parse_cell_double(cells[j], name, row_no));
    }
    if (schema.label_column) {
      set.labels.push_back(parse_cell_int(cells.back(), name, row_no));
    }
    set.n++;
  }
  if (set.n == 0) throw ParseError(name + ": no data rows");
  return set;
}

CsvSchema infer_schema(std::istream& in, const std::string& name) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(name + ": empty file");
  auto header = split_csv_row(strip_cr(line));
  CsvSchema schema;
  if (!header.empty() && header.back() == "label") {
    schema.label_column = "label";
    header.pop_back();
  }
  if (header.empty()) throw ParseError(name + " row 1: no feature columns");
  schema.feature_columns = std::move(header);
  return schema;
}

void write_benchmark_dir(const std::string& dir, const OodBenchmark& bench,
                         const std::string& generator, const std::string& params_json) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  const auto write_set = [&](const char* file, const LabeledSet& set) {
    std::ofstream out(fs::path(dir) / file);
    if (!out) throw UsageError(std::string("cannot write ") + file + " in " + dir);
    write_features_csv(out, set);
  };
  write_set("train.csv", bench.train);
  write_set("test_id.csv", bench.test_id);
  write_set("test_ood.csv", bench.test_ood);

  nlohmann::json manifest;
  manifest["generator"] = generator;
  try {
    manifest["params"] = nlohmann::json::parse(params_json);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(std::string("manifest params must be valid JSON: ") + e.what());
  }
  manifest["seed"] = bench.seed;
  manifest["separation"] = bench.separation;
  manifest["files"] = {{"train", "train.csv"}, {"test_id", "test_id.csv"},
                       {"test_ood", "test_ood.csv"}};
  manifest["normalization"] = {{"mean", bench.norm.mean}, {"stddev", bench.norm.stddev}};

  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw UsageError("cannot write manifest.json in " + dir);
  out << manifest.dump(2) << '\n';
}

} // namespace ood::data
