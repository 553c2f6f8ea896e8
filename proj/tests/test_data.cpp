#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "ood/data.hpp"
#include "ood/errors.hpp"
#include "test_util.hpp"

using namespace ood::data;

namespace {

// undoes the stored z-score so geometric invariants can be checked in the
// generator's coordinate system
LabeledSet denormalize(const LabeledSet& set, const Normalization& norm) {
  LabeledSet raw = set;
  for (std::size_t i = 0; i < raw.n; ++i) {
    double* row = raw.features.data() + i * raw.dim;
    for (std::size_t j = 0; j < raw.dim; ++j) {
      row[j] = row[j] * norm.stddev[j] + norm.mean[j];
    }
  }
  return raw;
}

std::vector<std::vector<double>> class_means(const LabeledSet& set, std::size_t classes) {
  std::vector<std::vector<double>> means(classes, std::vector<double>(set.dim, 0.0));
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t i = 0; i < set.n; ++i) {
    const int c = set.labels[i];
    counts[c]++;
    for (std::size_t j = 0; j < set.dim; ++j) means[c][j] += set.row(i)[j];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    for (double& v : means[c]) v /= static_cast<double>(counts[c]);
  }
  return means;
}

std::vector<double> set_mean(const LabeledSet& set) {
  std::vector<double> m(set.dim, 0.0);
  for (std::size_t i = 0; i < set.n; ++i) {
    for (std::size_t j = 0; j < set.dim; ++j) m[j] += set.row(i)[j];
  }
  for (double& v : m) v /= static_cast<double>(set.n);
  return m;
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

} // namespace

TEST_CASE("gaussian benchmark is bit-reproducible per seed") {
  GaussianSpec spec;
  spec.n_train_per_class = 50;
  spec.n_test_per_class = 20;
  spec.n_ood = 30;
  const auto a = gen_gaussian_benchmark(spec);
  const auto b = gen_gaussian_benchmark(spec);
  CHECK(testutil::bit_equal(a.train.features, b.train.features));
  CHECK(testutil::bit_equal(a.test_id.features, b.test_id.features));
  CHECK(testutil::bit_equal(a.test_ood.features, b.test_ood.features));
  CHECK(a.train.labels == b.train.labels);

  spec.seed = 43;
  const auto c = gen_gaussian_benchmark(spec);
  CHECK_FALSE(testutil::bit_equal(a.train.features, c.train.features));
}

TEST_CASE("gaussian benchmark shapes, labels and separation tag") {
  GaussianSpec spec;
  spec.dim = 3;
  spec.classes = 4;
  spec.n_train_per_class = 40;
  spec.n_test_per_class = 15;
  spec.n_ood = 25;
  const auto bench = gen_gaussian_benchmark(spec);

  CHECK(bench.train.n == 160);
  CHECK(bench.train.dim == 3);
  CHECK(bench.train.features.size() == 160 * 3);
  CHECK(bench.test_id.n == 60);
  CHECK(bench.test_ood.n == 25);
  CHECK(bench.test_ood.labels.empty());
  CHECK(bench.separation == "far");
  for (int label : bench.train.labels) {
    CHECK(label >= 0);
    CHECK(label < 4);
  }
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(std::count(bench.train.labels.begin(), bench.train.labels.end(), int(c)) == 40);
  }

  GaussianSpec near = spec;
  near.ood_shift = 1.0;
  CHECK(gen_gaussian_benchmark(near).separation == "overlapping");
}

TEST_CASE("training features are z-scored") {
  GaussianSpec spec;
  spec.n_train_per_class = 80;
  spec.n_test_per_class = 10;
  spec.n_ood = 10;
  const auto bench = gen_gaussian_benchmark(spec);
  const auto mean = set_mean(bench.train);
  for (double m : mean) CHECK(std::fabs(m) <= 1e-10);
  for (std::size_t j = 0; j < bench.train.dim; ++j) {
    double var = 0.0;
    for (std::size_t i = 0; i < bench.train.n; ++i) {
      const double d = bench.train.row(i)[j] - mean[j];
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(bench.train.n));
    CHECK(std::fabs(sd - 1.0) <= 1e-10);
  }
}

TEST_CASE("class centers honor the minimum separation in generator space") {
  GaussianSpec spec;
  spec.classes = 3;
  spec.spread = 0.7;
  spec.n_train_per_class = 400;
  spec.n_test_per_class = 10;
  spec.n_ood = 10;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    spec.seed = seed;
    const auto bench = gen_gaussian_benchmark(spec);
    const auto raw = denormalize(bench.train, bench.norm);
    const auto means = class_means(raw, spec.classes);
    for (std::size_t a = 0; a < means.size(); ++a) {
      for (std::size_t b = a + 1; b < means.size(); ++b) {
        // empirical means sit within a fraction of spread from the centers
        CHECK(dist(means[a], means[b]) >= 8.0 * spec.spread - 0.5 * spec.spread);
      }
    }
  }
}

TEST_CASE("ood cluster sits at the requested distance from its nearest center") {
  GaussianSpec spec;
  spec.classes = 3;
  spec.n_train_per_class = 400;
  spec.n_test_per_class = 10;
  spec.n_ood = 400;
  spec.ood_shift = 3.0;
  const auto bench = gen_gaussian_benchmark(spec);
  const auto raw_train = denormalize(bench.train, bench.norm);
  const auto raw_ood = denormalize(bench.test_ood, bench.norm);
  const auto means = class_means(raw_train, spec.classes);
  const auto ood_mean = set_mean(raw_ood);
  double nearest = 1e300;
  for (const auto& m : means) nearest = std::min(nearest, dist(ood_mean, m));
  CHECK(nearest == doctest::Approx(spec.ood_shift).epsilon(0.15));
}

TEST_CASE("zero shift collapses the ood cluster onto its anchor") {
  GaussianSpec spec;
  spec.n_train_per_class = 400;
  spec.n_test_per_class = 10;
  spec.n_ood = 400;
  spec.ood_shift = 0.0;
  const auto bench = gen_gaussian_benchmark(spec);
  CHECK(bench.separation == "overlapping");
  const auto raw_train = denormalize(bench.train, bench.norm);
  const auto raw_ood = denormalize(bench.test_ood, bench.norm);
  const auto means = class_means(raw_train, spec.classes);
  const auto ood_mean = set_mean(raw_ood);
  double nearest = 1e300;
  for (const auto& m : means) nearest = std::min(nearest, dist(ood_mean, m));
  CHECK(nearest <= 0.2);
}

TEST_CASE("moons benchmark geometry") {
  MoonsSpec spec;
  spec.n_train_per_class = 150;
  spec.n_test_per_class = 50;
  spec.n_ood = 200;
  const auto bench = gen_moons_benchmark(spec);
  CHECK(bench.train.dim == 2);
  CHECK(bench.train.n == 300);
  CHECK(bench.test_ood.n == 200);
  CHECK(bench.separation == "far");

  const auto raw_ood = denormalize(bench.test_ood, bench.norm);
  double mean_r = 0.0;
  for (std::size_t i = 0; i < raw_ood.n; ++i) {
    const double dx = raw_ood.row(i)[0] - 0.5;
    const double dy = raw_ood.row(i)[1] - 0.25;
    mean_r += std::sqrt(dx * dx + dy * dy);
  }
  mean_r /= static_cast<double>(raw_ood.n);
  CHECK(mean_r == doctest::Approx(spec.ood_ring_radius).epsilon(0.05));

  const auto again = gen_moons_benchmark(spec);
  CHECK(testutil::bit_equal(bench.train.features, again.train.features));
}

TEST_CASE("spec validation") {
  GaussianSpec g;
  g.classes = 1;
  CHECK_THROWS_AS(gen_gaussian_benchmark(g), ood::ValueError);
  g = {};
  g.spread = 0.0;
  CHECK_THROWS_AS(gen_gaussian_benchmark(g), ood::ValueError);
  g = {};
  g.n_ood = 0;
  CHECK_THROWS_AS(gen_gaussian_benchmark(g), ood::ValueError);
  // 12 centers pairwise 8*spread apart cannot fit in the 2-D sampling box
  g = {};
  g.classes = 12;
  CHECK_THROWS_AS(gen_gaussian_benchmark(g), ood::UsageError);

  MoonsSpec m;
  m.noise = -0.1;
  CHECK_THROWS_AS(gen_moons_benchmark(m), ood::ValueError);
}

TEST_CASE("csv round trip is exact") {
  GaussianSpec spec;
  spec.n_train_per_class = 30;
  spec.n_test_per_class = 10;
  spec.n_ood = 10;
  const auto bench = gen_gaussian_benchmark(spec);

  std::stringstream buf;
  write_features_csv(buf, bench.train);
  std::stringstream header_probe(buf.str());
  const auto schema = infer_schema(header_probe, "train.csv");
  CHECK(schema.feature_columns == std::vector<std::string>{"f0", "f1"});
  REQUIRE(schema.label_column.has_value());

  const auto back = ingest_csv(buf, schema, "train.csv");
  CHECK(back.n == bench.train.n);
  CHECK(back.dim == bench.train.dim);
  CHECK(testutil::bit_equal(back.features, bench.train.features));
  CHECK(back.labels == bench.train.labels);

  // unlabeled sets round trip without a label column
  std::stringstream buf2;
  write_features_csv(buf2, bench.test_ood);
  std::stringstream probe2(buf2.str());
  const auto schema2 = infer_schema(probe2, "test_ood.csv");
  CHECK_FALSE(schema2.label_column.has_value());
  const auto ood_back = ingest_csv(buf2, schema2, "test_ood.csv");
  CHECK(testutil::bit_equal(ood_back.features, bench.test_ood.features));
}

TEST_CASE("csv ingestion rejects malformed input with row context") {
  CsvSchema schema{{"f0", "f1"}, std::string("label")};

  std::stringstream wrong_header("a,b,label\n1,2,0\n");
  CHECK_THROWS_WITH_AS(ingest_csv(wrong_header, schema, "x.csv"),
                       doctest::Contains("header mismatch"), ood::ParseError);

  std::stringstream bad_cell("f0,f1,label\n1,2,0\n1,oops,1\n");
  CHECK_THROWS_WITH_AS(ingest_csv(bad_cell, schema, "x.csv"), doctest::Contains("row 3"),
                       ood::ParseError);

  std::stringstream short_row("f0,f1,label\n1,2\n");
  CHECK_THROWS_WITH_AS(ingest_csv(short_row, schema, "x.csv"), doctest::Contains("row 2"),
                       ood::ParseError);

  std::stringstream bad_label("f0,f1,label\n1,2,1.5\n");
  CHECK_THROWS_AS(ingest_csv(bad_label, schema, "x.csv"), ood::ParseError);

  std::stringstream empty("");
  CHECK_THROWS_AS(ingest_csv(empty, schema, "x.csv"), ood::ParseError);

  std::stringstream only_header("f0,f1,label\n");
  CHECK_THROWS_WITH_AS(ingest_csv(only_header, schema, "x.csv"),
                       doctest::Contains("no data rows"), ood::ParseError);
}

TEST_CASE("benchmark directory export") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "oodkit_test_data_dir";
  fs::remove_all(dir);

  GaussianSpec spec;
  spec.n_train_per_class = 10;
  spec.n_test_per_class = 5;
  spec.n_ood = 5;
  const auto bench = gen_gaussian_benchmark(spec);
  write_benchmark_dir(dir.string(), bench, "gaussian", R"({"dim":2,"classes":3})");

  for (const char* f : {"train.csv", "test_id.csv", "test_ood.csv", "manifest.json"}) {
    CHECK(fs::exists(dir / f));
  }
  std::ifstream mf(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(mf);
  CHECK(manifest["generator"] == "gaussian");
  CHECK(manifest["seed"] == 42);
  CHECK(manifest["params"]["classes"] == 3);
  CHECK(manifest["files"]["train"] == "train.csv");
  fs::remove_all(dir);
}
