#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ood/data.hpp"
#include "ood/errors.hpp"
#include "ood/fmtnum.hpp"
#include "ood/harness.hpp"
#include "ood/metrics.hpp"
#include "ood/nn.hpp"
#include "ood/scores.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using ood::harness::ExperimentConfig;
using ood::harness::MethodSpec;

// caller-fault errors exit 2, runtime failures exit 1
int exit_code_for(const ood::Error& e) {
  if (dynamic_cast<const ood::ParseError*>(&e) != nullptr ||
      dynamic_cast<const ood::ValueError*>(&e) != nullptr ||
      dynamic_cast<const ood::UsageError*>(&e) != nullptr)
    return 2;
  return 1;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw ood::UsageError("cannot write " + path);
  out << content;
}

std::vector<std::string> split_list(const std::string& arg) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = arg.find(',', pos);
    out.push_back(arg.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<double> parse_taus(const std::string& arg) {
  std::vector<double> taus;
  for (const std::string& tok : split_list(arg)) {
    double v = 0.0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || res.ec != std::errc() || res.ptr != tok.data() + tok.size())
      throw ood::ParseError("--taus: bad temperature \"" + tok + "\"");
    taus.push_back(v);
  }
  return taus;
}

std::vector<std::optional<ood::scores::PoolSpec>> parse_pools(const std::string& arg) {
  std::vector<std::optional<ood::scores::PoolSpec>> pools;
  for (const std::string& tok : split_list(arg)) pools.push_back(ood::harness::parse_pool_token(tok));
  return pools;
}

const MethodSpec& find_method(const ExperimentConfig& cfg, const std::string& label) {
  for (const auto& m : cfg.methods)
    if (m.label == label) return m;
  std::string known;
  for (const auto& m : cfg.methods) {
    if (!known.empty()) known += ", ";
    known += m.label;
  }
  throw ood::UsageError("config has no method \"" + label + "\" (has: " + known + ")");
}

int cmd_gen(const std::string& config_path, const std::string& out_dir,
            const std::optional<std::uint64_t>& seed_arg) {
  const ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
  std::string generator;
  std::uint64_t seed = 0;
  json params;
  switch (cfg.benchmark.kind) {
    case ood::harness::BenchmarkSpec::Kind::Gaussian: {
      const auto& g = cfg.benchmark.gaussian;
      generator = "gaussian";
      seed = seed_arg.value_or(g.seed);
      params["dim"] = g.dim;
      params["classes"] = g.classes;
      params["n_train_per_class"] = g.n_train_per_class;
      params["n_test_per_class"] = g.n_test_per_class;
      params["n_ood"] = g.n_ood;
      params["spread"] = g.spread;
      params["ood_shift"] = g.ood_shift;
      break;
    }
    case ood::harness::BenchmarkSpec::Kind::Moons: {
      const auto& g = cfg.benchmark.moons;
      generator = "moons";
      seed = seed_arg.value_or(g.seed);
      params["n_train_per_class"] = g.n_train_per_class;
      params["n_test_per_class"] = g.n_test_per_class;
      params["n_ood"] = g.n_ood;
      params["noise"] = g.noise;
      params["ood_ring_radius"] = g.ood_ring_radius;
      break;
    }
    case ood::harness::BenchmarkSpec::Kind::Csv:
      generator = "csv";
      seed = seed_arg.value_or(0);
      params["train_csv"] = cfg.benchmark.train_csv;
      params["test_id_csv"] = cfg.benchmark.test_id_csv;
      params["test_ood_csv"] = cfg.benchmark.test_ood_csv;
      break;
  }
  params["seed"] = seed;
  const ood::data::OodBenchmark bench = ood::harness::make_benchmark(cfg.benchmark, seed);
  ood::data::write_benchmark_dir(out_dir, bench, generator, params.dump());
  std::cout << "wrote " << out_dir << " (train " << bench.train.n << ", test_id "
            << bench.test_id.n << ", test_ood " << bench.test_ood.n << ")\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_path,
              const std::optional<std::uint64_t>& seed_arg, const std::string& method_label) {
  const ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
  const std::uint64_t seed = seed_arg.value_or(cfg.seeds.front());
  const ood::data::OodBenchmark bench = ood::harness::make_benchmark(cfg.benchmark, seed);
  const ood::nn::MlpConfig model_cfg = ood::harness::resolve_model(cfg, bench, seed);

  double final_loss = 0.0;
  if (!method_label.empty() && find_method(cfg, method_label).name == "duq") {
    ood::nn::DuqModel model(ood::harness::resolve_duq(find_method(cfg, method_label), model_cfg));
    const auto result = ood::nn::duq_train(model, bench.train);
    final_loss = result.epoch_loss.back();
    model.save(out_path);
  } else {
    // every other method scores the shared base classifier
    ood::nn::Classifier clf(model_cfg);
    const auto result = ood::nn::train(clf, bench.train);
    final_loss = result.epoch_loss.back();
    clf.save(out_path);
  }
  std::cout << "saved " << out_path << " (seed " << seed << ", final epoch loss "
            << ood::format_double(final_loss) << ")\n";
  return 0;
}

int cmd_score(const std::string& config_path, const std::string& method_label,
              const std::string& out_path, const std::optional<std::uint64_t>& seed_arg) {
  const ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
  const MethodSpec& method = find_method(cfg, method_label);
  const std::uint64_t seed = seed_arg.value_or(cfg.seeds.front());
  const ood::harness::MethodScores ms = ood::harness::score_method(cfg, method, seed);

  std::vector<ood::scores::ScoredSample> rows = ms.id;
  rows.insert(rows.end(), ms.ood.begin(), ms.ood.end());
  std::vector<int> true_class = ms.id_true_class;
  true_class.resize(rows.size(), -1);

  std::ofstream out(out_path);
  if (!out) throw ood::UsageError("cannot write " + out_path);
  ood::scores::write_scores_csv(out, rows, true_class);
  for (const auto& note : ms.notices) std::cout << "notice: " << note << "\n";
  std::cout << "wrote " << out_path << " (" << ms.id.size() << " id, " << ms.ood.size()
            << " ood)\n";
  return 0;
}

int cmd_eval(const std::string& scores_path, const std::string& config_path,
             const std::string& out_path, const std::string& format) {
  std::ifstream in(scores_path);
  if (!in) throw ood::UsageError("cannot open " + scores_path);
  const ood::scores::ScoresFile file = ood::scores::read_scores_csv(in, scores_path);
  const std::string fingerprint =
      config_path.empty() ? "" : ExperimentConfig::from_file(config_path).fingerprint();
  const ood::metrics::EvalReport er = ood::harness::eval_scores(file, fingerprint);

  std::string text;
  if (format == "json") {
    text = ood::metrics::report_to_json(er) + "\n";
  } else {
    const std::string ece = er.has_ece ? ood::format_double(er.ece) : "";
    const auto row = [&](const std::string& key, const std::string& value) {
      if (format == "csv") return key + "," + value + "\n";
      return "| " + key + " | " + value + " |\n";
    };
    if (format == "md") text = "| metric | value |\n|---|---|\n";
    if (format == "csv") text = "metric,value\n";
    text += row("auroc", ood::format_double(er.auroc));
    text += row("aucpr", ood::format_double(er.aucpr));
    text += row("id_accuracy", ood::format_double(er.id_accuracy));
    text += row("ece", ece);
    text += row("n_id", std::to_string(er.n_id));
    text += row("n_ood", std::to_string(er.n_ood));
    text += row("method", er.method);
    text += row("config_fingerprint", er.config_fingerprint);
  }
  if (out_path.empty())
    std::cout << text;
  else
    write_text(out_path, text);
  return 0;
}

int cmd_bench(const std::string& config_path, const std::string& out_arg,
              const std::string& format) {
  const ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
  const ood::harness::RunReport report = ood::harness::run(cfg);

  const std::string out_dir = out_arg.empty() ? cfg.out_dir : out_arg;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "report.json").string(), report.to_json(true));
    write_text((fs::path(out_dir) / "report.md").string(), report.markdown_table());
  }
  for (const auto& cell : report.cells)
    if (!cell.ok)
      std::cerr << "cell failed: seed " << cell.seed << ", method " << cell.label << ": "
                << cell.error << "\n";
  if (format == "json")
    std::cout << report.to_json(true);
  else
    std::cout << report.markdown_table();
  return report.all_ok() ? 0 : 1;
}

int cmd_sweep_temp(const std::string& config_path, const std::string& taus_arg,
                   const std::string& out_dir, const std::string& format) {
  const ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
  const ood::harness::TempSweep sweep = ood::harness::sweep_temperature(cfg, parse_taus(taus_arg));
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "sweep_temperature.json").string(), sweep.to_json());
    for (const auto& row : sweep.rows) {
      const std::string name =
          "reliability_" + row.method + "_tau" + ood::format_double(row.tau) + ".csv";
      std::ofstream out(fs::path(out_dir) / name);
      if (!out) throw ood::UsageError("cannot write " + name);
      ood::metrics::write_reliability_csv(out, row.bins);
    }
  }
  if (format == "json")
    std::cout << sweep.to_json();
  else
    std::cout << sweep.markdown_table();
  return 0;
}

int cmd_sweep_pool(const std::string& config_path, const std::string& pools_arg,
                   const std::string& out_dir, const std::string& format) {
  const ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
  const ood::harness::PoolSweep sweep = ood::harness::sweep_pooling(cfg, parse_pools(pools_arg));
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text((fs::path(out_dir) / "sweep_pooling.json").string(), sweep.to_json());
    write_text((fs::path(out_dir) / "sweep_pooling.md").string(), sweep.markdown_table());
  }
  if (format == "json")
    std::cout << sweep.to_json();
  else
    std::cout << sweep.markdown_table();
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"confidence-based out-of-distribution detection test bed"};
  app.require_subcommand(1);

  std::string config_path, out_arg, scores_path, method_label;
  std::string format_eval = "json", format_report = "md";
  std::string taus_arg = "1,5,1000", pools_arg = "none,2x2s2";
  std::uint64_t seed_val = 0;

  auto* gen = app.add_subcommand("gen", "generate a benchmark directory from a config");
  gen->add_option("--config", config_path, "experiment config")->required();
  gen->add_option("--out", out_arg, "output directory")->required();
  gen->add_option("--seed", seed_val, "override the generator seed");

  auto* train = app.add_subcommand("train", "train one model and save its checkpoint");
  train->add_option("--config", config_path, "experiment config")->required();
  train->add_option("--out", out_arg, "checkpoint path")->required();
  train->add_option("--seed", seed_val, "run seed (default: first config seed)");
  train->add_option("--method", method_label, "train what this method needs (default: the base model)");

  auto* score = app.add_subcommand("score", "train and score one method, writing a scores csv");
  score->add_option("--config", config_path, "experiment config")->required();
  score->add_option("--method", method_label, "method label from the config")->required();
  score->add_option("--out", out_arg, "scores csv path")->required();
  score->add_option("--seed", seed_val, "run seed (default: first config seed)");

  auto* eval = app.add_subcommand("eval", "metrics over a scores csv");
  eval->add_option("--scores", scores_path, "scores csv")->required();
  eval->add_option("--config", config_path, "config whose fingerprint to stamp");
  eval->add_option("--out", out_arg, "report path (default: stdout)");
  eval->add_option("--format", format_eval, "json, csv or md")
      ->check(CLI::IsMember({"json", "csv", "md"}));

  auto* bench = app.add_subcommand("bench", "run every method on every seed");
  bench->add_option("--config", config_path, "experiment config")->required();
  bench->add_option("--out", out_arg, "report directory (default: the config's out_dir)");
  bench->add_option("--format", format_report, "md or json")
      ->check(CLI::IsMember({"md", "json"}));

  auto* stemp = app.add_subcommand("sweep-temp", "calibration against the temperature knob");
  stemp->add_option("--config", config_path, "experiment config")->required();
  stemp->add_option("--taus", taus_arg, "comma-separated temperatures");
  stemp->add_option("--out", out_arg, "output directory for the json and reliability csvs");
  stemp->add_option("--format", format_report, "md or json")
      ->check(CLI::IsMember({"md", "json"}));

  auto* spool = app.add_subcommand("sweep-pool", "mahalanobis auroc against feature pooling");
  spool->add_option("--config", config_path, "experiment config")->required();
  spool->add_option("--pools", pools_arg, "comma-separated pool tokens, e.g. none,2x2s2");
  spool->add_option("--out", out_arg, "output directory");
  spool->add_option("--format", format_report, "md or json")
      ->check(CLI::IsMember({"md", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const auto seed_of = [&](const CLI::App* sub) -> std::optional<std::uint64_t> {
    return sub->count("--seed") > 0 ? std::optional<std::uint64_t>(seed_val) : std::nullopt;
  };
  try {
    if (gen->parsed()) return cmd_gen(config_path, out_arg, seed_of(gen));
    if (train->parsed()) return cmd_train(config_path, out_arg, seed_of(train), method_label);
    if (score->parsed()) return cmd_score(config_path, method_label, out_arg, seed_of(score));
    if (eval->parsed()) return cmd_eval(scores_path, config_path, out_arg, format_eval);
    if (bench->parsed()) return cmd_bench(config_path, out_arg, format_report);
    if (stemp->parsed()) return cmd_sweep_temp(config_path, taus_arg, out_arg, format_report);
    if (spool->parsed()) return cmd_sweep_pool(config_path, pools_arg, out_arg, format_report);
  } catch (const ood::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
