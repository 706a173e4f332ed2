// advspk: train, attack and evaluate speaker-identification models.

#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "advspk/experiment.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfigError = 2, kNumericFailure = 3, kMissingArtifact = 4 };

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config = true) {
  auto* opt = cmd->add_option("--config", c.config, "Experiment config (JSON)");
  if (needs_config) opt->required();
  cmd->add_option("--set", c.overrides, "Override a config field, e.g. train.epochs=5 (repeatable)");
  cmd->add_option("--seed", c.seed, "Global seed");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_flag("--deterministic", c.deterministic, "Omit timestamps and wall-clock times from artifacts");
}

advspk::ExperimentConfig load(const Common& c) {
  std::vector<std::string> sets = c.overrides;
  if (c.seed) sets.push_back("seed=" + std::to_string(*c.seed));
  if (!c.out.empty()) sets.push_back("output_dir=" + nlohmann::json(c.out).dump());
  return advspk::experiment_from_json(advspk::load_config_json(c.config, sets));
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const advspk::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const advspk::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return kMissingArtifact;
  } catch (const advspk::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarially robust speaker identification"};
  app.require_subcommand(1);

  Common common;
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  add_common(train, common);

  std::string attack_name = "PGD10";
  auto* attack = app.add_subcommand("attack", "Export adversarial test audio for a trained model");
  add_common(attack, common);
  attack->add_option("--attack", attack_name, "FGSM, PGD<T>, CW<T>, FS<T> or HYB<T>");

  auto* eval = app.add_subcommand("eval", "Evaluate a trained model under the configured attacks");
  add_common(eval, common);

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate one model per inner-loss subset");
  add_common(ablate, common);

  std::vector<std::string> run_dirs;
  std::vector<std::size_t> iterations{10, 40};
  auto* report = app.add_subcommand("report", "Render a comparison table across evaluated runs");
  report->add_option("runs", run_dirs, "Run directories")->required();
  report->add_option("--iterations", iterations, "Iteration columns per attack family");

  auto* validate = app.add_subcommand("validate", "Check a config and list violations and warnings");
  add_common(validate, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  advspk::RunOptions opts;
  opts.deterministic = common.deterministic;
  opts.log = &std::cerr;

  if (*train) {
    return guarded([&] {
      advspk::run_train(load(common), opts);
      return kOk;
    });
  }
  if (*attack) {
    return guarded([&] {
      const auto stats = advspk::run_attack(load(common), attack_name, opts);
      std::cout << "SNR dB: mean " << stats.mean << ", min " << stats.min << ", max " << stats.max << " over "
                << stats.perturbed << " utterances\n";
      return kOk;
    });
  }
  if (*eval) {
    return guarded([&] {
      const auto cfg = load(common);
      advspk::run_eval(cfg, opts);
      std::ifstream table(advspk::RunPaths{cfg.output_dir}.table());
      std::cout << table.rdbuf();
      return kOk;
    });
  }
  if (*ablate) {
    return guarded([&] {
      std::cout << advspk::render_ablation(advspk::run_ablate(load(common), opts));
      return kOk;
    });
  }
  if (*report) {
    return guarded([&] {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      std::cout << advspk::run_report(dirs, iterations);
      return kOk;
    });
  }
  return guarded([&] {
    const auto d = advspk::validate_config(load(common));
    for (const auto& w : d.warnings) std::cout << "warning: " << w << '\n';
    for (const auto& v : d.violations) std::cout << "violation: " << v << '\n';
    if (!d.ok()) return kConfigError;
    std::cout << "ok\n";
    return kOk;
  });
}
