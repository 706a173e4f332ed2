#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advspk/data.hpp"
#include "advspk/eval.hpp"
#include "advspk/frontend.hpp"
#include "advspk/model.hpp"
#include "advspk/training.hpp"

namespace advspk {

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint, report or directory a command needs is absent.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

enum class CorpusKind { kSynthetic, kDirectory };

struct CorpusSection {
  CorpusKind kind = CorpusKind::kSynthetic;
  SynthConfig synthetic;
  std::string root;  // for kDirectory
  double sample_rate = 16000.0;
  std::uint64_t split_seed = 0;
};

struct EvalSection {
  double epsilon = 0.002;
  /// Attack names: FGSM, PGD<T>, CW<T>, FS<T>, HYB<T>.
  std::vector<std::string> attacks{"FGSM", "PGD10", "PGD40", "CW10", "CW40", "FS10", "FS40"};
  /// Checkpoints to craft transfer attacks on.
  std::vector<std::string> transfer_sources;
  std::vector<std::string> transfer_attacks{"PGD40", "CW40"};
  std::vector<double> epsilon_sweep;
  std::vector<std::size_t> iteration_sweep;
  std::string sweep_attack = "PGD";
  std::size_t batch_size = 64;
  std::size_t segment_length = 48000;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";
  CorpusSection corpus;
  FrontendConfig frontend;
  SpeakerCNNConfig model;
  TrainConfig train;
  /// Write the checkpoint every k epochs as well as at the end; 0 disables.
  std::size_t checkpoint_every = 0;
  EvalSection eval;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j);

/// Parses "NAME" for an attack budget: FGSM, PGD10, CW40, FS20, HYB10.
AttackSpec parse_attack(const std::string& name, double epsilon, const AttackSpec& base = {});

struct Diagnostics {
  std::vector<std::string> violations;
  std::vector<std::string> warnings;
  bool ok() const { return violations.empty(); }
};

/// Field-level checks plus warnings for values that depart from the
/// reference recipe (epsilon 0.002, T = 10, margin 50, ...).
Diagnostics validate_config(const ExperimentConfig& config);

/// Stable hash of the canonical (sorted-key) JSON form.
std::string config_fingerprint(const ExperimentConfig& config);

/// Reads a JSON config and applies "dotted.key=value" overrides. Values are
/// parsed as JSON when possible, else taken as strings.
nlohmann::json load_config_json(const std::filesystem::path& path, const std::vector<std::string>& overrides);
void apply_override(nlohmann::json& doc, const std::string& assignment);

struct RunOptions {
  bool deterministic = false;
  std::ostream* log = nullptr;
};

/// Holds <dir>/.lock for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

Corpus build_corpus(const ExperimentConfig& config);

/// Artifacts under config.output_dir.
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path checkpoint() const { return dir / "model.ckpt"; }
  std::filesystem::path train_log() const { return dir / "train_log.jsonl"; }
  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path report() const { return dir / "report.jsonl"; }
  std::filesystem::path table() const { return dir / "table.txt"; }
  std::filesystem::path curves() const { return dir / "curves.csv"; }
  std::filesystem::path adversarial() const { return dir / "adversarial"; }
  std::filesystem::path snr() const { return dir / "snr.json"; }
  std::filesystem::path ablation() const { return dir / "ablation.txt"; }
  std::filesystem::path ablation_log() const { return dir / "ablation.jsonl"; }
};

TrainState state_from_checkpoint(const Checkpoint& checkpoint);

/// Resumes from an existing checkpoint in the output directory when it was
/// written by the same configuration.
Checkpoint run_train(const ExperimentConfig& config, const RunOptions& options);
/// Adversarial WAVs for the test split under `attack` plus SNR statistics.
SnrStats run_attack(const ExperimentConfig& config, const std::string& attack, const RunOptions& options);
RobustnessReport run_eval(const ExperimentConfig& config, const RunOptions& options);
AblationReport run_ablate(const ExperimentConfig& config, const RunOptions& options);
/// Table across run directories; refuses runs on different corpora.
std::string run_report(const std::vector<std::filesystem::path>& run_dirs, const std::vector<std::size_t>& iterations);

}  // namespace advspk
