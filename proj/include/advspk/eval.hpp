#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advspk/attacks.hpp"
#include "advspk/data.hpp"
#include "advspk/model.hpp"
#include "advspk/training.hpp"

namespace advspk {

/// A model together with the parameters to evaluate.
struct ModelRef {
  const SpeakerModel* model = nullptr;
  const ModelParams* params = nullptr;
  std::string name;
};

struct EvalOptions {
  std::size_t batch_size = 64;
  std::size_t segment_length = 48000;
  Split split = Split::kTest;
  std::uint64_t seed = 0;  // per-batch attack seeds derive from this
};

struct SnrStats {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t perturbed = 0;  // rows with a finite SNR
};

SnrStats summarize_snr(std::span<const double> snr);

struct AttackOutcome {
  double accuracy = 0.0;  // percent
  std::size_t samples = 0;
  SnrStats snr;
  double max_linf = 0.0;
};

/// Percent of the split classified correctly, center crops, eval-mode norm.
double clean_accuracy(const ModelRef& target, const Corpus& corpus, const EvalOptions& options);

/// White-box: adversaries are crafted on the target itself. A zero budget
/// skips the attack and reproduces clean accuracy exactly.
AttackOutcome accuracy_under_attack(const ModelRef& target, const Corpus& corpus, const AttackSpec& spec,
                                    const EvalOptions& options);

/// Adversaries crafted on `source` with the same per-batch seeds, scored on
/// `target`.
AttackOutcome transfer_eval(const ModelRef& source, const ModelRef& target, const Corpus& corpus,
                            const AttackSpec& spec, const EvalOptions& options);

/// Display name such as "FGSM", "PGD10", "CW40", "FS20", "HYB10", or
/// "MIX(b,g,z)T" for other weightings.
std::string attack_label(const AttackSpec& spec);

struct CurvePoint {
  double x = 0.0;
  double accuracy = 0.0;
};

struct Curve {
  std::string attack;
  std::uint64_t seed = 0;
  std::vector<CurvePoint> points;
};

/// One point per budget, alpha kept at the template's alpha/epsilon ratio
/// (epsilon / 5 for the iterative presets). Budgets must be >= 0 and strictly
/// ascending; a zero budget yields clean accuracy.
Curve epsilon_sweep(const ModelRef& target, const Corpus& corpus, std::span<const double> epsilons,
                    const AttackSpec& attack_template, const EvalOptions& options);

/// One point per iteration count (>= 1, strictly ascending). T = 1 is the
/// single full-budget step without random start.
Curve iteration_sweep(const ModelRef& target, const Corpus& corpus, std::span<const std::size_t> iterations,
                      const AttackSpec& attack_template, const EvalOptions& options);

void write_curves_csv(const std::filesystem::path& path, const std::vector<Curve>& curves);

/// Loss subsets {CE, FS, M} as inner-loss weights.
struct LossSubset {
  std::string name;  // e.g. "CE+FS"
  LossWeights weights;
};

/// The seven nonempty subsets, full CE+FS+M last.
std::vector<LossSubset> all_loss_subsets();

struct AblationRow {
  LossSubset subset;
  LossWeights trained_weights;  // read back from the training log
  double pgd = 0.0;
  double cw = 0.0;
  double pgd_diff = 0.0;  // full recipe minus this row
  double cw_diff = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  AttackSpec pgd;
  AttackSpec cw;
};

/// Trains one HAT model per subset from the same initial seed and evaluates
/// each under `pgd` and `cw`. Differences are relative to the CE+FS+M row,
/// which must be among the subsets.
using AblationProgress = std::function<void(const LossSubset&, const EpochRecord&)>;
AblationReport ablation_grid(const SpeakerModel& model, const Corpus& corpus, const TrainConfig& recipe,
                             const std::vector<LossSubset>& subsets, const AttackSpec& pgd, const AttackSpec& cw,
                             const EvalOptions& options, const AblationProgress& progress = nullptr);

std::string render_ablation(const AblationReport& report);

struct MaskingOptions {
  AttackSpec iterative = AttackSpec::pgd(0.002, 10);
  AttackSpec one_step = AttackSpec::fgsm(0.002);
  double large_epsilon = 0.1;
  double large_epsilon_ceiling = 5.0;  // percent
  double tolerance = 0.0;  // slack, in points, for checks (a) and (b)
};

struct MaskingReport {
  bool black_box_above_white_box = false;  // (a)
  bool iterative_below_one_step = false;   // (b)
  bool large_budget_breaks_model = false;  // (c)
  double white_box = 0.0;
  std::vector<std::pair<std::string, double>> black_box;  // per source
  double one_step = 0.0;
  double large_budget = 0.0;

  bool all() const { return black_box_above_white_box && iterative_below_one_step && large_budget_breaks_model; }
  std::string evidence() const;
};

/// Sanity checks against gradient masking: (a) transfer accuracy from every
/// source is at least white-box accuracy, (b) the iterative attack is at
/// least as strong as the one-step attack, (c) a large budget drives accuracy
/// below the ceiling.
MaskingReport masking_checks(const ModelRef& target, const std::vector<ModelRef>& sources, const Corpus& corpus,
                             const MaskingOptions& masking, const EvalOptions& options);

/// One evaluated scenario.
struct ReportEntry {
  std::string model;
  std::string source;  // empty for white-box
  std::string attack;
  AttackSpec spec;
  double accuracy = 0.0;
  SnrStats snr;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  std::string corpus_fingerprint;
  std::string timestamp;
};

void to_json(nlohmann::json& j, const ReportEntry& e);
void from_json(const nlohmann::json& j, ReportEntry& e);
void to_json(nlohmann::json& j, const AttackSpec& s);
void from_json(const nlohmann::json& j, AttackSpec& s);

struct RobustnessReport {
  std::string model;
  double clean_accuracy = 0.0;
  std::vector<ReportEntry> entries;

  /// Accuracy for an attack label, white-box entries only.
  std::optional<double> find(const std::string& attack) const;
};

/// Appends one JSON object per line.
void append_jsonl(const std::filesystem::path& path, const std::vector<ReportEntry>& entries);
std::vector<ReportEntry> read_jsonl(const std::filesystem::path& path);

/// Defense | Clean | FGSM | PGD T.. | CW T.. | FS T.. with two decimals; a
/// dash marks a missing cell.
std::string render_table(const std::vector<RobustnessReport>& reports, const std::vector<std::size_t>& iterations);

}  // namespace advspk
