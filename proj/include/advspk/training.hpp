#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advspk/attacks.hpp"
#include "advspk/data.hpp"
#include "advspk/model.hpp"

namespace advspk {

enum class DefenseKind { kStandard, kFgsmAt, kPgdAt, kFsAt, kHat };

const char* defense_name(DefenseKind kind);
DefenseKind parse_defense(const std::string& name);

/// Learning rate `lr` applies to epochs up to and including `until_epoch`.
struct LrStep {
  std::size_t until_epoch = 0;
  double lr = 0.1;
};

/// 0.1 through epoch 60, 0.01 through 90, 0.001 afterwards.
std::vector<LrStep> paper_lr_schedule();

/// Piecewise-constant rate for a 1-based epoch; the last step extends forever.
double lr_at(const std::vector<LrStep>& schedule, std::size_t epoch);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  std::size_t segment_length = 48000;
  std::vector<LrStep> lr_schedule = paper_lr_schedule();
  double momentum = 0.9;
  double w1 = 1.0;  // clean CE weight
  double w2 = 1.0;  // adversarial CE weight
  /// Budget and, for HAT, the inner loss weights.
  AttackSpec attack = AttackSpec::hybrid(0.002, 10);
  DefenseKind defense = DefenseKind::kHat;
  std::uint64_t seed = 0;

  void validate() const;
};

/// The inner attack a defense trains against: FGSM-AT a single full step on
/// CE, PGD-AT CE, FS-AT the transport loss, HAT the configured weights.
AttackSpec training_attack(const TrainConfig& config);

/// v' = momentum * v + g; theta' = theta - lr * v'. Throws NumericError on a
/// non-finite gradient before touching anything.
void sgd_momentum_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads, std::vector<Tensor>& velocity,
                         double lr, double momentum);

struct EpochRecord {
  std::size_t epoch = 0;
  double clean_loss = 0.0;
  double adv_loss = 0.0;  // 0 for standard training
  double train_accuracy = 0.0;  // percent, clean inputs
  double lr = 0.0;
  double wall_seconds = 0.0;
  std::string defense;
  LossWeights attack_weights{0.0, 0.0, 0.0};
  std::size_t batches = 0;
  double max_linf = 0.0;  // largest training perturbation seen

  /// Equality ignoring wall time.
  bool same_result(const EpochRecord& other) const;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

struct TrainState {
  ModelParams params;
  std::vector<Tensor> velocity;
  std::size_t epochs_done = 0;
};

TrainState initial_state(const SpeakerModel& model, std::uint64_t seed);

/// One pass over the training split (epoch = state.epochs_done + 1). On a
/// non-finite loss or gradient the state is left unchanged and NumericError
/// is thrown.
EpochRecord train_epoch(const SpeakerModel& model, TrainState& state, const Corpus& corpus, const TrainConfig& config);

using EpochCallback = std::function<void(const EpochRecord&, const TrainState&)>;

/// Runs epochs until state.epochs_done == config.epochs.
std::vector<EpochRecord> train(const SpeakerModel& model, TrainState& state, const Corpus& corpus,
                               const TrainConfig& config, const EpochCallback& on_epoch = nullptr);

}  // namespace advspk
