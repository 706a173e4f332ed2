#include "advspk/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "advspk/util.hpp"

namespace advspk {

const char* defense_name(DefenseKind kind) {
  switch (kind) {
    case DefenseKind::kStandard: return "standard";
    case DefenseKind::kFgsmAt: return "fgsm_at";
    case DefenseKind::kPgdAt: return "pgd_at";
    case DefenseKind::kFsAt: return "fs_at";
    case DefenseKind::kHat: return "hat";
  }
  return "?";
}

DefenseKind parse_defense(const std::string& name) {
  for (auto k : {DefenseKind::kStandard, DefenseKind::kFgsmAt, DefenseKind::kPgdAt, DefenseKind::kFsAt,
                 DefenseKind::kHat}) {
    if (name == defense_name(k)) return k;
  }
  throw Error("unknown defense kind '" + name + "' (expected standard, fgsm_at, pgd_at, fs_at or hat)");
}

std::vector<LrStep> paper_lr_schedule() { return {{60, 0.1}, {90, 0.01}, {200, 0.001}}; }

double lr_at(const std::vector<LrStep>& schedule, std::size_t epoch) {
  if (epoch < 1) throw Error("lr_at: epochs are 1-based");
  if (schedule.empty()) throw Error("lr_at: empty schedule");
  for (const auto& step : schedule) {
    if (epoch <= step.until_epoch) return step.lr;
  }
  return schedule.back().lr;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error("train.epochs must be at least 1");
  if (batch_size < 1) throw Error("train.batch_size must be at least 1");
  if (segment_length < 1) throw Error("train.segment_length must be positive");
  if (lr_schedule.empty()) throw Error("train.lr_schedule must not be empty");
  for (const auto& s : lr_schedule) {
    if (!(s.lr > 0.0) || !std::isfinite(s.lr)) throw Error("train.lr_schedule learning rates must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("train.momentum must be in [0, 1)");
  if (!std::isfinite(w1) || !std::isfinite(w2) || w1 < 0.0 || w2 < 0.0) {
    throw Error("train.w1 and train.w2 must be finite and >= 0");
  }
  attack.validate();
}

AttackSpec training_attack(const TrainConfig& config) {
  const AttackSpec& a = config.attack;
  AttackSpec s = a;
  switch (config.defense) {
    case DefenseKind::kStandard:
      break;
    case DefenseKind::kFgsmAt:
      s = AttackSpec::fgsm(a.epsilon);
      s.margin = a.margin;
      s.sinkhorn = a.sinkhorn;
      break;
    case DefenseKind::kPgdAt:
      s.weights = {1.0, 0.0, 0.0};
      break;
    case DefenseKind::kFsAt:
      s.weights = {0.0, 1.0, 0.0};
      break;
    case DefenseKind::kHat:
      break;
  }
  return s;
}

void sgd_momentum_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads, std::vector<Tensor>& velocity,
                         double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_momentum_update: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " + std::to_string(velocity.size()) + " velocities");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != velocity[i].shape()) {
      throw ShapeError("sgd_momentum_update: shape mismatch at tensor " + std::to_string(i));
    }
    if (!grads[i].all_finite()) throw NumericError("sgd_momentum_update: non-finite gradient in tensor " + std::to_string(i));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      velocity[i][k] = momentum * velocity[i][k] + grads[i][k];
      params[i][k] -= lr * velocity[i][k];
    }
  }
}

bool EpochRecord::same_result(const EpochRecord& o) const {
  return epoch == o.epoch && clean_loss == o.clean_loss && adv_loss == o.adv_loss &&
         train_accuracy == o.train_accuracy && lr == o.lr && defense == o.defense && attack_weights == o.attack_weights &&
         batches == o.batches && max_linf == o.max_linf;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},
       {"clean_loss", r.clean_loss},
       {"adv_loss", r.adv_loss},
       {"train_accuracy", r.train_accuracy},
       {"lr", r.lr},
       {"wall_seconds", r.wall_seconds},
       {"defense", r.defense},
       {"attack_weights", {r.attack_weights.beta, r.attack_weights.gamma, r.attack_weights.zeta}},
       {"batches", r.batches},
       {"max_linf", r.max_linf}};
}

TrainState initial_state(const SpeakerModel& model, std::uint64_t seed) {
  TrainState s;
  s.params = model.build(seed);
  for (const Tensor& t : s.params.trainable) s.velocity.emplace_back(t.shape(), 0.0);
  return s;
}

namespace {
std::size_t correct_predictions(const Tensor& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  const std::size_t k = logits.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = logits.data() + i * k;
    if (std::max_element(row, row + k) - row == labels[i]) ++hits;
  }
  return hits;
}
}  // namespace

EpochRecord train_epoch(const SpeakerModel& model, TrainState& state, const Corpus& corpus, const TrainConfig& config) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const std::size_t epoch = state.epochs_done + 1;
  const double lr = lr_at(config.lr_schedule, epoch);
  const bool adversarial = config.defense != DefenseKind::kStandard;
  const AttackSpec attack = training_attack(config);

  TrainState next = state;
  EpochRecord rec;
  rec.epoch = epoch;
  rec.lr = lr;
  rec.defense = defense_name(config.defense);
  if (adversarial) rec.attack_weights = attack.weights;

  const auto batches =
      batch_iter(corpus, Split::kTrain, config.batch_size, config.segment_length, config.seed, epoch, CropMode::kRandom);
  std::size_t seen = 0, hits = 0;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const Batch& b = batches[bi];

    Tensor x_adv;
    if (adversarial) {
      AttackRequest req{model, next.params, ag::NormMode::kTrain, derive_seed(config.seed, {epoch, bi})};
      AdversarialBatch adv = generate(req, b.waveforms, b.labels, attack);
      if (adv.linf > attack.epsilon + 1e-12) {
        throw Error("train_epoch: training adversary left the epsilon ball (" + std::to_string(adv.linf) + ")");
      }
      rec.max_linf = std::max(rec.max_linf, adv.linf);
      x_adv = std::move(adv.x_adv);
    }

    std::vector<Value> leaves;
    ForwardOptions fo;
    fo.mode = ag::NormMode::kTrain;
    fo.running_update = &next.params.norm_state;
    fo.param_leaves = &leaves;
    const Value clean_logits = model.forward_logits(next.params, Value::constant(b.waveforms), fo);
    const Value clean_ce = ce_loss(clean_logits, b.labels);
    Value loss = clean_ce;
    if (adversarial) {
      const Value adv_logits = model.forward_logits(next.params, Value::constant(x_adv), fo);
      const Value adv_ce = ce_loss(adv_logits, b.labels);
      loss = ag::add(ag::scale(clean_ce, config.w1), ag::scale(adv_ce, config.w2));
      rec.adv_loss += adv_ce.item() * static_cast<double>(b.labels.size());
    }
    if (!std::isfinite(loss.item())) {
      throw NumericError("train_epoch: non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(bi));
    }
    backward(loss);
    std::vector<Tensor> grads;
    for (const Value& leaf : leaves) grads.push_back(leaf.grad());
    sgd_momentum_update(next.params.trainable, grads, next.velocity, lr, config.momentum);

    rec.clean_loss += clean_ce.item() * static_cast<double>(b.labels.size());
    hits += correct_predictions(clean_logits.data(), b.labels);
    seen += b.labels.size();
  }
  if (seen == 0) throw Error("train_epoch: training split is empty");

  rec.batches = batches.size();
  rec.clean_loss /= static_cast<double>(seen);
  rec.adv_loss /= static_cast<double>(seen);
  rec.train_accuracy = 100.0 * static_cast<double>(hits) / static_cast<double>(seen);
  next.epochs_done = epoch;
  state = std::move(next);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

std::vector<EpochRecord> train(const SpeakerModel& model, TrainState& state, const Corpus& corpus,
                               const TrainConfig& config, const EpochCallback& on_epoch) {
  std::vector<EpochRecord> log;
  while (state.epochs_done < config.epochs) {
    log.push_back(train_epoch(model, state, corpus, config));
    if (on_epoch) on_epoch(log.back(), state);
  }
  return log;
}

}  // namespace advspk
