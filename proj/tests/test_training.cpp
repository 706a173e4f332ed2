#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "advspk/training.hpp"

using namespace advspk;
namespace fs = std::filesystem;

namespace {

Corpus small_corpus(std::size_t speakers = 4, std::size_t per_speaker = 10) {
  SynthConfig c;
  c.num_speakers = speakers;
  c.utterances_per_speaker = per_speaker;
  c.duration = 0.15;
  c.seed = 5;
  return synth_corpus(c);
}

SpeakerModel tiny(std::size_t speakers = 4) { return SpeakerModel(FrontendConfig{}, SpeakerCNNConfig::tiny(speakers)); }

TrainConfig quick(DefenseKind kind, std::size_t epochs = 1) {
  TrainConfig c;
  c.defense = kind;
  c.epochs = epochs;
  c.batch_size = 8;
  c.segment_length = 2000;
  c.lr_schedule = {{1000, 0.05}};
  c.attack = AttackSpec::hybrid(0.002, 2);
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Schedule, ReferenceBoundaries) {
  const auto s = paper_lr_schedule();
  EXPECT_EQ(lr_at(s, 30), 0.1);
  EXPECT_EQ(lr_at(s, 60), 0.1);
  EXPECT_EQ(lr_at(s, 61), 0.01);
  EXPECT_EQ(lr_at(s, 75), 0.01);
  EXPECT_EQ(lr_at(s, 150), 0.001);
  EXPECT_EQ(lr_at(s, 500), 0.001);
  EXPECT_THROW(lr_at(s, 0), Error);
}

TEST(Sgd, ZeroMomentumIsPlainDescent) {
  std::vector<Tensor> p{Tensor({2}, std::vector<double>{1, 2})}, v{Tensor({2}, 0.0)};
  sgd_momentum_update(p, {Tensor({2}, std::vector<double>{0.5, -1})}, v, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p[0][0], 0.95);
  EXPECT_DOUBLE_EQ(p[0][1], 2.1);
}

TEST(Sgd, ZeroGradientZeroVelocityIsNoOp) {
  std::vector<Tensor> p{Tensor({3}, 1.5)}, v{Tensor({3}, 0.0)};
  sgd_momentum_update(p, {Tensor({3}, 0.0)}, v, 0.1, 0.9);
  EXPECT_EQ(p[0], Tensor({3}, 1.5));
}

TEST(Sgd, SecondStepWithConstantGradient) {
  const double lr = 0.1, g = 2.0;
  std::vector<Tensor> p{Tensor({1}, 0.0)}, v{Tensor({1}, 0.0)};
  sgd_momentum_update(p, {Tensor({1}, g)}, v, lr, 0.9);
  const double after_first = p[0][0];
  sgd_momentum_update(p, {Tensor({1}, g)}, v, lr, 0.9);
  EXPECT_NEAR(p[0][0] - after_first, -lr * 1.9 * g, 1e-15);
}

TEST(Sgd, NonFiniteGradientLeavesEverythingUnchanged) {
  std::vector<Tensor> p{Tensor({2}, 1.0), Tensor({1}, 2.0)}, v{Tensor({2}, 0.3), Tensor({1}, 0.0)};
  const auto p0 = p, v0 = v;
  EXPECT_THROW(sgd_momentum_update(p, {Tensor({2}, 1.0), Tensor({1}, std::nan(""))}, v, 0.1, 0.9), NumericError);
  EXPECT_EQ(p, p0);
  EXPECT_EQ(v, v0);
}

TEST(Defense, NamesRoundTrip) {
  for (DefenseKind k : {DefenseKind::kStandard, DefenseKind::kFgsmAt, DefenseKind::kPgdAt, DefenseKind::kFsAt,
                        DefenseKind::kHat}) {
    EXPECT_EQ(parse_defense(defense_name(k)), k);
  }
  EXPECT_THROW(parse_defense("bogus"), Error);
}

TEST(Defense, InnerAttackPerKind) {
  TrainConfig c = quick(DefenseKind::kFgsmAt);
  AttackSpec a = training_attack(c);
  EXPECT_EQ(a.iterations, 1u);
  EXPECT_EQ(a.alpha, a.epsilon);
  EXPECT_FALSE(a.random_init);
  c.defense = DefenseKind::kPgdAt;
  EXPECT_EQ(training_attack(c).weights, (LossWeights{1, 0, 0}));
  c.defense = DefenseKind::kFsAt;
  EXPECT_EQ(training_attack(c).weights, (LossWeights{0, 1, 0}));
  c.defense = DefenseKind::kHat;
  c.attack.weights = {0.5, 2, 0};
  EXPECT_EQ(training_attack(c).weights, (LossWeights{0.5, 2, 0}));
}

TEST(TrainConfigCheck, RejectsBadValues) {
  TrainConfig c = quick(DefenseKind::kHat);
  c.epochs = 0;
  EXPECT_THROW(c.validate(), Error);
  c = quick(DefenseKind::kHat);
  c.lr_schedule = {{10, -0.1}};
  EXPECT_THROW(c.validate(), Error);
  c = quick(DefenseKind::kHat);
  c.lr_schedule.clear();
  EXPECT_THROW(c.validate(), Error);
}

TEST(Train, StandardTrainingFitsSeparableToySet) {
  const Corpus corpus = small_corpus();
  const SpeakerModel m = tiny();
  TrainState st = initial_state(m, 1);
  const TrainConfig c = quick(DefenseKind::kStandard, 40);
  std::vector<EpochRecord> log;
  while (st.epochs_done < c.epochs && (log.empty() || log.back().train_accuracy < 99.0)) {
    log.push_back(train_epoch(m, st, corpus, c));
    EXPECT_EQ(log.back().adv_loss, 0.0);
  }
  EXPECT_GE(log.back().train_accuracy, 99.0) << "after " << log.size() << " epochs";
  EXPECT_LT(log.back().clean_loss, log.front().clean_loss);
  EXPECT_EQ(st.epochs_done, log.size());
}

TEST(Train, DeterministicLogAndParameters) {
  const Corpus corpus = small_corpus();
  const SpeakerModel m = tiny();
  const TrainConfig c = quick(DefenseKind::kHat, 2);
  TrainState a = initial_state(m, 1), b = initial_state(m, 1);
  const auto la = train(m, a, corpus, c);
  const auto lb = train(m, b, corpus, c);
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_TRUE(la[i].same_result(lb[i]));
  EXPECT_EQ(a.params, b.params);
}

TEST(Train, PgdAtEqualsHatWithCrossEntropyOnly) {
  const Corpus corpus = small_corpus();
  const SpeakerModel m = tiny();
  TrainConfig pgd = quick(DefenseKind::kPgdAt, 2);
  TrainConfig hat = quick(DefenseKind::kHat, 2);
  hat.attack.weights = {1, 0, 0};
  TrainState a = initial_state(m, 2), b = initial_state(m, 2);
  train(m, a, corpus, pgd);
  train(m, b, corpus, hat);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.velocity, b.velocity);
}

TEST(Train, EveryDefenseRespectsTheBudget) {
  const Corpus corpus = small_corpus(3, 6);
  const SpeakerModel m = tiny(3);
  for (DefenseKind k : {DefenseKind::kFgsmAt, DefenseKind::kPgdAt, DefenseKind::kFsAt, DefenseKind::kHat}) {
    TrainState st = initial_state(m, 0);
    const EpochRecord r = train_epoch(m, st, corpus, quick(k));
    EXPECT_LE(r.max_linf, 0.002 + 1e-12) << defense_name(k);
    EXPECT_GT(r.max_linf, 0.0) << defense_name(k);
    EXPECT_GT(r.adv_loss, 0.0) << defense_name(k);
    EXPECT_EQ(r.defense, defense_name(k));
  }
}

TEST(Train, ResumeFromCheckpointMatchesUninterruptedRun) {
  const Corpus corpus = small_corpus();
  const SpeakerModel m = tiny();
  const TrainConfig c = quick(DefenseKind::kHat, 2);

  TrainState full = initial_state(m, 4);
  const auto log = train(m, full, corpus, c);

  TrainState part = initial_state(m, 4);
  TrainConfig first = c;
  first.epochs = 1;
  train(m, part, corpus, first);
  Checkpoint ck;
  ck.frontend = m.frontend_config();
  ck.cnn = m.cnn_config();
  ck.params = part.params;
  ck.velocity = part.velocity;
  ck.metadata["epochs"] = part.epochs_done;
  const fs::path path = fs::temp_directory_path() / "advspk_resume.ckpt";
  save_checkpoint(path, ck);

  const Checkpoint back = load_checkpoint(path);
  fs::remove(path);
  TrainState resumed{back.params, back.velocity, back.metadata["epochs"].get<std::size_t>()};
  const EpochRecord next = train_epoch(m, resumed, corpus, c);
  EXPECT_TRUE(next.same_result(log[1]));
  EXPECT_EQ(resumed.params, full.params);
}

TEST(Train, NonFiniteLossRollsBackTheEpoch) {
  Corpus corpus = small_corpus();
  const SpeakerModel m = tiny();
  const TrainConfig c = quick(DefenseKind::kStandard, 3);
  TrainState st = initial_state(m, 1);
  train_epoch(m, st, corpus, c);
  const TrainState before = st;
  for (auto& u : corpus.utterances) {
    if (u.split == Split::kTrain) u.samples[u.samples.size() / 2] = std::nan("");
  }
  EXPECT_THROW(train_epoch(m, st, corpus, c), NumericError);
  EXPECT_EQ(st.params, before.params);
  EXPECT_EQ(st.velocity, before.velocity);
  EXPECT_EQ(st.epochs_done, 1u);
}

TEST(Train, RecordSerializesEveryField) {
  EpochRecord r;
  r.epoch = 3;
  r.defense = "hat";
  r.attack_weights = {1, 1, 1};
  nlohmann::json j = r;
  for (const char* key : {"epoch", "clean_loss", "adv_loss", "train_accuracy", "lr", "wall_seconds", "defense"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
}
