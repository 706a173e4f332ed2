#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>

#include "advspk/losses.hpp"
#include "advspk/model.hpp"

namespace advspk {

/// One member of the sign-gradient l-infinity attack family. FGSM, PGD, CW,
/// FS and the hybrid attack differ only in their loss weights and schedule.
struct AttackSpec {
  LossWeights weights{1.0, 0.0, 0.0};
  double epsilon = 0.002;
  double alpha = 0.0004;
  std::size_t iterations = 10;
  bool random_init = true;
  double margin = 50.0;
  SinkhornOptions sinkhorn{};

  /// One full-budget step on CE, no random start.
  static AttackSpec fgsm(double epsilon);
  static AttackSpec pgd(double epsilon, std::size_t iterations);
  static AttackSpec cw(double epsilon, std::size_t iterations);
  static AttackSpec fs(double epsilon, std::size_t iterations);
  static AttackSpec hybrid(double epsilon, std::size_t iterations);

  void validate() const;
};

struct AdversarialBatch {
  Tensor x_adv;
  double linf = 0.0;
  std::vector<double> snr_db;
};

/// Sample range every adversarial waveform is clipped to.
inline constexpr double kWaveMin = -1.0;
inline constexpr double kWaveMax = 1.0;

/// x itself, or x plus uniform noise strictly inside (-epsilon, epsilon),
/// clipped to the waveform range.
Tensor init_perturbation(const Tensor& x, double epsilon, bool random_init, std::uint64_t seed);

/// x_adv + alpha * sign(grad), projected onto the epsilon ball around x and
/// then onto the waveform range. sign(0) = 0.
Tensor pgd_step(const Tensor& x_adv, const Tensor& grad, const Tensor& x, double alpha, double epsilon);

/// Called with (iteration, iterate) after the initial point (iteration 0) and
/// after every step.
using IterateObserver = std::function<void(std::size_t, const Tensor&)>;

struct AttackRequest {
  const SpeakerModel& model;
  const ModelParams& params;
  /// kTrain uses batch statistics without touching the running estimates.
  ag::NormMode mode = ag::NormMode::kEval;
  std::uint64_t seed = 0;
  IterateObserver observer = nullptr;
};

/// Ascend hybrid_loss(spec.weights) by spec.iterations projected sign steps.
AdversarialBatch generate(const AttackRequest& request, const Tensor& x, std::span<const int> labels,
                          const AttackSpec& spec);

/// Value of the attack objective at x_adv (the quantity `generate` ascends).
double attack_objective(const AttackRequest& request, const Tensor& x, const Tensor& x_adv,
                        std::span<const int> labels, const AttackSpec& spec);

/// Per-row 10 log10(|x|^2 / |x_adv - x|^2); +infinity marks an unperturbed row.
std::vector<double> snr_db(const Tensor& x, const Tensor& x_adv);

inline bool is_clean_snr(double snr) { return snr == std::numeric_limits<double>::infinity(); }

double linf_distance(const Tensor& a, const Tensor& b);

}  // namespace advspk
