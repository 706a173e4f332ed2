#pragma once

#include <span>

#include "advspk/gradcore.hpp"

namespace advspk {

/// Coefficients of the CE, feature-scattering and margin terms.
struct LossWeights {
  double beta = 1.0;
  double gamma = 1.0;
  double zeta = 1.0;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Discrete transport between two weighted point sets.
struct TransportProblem {
  std::vector<double> mu;
  std::vector<double> nu;
  Tensor cost;  // [mu.size(), nu.size()]
  double regularization = 0.01;

  static TransportProblem uniform(Tensor cost, double regularization);
  void validate() const;
};

struct TransportPlan {
  Tensor plan;
  double distance = 0.0;  // <plan, cost>
  std::size_t iterations = 0;
  double marginal_violation = 0.0;
  /// False when the marginal tolerance was not met within max_iters.
  bool converged = false;
};

struct SinkhornOptions {
  double regularization = 0.01;
  std::size_t max_iters = 1000;
  double tolerance = 1e-6;
};

/// Mean over the batch of -log softmax(logits)[label].
Value ce_loss(const Value& logits, std::span<const int> labels);

/// Sum over the batch of -max(f_t - max_{j != t} f_j + margin, 0).
Value margin_loss(const Value& logits, std::span<const int> labels, double margin);

/// C_ij = 1 - cos(clean_i, adv_j), entries in [0, 2].
Value cosine_cost_matrix(const Value& clean, const Value& adv);

/// Entropic OT: log-domain scaling as a warm start, then damped Newton steps
/// on the dual until the marginals meet `tolerance`.
TransportPlan sinkhorn_ot(const TransportProblem& problem, std::size_t max_iters = 1000, double tolerance = 1e-6);

/// OT distance between uniform distributions over the clean and adversarial
/// feature batches under the cosine cost. The transport plan is held fixed
/// when differentiating, so gradients flow through the cost only.
Value fs_loss(const Value& clean, const Value& adv, const SinkhornOptions& options = {},
              TransportPlan* diagnostics = nullptr);

/// beta * CE(adv) + gamma * FS(clean, adv) + zeta * margin(adv). Terms with a
/// zero coefficient are not evaluated.
Value hybrid_loss(const LossWeights& weights, const Value& logits_adv, const Value& logits_clean,
                  std::span<const int> labels, double margin, const SinkhornOptions& options = {});

}  // namespace advspk
