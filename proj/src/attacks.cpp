#include "advspk/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace advspk {

AttackSpec AttackSpec::fgsm(double epsilon) {
  AttackSpec s;
  s.weights = {1.0, 0.0, 0.0};
  s.epsilon = epsilon;
  s.alpha = epsilon;
  s.iterations = 1;
  s.random_init = false;
  return s;
}

namespace {
AttackSpec iterative(LossWeights w, double epsilon, std::size_t iterations) {
  AttackSpec s;
  s.weights = w;
  s.epsilon = epsilon;
  s.alpha = epsilon / 5.0;
  s.iterations = iterations;
  s.random_init = true;
  return s;
}
}  // namespace

AttackSpec AttackSpec::pgd(double epsilon, std::size_t iterations) { return iterative({1, 0, 0}, epsilon, iterations); }
AttackSpec AttackSpec::cw(double epsilon, std::size_t iterations) { return iterative({0, 0, 1}, epsilon, iterations); }
AttackSpec AttackSpec::fs(double epsilon, std::size_t iterations) { return iterative({0, 1, 0}, epsilon, iterations); }
AttackSpec AttackSpec::hybrid(double epsilon, std::size_t iterations) {
  return iterative({1, 1, 1}, epsilon, iterations);
}

void AttackSpec::validate() const {
  weights.validate();
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw Error("attack.epsilon must be positive");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw Error("attack.alpha must be positive");
  if (iterations < 1) throw Error("attack.iterations must be at least 1");
  if (!std::isfinite(margin)) throw Error("attack.margin must be finite");
  if (!(sinkhorn.regularization > 0.0)) throw Error("attack.sinkhorn.regularization must be positive");
}

Tensor init_perturbation(const Tensor& x, double epsilon, bool random_init, std::uint64_t seed) {
  Tensor out = x;
  if (!random_init) return out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(std::nextafter(-epsilon, 0.0), epsilon);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + noise(rng), kWaveMin, kWaveMax);
  return out;
}

Tensor pgd_step(const Tensor& x_adv, const Tensor& grad, const Tensor& x, double alpha, double epsilon) {
  if (x_adv.shape() != grad.shape() || x_adv.shape() != x.shape()) {
    throw ShapeError("pgd_step: shapes differ " + shape_str(x_adv.shape()) + ", " + shape_str(grad.shape()) + ", " +
                     shape_str(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double g = grad[i];
    if (!std::isfinite(g)) throw NumericError("pgd_step: non-finite gradient at index " + std::to_string(i));
    const double sign = (g > 0.0) - (g < 0.0);
    const double moved = x_adv[i] + alpha * sign;
    out[i] = std::clamp(std::clamp(moved, x[i] - epsilon, x[i] + epsilon), kWaveMin, kWaveMax);
  }
  return out;
}

namespace {

struct Objective {
  Value loss;
  Value input;
};

Value clean_features(const AttackRequest& req, const Tensor& x, const AttackSpec& spec) {
  if (spec.weights.gamma == 0.0) return {};
  ForwardOptions fo;
  fo.mode = req.mode;
  return req.model.forward_logits(req.params, Value::constant(x), fo);
}

Objective objective(const AttackRequest& req, const Value& clean, const Tensor& x_adv, std::span<const int> labels,
                    const AttackSpec& spec) {
  Objective o;
  o.input = Value::leaf(x_adv, true);
  ForwardOptions fo;
  fo.mode = req.mode;
  const Value logits = req.model.forward_logits(req.params, o.input, fo);
  o.loss = hybrid_loss(spec.weights, logits, clean, labels, spec.margin, spec.sinkhorn);
  return o;
}

}  // namespace

AdversarialBatch generate(const AttackRequest& req, const Tensor& x, std::span<const int> labels,
                          const AttackSpec& spec) {
  spec.validate();
  if (x.rank() != 2 || x.dim(0) != labels.size()) {
    throw ShapeError("generate: waveforms " + shape_str(x.shape()) + " do not match " + std::to_string(labels.size()) +
                     " labels");
  }
  const Value clean = clean_features(req, x, spec);
  Tensor x_adv = init_perturbation(x, spec.epsilon, spec.random_init, req.seed);
  if (req.observer) req.observer(0, x_adv);

  for (std::size_t t = 1; t <= spec.iterations; ++t) {
    const Objective o = objective(req, clean, x_adv, labels, spec);
    if (!std::isfinite(o.loss.item())) throw NumericError("generate: attack objective is not finite");
    Tensor grad(x.shape(), 0.0);
    if (o.loss.requires_grad()) {
      backward(o.loss);
      grad = o.input.grad();
    }
    x_adv = pgd_step(x_adv, grad, x, spec.alpha, spec.epsilon);
    if (req.observer) req.observer(t, x_adv);
  }

  AdversarialBatch out;
  out.linf = linf_distance(x_adv, x);
  out.snr_db = snr_db(x, x_adv);
  out.x_adv = std::move(x_adv);
  return out;
}

double attack_objective(const AttackRequest& req, const Tensor& x, const Tensor& x_adv, std::span<const int> labels,
                        const AttackSpec& spec) {
  const Value clean = clean_features(req, x, spec);
  return objective(req, clean, x_adv, labels, spec).loss.item();
}

std::vector<double> snr_db(const Tensor& x, const Tensor& x_adv) {
  if (x.shape() != x_adv.shape() || x.rank() != 2) {
    throw ShapeError("snr_db: expected matching [n, T] arrays, got " + shape_str(x.shape()) + " and " +
                     shape_str(x_adv.shape()));
  }
  const std::size_t n = x.dim(0), len = x.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double signal = 0.0, noise = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      const double s = x[i * len + t];
      const double d = x_adv[i * len + t] - s;
      signal += s * s;
      noise += d * d;
    }
    if (signal == 0.0) throw Error("snr_db: row " + std::to_string(i) + " of the clean signal is all zeros");
    out[i] = noise == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(signal / noise);
  }
  return out;
}

double linf_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("linf_distance: shapes differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace advspk
