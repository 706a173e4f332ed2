#include "advspk/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <Eigen/Dense>

namespace advspk {

void LossWeights::validate() const {
  for (auto [name, v] : {std::pair{"beta", beta}, {"gamma", gamma}, {"zeta", zeta}}) {
    if (!std::isfinite(v) || v < 0.0) throw Error(std::string("loss weight ") + name + " must be finite and >= 0");
  }
}

TransportProblem TransportProblem::uniform(Tensor cost, double regularization) {
  if (cost.rank() != 2) throw ShapeError("transport cost must be a matrix, got " + shape_str(cost.shape()));
  TransportProblem p;
  p.mu.assign(cost.dim(0), 1.0 / static_cast<double>(cost.dim(0)));
  p.nu.assign(cost.dim(1), 1.0 / static_cast<double>(cost.dim(1)));
  p.cost = std::move(cost);
  p.regularization = regularization;
  return p;
}

void TransportProblem::validate() const {
  if (!(regularization > 0.0)) throw Error("sinkhorn: regularization must be positive");
  if (cost.rank() != 2 || cost.dim(0) != mu.size() || cost.dim(1) != nu.size()) {
    throw ShapeError("sinkhorn: cost " + shape_str(cost.shape()) + " does not match marginals of size " +
                     std::to_string(mu.size()) + " and " + std::to_string(nu.size()));
  }
  if (mu.empty() || nu.empty()) throw ShapeError("sinkhorn: empty marginals");
  for (const auto* m : {&mu, &nu}) {
    if (std::any_of(m->begin(), m->end(), [](double v) { return !(v >= 0.0); })) {
      throw Error("sinkhorn: marginals must be nonnegative");
    }
    if (std::abs(std::accumulate(m->begin(), m->end(), 0.0) - 1.0) > 1e-9) {
      throw Error("sinkhorn: marginals must sum to 1");
    }
  }
  if (!cost.all_finite()) throw NumericError("sinkhorn: non-finite cost");
}

Value ce_loss(const Value& logits, std::span<const int> labels) {
  return ag::scale(ag::mean(ag::pick(ag::log_softmax(logits), labels)), -1.0);
}

Value margin_loss(const Value& logits, std::span<const int> labels, double margin) {
  const Value gap = ag::sub(ag::pick(logits, labels), ag::max_excluding(logits, labels));
  return ag::scale(ag::sum(ag::relu(ag::add_scalar(gap, margin))), -1.0);
}

Value cosine_cost_matrix(const Value& clean, const Value& adv) {
  return ag::add_scalar(ag::scale(ag::cosine_similarity(clean, adv), -1.0), 1.0);
}

namespace {
double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}
}  // namespace

namespace {

struct DualState {
  const TransportProblem& problem;
  std::vector<double> f, g;

  double entry(std::size_t i, std::size_t j) const {
    return std::exp((f[i] + g[j] - problem.cost.at(i, j)) / problem.regularization);
  }
  // Row and column sums of the current plan.
  void marginals(std::vector<double>& rows, std::vector<double>& cols) const {
    rows.assign(f.size(), 0.0);
    cols.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < f.size(); ++i) {
      for (std::size_t j = 0; j < g.size(); ++j) {
        const double p = entry(i, j);
        rows[i] += p;
        cols[j] += p;
      }
    }
  }
  double violation() const {
    std::vector<double> rows, cols;
    marginals(rows, cols);
    double v = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) v = std::max(v, std::abs(rows[i] - problem.mu[i]));
    for (std::size_t j = 0; j < g.size(); ++j) v = std::max(v, std::abs(cols[j] - problem.nu[j]));
    return v;
  }
  // Entropic dual, concave in (f, g).
  double objective() const {
    double s = 0.0, total = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (problem.mu[i] > 0.0) s += f[i] * problem.mu[i];
      for (std::size_t j = 0; j < g.size(); ++j) total += entry(i, j);
    }
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (problem.nu[j] > 0.0) s += g[j] * problem.nu[j];
    }
    return s - problem.regularization * total;
  }
};

void sinkhorn_sweep(DualState& d, const std::vector<double>& log_mu, const std::vector<double>& log_nu) {
  const std::size_t n = d.f.size(), m = d.g.size();
  const double eps = d.problem.regularization;
  const Tensor& c = d.problem.cost;
  std::vector<double> row(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) row[j] = (d.g[j] - c.at(i, j)) / eps;
    d.f[i] = eps * (log_mu[i] - log_sum_exp(row));
  }
  row.resize(n);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) row[i] = (d.f[i] - c.at(i, j)) / eps;
    d.g[j] = eps * (log_nu[j] - log_sum_exp(row));
  }
}

// One damped Newton ascent step on the dual. Returns false if no step
// improved the objective.
bool newton_step(DualState& d) {
  const std::size_t n = d.f.size(), m = d.g.size();
  const double eps = d.problem.regularization;
  std::vector<double> rows, cols;
  d.marginals(rows, cols);
  Eigen::VectorXd grad(n + m);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n + m, n + m);
  for (std::size_t i = 0; i < n; ++i) {
    grad(i) = d.problem.mu[i] - rows[i];
    h(i, i) = rows[i];
    for (std::size_t j = 0; j < m; ++j) {
      const double p = d.entry(i, j);
      h(i, n + j) = p;
      h(n + j, i) = p;
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    grad(n + j) = d.problem.nu[j] - cols[j];
    h(n + j, n + j) = cols[j];
  }
  // The Hessian is singular along (1, -1); a small ridge picks the
  // minimum-norm direction.
  h.diagonal().array() += 1e-12 + 1e-10 * h.diagonal().maxCoeff();
  const Eigen::VectorXd dir = eps * h.ldlt().solve(grad);
  if (!dir.allFinite()) return false;

  const double before = d.objective();
  const double slope = grad.dot(dir);
  const auto f0 = d.f, g0 = d.g;
  for (double t = 1.0; t > 1e-6; t *= 0.5) {
    for (std::size_t i = 0; i < n; ++i) d.f[i] = f0[i] + t * dir(i);
    for (std::size_t j = 0; j < m; ++j) d.g[j] = g0[j] + t * dir(n + j);
    const double after = d.objective();
    if (std::isfinite(after) && after >= before + 1e-4 * t * slope) return true;
  }
  d.f = f0;
  d.g = g0;
  return false;
}

// Scaling iterations before switching to Newton. At small regularization
// plain scaling converges sublinearly once the plan is nearly a vertex.
constexpr std::size_t kScalingWarmup = 50;

}  // namespace

TransportPlan sinkhorn_ot(const TransportProblem& problem, std::size_t max_iters, double tolerance) {
  problem.validate();
  const std::size_t n = problem.mu.size(), m = problem.nu.size();
  std::vector<double> log_mu(n), log_nu(m);
  for (std::size_t i = 0; i < n; ++i) log_mu[i] = std::log(problem.mu[i]);
  for (std::size_t j = 0; j < m; ++j) log_nu[j] = std::log(problem.nu[j]);

  // Dual potentials; plan_ij = exp((f_i + g_j - C_ij) / eps).
  DualState d{problem, std::vector<double>(n, 0.0), std::vector<double>(m, 0.0)};
  TransportPlan out;
  bool newton = true;
  for (std::size_t it = 1; it <= max_iters; ++it) {
    if (it <= kScalingWarmup || !newton) {
      sinkhorn_sweep(d, log_mu, log_nu);
    } else {
      newton = newton_step(d);
      if (!newton) sinkhorn_sweep(d, log_mu, log_nu);
    }
    out.iterations = it;
    out.marginal_violation = d.violation();
    if (out.marginal_violation < tolerance) {
      out.converged = true;
      break;
    }
  }

  out.plan = Tensor({n, m});
  out.distance = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      out.plan.at(i, j) = d.entry(i, j);
      out.distance += out.plan.at(i, j) * problem.cost.at(i, j);
    }
  }
  return out;
}

Value fs_loss(const Value& clean, const Value& adv, const SinkhornOptions& options, TransportPlan* diagnostics) {
  if (clean.shape() != adv.shape()) {
    throw ShapeError("fs_loss: clean " + shape_str(clean.shape()) + " and adversarial " + shape_str(adv.shape()) +
                     " features differ in shape");
  }
  const Value cost = cosine_cost_matrix(clean, adv);
  TransportPlan plan = sinkhorn_ot(TransportProblem::uniform(cost.data(), options.regularization), options.max_iters,
                                   options.tolerance);
  const Value loss = ag::sum(ag::mul(cost, Value::constant(plan.plan)));
  if (diagnostics) *diagnostics = std::move(plan);
  return loss;
}

Value hybrid_loss(const LossWeights& weights, const Value& logits_adv, const Value& logits_clean,
                  std::span<const int> labels, double margin, const SinkhornOptions& options) {
  weights.validate();
  Value total;
  auto accumulate = [&total](const Value& term, double w) {
    const Value scaled = ag::scale(term, w);
    total = total.defined() ? ag::add(total, scaled) : scaled;
  };
  if (weights.beta != 0.0) accumulate(ce_loss(logits_adv, labels), weights.beta);
  if (weights.gamma != 0.0) accumulate(fs_loss(logits_clean, logits_adv, options), weights.gamma);
  if (weights.zeta != 0.0) accumulate(margin_loss(logits_adv, labels, margin), weights.zeta);
  if (!total.defined()) total = Value::constant(Tensor::scalar(0.0));
  return total;
}

}  // namespace advspk
