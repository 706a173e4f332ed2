#pragma once

// Every differentiable primitive wrapped as a scalar function of one input,
// with a sampler that keeps points away from kinks and ties. Shared by the
// unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "advspk/gradcore.hpp"
#include "advspk/losses.hpp"

namespace advspk::fixtures {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

// Magnitudes in [lo, hi] with random signs.
inline Tensor away_from_zero(const Shape& shape, std::mt19937_64& rng, double lo = 0.2, double hi = 1.5) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// A permutation of well-separated values, so maxima never tie.
inline Tensor distinct_values(const Shape& shape, std::mt19937_64& rng) {
  Tensor t(shape);
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 0.1 * static_cast<double>(i);
  std::shuffle(v.begin(), v.end(), rng);
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i] + jitter(rng);
  return t;
}

// Reduce any output to a scalar with fixed random weights.
inline Value contract(const Value& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ag::sum(ag::mul(out, Value::constant(random_tensor(out.shape(), rng))));
}

struct OpCase {
  std::string name;
  bool smooth = true;  // tighter tolerance applies
  std::function<Tensor(std::mt19937_64&)> sample;
  std::function<Value(const Value&)> fn;
};

inline std::vector<OpCase> op_catalog() {
  std::vector<OpCase> ops;
  const Shape s23{2, 3};
  auto plain = [s23](std::mt19937_64& r) { return random_tensor(s23, r); };
  const std::vector<int> labels{2, 0};

  ops.push_back({"add", true, plain, [](const Value& x) {
                   return contract(ag::add(x, Value::constant(Tensor({2, 3}, 0.3))), 1);
                 }});
  ops.push_back({"sub", true, plain, [](const Value& x) {
                   return contract(ag::sub(Value::constant(Tensor({2, 3}, 0.3)), x), 2);
                 }});
  ops.push_back({"mul", true, plain, [](const Value& x) { return contract(ag::mul(x, x), 3); }});
  ops.push_back({"scale", true, plain, [](const Value& x) { return contract(ag::scale(x, -2.5), 4); }});
  ops.push_back({"add_scalar", true, plain, [](const Value& x) { return contract(ag::add_scalar(x, 0.7), 5); }});
  ops.push_back({"square", true, plain, [](const Value& x) { return contract(ag::square(x), 6); }});
  ops.push_back({"relu", false, [s23](std::mt19937_64& r) { return away_from_zero(s23, r); },
                 [](const Value& x) { return contract(ag::relu(x), 7); }});
  ops.push_back({"log", true, [s23](std::mt19937_64& r) { return random_tensor(s23, r, 0.2, 2.0); },
                 [](const Value& x) { return contract(ag::log(x), 8); }});
  ops.push_back({"exp", true, plain, [](const Value& x) { return contract(ag::exp(x), 9); }});
  ops.push_back({"clamp", false,
                 [s23](std::mt19937_64& r) {
                   // Inside and outside the bounds, never near them.
                   Tensor t = away_from_zero(s23, r, 0.1, 0.4);
                   t[0] = 0.9;
                   t[1] = -0.8;
                   return t;
                 },
                 [](const Value& x) { return contract(ag::clamp(x, -0.5, 0.5), 10); }});
  ops.push_back({"sum", true, plain, [](const Value& x) { return ag::sum(ag::mul(x, x)); }});
  ops.push_back({"mean", true, plain, [](const Value& x) { return ag::mean(ag::mul(x, x)); }});
  ops.push_back({"mean_last", true, [](std::mt19937_64& r) { return random_tensor({2, 3, 4}, r); },
                 [](const Value& x) { return contract(ag::mean_last(ag::mul(x, x)), 11); }});
  ops.push_back({"matmul", true, [](std::mt19937_64& r) { return random_tensor({3, 4}, r); },
                 [](const Value& x) {
                   std::mt19937_64 r(12);
                   return contract(ag::matmul(x, Value::constant(random_tensor({4, 2}, r))), 13);
                 }});
  ops.push_back({"matmul_right", true, [](std::mt19937_64& r) { return random_tensor({4, 2}, r); },
                 [](const Value& x) {
                   std::mt19937_64 r(14);
                   return contract(ag::matmul(Value::constant(random_tensor({3, 4}, r)), x), 15);
                 }});
  ops.push_back({"linear", true, [](std::mt19937_64& r) { return random_tensor({3, 4}, r); },
                 [](const Value& x) {
                   // x doubles as input and, reshaped, as weight to cover both adjoints.
                   std::mt19937_64 r(16);
                   const Value w = ag::reshape(ag::mul(x, Value::constant(random_tensor({3, 4}, r))), {3, 4});
                   const Value b = ag::reshape(ag::mean_last(ag::reshape(x, {1, 3, 4})), {3});
                   return contract(ag::linear(x, w, b), 17);
                 }});
  ops.push_back({"reshape", true, plain, [](const Value& x) { return contract(ag::reshape(x, {3, 2}), 18); }});
  ops.push_back({"transpose", true, [](std::mt19937_64& r) { return random_tensor({2, 3, 4}, r); },
                 [](const Value& x) { return contract(ag::transpose(x), 19); }});
  ops.push_back({"frame", true, [](std::mt19937_64& r) { return random_tensor({2, 11}, r); },
                 [](const Value& x) { return contract(ag::frame(x, 4, 3), 20); }});
  ops.push_back({"conv1d", true, [](std::mt19937_64& r) { return random_tensor({2, 3, 6}, r); },
                 [](const Value& x) {
                   std::mt19937_64 r(21);
                   const Value w = Value::constant(random_tensor({4, 3, 3}, r));
                   const Value b = Value::constant(random_tensor({4}, r));
                   return contract(ag::conv1d(x, w, b, 1), 22);
                 }});
  ops.push_back({"conv1d_weight", true, [](std::mt19937_64& r) { return random_tensor({4, 3, 3}, r); },
                 [](const Value& w) {
                   std::mt19937_64 r(23);
                   const Value x = Value::constant(random_tensor({2, 3, 6}, r));
                   const Value b = ag::reshape(ag::mean_last(ag::reshape(w, {1, 4, 9})), {4});
                   return contract(ag::conv1d(x, w, b, 2), 24);
                 }});
  ops.push_back({"max_pool1d", false, [](std::mt19937_64& r) { return distinct_values({2, 3, 6}, r); },
                 [](const Value& x) { return contract(ag::max_pool1d(x, 2), 25); }});
  ops.push_back({"batch_norm_train", true, [](std::mt19937_64& r) { return random_tensor({3, 2, 5}, r); },
                 [](const Value& x) {
                   ag::BatchNormState st{Tensor({2}, 0.0), Tensor({2}, 1.0)};
                   ag::BatchNormOptions o;
                   o.mode = ag::NormMode::kTrain;
                   const Value g = Value::constant(Tensor({2}, std::vector<double>{1.3, -0.7}));
                   const Value b = Value::constant(Tensor({2}, std::vector<double>{0.1, 0.2}));
                   return contract(ag::batch_norm(x, g, b, st, o), 26);
                 }});
  ops.push_back({"batch_norm_train_affine", true, [](std::mt19937_64& r) { return random_tensor({2}, r, 0.5, 1.5); },
                 [](const Value& g) {
                   std::mt19937_64 r(27);
                   const Value x = Value::constant(random_tensor({3, 2, 5}, r));
                   ag::BatchNormState st{Tensor({2}, 0.0), Tensor({2}, 1.0)};
                   ag::BatchNormOptions o;
                   o.mode = ag::NormMode::kTrain;
                   return contract(ag::batch_norm(x, g, ag::scale(g, 0.5), st, o), 28);
                 }});
  ops.push_back({"batch_norm_eval", true, [](std::mt19937_64& r) { return random_tensor({3, 2, 5}, r); },
                 [](const Value& x) {
                   ag::BatchNormState st{Tensor({2}, std::vector<double>{0.2, -0.1}),
                                         Tensor({2}, std::vector<double>{0.5, 2.0})};
                   const Value g = Value::constant(Tensor({2}, std::vector<double>{1.3, -0.7}));
                   const Value b = Value::constant(Tensor({2}, std::vector<double>{0.1, 0.2}));
                   return contract(ag::batch_norm(x, g, b, st, {}), 29);
                 }});
  ops.push_back({"softmax", true, plain, [](const Value& x) { return contract(ag::softmax(x), 30); }});
  ops.push_back({"log_softmax", true, plain, [](const Value& x) { return contract(ag::log_softmax(x), 31); }});
  ops.push_back({"pick", true, plain, [labels](const Value& x) { return contract(ag::pick(x, labels), 32); }});
  ops.push_back({"max_excluding", false, [s23](std::mt19937_64& r) { return distinct_values(s23, r); },
                 [labels](const Value& x) { return contract(ag::max_excluding(x, labels), 33); }});
  ops.push_back({"l2_norm", true, plain, [](const Value& x) { return contract(ag::l2_norm(x), 34); }});
  ops.push_back({"cosine_similarity", true, plain, [](const Value& x) {
                   std::mt19937_64 r(35);
                   const Value other = Value::constant(random_tensor({4, 3}, r));
                   return contract(ag::cosine_similarity(x, other), 36);
                 }});
  ops.push_back({"cosine_similarity_self", true, plain,
                 [](const Value& x) { return contract(ag::cosine_similarity(x, ag::scale(x, -1.0)), 37); }});
  ops.push_back({"ce_loss", true, plain, [labels](const Value& x) { return ce_loss(x, labels); }});
  ops.push_back({"margin_loss", false, [s23](std::mt19937_64& r) { return distinct_values(s23, r); },
                 [labels](const Value& x) { return margin_loss(x, labels, 0.5); }});
  return ops;
}

}  // namespace advspk::fixtures
