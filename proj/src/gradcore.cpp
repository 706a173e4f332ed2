#include "advspk/gradcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

namespace advspk {

namespace detail {

struct Node {
  Tensor data;
  Tensor grad;
  bool requires_grad = false;
  bool has_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> adjoint;
};

}  // namespace detail

using detail::Node;

Node& node_of(const Value& v) {
  if (!v.node_) throw Error("use of an undefined Value");
  return *v.node_;
}

Value make_op(Tensor data, const char* op, std::vector<Value> parents, std::function<void(Node&)> adjoint) {
  auto node = std::make_shared<Node>();
  node->data = std::move(data);
  node->op = op;
  for (const auto& p : parents) {
    if (p.defined() && p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->adjoint = std::move(adjoint);
  }
  return Value(std::move(node));
}

Value Value::leaf(Tensor data, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Value(std::move(node));
}

const Tensor& Value::data() const { return node_of(*this).data; }
bool Value::requires_grad() const { return node_of(*this).requires_grad; }
const char* Value::op_name() const { return node_of(*this).op; }

double Value::item() const {
  const auto& d = data();
  if (d.size() != 1) throw ShapeError(std::string("item: expected a scalar, got ") + shape_str(d.shape()));
  return d[0];
}

bool Value::has_grad() const { return node_of(*this).has_grad; }

const Tensor& Value::grad() const {
  const auto& n = node_of(*this);
  if (!n.has_grad) throw Error(std::string("grad: no gradient on node '") + n.op + "'");
  return n.grad;
}

void backward(const Value& loss) {
  Node& root = node_of(loss);
  if (root.data.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(root.data.shape()));
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root, 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    n->grad = Tensor(n->data.shape(), 0.0);
    n->has_grad = true;
  }
  root.grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->adjoint) (*it)->adjoint(**it);
  }
}

namespace ag {

namespace {

void require_same(const char* op, const Value& a, const Value& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Value& a, std::size_t rank) {
  if (a.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

// Parent i if it participates in differentiation, else nullptr.
Node* grad_parent(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  return (p && p->requires_grad) ? p : nullptr;
}

template <typename F>
Value unary(const Value& a, const char* op, F&& forward, std::function<double(double x, double y)> deriv) {
  const Tensor& x = a.data();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
  return make_op(std::move(out), op, {a}, [deriv = std::move(deriv)](Node& self) {
    Node* p = grad_parent(self, 0);
    if (!p) return;
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      p->grad[i] += self.grad[i] * deriv(p->data[i], self.data[i]);
    }
  });
}

}  // namespace

Value add(const Value& a, const Value& b) {
  require_same("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op(std::move(out), "add", {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Node* p = grad_parent(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      }
    }
  });
}

Value sub(const Value& a, const Value& b) {
  require_same("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op(std::move(out), "sub", {a, b}, [](Node& self) {
    if (Node* p = grad_parent(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
    if (Node* p = grad_parent(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] -= self.grad[i];
    }
  });
}

Value mul(const Value& a, const Value& b) {
  require_same("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op(std::move(out), "mul", {a, b}, [](Node& self) {
    Node* pa = grad_parent(self, 0);
    Node* pb = grad_parent(self, 1);
    const Tensor& da = self.parents[0]->data;
    const Tensor& db = self.parents[1]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa) pa->grad[i] += self.grad[i] * db[i];
      if (pb) pb->grad[i] += self.grad[i] * da[i];
    }
  });
}

Value scale(const Value& a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Value add_scalar(const Value& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Value square(const Value& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Value relu(const Value& a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Value log(const Value& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Value exp(const Value& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Value clamp(const Value& a, double lo, double hi) {
  if (!(lo <= hi)) throw Error("clamp: lower bound exceeds upper bound");
  return unary(a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Value quantize(const Value& a, double step) {
  if (!(step > 0.0)) throw Error("quantize: step must be positive");
  return unary(a, "quantize", [step](double x) { return step * std::nearbyint(x / step); },
               [](double x, double y) { return x == y ? 1.0 : 0.0; });
}

Value sum(const Value& a) {
  double s = 0.0;
  for (double v : a.data().values()) s += v;
  return make_op(Tensor::scalar(s), "sum", {a}, [](Node& self) {
    Node* p = grad_parent(self, 0);
    const double g = self.grad[0];
    for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
  });
}

Value mean(const Value& a) {
  const std::size_t n = a.data().size();
  if (n == 0) throw ShapeError("mean: empty input");
  double s = 0.0;
  for (double v : a.data().values()) s += v;
  return make_op(Tensor::scalar(s / static_cast<double>(n)), "mean", {a}, [n](Node& self) {
    Node* p = grad_parent(self, 0);
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
  });
}

Value mean_last(const Value& a) {
  require_rank("mean_last", a, 3);
  const std::size_t rows = a.shape()[0] * a.shape()[1];
  const std::size_t len = a.shape()[2];
  if (len == 0) throw ShapeError("mean_last: empty trailing axis");
  Tensor out({a.shape()[0], a.shape()[1]});
  const Tensor& x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < len; ++t) s += x[r * len + t];
    out[r] = s / static_cast<double>(len);
  }
  return make_op(std::move(out), "mean_last", {a}, [rows, len](Node& self) {
    Node* p = grad_parent(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double g = self.grad[r] / static_cast<double>(len);
      for (std::size_t t = 0; t < len; ++t) p->grad[r * len + t] += g;
    }
  });
}

Value matmul(const Value& a, const Value& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.data().matrix() * b.data().matrix();
  return make_op(std::move(out), "matmul", {a, b}, [](Node& self) {
    if (Node* pa = grad_parent(self, 0)) {
      pa->grad.matrix().noalias() += self.grad.matrix() * self.parents[1]->data.matrix().transpose();
    }
    if (Node* pb = grad_parent(self, 1)) {
      pb->grad.matrix().noalias() += self.parents[0]->data.matrix().transpose() * self.grad.matrix();
    }
  });
}

Value linear(const Value& x, const Value& weight, const Value& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  if (x.shape()[1] != weight.shape()[1]) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t k = weight.shape()[0];
  if (bias.defined() && bias.shape() != Shape{k}) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  Tensor out({x.shape()[0], k});
  out.matrix().noalias() = x.data().matrix() * weight.data().matrix().transpose();
  if (bias.defined()) out.matrix().rowwise() += bias.data().matrix().row(0);
  std::vector<Value> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_op(std::move(out), "linear", std::move(parents), [](Node& self) {
    const auto g = self.grad.matrix();
    if (Node* px = grad_parent(self, 0)) px->grad.matrix().noalias() += g * self.parents[1]->data.matrix();
    if (Node* pw = grad_parent(self, 1)) {
      pw->grad.matrix().noalias() += g.transpose() * self.parents[0]->data.matrix();
    }
    if (self.parents.size() > 2) {
      if (Node* pb = grad_parent(self, 2)) pb->grad.matrix().row(0) += g.colwise().sum();
    }
  });
}

Value reshape(const Value& a, Shape shape) {
  Tensor out = a.data().reshaped(std::move(shape));
  return make_op(std::move(out), "reshape", {a}, [](Node& self) {
    Node* p = grad_parent(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

Value transpose(const Value& a) {
  const Shape& s = a.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose: expected rank 2 or 3, got " + shape_str(s));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t rows = s[s.size() - 2];
  const std::size_t cols = s[s.size() - 1];
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  Tensor out(out_shape);
  const Tensor& x = a.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * rows * cols;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) out[base + j * rows + i] = x[base + i * cols + j];
    }
  }
  return make_op(std::move(out), "transpose", {a}, [batch, rows, cols](Node& self) {
    Node* p = grad_parent(self, 0);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = b * rows * cols;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) p->grad[base + i * cols + j] += self.grad[base + j * rows + i];
      }
    }
  });
}

Value frame(const Value& signal, std::size_t width, std::size_t hop) {
  require_rank("frame", signal, 2);
  if (width == 0 || hop == 0) throw ShapeError("frame: width and hop must be positive");
  const std::size_t n = signal.shape()[0];
  const std::size_t len = signal.shape()[1];
  if (len < width) {
    throw ShapeError("frame: signal " + shape_str(signal.shape()) + " shorter than one window of " +
                     std::to_string(width));
  }
  const std::size_t frames = (len - width) / hop + 1;
  Tensor out({n * frames, width});
  const Tensor& x = signal.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t f = 0; f < frames; ++f) {
      const double* src = x.data() + b * len + f * hop;
      std::copy(src, src + width, out.data() + (b * frames + f) * width);
    }
  }
  return make_op(std::move(out), "frame", {signal}, [n, len, frames, width, hop](Node& self) {
    Node* p = grad_parent(self, 0);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t f = 0; f < frames; ++f) {
        double* dst = p->grad.data() + b * len + f * hop;
        const double* g = self.grad.data() + (b * frames + f) * width;
        for (std::size_t t = 0; t < width; ++t) dst[t] += g[t];
      }
    }
  });
}

Value conv1d(const Value& x, const Value& weight, const Value& bias, std::size_t padding) {
  require_rank("conv1d", x, 3);
  require_rank("conv1d", weight, 3);
  const std::size_t n = x.shape()[0], cin = x.shape()[1], len = x.shape()[2];
  const std::size_t cout = weight.shape()[0], ksize = weight.shape()[2];
  if (weight.shape()[1] != cin) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) {
    throw ShapeError("conv1d: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  if (len + 2 * padding < ksize) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + " shorter than kernel " + shape_str(weight.shape()));
  }
  const std::size_t lout = len + 2 * padding - ksize + 1;
  const std::size_t rows = cin * ksize;

  // im2col per sample: col[c*K + k, t] = x[c, t + k - padding].
  auto fill_cols = [=](const double* xs, MatrixRM& col) {
    col.setZero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(lout));
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t k = 0; k < ksize; ++k) {
        for (std::size_t t = 0; t < lout; ++t) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(padding);
          if (src >= 0 && src < static_cast<std::ptrdiff_t>(len)) col(c * ksize + k, t) = xs[c * len + src];
        }
      }
    }
  };

  Tensor out({n, cout, lout});
  const ConstMatMap w2(weight.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(rows));
  MatrixRM col;
  for (std::size_t b = 0; b < n; ++b) {
    fill_cols(x.data().data() + b * cin * len, col);
    MatMap ob(out.data() + b * cout * lout, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(lout));
    ob.noalias() = w2 * col;
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c) ob.row(c).array() += bias.data()[c];
    }
  }

  std::vector<Value> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_op(std::move(out), "conv1d", std::move(parents),
                 [=](Node& self) {
                   Node* px = grad_parent(self, 0);
                   Node* pw = grad_parent(self, 1);
                   Node* pb = self.parents.size() > 2 ? grad_parent(self, 2) : nullptr;
                   const Tensor& xd = self.parents[0]->data;
                   const ConstMatMap wm(self.parents[1]->data.data(), static_cast<Eigen::Index>(cout),
                                        static_cast<Eigen::Index>(rows));
                   MatrixRM colb, dcol;
                   for (std::size_t b = 0; b < n; ++b) {
                     const ConstMatMap gb(self.grad.data() + b * cout * lout, static_cast<Eigen::Index>(cout),
                                          static_cast<Eigen::Index>(lout));
                     if (pw) {
                       fill_cols(xd.data() + b * cin * len, colb);
                       MatMap gw(pw->grad.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(rows));
                       gw.noalias() += gb * colb.transpose();
                     }
                     if (pb) {
                       for (std::size_t c = 0; c < cout; ++c) pb->grad[c] += gb.row(c).sum();
                     }
                     if (px) {
                       dcol.noalias() = wm.transpose() * gb;
                       double* gx = px->grad.data() + b * cin * len;
                       for (std::size_t c = 0; c < cin; ++c) {
                         for (std::size_t k = 0; k < ksize; ++k) {
                           for (std::size_t t = 0; t < lout; ++t) {
                             const std::ptrdiff_t src =
                                 static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(padding);
                             if (src >= 0 && src < static_cast<std::ptrdiff_t>(len)) {
                               gx[c * len + src] += dcol(c * ksize + k, t);
                             }
                           }
                         }
                       }
                     }
                   }
                 });
}

Value max_pool1d(const Value& x, std::size_t width) {
  require_rank("max_pool1d", x, 3);
  if (width == 0) throw ShapeError("max_pool1d: width must be positive");
  const std::size_t rows = x.shape()[0] * x.shape()[1];
  const std::size_t len = x.shape()[2];
  const std::size_t lout = len / width;
  if (lout == 0) {
    throw ShapeError("max_pool1d: input " + shape_str(x.shape()) + " shorter than window " + std::to_string(width));
  }
  Tensor out({x.shape()[0], x.shape()[1], lout});
  std::vector<std::size_t> argmax(rows * lout);
  const Tensor& xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t t = 0; t < lout; ++t) {
      std::size_t best = r * len + t * width;
      for (std::size_t k = 1; k < width; ++k) {
        const std::size_t idx = r * len + t * width + k;
        if (xd[idx] > xd[best]) best = idx;
      }
      argmax[r * lout + t] = best;
      out[r * lout + t] = xd[best];
    }
  }
  return make_op(std::move(out), "max_pool1d", {x}, [argmax = std::move(argmax)](Node& self) {
    Node* p = grad_parent(self, 0);
    for (std::size_t i = 0; i < argmax.size(); ++i) p->grad[argmax[i]] += self.grad[i];
  });
}

Value batch_norm(const Value& x, const Value& gamma, const Value& beta, const BatchNormState& state,
                 const BatchNormOptions& options) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("batch_norm: expected rank 2 or 3, got " + shape_str(s));
  const std::size_t n = s[0], channels = s[1], len = s.size() == 3 ? s[2] : 1;
  const Shape cshape{channels};
  if (gamma.shape() != cshape || beta.shape() != cshape || state.running_mean.shape() != cshape ||
      state.running_var.shape() != cshape) {
    throw ShapeError("batch_norm: per-channel parameters must be " + shape_str(cshape) + " for input " + shape_str(s));
  }
  const std::size_t count = n * len;
  const Tensor& xd = x.data();
  auto at = [channels, len](std::size_t b, std::size_t c, std::size_t t) { return (b * channels + c) * len + t; };

  std::vector<double> mu(channels), inv_std(channels);
  const bool train = options.mode == NormMode::kTrain;
  if (train) {
    if (count < 2) throw ShapeError("batch_norm: train mode needs more than one value per channel, got " + shape_str(s));
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t t = 0; t < len; ++t) acc += xd[at(b, c, t)];
      const double m = acc / static_cast<double>(count);
      double var = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t t = 0; t < len; ++t) {
          const double d = xd[at(b, c, t)] - m;
          var += d * d;
        }
      var /= static_cast<double>(count);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + options.eps);
      if (BatchNormState* run = options.running_update) {
        const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
        run->running_mean[c] = (1.0 - options.momentum) * run->running_mean[c] + options.momentum * m;
        run->running_var[c] = (1.0 - options.momentum) * run->running_var[c] + options.momentum * unbiased;
      }
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + options.eps);
    }
  }

  Tensor xhat(s), out(s);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t i = at(b, c, t);
        xhat[i] = (xd[i] - mu[c]) * inv_std[c];
        out[i] = gamma.data()[c] * xhat[i] + beta.data()[c];
      }

  return make_op(std::move(out), "batch_norm", {x, gamma, beta},
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   Node* px = grad_parent(self, 0);
                   Node* pg = grad_parent(self, 1);
                   Node* pb = grad_parent(self, 2);
                   const Tensor& g = self.parents[1]->data;
                   const double m = static_cast<double>(count);
                   for (std::size_t c = 0; c < channels; ++c) {
                     double sum_dy = 0.0, sum_dy_xhat = 0.0;
                     for (std::size_t b = 0; b < n; ++b)
                       for (std::size_t t = 0; t < len; ++t) {
                         const std::size_t i = at(b, c, t);
                         sum_dy += self.grad[i];
                         sum_dy_xhat += self.grad[i] * xhat[i];
                       }
                     if (pg) pg->grad[c] += sum_dy_xhat;
                     if (pb) pb->grad[c] += sum_dy;
                     if (!px) continue;
                     const double k = g[c] * inv_std[c];
                     for (std::size_t b = 0; b < n; ++b)
                       for (std::size_t t = 0; t < len; ++t) {
                         const std::size_t i = at(b, c, t);
                         if (train) {
                           px->grad[i] += k * (self.grad[i] - sum_dy / m - xhat[i] * sum_dy_xhat / m);
                         } else {
                           px->grad[i] += k * self.grad[i];
                         }
                       }
                   }
                 });
}

Value softmax(const Value& a) {
  require_rank("softmax", a, 2);
  const std::size_t n = a.shape()[0], k = a.shape()[1];
  Tensor out(a.shape());
  const Tensor& x = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (out[i * k + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= z;
  }
  return make_op(std::move(out), "softmax", {a}, [n, k](Node& self) {
    Node* p = grad_parent(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += self.grad[i * k + j] * self.data[i * k + j];
      for (std::size_t j = 0; j < k; ++j) p->grad[i * k + j] += self.data[i * k + j] * (self.grad[i * k + j] - dot);
    }
  });
}

Value log_softmax(const Value& a) {
  require_rank("log_softmax", a, 2);
  const std::size_t n = a.shape()[0], k = a.shape()[1];
  Tensor out(a.shape());
  const Tensor& x = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  return make_op(std::move(out), "log_softmax", {a}, [n, k](Node& self) {
    Node* p = grad_parent(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < k; ++j) gsum += self.grad[i * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        p->grad[i * k + j] += self.grad[i * k + j] - std::exp(self.data[i * k + j]) * gsum;
      }
    }
  });
}

namespace {
void check_labels(const char* op, const Value& a, std::span<const int> labels) {
  require_rank(op, a, 2);
  if (labels.size() != a.shape()[0]) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for input " +
                     shape_str(a.shape()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= a.shape()[1]) {
      throw Error(std::string(op) + ": label " + std::to_string(y) + " out of range for " +
                  std::to_string(a.shape()[1]) + " classes");
    }
  }
}

Value gather_rows(const Value& a, std::vector<std::size_t> index, const char* op) {
  Tensor out({index.size()});
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = a.data()[index[i]];
  return make_op(std::move(out), op, {a}, [index = std::move(index)](Node& self) {
    Node* p = grad_parent(self, 0);
    for (std::size_t i = 0; i < index.size(); ++i) p->grad[index[i]] += self.grad[i];
  });
}
}  // namespace

Value pick(const Value& a, std::span<const int> labels) {
  check_labels("pick", a, labels);
  const std::size_t k = a.shape()[1];
  std::vector<std::size_t> index(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) index[i] = i * k + static_cast<std::size_t>(labels[i]);
  return gather_rows(a, std::move(index), "pick");
}

Value max_excluding(const Value& a, std::span<const int> labels) {
  check_labels("max_excluding", a, labels);
  const std::size_t k = a.shape()[1];
  if (k < 2) throw ShapeError("max_excluding: need at least two classes, got " + shape_str(a.shape()));
  std::vector<std::size_t> index(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = k;
    for (std::size_t j = 0; j < k; ++j) {
      if (static_cast<int>(j) == labels[i]) continue;
      if (best == k || a.data()[i * k + j] > a.data()[i * k + best]) best = j;
    }
    index[i] = i * k + best;
  }
  return gather_rows(a, std::move(index), "max_excluding");
}

Value l2_norm(const Value& a) {
  require_rank("l2_norm", a, 2);
  const std::size_t n = a.shape()[0], d = a.shape()[1];
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a.data().matrix().row(static_cast<Eigen::Index>(i)).norm();
    if (out[i] == 0.0) throw Error("l2_norm: row " + std::to_string(i) + " has zero norm");
  }
  return make_op(std::move(out), "l2_norm", {a}, [n, d](Node& self) {
    Node* p = grad_parent(self, 0);
    const Tensor& x = self.parents[0]->data;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = self.grad[i] / self.data[i];
      for (std::size_t j = 0; j < d; ++j) p->grad[i * d + j] += s * x[i * d + j];
    }
  });
}

Value cosine_similarity(const Value& a, const Value& b) {
  require_rank("cosine_similarity", a, 2);
  require_rank("cosine_similarity", b, 2);
  if (a.shape()[1] != b.shape()[1]) {
    throw ShapeError("cosine_similarity: feature sizes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto normalize = [](const Tensor& t, const char* which) {
    MatrixRM unit = t.matrix();
    Eigen::VectorXd norms(unit.rows());
    for (Eigen::Index i = 0; i < unit.rows(); ++i) {
      norms(i) = unit.row(i).norm();
      if (norms(i) == 0.0) {
        throw Error(std::string("cosine_similarity: zero-norm row ") + std::to_string(i) + " in " + which);
      }
      unit.row(i) /= norms(i);
    }
    return std::pair{unit, norms};
  };
  auto [ua, na] = normalize(a.data(), "first operand");
  auto [ub, nb] = normalize(b.data(), "second operand");
  Tensor out({a.shape()[0], b.shape()[0]});
  out.matrix().noalias() = ua * ub.transpose();
  return make_op(std::move(out), "cosine_similarity", {a, b},
                 [ua = std::move(ua), na = std::move(na), ub = std::move(ub), nb = std::move(nb)](Node& self) {
                   const auto g = self.grad.matrix();
                   // Project the gradient w.r.t. the unit vector onto the tangent space, divide by the norm.
                   auto back = [](const MatrixRM& gu, const MatrixRM& u, const Eigen::VectorXd& norms, Tensor& dst) {
                     auto d = dst.matrix();
                     for (Eigen::Index i = 0; i < u.rows(); ++i) {
                       const double radial = gu.row(i).dot(u.row(i));
                       d.row(i) += (gu.row(i) - radial * u.row(i)) / norms(i);
                     }
                   };
                   if (Node* pa = grad_parent(self, 0)) back(g * ub, ua, na, pa->grad);
                   if (Node* pb = grad_parent(self, 1)) back(g.transpose() * ua, ub, nb, pb->grad);
                 });
}

}  // namespace ag

double finite_diff_check(const std::function<Value(const Value&)>& loss_fn, const Tensor& point,
                         const FiniteDiffOptions& options) {
  if (!(options.step > 0.0)) throw Error("finite_diff_check: step must be positive");
  const Value x = Value::leaf(point, true);
  const Value loss = loss_fn(x);
  if (!loss.data().all_finite()) throw NumericError("finite_diff_check: non-finite loss at the base point");
  backward(loss);
  Tensor analytic(point.shape(), 0.0);
  if (loss.requires_grad()) analytic = x.grad();

  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + options.step;
    const double up = loss_fn(Value::constant(probe)).item();
    probe[i] = point[i] - options.step;
    const double down = loss_fn(Value::constant(probe)).item();
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[i])) {
      throw NumericError("finite_diff_check: non-finite evaluation at coordinate " + std::to_string(i));
    }
    const double central = (up - down) / (2.0 * options.step);
    worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(central) + options.floor));
  }
  return worst;
}

}  // namespace advspk
