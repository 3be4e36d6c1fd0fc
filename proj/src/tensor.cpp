#include "vtt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "vtt/error.hpp"

namespace vtt {

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << "[" << s.rows << "x" << s.cols << "]";
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return from(shape, std::vector<T>(shape.numel(), T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (values.size() != shape.numel()) {
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1, 1}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template class Tensor<float>;
template class Tensor<double>;

// ---------------------------------------------------------------------------
// Graph plumbing

namespace {

template <typename T>
using Node = typename Tensor<T>::Node;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename N>
auto& grad_of(N& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), typename decltype(n.value)::value_type(0));
  return n.grad;
}

template <typename T, typename Backward>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<NodePtr<T>> parents,
                  Backward&& bw) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(value);
  const bool track = GradMode::enabled() &&
                     std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr<T>& p) { return p->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::forward<Backward>(bw);
  }
  return Tensor<T>(std::move(node));
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                       to_string(b));
}

}  // namespace

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  grad_of(*loss.node())[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (!n.backward || n.grad.empty()) continue;
    n.backward(n);
    // Interior gradients are consumed; clearing keeps repeated sweeps exact.
    n.grad.clear();
  }
}

template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

// ---------------------------------------------------------------------------
// Masks

Mask Mask::causal(std::size_t n) {
  Mask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = r + 1; c < n; ++c) m.blocked[r * n + c] = 1;
  return m;
}

Mask Mask::key_padding(std::size_t rows, std::size_t cols, std::span<const std::uint8_t> padded) {
  if (padded.size() > cols) throw DimensionError("key_padding: more flags than columns");
  Mask m{rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < padded.size(); ++c) m.blocked[r * cols + c] = padded[c];
  return m;
}

Mask Mask::with_extra_columns(std::size_t extra) const {
  if (empty() || extra == 0) return *this;
  Mask m{rows, cols + extra, std::vector<std::uint8_t>(rows * (cols + extra), 0)};
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m.blocked[r * m.cols + c] = blocked[r * cols + c];
  return m;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> c(m * n, T(0));
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aip * bv[p * n + j];
    }
  auto an = a.node(), bn = b.node();
  return make_op<T>({m, n}, std::move(c), {an, bn}, [an, bn, m, k, n](Node<T>& self) {
    const auto& dc = self.grad;
    if (an->requires_grad) {
      auto& da = grad_of(*an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * bn->value[p * n + j];
          da[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      auto& db = grad_of(*bn);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = an->value[i * k + p];
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * dc[i * n + j];
        }
    }
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) shape_mismatch("matmul_nt", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<T> c(m * n, T(0));
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
      c[i * n + j] = acc;
    }
  auto an = a.node(), bn = b.node();
  return make_op<T>({m, n}, std::move(c), {an, bn}, [an, bn, m, k, n](Node<T>& self) {
    const auto& dc = self.grad;
    if (an->requires_grad) {
      auto& da = grad_of(*an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = dc[i * n + j];
          for (std::size_t p = 0; p < k; ++p) da[i * k + p] += g * bn->value[j * k + p];
        }
    }
    if (bn->requires_grad) {
      auto& db = grad_of(*bn);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = dc[i * n + j];
          for (std::size_t p = 0; p < k; ++p) db[j * k + p] += g * an->value[i * k + p];
        }
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto an = a.node();
  return make_op<T>({n, m}, std::move(out), {an}, [an, m, n](Node<T>& self) {
    auto& da = grad_of(*an);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) da[i * n + j] += self.grad[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = grad_of(*p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_mismatch("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      auto& g = grad_of(*an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = grad_of(*bn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(a.shape(), std::move(out), {an, bn}, [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      auto& g = grad_of(*an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = grad_of(*bn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) shape_mismatch("add_row", x.shape(), row.shape());
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += row.values()[j];
  auto xn = x.node(), rn = row.node();
  return make_op<T>(x.shape(), std::move(out), {xn, rn}, [xn, rn, m, n](Node<T>& self) {
    if (xn->requires_grad) {
      auto& g = grad_of(*xn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (rn->requires_grad) {
      auto& g = grad_of(*rn);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) shape_mismatch("mul_row", x.shape(), row.shape());
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.values()[i * n + j] * row.values()[j];
  auto xn = x.node(), rn = row.node();
  return make_op<T>(x.shape(), std::move(out), {xn, rn}, [xn, rn, m, n](Node<T>& self) {
    if (xn->requires_grad) {
      auto& g = grad_of(*xn);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * rn->value[j];
    }
    if (rn->requires_grad) {
      auto& g = grad_of(*rn);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * xn->value[i * n + j];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {xn}, [xn, factor](Node<T>& self) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

namespace {

// Unary op whose derivative is a function of input and output value.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.values()[i]);
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {xn}, [xn, deriv](Node<T>& self) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * deriv(xn->value[i], self.value[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v > T(0) ? v : std::expm1(v); },
      [](T in, T out) { return in > T(0) ? T(1) : out + T(1); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T out) { return out * (T(1) - out); });
}

// ---------------------------------------------------------------------------
// Normalizers

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, const Mask& mask) {
  const std::size_t m = x.rows(), n = x.cols();
  if (!mask.empty() && (mask.rows != m || mask.cols != n)) {
    shape_mismatch("softmax_lastdim(mask)", x.shape(), Shape{mask.rows, mask.cols});
  }
  std::vector<T> out(m * n, T(0));
  const auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask.is_blocked(i, j)) mx = std::max(mx, xv[i * n + j]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;  // fully blocked row
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      if (mask.is_blocked(i, j)) continue;
      out[i * n + j] = std::exp(xv[i * n + j] - mx);
      total += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {xn}, [xn, m, n](Node<T>& self) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < m; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw DimensionError("log_softmax_lastdim: empty last dimension");
  std::vector<T> out(m * n);
  const auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    T mx = xv[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) total += std::exp(xv[i * n + j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] - lse;
  }
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(out), {xn}, [xn, m, n](Node<T>& self) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < m; ++i) {
      T gsum = T(0);
      for (std::size_t j = 0; j < n; ++j) gsum += self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += self.grad[i * n + j] - std::exp(self.value[i * n + j]) * gsum;
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw DimensionError("layer_norm: zero-length row in " + to_string(x.shape()));
  if (gamma.shape() != Shape{1, n}) shape_mismatch("layer_norm(gamma)", x.shape(), gamma.shape());
  if (beta.shape() != Shape{1, n}) shape_mismatch("layer_norm(beta)", x.shape(), beta.shape());

  std::vector<T> normalized(m * n);
  std::vector<T> inv_std(m);
  std::vector<T> out(m * n);
  const auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += xv[i * n + j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T d = xv[i * n + j] - mean;
      var += d * d;
    }
    var /= T(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      normalized[i * n + j] = (xv[i * n + j] - mean) * inv_std[i];
      out[i * n + j] = normalized[i * n + j] * gamma.values()[j] + beta.values()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op<T>(
      x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, m, n, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& dy = self.grad;
        if (gn->requires_grad) {
          auto& g = grad_of(*gn);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j] * normalized[i * n + j];
        }
        if (bn->requires_grad) {
          auto& g = grad_of(*bn);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
        }
        if (xn->requires_grad) {
          auto& g = grad_of(*xn);
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = dy[i * n + j] * gn->value[j];
              mean_d += d;
              mean_dx += d * normalized[i * n + j];
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = dy[i * n + j] * gn->value[j];
              g[i * n + j] += inv_std[i] * (d - mean_d - normalized[i * n + j] * mean_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    if (p.cols() != n) shape_mismatch("concat_rows", parts.front().shape(), p.shape());
    m += p.rows();
    nodes.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  auto captured = nodes;
  return make_op<T>({m, n}, std::move(out), std::move(nodes), [captured](Node<T>& self) {
    std::size_t offset = 0;
    for (const auto& p : captured) {
      const std::size_t len = p->value.size();
      if (p->requires_grad) {
        auto& g = grad_of(*p);
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    if (p.rows() != m) shape_mismatch("concat_cols", parts.front().shape(), p.shape());
    n += p.cols();
    nodes.push_back(p.node());
  }
  std::vector<T> out(m * n);
  std::size_t col = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * n + col + j] = p.values()[i * p.cols() + j];
    col += p.cols();
  }
  auto captured = nodes;
  return make_op<T>({m, n}, std::move(out), std::move(nodes), [captured, m, n](Node<T>& self) {
    std::size_t col = 0;
    for (const auto& p : captured) {
      const std::size_t w = p->shape.cols;
      if (p->requires_grad) {
        auto& g = grad_of(*p);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + col + j];
      }
      col += w;
    }
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + to_string(x.shape()));
  }
  const std::size_t n = x.cols();
  std::vector<T> out(x.values().begin() + begin * n, x.values().begin() + (begin + count) * n);
  auto xn = x.node();
  return make_op<T>({count, n}, std::move(out), {xn}, [xn, begin, n](Node<T>& self) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.cols()) {
    throw DimensionError("slice_cols: cols [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + to_string(x.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.values()[i * n + begin + j];
  auto xn = x.node();
  return make_op<T>({m, count}, std::move(out), {xn}, [xn, begin, count, m, n](Node<T>& self) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += self.grad[i * count + j];
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
  const std::size_t n = table.cols();
  std::vector<T> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw ContractError("gather_rows: id " + std::to_string(ids[i]) + " outside table " +
                          to_string(table.shape()));
    }
    std::copy_n(table.values().begin() + ids[i] * n, n, out.begin() + i * n);
  }
  auto tn = table.node();
  std::vector<int> idx(ids.begin(), ids.end());
  return make_op<T>({ids.size(), n}, std::move(out), {tn}, [tn, idx = std::move(idx), n](Node<T>& self) {
    auto& g = grad_of(*tn);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
  });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const int> ids) {
  const std::size_t m = x.rows(), n = x.cols();
  if (ids.size() != m) {
    throw DimensionError("pick: " + std::to_string(ids.size()) + " ids for " + to_string(x.shape()));
  }
  std::vector<T> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) {
      throw ContractError("pick: column " + std::to_string(ids[i]) + " outside " + to_string(x.shape()));
    }
    out[i] = x.values()[i * n + ids[i]];
  }
  auto xn = x.node();
  std::vector<int> idx(ids.begin(), ids.end());
  return make_op<T>({m, 1}, std::move(out), {xn}, [xn, idx = std::move(idx), n](Node<T>& self) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * n + idx[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.values()) total += v;
  auto xn = x.node();
  return make_op<T>({1, 1}, {total}, {xn}, [xn](Node<T>& self) {
    auto& g = grad_of(*xn);
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x, std::span<const std::uint8_t> keep) {
  const std::size_t m = x.rows(), n = x.cols();
  if (!keep.empty() && keep.size() != m) {
    throw DimensionError("mean_rows: " + std::to_string(keep.size()) + " flags for " +
                         to_string(x.shape()));
  }
  std::vector<std::uint8_t> kept(keep.begin(), keep.end());
  if (kept.empty()) kept.assign(m, 1);
  const auto count = static_cast<std::size_t>(std::count_if(kept.begin(), kept.end(), [](auto k) { return k != 0; }));
  if (count == 0) throw ContractError("mean_rows: no rows kept");
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    if (!kept[i]) continue;
    for (std::size_t j = 0; j < n; ++j) out[j] += x.values()[i * n + j];
  }
  const T inv = T(1) / T(count);
  for (auto& v : out) v *= inv;
  auto xn = x.node();
  return make_op<T>({1, n}, std::move(out), {xn}, [xn, kept = std::move(kept), m, n, inv](Node<T>& self) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < m; ++i) {
      if (!kept[i]) continue;
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
    }
  });
}

template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const int> targets, int ignore_index) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) {
    throw DimensionError("cross_entropy_sum: " + std::to_string(targets.size()) + " targets for " +
                         to_string(logits.shape()));
  }
  std::vector<T> probs(m * n, T(0));
  T total = T(0);
  const auto lv = logits.values();
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] == ignore_index) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n) {
      throw ContractError("cross_entropy_sum: target " + std::to_string(targets[i]) +
                          " outside " + to_string(logits.shape()));
    }
    T mx = lv[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lv[i * n + j]);
    T z = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(lv[i * n + j] - mx);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    total += -(lv[i * n + targets[i]] - mx - std::log(z));
  }
  auto ln = logits.node();
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_op<T>({1, 1}, {total}, {ln},
                    [ln, probs = std::move(probs), tgt = std::move(tgt), m, n, ignore_index](Node<T>& self) {
                      auto& g = grad_of(*ln);
                      const T dy = self.grad[0];
                      for (std::size_t i = 0; i < m; ++i) {
                        if (tgt[i] == ignore_index) continue;
                        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += dy * probs[i * n + j];
                        g[i * n + tgt[i]] -= dy;
                      }
                    });
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define VTT_INSTANTIATE_OPS(T)                                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul_row(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> elu(const Tensor<T>&);                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> softmax_lastdim(const Tensor<T>&, const Mask&);                           \
  template Tensor<T> log_softmax_lastdim(const Tensor<T>&);                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                               \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                               \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> pick(const Tensor<T>&, std::span<const int>);                             \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean_rows(const Tensor<T>&, std::span<const std::uint8_t>);               \
  template Tensor<T> cross_entropy_sum(const Tensor<T>&, std::span<const int>, int);

VTT_INSTANTIATE_OPS(float)
VTT_INSTANTIATE_OPS(double)

#undef VTT_INSTANTIATE_OPS

}  // namespace vtt
