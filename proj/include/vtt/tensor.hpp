#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vtt {

/// Extents of a row-major matrix. Vectors are 1 x n, scalars 1 x 1.
struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t numel() const { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Thread-local switch for graph recording. When disabled, operations only
/// compute values; results never require gradients.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a node of a define-by-run autodiff graph.
///
/// Copies share the underlying node (values, gradient, producing op), the
/// same way framework variables behave. Leaf tensors created with
/// `requires_grad` act as parameters: `backward` accumulates into their
/// gradient buffer until `zero_grad` is called.
template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;
  };

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t numel() const { return node_->shape.numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> values() const { return node_->value; }
  // Handles have pointer semantics; writing through a const handle is allowed.
  std::span<T> mutable_values() const { return node_->value; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const;

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; allocated (zero-filled) on first access.
  std::span<T> grad() const;
  void zero_grad() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a 1 x 1 tensor. Gradients accumulate into every
/// reachable node that requires them.
template <typename T>
void backward(const Tensor<T>& loss);

/// Per-entry blocking pattern for attention logits (1 = blocked). An empty
/// mask blocks nothing.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> blocked;

  bool empty() const { return blocked.empty(); }
  bool is_blocked(std::size_t r, std::size_t c) const {
    return !blocked.empty() && blocked[r * cols + c] != 0;
  }

  static Mask none() { return {}; }
  /// Row i may see columns 0..i.
  static Mask causal(std::size_t n);
  /// Blocks key columns flagged in `padded` for every query row. Extra
  /// columns beyond padded.size() (memory slots) are never blocked.
  static Mask key_padding(std::size_t rows, std::size_t cols,
                          std::span<const std::uint8_t> padded);
  /// Same pattern with `extra` always-visible columns appended.
  Mask with_extra_columns(std::size_t extra) const;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Shapes are checked eagerly; mismatches throw
// DimensionError naming both operands.

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a * b^T without materializing the transpose.
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// Adds a 1 x n row to every row of x (bias broadcast, the only broadcast).
template <typename T> Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row);
/// Multiplies every row of x elementwise by a 1 x n row.
template <typename T> Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& row);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> elu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T> Tensor<T> softmax_lastdim(const Tensor<T>& x, const Mask& mask = {});
template <typename T> Tensor<T> log_softmax_lastdim(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count);

/// Embedding lookup: row i of the result is table[ids[i]].
template <typename T> Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids);
/// Row i of the result (rows x 1) is x[i, ids[i]].
template <typename T> Tensor<T> pick(const Tensor<T>& x, std::span<const int> ids);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
/// Column means over the rows whose `keep` flag is nonzero (all rows when
/// `keep` is empty). Result is 1 x cols.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x, std::span<const std::uint8_t> keep = {});

/// Sum over rows of -log softmax(logits)[row, target[row]], skipping rows
/// whose target equals `ignore_index`.
template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const int> targets,
                            int ignore_index = -1);

/// Re-type a tensor's values (no graph link); used to mirror float weights
/// into a double model for gradient checks.
template <typename To, typename From>
Tensor<To> cast_detached(const Tensor<From>& x, bool requires_grad) {
  std::vector<To> v(x.values().begin(), x.values().end());
  return Tensor<To>::from(x.shape(), std::move(v), requires_grad);
}

}  // namespace vtt
