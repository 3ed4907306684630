#pragma once

// Reverse-mode differentiation over dense row-major tensors.
//
// A Tape owns every tensor produced during one forward pass. Ops append nodes
// in execution order, so the node list is already topologically sorted and
// backward() is a single reverse sweep. A Var is a lightweight handle
// (tape pointer + node index); it is only valid while its tape lives.
//
// Attention retention: when a tape is created with retain_attention = true,
// model code registers each post-softmax attention matrix with
// retain_attention(). Retained matrices are forced to require grad, so
// backward() populates their gradient even when every parameter is frozen.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mmfm/errors.hpp"

namespace mmfm {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Large negative finite value written into masked attention scores.
inline constexpr double kMaskValue = -1e9;

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  int id() const { return id_; }
  Tape<T>* tape() const { return tape_; }

  const Shape& shape() const;
  std::size_t size() const;
  int rows() const;
  int cols() const;
  std::span<const T> value() const;
  /// Empty span when no gradient reached this tensor.
  std::span<const T> grad() const;
  bool requires_grad() const;
  T item() const;

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  struct Node {
    Shape shape;
    std::vector<T> owned;
    const T* external = nullptr;
    std::size_t size = 0;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  struct RetainedAttention {
    int layer;
    int head;
    int id;
  };

  explicit Tape(bool retain_attention = false) : retain_(retain_attention) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Tensor owning its data.
  Var<T> leaf(Shape shape, std::vector<T> data, bool requires_grad = false);
  /// Tensor aliasing caller storage, which must outlive the tape.
  Var<T> view(Shape shape, std::span<const T> data, bool requires_grad = false);

  /// Used by ops. `backward` is dropped when requires_grad is false.
  Var<T> push(Shape shape, std::vector<T> value, bool requires_grad, BackwardFn backward);

  bool retains_attention() const { return retain_; }
  /// No-op unless the tape was created with retention enabled.
  void retain_attention(int layer, int head, const Var<T>& attention);
  const std::vector<RetainedAttention>& retained() const { return retained_; }

  void backward(const Var<T>& loss);

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::span<const T> value(int id) const;
  std::span<const T> grad(int id) const;
  /// Gradient buffer of `id`, allocated as zeros on first access.
  std::span<T> grad_mut(int id);
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  bool retain_;
  std::vector<RetainedAttention> retained_;
};

// ---------------------------------------------------------------------------
// Ops. All inputs must come from the same tape. Broadcasting in add/mul is
// trailing-dimension only: b's shape must equal the trailing dims of a's.

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// a · bᵀ for a: m×k, b: n×k.
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, double s);
/// tanh approximation.
template <typename T> Var<T> gelu(const Var<T>& a);
/// Normalizes each row over the last dim, eps 1e-5.
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);
template <typename T> Var<T> embedding(const Var<T>& table, std::span<const int> ids);
/// Masks scores[i][j] unless j <= i, or both i and j are below `prefix`
/// (the prefix block attends bidirectionally).
template <typename T> Var<T> causal_mask(const Var<T>& scores, int prefix);
template <typename T> Var<T> softmax_rows(const Var<T>& x);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// Column means of a 2-D tensor, shape 1×n.
template <typename T> Var<T> mean_rows(const Var<T>& a);
template <typename T> Var<T> slice(const Var<T>& a, int row0, int nrows, int col0, int ncols);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> gather_rows(const Var<T>& a, std::span<const int> rows);
/// L2-normalizes each row.
template <typename T> Var<T> normalize_rows(const Var<T>& a);
template <typename T> Var<T> pick(const Var<T>& a, int row, int col);
/// Mean negative log-likelihood over rows.
template <typename T> Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets);
/// Mean over rows of -Σ p log softmax(logits); `target_probs` has logits' shape.
template <typename T> Var<T> soft_cross_entropy(const Var<T>& logits, std::span<const T> target_probs);

}  // namespace mmfm
