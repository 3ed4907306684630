#include "mmfm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <type_traits>
#include <sstream>

namespace mmfm {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
void check_finite(std::span<const T> v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("empty shape");
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in " + shape_str(shape));
  }
}

// C(m×n) += A(m×k) · B(k×n)
template <typename T>
void gemm_nn(int m, int k, int n, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Register-tiled float path: a 4×16 block of C stays in registers for the
// whole k loop; leftover rows and columns take the scalar loop above.
typedef float v8f __attribute__((vector_size(32)));

inline v8f load8(const float* p) {
  v8f v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
inline void add_store8(float* p, v8f v) {
  v8f c = load8(p);
  c += v;
  std::memcpy(p, &c, sizeof c);
}

template <>
void gemm_nn<float>(int m, int k, int n, const float* a, const float* b, float* c) {
  constexpr int MR = 4, NR = 16;
  const int m4 = m - m % MR, n16 = n - n % NR;
  for (int i = 0; i < m4; i += MR) {
    const float* a0 = a + static_cast<std::size_t>(i) * k;
    const float* a1 = a0 + k;
    const float* a2 = a1 + k;
    const float* a3 = a2 + k;
    for (int j = 0; j < n16; j += NR) {
      v8f c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      const float* bp = b + j;
      for (int p = 0; p < k; ++p, bp += n) {
        const v8f b0 = load8(bp), b1 = load8(bp + 8);
        c00 += a0[p] * b0;
        c01 += a0[p] * b1;
        c10 += a1[p] * b0;
        c11 += a1[p] * b1;
        c20 += a2[p] * b0;
        c21 += a2[p] * b1;
        c30 += a3[p] * b0;
        c31 += a3[p] * b1;
      }
      float* cp = c + static_cast<std::size_t>(i) * n + j;
      add_store8(cp, c00);
      add_store8(cp + 8, c01);
      add_store8(cp + n, c10);
      add_store8(cp + n + 8, c11);
      add_store8(cp + 2 * n, c20);
      add_store8(cp + 2 * n + 8, c21);
      add_store8(cp + 3 * n, c30);
      add_store8(cp + 3 * n + 8, c31);
    }
    for (int r = 0; r < MR; ++r) {
      const float* arow = a + static_cast<std::size_t>(i + r) * k;
      float* crow = c + static_cast<std::size_t>(i + r) * n;
      for (int p = 0; p < k; ++p) {
        const float* brow = b + static_cast<std::size_t>(p) * n;
        for (int j = n16; j < n; ++j) crow[j] += arow[p] * brow[j];
      }
    }
  }
  for (int i = m4; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(int rows, int cols, const T* x);

// C(k×n) += A(m×k)ᵀ · D(m×n)
template <typename T>
void gemm_tn(int m, int k, int n, const T* a, const T* d, T* c) {
  if constexpr (std::is_same_v<T, float>) {
    const auto at = transposed(m, k, a);
    gemm_nn<float>(k, m, n, at.data(), d, c);
    return;
  }
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    const T* drow = d + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * drow[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(int rows, int cols, const T* x) {
  std::vector<T> out(static_cast<std::size_t>(rows) * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(j) * rows + i] = x[static_cast<std::size_t>(i) * cols + j];
  return out;
}

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!a.valid() || !b.valid()) throw ContractError(std::string(op) + ": invalid tensor handle");
  if (a.tape() != b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
  return *a.tape();
}

template <typename T>
Tape<T>& tape_of(const Var<T>& a, const char* op) {
  if (!a.valid()) throw ContractError(std::string(op) + ": invalid tensor handle");
  return *a.tape();
}

void require_2d(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(s));
}

// b broadcasts over a when b's shape equals the trailing dims of a.
bool trailing_broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Var

template <typename T>
const Shape& Var<T>::shape() const {
  return tape_->node(id_).shape;
}
template <typename T>
std::size_t Var<T>::size() const {
  return tape_->node(id_).size;
}
template <typename T>
int Var<T>::rows() const {
  const Shape& s = shape();
  return s.size() == 1 ? 1 : s[0];
}
template <typename T>
int Var<T>::cols() const {
  return shape().back();
}
template <typename T>
std::span<const T> Var<T>::value() const {
  return tape_->value(id_);
}
template <typename T>
std::span<const T> Var<T>::grad() const {
  return tape_->grad(id_);
}
template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}
template <typename T>
T Var<T>::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
  return value()[0];
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::leaf(Shape shape, std::vector<T> data, bool requires_grad) {
  check_shape(shape);
  if (numel(shape) != data.size())
    throw DimensionError("leaf: shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  check_finite<T>(data, "leaf");
  Node n;
  n.shape = std::move(shape);
  n.size = data.size();
  n.owned = std::move(data);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::view(Shape shape, std::span<const T> data, bool requires_grad) {
  check_shape(shape);
  if (numel(shape) != data.size())
    throw DimensionError("view: shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  Node n;
  n.shape = std::move(shape);
  n.size = data.size();
  n.external = data.data();
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::push(Shape shape, std::vector<T> value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.size = value.size();
  n.shape = std::move(shape);
  n.owned = std::move(value);
  check_finite<T>(n.owned, "op");
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename T>
void Tape<T>::retain_attention(int layer, int head, const Var<T>& attention) {
  if (!retain_) return;
  if (attention.tape() != this) throw ContractError("retain_attention: tensor from another tape");
  nodes_[static_cast<std::size_t>(attention.id())].requires_grad = true;
  retained_.push_back({layer, head, attention.id()});
}

template <typename T>
std::span<const T> Tape<T>::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external ? std::span<const T>(n.external, n.size) : std::span<const T>(n.owned);
}

template <typename T>
std::span<const T> Tape<T>::grad(int id) const {
  return nodes_[static_cast<std::size_t>(id)].grad;
}

template <typename T>
std::span<T> Tape<T>::grad_mut(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad.assign(n.size, T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!requires_grad(loss.id())) throw ContractError("backward: loss does not depend on any tensor requiring grad");
  for (Node& n : nodes_) n.grad.clear();
  grad_mut(loss.id())[0] = T(1);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

template class Var<float>;
template class Var<double>;
template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Ops

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = same_tape(a, b, "matmul");
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  const int m = sa[0], k = sa[1], n = sb[1];
  std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
  gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data());
  const int ia = a.id(), ib = b.id();
  return t.push({m, n}, std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape<T>& tp, int self) {
    const T* dc = tp.grad(self).data();
    if (tp.requires_grad(ia)) {
      auto bt = transposed(k, n, tp.value(ib).data());
      gemm_nn(m, n, k, dc, bt.data(), tp.grad_mut(ia).data());
    }
    if (tp.requires_grad(ib)) gemm_tn(m, k, n, tp.value(ia).data(), dc, tp.grad_mut(ib).data());
  });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = same_tape(a, b, "matmul_nt");
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb) + "ᵀ");
  const int m = sa[0], k = sa[1], n = sb[0];
  std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
  auto bt = transposed(n, k, b.value().data());
  gemm_nn(m, k, n, a.value().data(), bt.data(), out.data());
  const int ia = a.id(), ib = b.id();
  return t.push({m, n}, std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape<T>& tp, int self) {
    const T* dc = tp.grad(self).data();
    if (tp.requires_grad(ia)) gemm_nn(m, n, k, dc, tp.value(ib).data(), tp.grad_mut(ia).data());
    if (tp.requires_grad(ib)) gemm_tn(m, n, k, dc, tp.value(ia).data(), tp.grad_mut(ib).data());
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = same_tape(a, b, "add");
  if (!trailing_broadcastable(a.shape(), b.shape()))
    throw DimensionError("add: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  const std::size_t n = a.size(), nb = b.size();
  auto va = a.value(), vb = b.value();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = va[i] + vb[i % nb];
  const int ia = a.id(), ib = b.id();
  return t.push(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_mut(ia);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_mut(ib);
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = same_tape(a, b, "mul");
  if (!trailing_broadcastable(a.shape(), b.shape()))
    throw DimensionError("mul: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  const std::size_t n = a.size(), nb = b.size();
  auto va = a.value(), vb = b.value();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = va[i] * vb[i % nb];
  const int ia = a.id(), ib = b.id();
  return t.push(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto xa = tp.value(ia), xb = tp.value(ib);
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_mut(ia);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * xb[i % nb];
    }
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_mut(ib);
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * xa[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
  Tape<T>& t = tape_of(a, "scale");
  const T f = static_cast<T>(s);
  auto va = a.value();
  std::vector<T> out(va.begin(), va.end());
  for (T& x : out) x *= f;
  const int ia = a.id();
  return t.push(a.shape(), std::move(out), a.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_mut(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  Tape<T>& t = tape_of(a, "gelu");
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = static_cast<T>(0.044715);
  auto va = a.value();
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) {
    const T x = va[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
  }
  const int ia = a.id();
  return t.push(a.shape(), std::move(out), a.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto x = tp.value(ia);
    auto ga = tp.grad_mut(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T xi = x[i];
      const T th = std::tanh(c * (xi + k * xi * xi * xi));
      const T d = T(0.5) * (T(1) + th) + T(0.5) * xi * (T(1) - th * th) * c * (T(1) + T(3) * k * xi * xi);
      ga[i] += g[i] * d;
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  Tape<T>& t = same_tape(x, gamma, "layer_norm");
  same_tape(x, beta, "layer_norm");
  const int d = x.cols();
  if (static_cast<int>(gamma.size()) != d || static_cast<int>(beta.size()) != d)
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match width of " + shape_str(x.shape()));
  constexpr T eps = static_cast<T>(1e-5);
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  auto vx = x.value(), vg = gamma.value(), vb = beta.value();
  std::vector<T> out(x.size());
  // normalized activations and inverse std, kept for backward
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = vx.data() + r * d;
    T mu = 0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * vg[j] + vb[j];
    }
  }
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.push(x.shape(), std::move(out), rg,
                [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& tp, int self) {
                  auto g = tp.grad(self);
                  auto vg2 = tp.value(ig);
                  if (tp.requires_grad(ig)) {
                    auto gg = tp.grad_mut(ig);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (int j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
                  }
                  if (tp.requires_grad(ib)) {
                    auto gb = tp.grad_mut(ib);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (int j = 0; j < d; ++j) gb[j] += g[r * d + j];
                  }
                  if (tp.requires_grad(ix)) {
                    auto gx = tp.grad_mut(ix);
                    std::vector<T> dh(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T mean_dh = 0, mean_dh_h = 0;
                      for (int j = 0; j < d; ++j) {
                        dh[j] = g[r * d + j] * vg2[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * xhat[r * d + j];
                      }
                      mean_dh /= static_cast<T>(d);
                      mean_dh_h /= static_cast<T>(d);
                      for (int j = 0; j < d; ++j)
                        gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                  }
                });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
  Tape<T>& t = tape_of(table, "embedding");
  require_2d(table.shape(), "embedding");
  const int v = table.rows(), d = table.cols();
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  std::vector<int> idv(ids.begin(), ids.end());
  for (int id : idv) {
    if (id < 0 || id >= v)
      throw IndexError("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(v) + " rows");
  }
  auto tv = table.value();
  std::vector<T> out(idv.size() * d);
  for (std::size_t i = 0; i < idv.size(); ++i)
    std::copy_n(tv.data() + static_cast<std::size_t>(idv[i]) * d, d, out.data() + i * d);
  const int it = table.id();
  const int n = static_cast<int>(idv.size());
  return t.push({n, d}, std::move(out), table.requires_grad(),
                [=, idv = std::move(idv)](Tape<T>& tp, int self) {
                  auto g = tp.grad(self);
                  auto gt = tp.grad_mut(it);
                  for (std::size_t i = 0; i < idv.size(); ++i) {
                    T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                    for (int j = 0; j < d; ++j) dst[j] += g[i * d + j];
                  }
                });
}

namespace {
inline bool mask_allows(int i, int j, int prefix) { return j <= i || (i < prefix && j < prefix); }
}  // namespace

template <typename T>
Var<T> causal_mask(const Var<T>& scores, int prefix) {
  Tape<T>& t = tape_of(scores, "causal_mask");
  require_2d(scores.shape(), "causal_mask");
  const int n = scores.rows();
  if (scores.cols() != n) throw DimensionError("causal_mask: scores must be square, got " + shape_str(scores.shape()));
  auto v = scores.value();
  std::vector<T> out(v.begin(), v.end());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (!mask_allows(i, j, prefix)) out[static_cast<std::size_t>(i) * n + j] = static_cast<T>(kMaskValue);
  const int is = scores.id();
  return t.push(scores.shape(), std::move(out), scores.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto gs = tp.grad_mut(is);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (mask_allows(i, j, prefix)) gs[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(i) * n + j];
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  Tape<T>& t = tape_of(x, "softmax_rows");
  const int n = x.cols();
  const std::size_t rows = x.size() / static_cast<std::size_t>(n);
  auto v = x.value();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = v.data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z = 0;
    for (int j = 0; j < n; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (int j = 0; j < n; ++j) o[j] /= z;
  }
  const int ix = x.id();
  return t.push(x.shape(), std::move(out), x.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto y = tp.value(self);
    auto gx = tp.grad_mut(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (int j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (int j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tape<T>& t = tape_of(a, "reshape");
  check_shape(shape);
  if (numel(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto v = a.value();
  const int ia = a.id();
  return t.push(std::move(shape), std::vector<T>(v.begin(), v.end()), a.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_mut(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  Tape<T>& t = tape_of(a, "transpose");
  require_2d(a.shape(), "transpose");
  const int r = a.rows(), c = a.cols();
  const int ia = a.id();
  return t.push({c, r}, transposed(r, c, a.value().data()), a.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_mut(ia);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(j) * r + i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tape<T>& t = tape_of(a, "sum");
  T s = 0;
  for (T x : a.value()) s += x;
  const int ia = a.id();
  return t.push({1}, {s}, a.requires_grad(), [=](Tape<T>& tp, int self) {
    const T g = tp.grad(self)[0];
    for (T& x : tp.grad_mut(ia)) x += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  Tape<T>& t = tape_of(a, "mean_rows");
  require_2d(a.shape(), "mean_rows");
  const int r = a.rows(), c = a.cols();
  auto v = a.value();
  std::vector<T> out(c, T(0));
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[j] += v[static_cast<std::size_t>(i) * c + j];
  const T inv = T(1) / static_cast<T>(r);
  for (T& x : out) x *= inv;
  const int ia = a.id();
  return t.push({1, c}, std::move(out), a.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_mut(ia);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga[static_cast<std::size_t>(i) * c + j] += g[j] * inv;
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, int row0, int nrows, int col0, int ncols) {
  Tape<T>& t = tape_of(a, "slice");
  require_2d(a.shape(), "slice");
  const int r = a.rows(), c = a.cols();
  if (row0 < 0 || col0 < 0 || nrows <= 0 || ncols <= 0 || row0 + nrows > r || col0 + ncols > c)
    throw DimensionError("slice: window out of range for " + shape_str(a.shape()));
  auto v = a.value();
  std::vector<T> out(static_cast<std::size_t>(nrows) * ncols);
  for (int i = 0; i < nrows; ++i)
    std::copy_n(v.data() + static_cast<std::size_t>(row0 + i) * c + col0, ncols, out.data() + static_cast<std::size_t>(i) * ncols);
  const int ia = a.id();
  return t.push({nrows, ncols}, std::move(out), a.requires_grad(), [=](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_mut(ia);
    for (int i = 0; i < nrows; ++i)
      for (int j = 0; j < ncols; ++j)
        ga[static_cast<std::size_t>(row0 + i) * c + col0 + j] += g[static_cast<std::size_t>(i) * ncols + j];
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Tape<T>& t = tape_of(parts[0], "concat_rows");
  const int c = parts[0].cols();
  int total = 0;
  bool rg = false;
  std::vector<int> ids;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat_rows");
    require_2d(p.shape(), "concat_rows");
    if (p.cols() != c) throw DimensionError("concat_rows: width mismatch " + shape_str(p.shape()));
    total += p.rows();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
  }
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(total) * c);
  for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  return t.push({total, c}, std::move(out), rg, [ids = std::move(ids)](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    std::size_t off = 0;
    for (int id : ids) {
      const std::size_t n = tp.node(id).size;
      if (tp.requires_grad(id)) {
        auto gp = tp.grad_mut(id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Tape<T>& t = tape_of(parts[0], "concat_cols");
  const int r = parts[0].rows();
  int total = 0;
  bool rg = false;
  std::vector<int> ids, widths;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat_cols");
    require_2d(p.shape(), "concat_cols");
    if (p.rows() != r) throw DimensionError("concat_cols: height mismatch " + shape_str(p.shape()));
    total += p.cols();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  std::vector<T> out(static_cast<std::size_t>(r) * total);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    auto v = p.value();
    for (int i = 0; i < r; ++i)
      std::copy_n(v.data() + static_cast<std::size_t>(i) * w, w, out.data() + static_cast<std::size_t>(i) * total + off);
    off += w;
  }
  return t.push({r, total}, std::move(out), rg,
                [=, ids = std::move(ids), widths = std::move(widths)](Tape<T>& tp, int self) {
                  auto g = tp.grad(self);
                  int o = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    const int w = widths[k];
                    if (tp.requires_grad(ids[k])) {
                      auto gp = tp.grad_mut(ids[k]);
                      for (int i = 0; i < r; ++i)
                        for (int j = 0; j < w; ++j)
                          gp[static_cast<std::size_t>(i) * w + j] += g[static_cast<std::size_t>(i) * total + o + j];
                    }
                    o += w;
                  }
                });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const int> rows) {
  Tape<T>& t = tape_of(a, "gather_rows");
  require_2d(a.shape(), "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  const int r = a.rows(), c = a.cols();
  std::vector<int> idx(rows.begin(), rows.end());
  for (int i : idx)
    if (i < 0 || i >= r) throw IndexError("gather_rows: row " + std::to_string(i) + " outside " + shape_str(a.shape()));
  auto v = a.value();
  std::vector<T> out(idx.size() * c);
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(v.data() + static_cast<std::size_t>(idx[k]) * c, c, out.data() + k * c);
  const int ia = a.id();
  const int n = static_cast<int>(idx.size());
  return t.push({n, c}, std::move(out), a.requires_grad(),
                [=, idx = std::move(idx)](Tape<T>& tp, int self) {
                  auto g = tp.grad(self);
                  auto ga = tp.grad_mut(ia);
                  for (std::size_t k = 0; k < idx.size(); ++k)
                    for (int j = 0; j < c; ++j) ga[static_cast<std::size_t>(idx[k]) * c + j] += g[k * c + j];
                });
}

template <typename T>
Var<T> normalize_rows(const Var<T>& a) {
  Tape<T>& t = tape_of(a, "normalize_rows");
  const int c = a.cols();
  const std::size_t rows = a.size() / static_cast<std::size_t>(c);
  constexpr T eps = static_cast<T>(1e-12);
  auto v = a.value();
  std::vector<T> out(a.size());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = eps;
    for (int j = 0; j < c; ++j) s += v[r * c + j] * v[r * c + j];
    norms[r] = std::sqrt(s);
    for (int j = 0; j < c; ++j) out[r * c + j] = v[r * c + j] / norms[r];
  }
  const int ia = a.id();
  return t.push(a.shape(), std::move(out), a.requires_grad(), [=, norms = std::move(norms)](Tape<T>& tp, int self) {
    auto g = tp.grad(self);
    auto y = tp.value(self);
    auto ga = tp.grad_mut(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (int j = 0; j < c; ++j) dot += y[r * c + j] * g[r * c + j];
      for (int j = 0; j < c; ++j) ga[r * c + j] += (g[r * c + j] - y[r * c + j] * dot) / norms[r];
    }
  });
}

template <typename T>
Var<T> pick(const Var<T>& a, int row, int col) {
  Tape<T>& t = tape_of(a, "pick");
  require_2d(a.shape(), "pick");
  if (row < 0 || row >= a.rows() || col < 0 || col >= a.cols())
    throw IndexError("pick: (" + std::to_string(row) + "," + std::to_string(col) + ") outside " + shape_str(a.shape()));
  const std::size_t k = static_cast<std::size_t>(row) * a.cols() + col;
  const int ia = a.id();
  return t.push({1}, {a.value()[k]}, a.requires_grad(),
                [=](Tape<T>& tp, int self) { tp.grad_mut(ia)[k] += tp.grad(self)[0]; });
}

namespace {

template <typename T>
std::vector<T> row_log_softmax(std::span<const T> v, std::size_t rows, int n) {
  std::vector<T> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = v.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z = 0;
    for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const T lz = mx + std::log(z);
    for (int j = 0; j < n; ++j) out[r * n + j] = row[j] - lz;
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets) {
  Tape<T>& t = tape_of(logits, "cross_entropy");
  require_2d(logits.shape(), "cross_entropy");
  const int rows = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != rows)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(logits.shape()));
  std::vector<int> tg(targets.begin(), targets.end());
  for (int k : tg)
    if (k < 0 || k >= v) throw IndexError("cross_entropy: target " + std::to_string(k) + " outside " + std::to_string(v) + " classes");
  auto lsm = row_log_softmax(logits.value(), rows, v);
  T loss = 0;
  for (int r = 0; r < rows; ++r) loss -= lsm[static_cast<std::size_t>(r) * v + tg[r]];
  loss /= static_cast<T>(rows);
  const int il = logits.id();
  return t.push({1}, {loss}, logits.requires_grad(),
                [=, tg = std::move(tg), lsm = std::move(lsm)](Tape<T>& tp, int self) {
                  const T g = tp.grad(self)[0] / static_cast<T>(rows);
                  auto gl = tp.grad_mut(il);
                  for (int r = 0; r < rows; ++r) {
                    for (int j = 0; j < v; ++j) {
                      const std::size_t k = static_cast<std::size_t>(r) * v + j;
                      gl[k] += g * (std::exp(lsm[k]) - (j == tg[r] ? T(1) : T(0)));
                    }
                  }
                });
}

template <typename T>
Var<T> soft_cross_entropy(const Var<T>& logits, std::span<const T> target_probs) {
  Tape<T>& t = tape_of(logits, "soft_cross_entropy");
  require_2d(logits.shape(), "soft_cross_entropy");
  if (target_probs.size() != logits.size())
    throw DimensionError("soft_cross_entropy: target size does not match " + shape_str(logits.shape()));
  const int rows = logits.rows(), v = logits.cols();
  std::vector<T> p(target_probs.begin(), target_probs.end());
  auto lsm = row_log_softmax(logits.value(), rows, v);
  T loss = 0;
  for (std::size_t k = 0; k < lsm.size(); ++k) loss -= p[k] * lsm[k];
  loss /= static_cast<T>(rows);
  const int il = logits.id();
  return t.push({1}, {loss}, logits.requires_grad(),
                [=, p = std::move(p), lsm = std::move(lsm)](Tape<T>& tp, int self) {
                  const T g = tp.grad(self)[0] / static_cast<T>(rows);
                  auto gl = tp.grad_mut(il);
                  for (int r = 0; r < rows; ++r) {
                    T mass = 0;
                    for (int j = 0; j < v; ++j) mass += p[static_cast<std::size_t>(r) * v + j];
                    for (int j = 0; j < v; ++j) {
                      const std::size_t k = static_cast<std::size_t>(r) * v + j;
                      gl[k] += g * (mass * std::exp(lsm[k]) - p[k]);
                    }
                  }
                });
}

#define MMFM_INSTANTIATE_OPS(T)                                                          \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                  \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                               \
  template Var<T> add(const Var<T>&, const Var<T>&);                                     \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                     \
  template Var<T> scale(const Var<T>&, double);                                          \
  template Var<T> gelu(const Var<T>&);                                                   \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&);               \
  template Var<T> embedding(const Var<T>&, std::span<const int>);                        \
  template Var<T> causal_mask(const Var<T>&, int);                                       \
  template Var<T> softmax_rows(const Var<T>&);                                           \
  template Var<T> reshape(const Var<T>&, Shape);                                         \
  template Var<T> transpose(const Var<T>&);                                              \
  template Var<T> sum(const Var<T>&);                                                    \
  template Var<T> mean(const Var<T>&);                                                   \
  template Var<T> mean_rows(const Var<T>&);                                              \
  template Var<T> slice(const Var<T>&, int, int, int, int);                              \
  template Var<T> concat_rows(std::span<const Var<T>>);                                  \
  template Var<T> concat_cols(std::span<const Var<T>>);                                  \
  template Var<T> gather_rows(const Var<T>&, std::span<const int>);                      \
  template Var<T> normalize_rows(const Var<T>&);                                         \
  template Var<T> pick(const Var<T>&, int, int);                                         \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>);                    \
  template Var<T> soft_cross_entropy(const Var<T>&, std::span<const T>);

MMFM_INSTANTIATE_OPS(float)
MMFM_INSTANTIATE_OPS(double)

}  // namespace mmfm
