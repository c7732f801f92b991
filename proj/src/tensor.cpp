#include "melodi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Core>

namespace melodi {

namespace {

thread_local Tape* g_tape = nullptr;

using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const Mat>;
using Map = Eigen::Map<Mat>;

using NodePtr = std::shared_ptr<Node>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make(Shape shape, Storage values, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::make_shared<Storage>(std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

void record(std::function<void()> step) { g_tape->record(std::move(step)); }

// Accumulation target for an input, or nullptr when it takes no gradient.
real* grad_target(const NodePtr& node) {
  if (!node->requires_grad) return nullptr;
  node->ensure_grad();
  return node->grad.data();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

std::size_t leading(const Shape& s, std::size_t trailing_axes) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing_axes < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = numel(shape);
  return make(std::move(shape), Storage(n, real(0)), requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return make(std::move(shape), Storage(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  return make(std::move(shape), Storage(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::scalar(real value) { return make({1}, {value}, false); }

real Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return (*node_->data)[0];
}

real Tensor::at(std::size_t i, std::size_t j) const {
  return (*node_->data)[i * node_->shape.back() + j];
}

std::vector<real> Tensor::grad() const {
  if (!has_grad()) return std::vector<real>(size(), real(0));
  return {node_->grad.begin(), node_->grad.end()};
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), real(0));
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  return make(node_->shape, *node_->data, false);
}

// ---- tape -----------------------------------------------------------------

void Tape::backward(const Tensor& scalar_loss) {
  if (!scalar_loss.defined() || scalar_loss.size() != 1) {
    steps_.clear();
    throw ShapeError("backward needs a one-element loss, got " +
                     (scalar_loss.defined() ? shape_str(scalar_loss.shape()) : std::string("null")));
  }
  if (scalar_loss.requires_grad()) {
    scalar_loss.node()->ensure_grad();
    scalar_loss.node()->grad[0] += real(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }
  steps_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = previous_; }

Tape* active_tape() { return g_tape; }

void backward(const Tensor& scalar_loss) {
  if (g_tape == nullptr) throw std::logic_error("backward() without an active tape");
  g_tape->backward(scalar_loss);
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 2 && b.rank() >= 2,
          "matmul: operands must be at least rank 2, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  const bool shared_rhs = b.rank() == 2;
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  bool ok = k == kb;
  if (!shared_rhs) {
    ok = ok && a.rank() == b.rank() &&
         std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  }
  if (!ok) {
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t batch = leading(a.shape(), 2);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Storage out(batch * m * n);
  const real* pa = a.data().data();
  const real* pb = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    Map c(out.data() + i * m * n, m, n);
    c.noalias() = MapC(pa + i * m * k, m, k) * MapC(pb + (shared_rhs ? 0 : i * k * n), k, n);
  }
  const bool track = tracking({&a, &b});
  Tensor result = make(std::move(out_shape), std::move(out), track);
  if (track) {
    NodePtr na = a.node(), nb = b.node(), nc = result.node();
    record([na, nb, nc, batch, m, k, n, shared_rhs] {
      if (nc->grad.empty()) return;
      const real* dc = nc->grad.data();
      if (real* da = grad_target(na)) {
        const real* pb = nb->data->data();
        for (std::size_t i = 0; i < batch; ++i) {
          Map(da + i * m * k, m, k).noalias() +=
              MapC(dc + i * m * n, m, n) * MapC(pb + (shared_rhs ? 0 : i * k * n), k, n).transpose();
        }
      }
      if (real* db = grad_target(nb)) {
        const real* pa = na->data->data();
        for (std::size_t i = 0; i < batch; ++i) {
          Map(db + (shared_rhs ? 0 : i * k * n), k, n).noalias() +=
              MapC(pa + i * m * k, m, k).transpose() * MapC(dc + i * m * n, m, n);
        }
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require(a.rank() >= 2, "transpose: rank >= 2 required, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  const std::size_t batch = leading(a.shape(), 2);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  Storage out(a.size());
  const real* src = a.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    Map(out.data() + b * r * c, c, r) = MapC(src + b * r * c, r, c).transpose();
  }
  const bool track = tracking({&a});
  Tensor result = make(std::move(shape), std::move(out), track);
  if (track) {
    NodePtr na = a.node(), no = result.node();
    record([na, no, batch, r, c] {
      if (no->grad.empty()) return;
      real* da = grad_target(na);
      for (std::size_t b = 0; b < batch; ++b) {
        Map(da + b * r * c, r, c) += MapC(no->grad.data() + b * r * c, c, r).transpose();
      }
    });
  }
  return result;
}

// ---- elementwise ----------------------------------------------------------

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class Fwd, class Bwd>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Bwd bwd) {
  require_same(a, b, op);
  Storage out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[i], db[i]);
  const bool track = tracking({&a, &b});
  Tensor result = make(a.shape(), std::move(out), track);
  if (track) {
    NodePtr na = a.node(), nb = b.node(), no = result.node();
    record([na, nb, no, bwd] {
      if (no->grad.empty()) return;
      real* ga = grad_target(na);
      real* gb = grad_target(nb);
      const auto& xa = *na->data;
      const auto& xb = *nb->data;
      for (std::size_t i = 0; i < no->grad.size(); ++i) bwd(no->grad[i], xa[i], xb[i], ga, gb, i);
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](real x, real y) { return x + y; },
      [](real g, real, real, real* ga, real* gb, std::size_t i) {
        if (ga) ga[i] += g;
        if (gb) gb[i] += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](real x, real y) { return x - y; },
      [](real g, real, real, real* ga, real* gb, std::size_t i) {
        if (ga) ga[i] += g;
        if (gb) gb[i] -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](real x, real y) { return x * y; },
      [](real g, real x, real y, real* ga, real* gb, std::size_t i) {
        if (ga) ga[i] += g * y;
        if (gb) gb[i] += g * x;
      });
}

Tensor scale(const Tensor& a, real factor) {
  Storage out(a.data().begin(), a.data().end());
  for (real& v : out) v *= factor;
  const bool track = tracking({&a});
  Tensor result = make(a.shape(), std::move(out), track);
  if (track) {
    NodePtr na = a.node(), no = result.node();
    record([na, no, factor] {
      if (no->grad.empty()) return;
      real* ga = grad_target(na);
      for (std::size_t i = 0; i < no->grad.size(); ++i) ga[i] += factor * no->grad[i];
    });
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.size() / n;
  Storage out(x.size());
  Map(out.data(), rows, n) = MapC(x.data().data(), rows, n).rowwise() + MapC(bias.data().data(), 1, n).row(0);
  const bool track = tracking({&x, &bias});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    NodePtr nx = x.node(), nb = bias.node(), no = result.node();
    record([nx, nb, no, rows, n] {
      if (no->grad.empty()) return;
      const MapC g(no->grad.data(), rows, n);
      if (real* gx = grad_target(nx)) Map(gx, rows, n) += g;
      if (real* gb = grad_target(nb)) Map(gb, 1, n) += g.colwise().sum();
    });
  }
  return result;
}

Tensor sum(const Tensor& a) {
  real total = 0;
  for (real v : a.data()) total += v;
  const bool track = tracking({&a});
  Tensor result = make({1}, {total}, track);
  if (track) {
    NodePtr na = a.node(), no = result.node();
    record([na, no] {
      if (no->grad.empty()) return;
      real* ga = grad_target(na);
      const real g = no->grad[0];
      for (std::size_t i = 0; i < na->data->size(); ++i) ga[i] += g;
    });
  }
  return result;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), real(1) / static_cast<real>(a.size()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  const bool track = tracking({&a});
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = a.node()->data;
  node->requires_grad = track;
  Tensor result(node);
  if (track) {
    NodePtr na = a.node(), no = result.node();
    record([na, no] {
      if (no->grad.empty()) return;
      real* ga = grad_target(na);
      for (std::size_t i = 0; i < no->grad.size(); ++i) ga[i] += no->grad[i];
    });
  }
  return result;
}

// ---- layout ---------------------------------------------------------------

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require(x.rank() == 2 && heads > 0 && x.dim(1) % heads == 0,
          "split_heads: " + shape_str(x.shape()) + " into " + std::to_string(heads) + " heads");
  const std::size_t n = x.dim(0), d = x.dim(1), hd = d / heads;
  Storage out(x.size());
  const auto src = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t h = 0; h < heads; ++h)
      std::copy_n(src.data() + i * d + h * hd, hd, out.data() + (h * n + i) * hd);
  const bool track = tracking({&x});
  Tensor result = make({heads, n, hd}, std::move(out), track);
  if (track) {
    NodePtr nx = x.node(), no = result.node();
    record([nx, no, n, heads, hd, d] {
      if (no->grad.empty()) return;
      real* gx = grad_target(nx);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t c = 0; c < hd; ++c) gx[i * d + h * hd + c] += no->grad[(h * n + i) * hd + c];
    });
  }
  return result;
}

Tensor merge_heads(const Tensor& x) {
  require(x.rank() == 3, "merge_heads: rank 3 required, got " + shape_str(x.shape()));
  const std::size_t heads = x.dim(0), n = x.dim(1), hd = x.dim(2), d = heads * hd;
  Storage out(x.size());
  const auto src = x.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(src.data() + (h * n + i) * hd, hd, out.data() + i * d + h * hd);
  const bool track = tracking({&x});
  Tensor result = make({n, d}, std::move(out), track);
  if (track) {
    NodePtr nx = x.node(), no = result.node();
    record([nx, no, n, heads, hd, d] {
      if (no->grad.empty()) return;
      real* gx = grad_target(nx);
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < hd; ++c) gx[(h * n + i) * hd + c] += no->grad[i * d + h * hd + c];
    });
  }
  return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  std::size_t cols = 0, rows = 0;
  bool have_cols = false;
  std::vector<const Tensor*> used;
  for (const Tensor& p : parts) {
    if (!p.defined()) continue;
    require(p.rank() == 2, "concat_rows: rank 2 parts required, got " + shape_str(p.shape()));
    if (!have_cols) {
      cols = p.dim(1);
      have_cols = true;
    } else if (p.dim(1) != cols) {
      throw ShapeError("concat_rows: column mismatch " + std::to_string(cols) + " vs " +
                       shape_str(p.shape()));
    }
    if (p.dim(0) == 0) continue;
    rows += p.dim(0);
    used.push_back(&p);
  }
  require(have_cols, "concat_rows: no defined parts");
  if (used.size() == 1) return *used.front();
  Storage out;
  out.reserve(rows * cols);
  bool track = false;
  for (const Tensor* p : used) {
    out.insert(out.end(), p->data().begin(), p->data().end());
    track = track || tracking({p});
  }
  Tensor result = make({rows, cols}, std::move(out), track);
  if (track) {
    std::vector<NodePtr> nodes;
    for (const Tensor* p : used) nodes.push_back(p->node());
    NodePtr no = result.node();
    record([nodes, no] {
      if (no->grad.empty()) return;
      std::size_t offset = 0;
      for (const NodePtr& n : nodes) {
        const std::size_t count = n->data->size();
        if (real* g = grad_target(n)) {
          for (std::size_t i = 0; i < count; ++i) g[i] += no->grad[offset + i];
        }
        offset += count;
      }
    });
  }
  return result;
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require(x.rank() == 2 && start + count <= x.dim(0),
          "slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") of " + shape_str(x.shape()));
  const std::size_t cols = x.dim(1);
  Storage out(x.data().begin() + static_cast<std::ptrdiff_t>(start * cols),
                        x.data().begin() + static_cast<std::ptrdiff_t>((start + count) * cols));
  const bool track = tracking({&x});
  Tensor result = make({count, cols}, std::move(out), track);
  if (track) {
    NodePtr nx = x.node(), no = result.node();
    record([nx, no, start, cols] {
      if (no->grad.empty()) return;
      real* g = grad_target(nx) + start * cols;
      for (std::size_t i = 0; i < no->grad.size(); ++i) g[i] += no->grad[i];
    });
  }
  return result;
}

// ---- normalization & nonlinearities --------------------------------------

Tensor softmax_rows(const Tensor& x, const Mask* mask) {
  require(x.rank() >= 1, "softmax_rows: rank >= 1 required");
  const std::size_t n = x.shape().back();
  const std::size_t rows_per_block = x.rank() >= 2 ? x.dim(x.rank() - 2) : 1;
  if (mask != nullptr && (mask->rows != rows_per_block || mask->cols != n)) {
    throw ShapeError("softmax_rows: mask [" + std::to_string(mask->rows) + "x" +
                     std::to_string(mask->cols) + "] does not match scores " + shape_str(x.shape()));
  }
  const std::size_t total_rows = n == 0 ? 0 : x.size() / n;
  Storage out(x.size(), real(0));
  const auto src = x.data();
  using Row = Eigen::Array<real, 1, Eigen::Dynamic>;
  const auto len = static_cast<Eigen::Index>(n);
  for (std::size_t r = 0; r < total_rows; ++r) {
    const std::uint8_t* allowed = mask ? mask->allowed.data() + (r % rows_per_block) * n : nullptr;
    const real* in = src.data() + r * n;
    real* o = out.data() + r * n;
    real hi = -std::numeric_limits<real>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (allowed && !allowed[j]) continue;
      hi = std::max(hi, in[j]);
      any = true;
    }
    if (!any) throw DegenerateRowError("softmax_rows: row " + std::to_string(r) + " is fully masked");
    Eigen::Map<Row> row(o, len);
    row = (Eigen::Map<const Row>(in, len) - hi).exp();
    // Masked entries are exactly zero, never a rounded-down exponential.
    if (allowed) {
      for (std::size_t j = 0; j < n; ++j) {
        if (!allowed[j]) o[j] = real(0);
      }
    }
    row /= row.sum();
  }
  const bool track = tracking({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    NodePtr nx = x.node(), no = result.node();
    record([nx, no, n, total_rows] {
      if (no->grad.empty()) return;
      real* gx = grad_target(nx);
      const real* p = no->data->data();
      const real* g = no->grad.data();
      using Row = Eigen::Array<real, 1, Eigen::Dynamic>;
      const auto len = static_cast<Eigen::Index>(n);
      for (std::size_t r = 0; r < total_rows; ++r) {
        const Eigen::Map<const Row> pr(p + r * n, len), gr(g + r * n, len);
        Eigen::Map<Row>(gx + r * n, len) += pr * (gr - (pr * gr).sum());
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  const std::size_t n = x.shape().back();
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layer_norm: " + shape_str(x.shape()) + " with gain " +
                     shape_str(gain.shape()) + " and bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  Storage out(x.size());
  Storage xhat(x.size());
  Storage inv_std(rows);
  const auto src = x.data();
  const auto g = gain.data();
  const auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* in = src.data() + r * n;
    real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<real>(n);
    real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<real>(n);
    inv_std[r] = real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * g[j] + b[j];
    }
  }
  const bool track = tracking({&x, &gain, &bias});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    NodePtr nx = x.node(), ng = gain.node(), nb = bias.node(), no = result.node();
    record([nx, ng, nb, no, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      if (no->grad.empty()) return;
      real* gx = grad_target(nx);
      real* gg = grad_target(ng);
      real* gb = grad_target(nb);
      const real* gain_v = ng->data->data();
      const real* dy = no->grad.data();
      Storage dxhat(n);
      for (std::size_t r = 0; r < rows; ++r) {
        real mean_d = 0, mean_dx = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const real d = dy[r * n + j];
          if (gg) gg[j] += d * xhat[r * n + j];
          if (gb) gb[j] += d;
          dxhat[j] = d * gain_v[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[r * n + j];
        }
        if (!gx) continue;
        mean_d /= static_cast<real>(n);
        mean_dx /= static_cast<real>(n);
        for (std::size_t j = 0; j < n; ++j) {
          gx[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - xhat[r * n + j] * mean_dx);
        }
      }
    });
  }
  return result;
}

Tensor gelu(const Tensor& x) {
  const real c = real(0.7978845608028654);  // sqrt(2/pi)
  const real k = real(0.044715);
  using Arr = Eigen::Array<real, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(x.size());
  const Eigen::Map<const Arr> v(x.data().data(), n);
  Arr t = (c * (v + k * v.cube())).tanh();
  Storage out(x.size());
  Eigen::Map<Arr>(out.data(), n) = real(0.5) * v * (real(1) + t);
  const bool track = tracking({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    NodePtr nx = x.node(), no = result.node();
    record([nx, no, n, c, k, t = std::move(t)] {
      if (no->grad.empty()) return;
      const Eigen::Map<const Arr> v(nx->data->data(), n);
      const Eigen::Map<const Arr> g(no->grad.data(), n);
      const Arr dt = (real(1) - t.square()) * c * (real(1) + real(3) * k * v.square());
      Eigen::Map<Arr>(grad_target(nx), n) += g * (real(0.5) * (real(1) + t) + real(0.5) * v * dt);
    });
  }
  return result;
}

Tensor dropout(const Tensor& x, real rate, std::uint64_t key) {
  if (rate <= real(0)) return x;
  if (rate >= real(1)) throw std::invalid_argument("dropout rate must be < 1");
  std::mt19937_64 gen(key);
  const real keep_scale = real(1) / (real(1) - rate);
  const auto threshold = static_cast<std::uint64_t>(static_cast<double>(rate) * 18446744073709551616.0);
  Storage factor(x.size());
  for (real& f : factor) f = gen() < threshold ? real(0) : keep_scale;
  Storage out(x.size());
  const auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] * factor[i];
  const bool track = tracking({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    NodePtr nx = x.node(), no = result.node();
    record([nx, no, factor = std::move(factor)] {
      if (no->grad.empty()) return;
      real* gx = grad_target(nx);
      for (std::size_t i = 0; i < factor.size(); ++i) gx[i] += no->grad[i] * factor[i];
    });
  }
  return result;
}

// ---- indexing -------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids) {
  require(table.rank() == 2, "gather_rows: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  Storage out(ids.size() * d);
  const auto src = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside [0, " +
                              std::to_string(vocab) + ")");
    }
    std::copy_n(src.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const bool track = tracking({&table});
  Tensor result = make({ids.size(), d}, std::move(out), track);
  if (track) {
    NodePtr nt = table.node(), no = result.node();
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    record([nt, no, d, idx = std::move(idx)] {
      if (no->grad.empty()) return;
      real* gt = grad_target(nt);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < d; ++c) gt[static_cast<std::size_t>(idx[i]) * d + c] += no->grad[i * d + c];
    });
  }
  return result;
}

Tensor gather_buckets(const Tensor& table, std::span<const std::int32_t> buckets,
                      std::size_t rows, std::size_t cols) {
  require(table.rank() == 2 && buckets.size() == rows * cols,
          "gather_buckets: table " + shape_str(table.shape()) + " with " +
              std::to_string(buckets.size()) + " buckets for a " + std::to_string(rows) + "x" +
              std::to_string(cols) + " grid");
  const std::size_t heads = table.dim(0), width = table.dim(1);
  Storage out(heads * rows * cols);
  const auto src = table.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < rows * cols; ++i) out[h * rows * cols + i] = src[h * width + static_cast<std::size_t>(buckets[i])];
  const bool track = tracking({&table});
  Tensor result = make({heads, rows, cols}, std::move(out), track);
  if (track) {
    NodePtr nt = table.node(), no = result.node();
    std::vector<std::int32_t> idx(buckets.begin(), buckets.end());
    record([nt, no, heads, width, idx = std::move(idx)] {
      if (no->grad.empty()) return;
      real* gt = grad_target(nt);
      const std::size_t cells = idx.size();
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < cells; ++i) gt[h * width + static_cast<std::size_t>(idx[i])] += no->grad[h * cells + i];
    });
  }
  return result;
}

// ---- attention gate -------------------------------------------------------

Tensor gated_merge(const Tensor& self_heads, const Tensor& cross_heads, const Tensor& gate_logits) {
  require_same(self_heads, cross_heads, "gated_merge");
  require(self_heads.rank() == 2 && gate_logits.rank() == 1 && gate_logits.dim(0) > 0 &&
              self_heads.dim(1) % gate_logits.dim(0) == 0,
          "gated_merge: " + shape_str(self_heads.shape()) + " with gates " +
              shape_str(gate_logits.shape()));
  const std::size_t n = self_heads.dim(0), d = self_heads.dim(1);
  const std::size_t heads = gate_logits.dim(0), hd = d / heads;
  Storage alpha(heads);
  for (std::size_t h = 0; h < heads; ++h) alpha[h] = real(1) / (real(1) + std::exp(-gate_logits.data()[h]));
  Storage out(n * d);
  const auto s = self_heads.data(), c = cross_heads.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const real a = alpha[j / hd];
      out[i * d + j] = a * c[i * d + j] + (real(1) - a) * s[i * d + j];
    }
  const bool track = tracking({&self_heads, &cross_heads, &gate_logits});
  Tensor result = make({n, d}, std::move(out), track);
  if (track) {
    NodePtr ns = self_heads.node(), nc = cross_heads.node(), ng = gate_logits.node(), no = result.node();
    record([ns, nc, ng, no, n, d, hd, alpha = std::move(alpha)] {
      if (no->grad.empty()) return;
      real* gs = grad_target(ns);
      real* gc = grad_target(nc);
      real* gg = grad_target(ng);
      const real* sv = ns->data->data();
      const real* cv = nc->data->data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          const real a = alpha[j / hd];
          const real g = no->grad[i * d + j];
          if (gs) gs[i * d + j] += (real(1) - a) * g;
          if (gc) gc[i * d + j] += a * g;
          if (gg) gg[j / hd] += g * (cv[i * d + j] - sv[i * d + j]) * a * (real(1) - a);
        }
    });
  }
  return result;
}

// ---- loss -----------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask, real normalizer) {
  require(logits.rank() == 2 && targets.size() == logits.dim(0) && mask.size() == logits.dim(0),
          "cross_entropy: logits " + shape_str(logits.shape()) + " with " +
              std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
              " mask entries");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  const auto src = logits.data();
  Storage probs(n * vocab, real(0));
  real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) + " outside vocab");
    }
    const real* row = src.data() + i * vocab;
    const real hi = *std::max_element(row, row + vocab);
    real z = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[i * vocab + j] = std::exp(row[j] - hi);
      z += probs[i * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] /= z;
    total += std::log(z) + hi - row[static_cast<std::size_t>(targets[i])];
  }
  const bool track = tracking({&logits});
  Tensor result = make({1}, {total / normalizer}, track);
  if (track) {
    NodePtr nl = logits.node(), no = result.node();
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    record([nl, no, n, vocab, normalizer, probs = std::move(probs), tgt = std::move(tgt), m = std::move(m)] {
      if (no->grad.empty()) return;
      real* gl = grad_target(nl);
      const real g = no->grad[0] / normalizer;
      for (std::size_t i = 0; i < n; ++i) {
        if (!m[i]) continue;
        for (std::size_t j = 0; j < vocab; ++j) gl[i * vocab + j] += g * probs[i * vocab + j];
        gl[i * vocab + static_cast<std::size_t>(tgt[i])] -= g;
      }
    });
  }
  return result;
}

// ---- gradient check -------------------------------------------------------

double grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                  const GradCheckOptions& options) {
  for (Tensor& p : params) p.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss_fn());
  }
  std::mt19937_64 gen(options.seed);
  double worst = 0;
  for (Tensor& p : params) {
    const std::vector<real> analytic = p.grad();
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.samples_per_tensor != 0 && options.samples_per_tensor < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), gen);
      coords.resize(options.samples_per_tensor);
    }
    auto values = p.mutable_data();
    for (std::size_t i : coords) {
      const real original = values[i];
      values[i] = original + static_cast<real>(options.eps);
      const double up = loss_fn().item();
      values[i] = original - static_cast<real>(options.eps);
      const double down = loss_fn().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace melodi
