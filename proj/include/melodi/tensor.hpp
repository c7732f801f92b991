#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "melodi/real.hpp"

namespace melodi {

using Shape = std::vector<std::size_t>;

// Cache-line aligned allocator. Vectorized loops split their scalar head and
// tail by address, so a fixed base alignment keeps results a function of the
// values and shapes alone.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Storage = std::vector<real, AlignedAllocator<real>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Raised for any extent disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a softmax row has no unmasked entry.
class DegenerateRowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct Node {
  Shape shape;
  std::shared_ptr<Storage> data;
  Storage grad;  // empty until something accumulates into it
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data->size(), real(0));
  }
};

// Dense row-major array with an optional reverse-mode graph handle. Copies
// are shallow: two Tensor values may refer to the same node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
  static Tensor scalar(real value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data->size(); }
  // Rows of a rank-2 tensor; 0 for an undefined tensor.
  std::size_t rows() const { return defined() ? node_->shape.at(0) : 0; }

  std::span<const real> data() const { return *node_->data; }
  std::span<real> mutable_data() { return *node_->data; }
  real item() const;
  real at(std::size_t i, std::size_t j) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Gradient view; zeros when nothing has been accumulated yet.
  std::vector<real> grad() const;
  void zero_grad();

  // Leaf sharing this tensor's storage, cut from the graph.
  Tensor detach() const;
  // Independent copy of the values; never shares storage.
  Tensor clone() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

// Records backward closures in creation order, which is a topological order
// of the graph. backward() replays them in reverse and then clears the tape.
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  void backward(const Tensor& scalar_loss);
  void clear() { steps_.clear(); }
  std::size_t size() const { return steps_.size(); }

 private:
  std::vector<std::function<void()>> steps_;
};

// Installs a tape as the recording target for the current thread. Ops run
// outside any scope build no graph.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Runs the active tape backwards from a one-element tensor.
void backward(const Tensor& scalar_loss);

// Boolean attention mask over the last two axes of a score tensor.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, bool value = false)
      : rows(r), cols(c), allowed(r * c, value ? 1 : 0) {}
  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool value) { allowed[i * cols + j] = value ? 1 : 0; }
};

// ---- differentiable operations -------------------------------------------

// a[..., m, k] x b[k, n] (shared right operand) or b[..., k, n] with leading
// extents equal to a's.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real factor);
// x[..., n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// [n, heads*hd] <-> [heads, n, hd]
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

// Row concatenation of rank-2 tensors; undefined or zero-row parts are skipped.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);

// Softmax over the last axis. Masked entries come out exactly 0.
Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps = real(1e-5));
Tensor gelu(const Tensor& x);
// Inverted dropout with a mask drawn from `key`; identity when rate == 0.
Tensor dropout(const Tensor& x, real rate, std::uint64_t key);

// table[V, d] indexed by row ids -> [n, d]
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids);
// table[h, B] indexed by an [r, c] bucket grid -> [h, r, c]
Tensor gather_buckets(const Tensor& table, std::span<const std::int32_t> buckets,
                      std::size_t rows, std::size_t cols);

// Per head h over column block h: sigmoid(g_h)*cross + (1-sigmoid(g_h))*self.
Tensor gated_merge(const Tensor& self_heads, const Tensor& cross_heads, const Tensor& gate_logits);

// Sum over unmasked rows of -log softmax(logits)[target], divided by normalizer.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask, real normalizer);

// ---- gradient checking ---------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t samples_per_tensor = 0;
  std::uint64_t seed = 0;
};

// Max over sampled coordinates of |analytic - central| / max(1e-8, |analytic| + |central|).
double grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                  const GradCheckOptions& options = {});

}  // namespace melodi
