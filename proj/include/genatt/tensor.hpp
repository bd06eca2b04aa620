#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "genatt/rng.hpp"

namespace genatt {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Thread-local switch: when disabled, ops skip graph construction entirely
// (evaluation mode). Scoped via NoGradGuard.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

struct Node;

// Dense row-major double tensor. A Tensor is a cheap handle: copies share
// the underlying storage, gradient accumulator, and graph node. Values are
// treated as immutable once the tensor has been consumed by an op; only
// leaf parameters are mutated in place, between optimizer steps.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;  // allocated iff requires_grad
  std::shared_ptr<Node> node;                 // set on op outputs
  bool requires_grad = false;

  Tensor() = default;

  std::size_t numel() const { return data ? data->size() : 0; }
  bool defined() const { return static_cast<bool>(data); }
  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double* gptr() { return grad->data(); }
  const double* gptr() const { return grad->data(); }

  double value() const;  // scalar tensors only

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double v);
  // i.i.d. uniform in [lo, hi) drawn from the stream.
  static Tensor uniform(Shape shape, double lo, double hi, RngStream& rng,
                        bool requires_grad = false);
  // i.i.d. standard normal draws.
  static Tensor randn(Shape shape, RngStream& rng, bool requires_grad = false);

  Tensor detach() const;   // same storage, no grad, no node
  Tensor clone() const;    // deep copy of values, leaf
  void zero_grad();
};

struct Node {
  std::vector<Tensor> parents;
  std::function<void()> backward;
};

// Boolean row mask for attention matrices: allowed(i, j) == true means the
// entry participates in the row softmax; false entries come out exactly 0.
struct RowMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  bool at(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
};

// Lower-triangular mask: position i may attend to j <= i.
RowMask causal_mask(std::size_t n);

// ---- elementwise / broadcasting ----
// add/sub/mul broadcast trailing-aligned extents, numpy style.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor scalar_add(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- linear algebra ----
// Batched matrix product: a[..., m, k] x b[..., k, p] -> [..., m, p] with
// broadcastable leading extents.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape new_shape);
// Concatenate along the last axis.
Tensor concat_last(const std::vector<Tensor>& parts);
// Slice [offset, offset+len) of the last axis.
Tensor slice_last(const Tensor& a, std::size_t offset, std::size_t len);
// Row range [offset, offset+len) of a 2-D tensor.
Tensor slice_rows(const Tensor& a, std::size_t offset, std::size_t len);
// a[:, index, :] of a rank-3 tensor -> rank-2.
Tensor select_step(const Tensor& a, std::size_t index);
// Stack rank-2 tensors [B, K] along a new middle axis -> [B, n, K].
Tensor stack_steps(const std::vector<Tensor>& steps);

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim = false);

// ---- neural-net primitives ----
// Row softmax over the last axis of [..., r, c], numerically stabilized by
// row-max subtraction. Masked-out entries are exactly 0; a fully masked row
// raises NumericError.
Tensor softmax_rows(const Tensor& x, const RowMask* mask = nullptr);
// Inverted-scaling dropout: active only when training and rate > 0.
Tensor dropout(const Tensor& x, double rate, RngStream& rng, bool training);
// Gather rows of table[R, d] by integer id; ids.size() elements laid out as
// id_shape, output id_shape + [d]. Gradient scatter-adds into the table.
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        Shape id_shape);
// Normalization over the last axis with learnable gain/bias (both shape [K]).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// ---- autodiff driver ----
// Reverse pass from a scalar loss; accumulates into .grad of every tensor
// reachable through the graph that has requires_grad set.
void backward(const Tensor& loss);

// ---- parameter updates ----
void zero_grads(const std::vector<Tensor*>& params);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void init(const std::vector<Tensor*>& params);
};

// Bias-corrected adaptive-moment update; lr = 0 leaves parameters unchanged.
void adam_step(const std::vector<Tensor*>& params, AdamState& state, double lr);
void sgd_step(const std::vector<Tensor*>& params, double lr);

bool all_finite(const Tensor& t);

}  // namespace genatt
