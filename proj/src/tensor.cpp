#include "genatt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace genatt {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::shared_ptr<Node> make_node(std::vector<Tensor> parents,
                                std::function<void()> backward) {
  auto node = std::make_shared<Node>();
  node->parents = std::move(parents);
  node->backward = std::move(backward);
  return node;
}

// Strides for reading `in` as if broadcast to `out` (trailing-aligned);
// broadcast dimensions get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out,
                                           const char* op) {
  const std::size_t r_out = out.size();
  const std::size_t r_in = in.size();
  std::vector<std::size_t> strides(r_out, 0);
  std::size_t stride = 1;
  std::vector<std::size_t> in_strides(r_in);
  for (std::size_t d = r_in; d-- > 0;) {
    in_strides[d] = stride;
    stride *= in[d];
  }
  for (std::size_t d = 0; d < r_out; ++d) {
    if (d < r_out - r_in) continue;  // missing leading dim -> stride 0
    const std::size_t j = d - (r_out - r_in);
    if (in[j] == out[d]) {
      strides[d] = in_strides[j];
    } else if (in[j] == 1) {
      strides[d] = 0;
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(in) +
                       " to " + shape_str(out));
    }
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t d = 0; d < r; ++d) {
    const std::size_t ea = d < r - a.size() ? 1 : a[d - (r - a.size())];
    const std::size_t eb = d < r - b.size() ? 1 : b[d - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": incompatible shapes " +
                       shape_str(a) + " and " + shape_str(b));
    }
    out[d] = std::max(ea, eb);
  }
  return out;
}

// Visits every index of `out`, handing the callback flat offsets into two
// broadcast inputs.
template <class F>
void for_each_broadcast2(const Shape& out, const std::vector<std::size_t>& sa,
                         const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = shape_numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, oa, ob);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

Tensor binary_broadcast(const Tensor& a, const Tensor& b, BinOp op,
                        const char* name) {
  const Shape out_shape = broadcast_shape(a.shape, b.shape, name);
  const auto sa = broadcast_strides(a.shape, out_shape, name);
  const auto sb = broadcast_strides(b.shape, out_shape, name);
  const bool want = grad_enabled() && (a.requires_grad || b.requires_grad);
  Tensor out = Tensor::zeros(out_shape, want);
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  switch (op) {
    case BinOp::Add:
      for_each_broadcast2(out_shape, sa, sb, [&](std::size_t o, std::size_t ia,
                                                 std::size_t ib) {
        po[o] = pa[ia] + pb[ib];
      });
      break;
    case BinOp::Sub:
      for_each_broadcast2(out_shape, sa, sb, [&](std::size_t o, std::size_t ia,
                                                 std::size_t ib) {
        po[o] = pa[ia] - pb[ib];
      });
      break;
    case BinOp::Mul:
      for_each_broadcast2(out_shape, sa, sb, [&](std::size_t o, std::size_t ia,
                                                 std::size_t ib) {
        po[o] = pa[ia] * pb[ib];
      });
      break;
  }
  if (want) {
    out.node = make_node(
        {a, b}, [a, b, og = out.grad, out_shape, sa, sb, op]() {
          const double* g = og->data();
          double* ga = a.requires_grad ? a.grad->data() : nullptr;
          double* gb = b.requires_grad ? b.grad->data() : nullptr;
          const double* pa = a.ptr();
          const double* pb = b.ptr();
          for_each_broadcast2(
              out_shape, sa, sb,
              [&](std::size_t o, std::size_t ia, std::size_t ib) {
                switch (op) {
                  case BinOp::Add:
                    if (ga) ga[ia] += g[o];
                    if (gb) gb[ib] += g[o];
                    break;
                  case BinOp::Sub:
                    if (ga) ga[ia] += g[o];
                    if (gb) gb[ib] -= g[o];
                    break;
                  case BinOp::Mul:
                    if (ga) ga[ia] += g[o] * pb[ib];
                    if (gb) gb[ib] += g[o] * pa[ia];
                    break;
                }
              });
        });
  }
  return out;
}

Tensor unary_elementwise(const Tensor& a, const char* name,
                         const std::function<double(double)>& fwd,
                         const std::function<double(double, double)>& dfd) {
  // dfd(x, y) is the local derivative given input x and output y.
  const bool want = grad_enabled() && a.requires_grad;
  Tensor out = Tensor::zeros(a.shape, want);
  const std::size_t n = a.numel();
  const double* pa = a.ptr();
  double* po = out.ptr();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (want) {
    out.node = make_node({a}, [a, od = out.data, og = out.grad, dfd]() {
      if (!a.requires_grad) return;
      const std::size_t n2 = od->size();
      const double* x = a.ptr();
      const double* y = od->data();
      const double* g = og->data();
      double* ga = a.grad->data();
      for (std::size_t i = 0; i < n2; ++i) ga[i] += g[i] * dfd(x[i], y[i]);
    });
  }
  (void)name;
  return out;
}

void mm_fwd(const double* A, const double* B, double* C, std::size_t m,
            std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    double* crow = C + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = B + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA += G * B^T
void mm_grad_a(const double* G, const double* B, double* dA, std::size_t m,
               std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = G + i * p;
    double* darow = dA + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* brow = B + kk * p;
      double acc = 0.0;
      for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
      darow[kk] += acc;
    }
  }
}

// dB += A^T * G
void mm_grad_b(const double* A, const double* G, double* dB, std::size_t m,
               std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    const double* grow = G + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      double* dbrow = dB + kk * p;
      for (std::size_t j = 0; j < p; ++j) dbrow[j] += av * grow[j];
    }
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ", ";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

double Tensor::value() const {
  if (numel() != 1) {
    throw ShapeError("value: tensor is not scalar, shape " + shape_str(shape));
  }
  return (*data)[0];
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  const std::size_t n = shape_numel(shape);
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(n, 0.0);
  t.requires_grad = requires_grad;
  if (requires_grad) t.grad = std::make_shared<std::vector<double>>(n, 0.0);
  return t;
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data->begin(), t.data->end(), v);
  return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_vector: shape " + shape_str(shape) + " expects " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad = requires_grad;
  if (requires_grad) {
    t.grad = std::make_shared<std::vector<double>>(t.data->size(), 0.0);
  }
  return t;
}

Tensor Tensor::scalar(double v) { return from_vector({1}, {v}); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, RngStream& rng,
                       bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : *t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

Tensor Tensor::randn(Shape shape, RngStream& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : *t.data) v = rng.normal();
  return t;
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape = shape;
  t.data = data;
  t.requires_grad = false;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(*data);
  t.requires_grad = requires_grad;
  if (requires_grad) {
    t.grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
  }
  return t;
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

RowMask causal_mask(std::size_t n) {
  RowMask m;
  m.rows = n;
  m.cols = n;
  m.allowed.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
  }
  return m;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast(a, b, BinOp::Add, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast(a, b, BinOp::Sub, "sub");
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast(a, b, BinOp::Mul, "mul");
}

Tensor scalar_mul(const Tensor& a, double s) {
  return unary_elementwise(
      a, "scalar_mul", [s](double x) { return x * s; },
      [s](double, double) { return s; });
}

Tensor scalar_add(const Tensor& a, double s) {
  return unary_elementwise(
      a, "scalar_add", [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_elementwise(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_elementwise(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_elementwise(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor tanh(const Tensor& a) {
  return unary_elementwise(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_elementwise(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  return unary_elementwise(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_elementwise(
      a, "clamp",
      [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.size() < 2 || b.shape.size() < 2) {
    throw ShapeError("matmul: both operands need rank >= 2, got " +
                     shape_str(a.shape) + " and " + shape_str(b.shape));
  }
  const std::size_t m = a.shape[a.shape.size() - 2];
  const std::size_t k = a.shape[a.shape.size() - 1];
  const std::size_t k2 = b.shape[b.shape.size() - 2];
  const std::size_t p = b.shape[b.shape.size() - 1];
  if (k != k2) {
    throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape) +
                     " x " + shape_str(b.shape));
  }
  const Shape batch_a(a.shape.begin(), a.shape.end() - 2);
  const Shape batch_b(b.shape.begin(), b.shape.end() - 2);
  const Shape batch = broadcast_shape(batch_a, batch_b, "matmul");
  const auto sa = broadcast_strides(batch_a, batch, "matmul");
  const auto sb = broadcast_strides(batch_b, batch, "matmul");

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(p);
  const bool want = grad_enabled() && (a.requires_grad || b.requires_grad);
  Tensor out = Tensor::zeros(out_shape, want);

  const std::size_t mk = m * k, kp = k * p, mp = m * p;
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for_each_broadcast2(batch, sa, sb, [&](std::size_t o, std::size_t ia,
                                         std::size_t ib) {
    mm_fwd(pa + ia * mk, pb + ib * kp, po + o * mp, m, k, p);
  });

  if (want) {
    out.node = make_node({a, b}, [a, b, og = out.grad, batch, sa, sb, m, k,
                                  p, mk, kp, mp]() {
      const double* g = og->data();
      const double* pa = a.ptr();
      const double* pb = b.ptr();
      double* ga = a.requires_grad ? a.grad->data() : nullptr;
      double* gb = b.requires_grad ? b.grad->data() : nullptr;
      for_each_broadcast2(batch, sa, sb, [&](std::size_t o, std::size_t ia,
                                             std::size_t ib) {
        const double* gm = g + o * mp;
        if (ga) mm_grad_a(gm, pb + ib * kp, ga + ia * mk, m, k, p);
        if (gb) mm_grad_b(pa + ia * mk, gm, gb + ib * kp, m, k, p);
      });
    });
  }
  return out;
}

Tensor transpose_last2(const Tensor& a) {
  if (a.shape.size() < 2) {
    throw ShapeError("transpose_last2: rank >= 2 required, got " +
                     shape_str(a.shape));
  }
  const std::size_t r = a.shape[a.shape.size() - 2];
  const std::size_t c = a.shape[a.shape.size() - 1];
  Shape out_shape = a.shape;
  out_shape[out_shape.size() - 2] = c;
  out_shape[out_shape.size() - 1] = r;
  const std::size_t batches = a.numel() / (r * c);
  const bool want = grad_enabled() && a.requires_grad;
  Tensor out = Tensor::zeros(out_shape, want);
  const double* pa = a.ptr();
  double* po = out.ptr();
  for (std::size_t bidx = 0; bidx < batches; ++bidx) {
    const double* src = pa + bidx * r * c;
    double* dst = po + bidx * r * c;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
    }
  }
  if (want) {
    out.node = make_node({a}, [a, og = out.grad, r, c, batches]() {
      if (!a.requires_grad) return;
      double* ga = a.grad->data();
      const double* g = og->data();
      for (std::size_t bidx = 0; bidx < batches; ++bidx) {
        const double* gsrc = g + bidx * r * c;
        double* gdst = ga + bidx * r * c;
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) gdst[i * c + j] += gsrc[j * r + i];
        }
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " +
                     shape_str(new_shape));
  }
  const bool want = grad_enabled() && a.requires_grad;
  Tensor out;
  out.shape = std::move(new_shape);
  out.data = a.data;  // view: same storage
  out.requires_grad = want;
  if (want) {
    out.grad = std::make_shared<std::vector<double>>(a.numel(), 0.0);
    out.node = make_node({a}, [a, og = out.grad]() {
      if (!a.requires_grad) return;
      double* ga = a.grad->data();
      const double* g = og->data();
      for (std::size_t i = 0; i < og->size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const Shape& lead = parts.front().shape;
  std::size_t total_last = 0;
  bool want = false;
  for (const Tensor& t : parts) {
    if (t.shape.size() != lead.size() ||
        !std::equal(t.shape.begin(), t.shape.end() - 1, lead.begin())) {
      throw ShapeError("concat_last: leading extents disagree, " +
                       shape_str(lead) + " vs " + shape_str(t.shape));
    }
    total_last += t.shape.back();
    want = want || t.requires_grad;
  }
  want = want && grad_enabled();
  Shape out_shape = lead;
  out_shape.back() = total_last;
  Tensor out = Tensor::zeros(out_shape, want);
  const std::size_t rows = out.numel() / total_last;
  double* po = out.ptr();
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    const std::size_t w = t.shape.back();
    const double* pt = t.ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(pt + r * w, pt + (r + 1) * w, po + r * total_last + off);
    }
    off += w;
  }
  if (want) {
    out.node = make_node(parts, [parts, og = out.grad, rows, total_last]() {
      const double* g = og->data();
      std::size_t off2 = 0;
      for (const Tensor& t : parts) {
        const std::size_t w = t.shape.back();
        if (t.requires_grad) {
          double* gt = t.grad->data();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < w; ++j) {
              gt[r * w + j] += g[r * total_last + off2 + j];
            }
          }
        }
        off2 += w;
      }
    });
  }
  return out;
}

Tensor slice_last(const Tensor& a, std::size_t offset, std::size_t len) {
  const std::size_t w = a.shape.back();
  if (offset + len > w) {
    throw ShapeError("slice_last: [" + std::to_string(offset) + ", " +
                     std::to_string(offset + len) + ") out of extent " +
                     std::to_string(w));
  }
  Shape out_shape = a.shape;
  out_shape.back() = len;
  const bool want = grad_enabled() && a.requires_grad;
  Tensor out = Tensor::zeros(out_shape, want);
  const std::size_t rows = a.numel() / w;
  const double* pa = a.ptr();
  double* po = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(pa + r * w + offset, pa + r * w + offset + len, po + r * len);
  }
  if (want) {
    out.node = make_node({a}, [a, og = out.grad, rows, w, offset, len]() {
      if (!a.requires_grad) return;
      double* ga = a.grad->data();
      const double* g = og->data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < len; ++j) {
          ga[r * w + offset + j] += g[r * len + j];
        }
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t offset, std::size_t len) {
  if (a.shape.size() != 2) {
    throw ShapeError("slice_rows: rank-2 tensor required, got " +
                     shape_str(a.shape));
  }
  const std::size_t rows = a.shape[0], cols = a.shape[1];
  if (offset + len > rows) {
    throw ShapeError("slice_rows: rows [" + std::to_string(offset) + ", " +
                     std::to_string(offset + len) + ") out of extent " +
                     std::to_string(rows));
  }
  const bool want = grad_enabled() && a.requires_grad;
  Tensor out = Tensor::zeros({len, cols}, want);
  std::copy(a.ptr() + offset * cols, a.ptr() + (offset + len) * cols, out.ptr());
  if (want) {
    out.node = make_node({a}, [a, og = out.grad, offset, cols, len]() {
      if (!a.requires_grad) return;
      double* ga = a.grad->data();
      const double* g = og->data();
      for (std::size_t i = 0; i < len * cols; ++i) ga[offset * cols + i] += g[i];
    });
  }
  return out;
}

Tensor select_step(const Tensor& a, std::size_t index) {
  if (a.shape.size() != 3) {
    throw ShapeError("select_step: rank-3 tensor required, got " +
                     shape_str(a.shape));
  }
  const std::size_t B = a.shape[0], n = a.shape[1], K = a.shape[2];
  if (index >= n) {
    throw ShapeError("select_step: index " + std::to_string(index) +
                     " out of extent " + std::to_string(n));
  }
  const bool want = grad_enabled() && a.requires_grad;
  Tensor out = Tensor::zeros({B, K}, want);
  const double* pa = a.ptr();
  double* po = out.ptr();
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(pa + (b * n + index) * K, pa + (b * n + index + 1) * K, po + b * K);
  }
  if (want) {
    out.node = make_node({a}, [a, og = out.grad, B, n, K, index]() {
      if (!a.requires_grad) return;
      double* ga = a.grad->data();
      const double* g = og->data();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < K; ++j) {
          ga[(b * n + index) * K + j] += g[b * K + j];
        }
      }
    });
  }
  return out;
}

Tensor stack_steps(const std::vector<Tensor>& steps) {
  if (steps.empty()) throw ShapeError("stack_steps: no inputs");
  const Shape& s0 = steps.front().shape;
  if (s0.size() != 2) {
    throw ShapeError("stack_steps: rank-2 steps required, got " + shape_str(s0));
  }
  const std::size_t B = s0[0], K = s0[1], n = steps.size();
  bool want = false;
  for (const Tensor& t : steps) {
    if (t.shape != s0) {
      throw ShapeError("stack_steps: step shapes disagree, " + shape_str(s0) +
                       " vs " + shape_str(t.shape));
    }
    want = want || t.requires_grad;
  }
  want = want && grad_enabled();
  Tensor out = Tensor::zeros({B, n, K}, want);
  double* po = out.ptr();
  for (std::size_t t = 0; t < n; ++t) {
    const double* pt = steps[t].ptr();
    for (std::size_t b = 0; b < B; ++b) {
      std::copy(pt + b * K, pt + (b + 1) * K, po + (b * n + t) * K);
    }
  }
  if (want) {
    out.node = make_node(steps, [steps, og = out.grad, B, n, K]() {
      const double* g = og->data();
      for (std::size_t t = 0; t < n; ++t) {
        if (!steps[t].requires_grad) continue;
        double* gt = steps[t].grad->data();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t j = 0; j < K; ++j) {
            gt[b * K + j] += g[(b * n + t) * K + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  const bool want = grad_enabled() && a.requires_grad;
  Tensor out = Tensor::zeros({1}, want);
  double acc = 0.0;
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < a.numel(); ++i) acc += pa[i];
  (*out.data)[0] = acc;
  if (want) {
    out.node = make_node({a}, [a, og = out.grad]() {
      if (!a.requires_grad) return;
      const double g = (*og)[0];
      double* ga = a.grad->data();
      for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  return scalar_mul(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim) {
  if (axis >= a.shape.size()) {
    throw ShapeError("sum_axis: axis " + std::to_string(axis) +
                     " out of rank " + std::to_string(a.shape.size()));
  }
  const std::size_t ax = a.shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.shape[d];
  for (std::size_t d = axis + 1; d < a.shape.size(); ++d) inner *= a.shape[d];
  Shape out_shape;
  for (std::size_t d = 0; d < a.shape.size(); ++d) {
    if (d == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.shape[d]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const bool want = grad_enabled() && a.requires_grad;
  Tensor out = Tensor::zeros(out_shape, want);
  const double* pa = a.ptr();
  double* po = out.ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t x = 0; x < ax; ++x) {
      const double* src = pa + (o * ax + x) * inner;
      double* dst = po + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  if (want) {
    out.node = make_node({a}, [a, og = out.grad, outer, ax, inner]() {
      if (!a.requires_grad) return;
      double* ga = a.grad->data();
      const double* g = og->data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t x = 0; x < ax; ++x) {
          double* dst = ga + (o * ax + x) * inner;
          const double* src = g + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim) {
  const double inv = 1.0 / static_cast<double>(a.shape[axis]);
  return scalar_mul(sum_axis(a, axis, keepdim), inv);
}

Tensor softmax_rows(const Tensor& x, const RowMask* mask) {
  if (x.shape.size() < 2) {
    throw ShapeError("softmax_rows: rank >= 2 required, got " +
                     shape_str(x.shape));
  }
  const std::size_t r = x.shape[x.shape.size() - 2];
  const std::size_t c = x.shape[x.shape.size() - 1];
  if (mask) {
    if (mask->rows != r || mask->cols != c) {
      throw ShapeError("softmax_rows: mask is " + std::to_string(mask->rows) +
                       "x" + std::to_string(mask->cols) + ", rows are " +
                       std::to_string(r) + "x" + std::to_string(c));
    }
    for (std::size_t i = 0; i < r; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < c; ++j) any = any || mask->at(i, j);
      if (!any) {
        throw NumericError("softmax_rows: fully masked row " +
                           std::to_string(i));
      }
    }
  }
  const std::size_t batches = x.numel() / (r * c);
  const bool want = grad_enabled() && x.requires_grad;
  Tensor out = Tensor::zeros(x.shape, want);
  const double* px = x.ptr();
  double* po = out.ptr();
  for (std::size_t bidx = 0; bidx < batches; ++bidx) {
    for (std::size_t i = 0; i < r; ++i) {
      const double* row = px + (bidx * r + i) * c;
      double* orow = po + (bidx * r + i) * c;
      double mx = -1e300;
      for (std::size_t j = 0; j < c; ++j) {
        if (!mask || mask->at(i, j)) mx = std::max(mx, row[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (!mask || mask->at(i, j)) {
          orow[j] = std::exp(row[j] - mx);
          denom += orow[j];
        } else {
          orow[j] = 0.0;
        }
      }
      for (std::size_t j = 0; j < c; ++j) orow[j] /= denom;
    }
  }
  if (want) {
    out.node = make_node({x}, [x, od = out.data, og = out.grad, batches, r, c]() {
      if (!x.requires_grad) return;
      double* gx = x.grad->data();
      const double* y = od->data();
      const double* g = og->data();
      for (std::size_t row = 0; row < batches * r; ++row) {
        const double* yr = y + row * c;
        const double* gr = g + row * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
        double* gxr = gx + row * c;
        for (std::size_t j = 0; j < c; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, RngStream& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) {
    throw NumericError("dropout: rate must be < 1, got " + std::to_string(rate));
  }
  const double scale = 1.0 / (1.0 - rate);
  auto keep = std::make_shared<std::vector<double>>(x.numel());
  for (double& k : *keep) k = rng.uniform() >= rate ? scale : 0.0;
  const bool want = grad_enabled() && x.requires_grad;
  Tensor out = Tensor::zeros(x.shape, want);
  const double* px = x.ptr();
  double* po = out.ptr();
  for (std::size_t i = 0; i < x.numel(); ++i) po[i] = px[i] * (*keep)[i];
  if (want) {
    out.node = make_node({x}, [x, og = out.grad, keep]() {
      if (!x.requires_grad) return;
      double* gx = x.grad->data();
      const double* g = og->data();
      for (std::size_t i = 0; i < keep->size(); ++i) gx[i] += g[i] * (*keep)[i];
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        Shape id_shape) {
  if (table.shape.size() != 2) {
    throw ShapeError("embedding_lookup: table must be rank 2, got " +
                     shape_str(table.shape));
  }
  if (shape_numel(id_shape) != ids.size()) {
    throw ShapeError("embedding_lookup: id_shape " + shape_str(id_shape) +
                     " does not match " + std::to_string(ids.size()) + " ids");
  }
  const std::size_t rows = table.shape[0], d = table.shape[1];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " outside table of " + std::to_string(rows) +
                              " rows");
    }
  }
  Shape out_shape = std::move(id_shape);
  out_shape.push_back(d);
  const bool want = grad_enabled() && table.requires_grad;
  Tensor out = Tensor::zeros(out_shape, want);
  const double* pt = table.ptr();
  double* po = out.ptr();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(pt + ids[i] * d, pt + (ids[i] + 1) * d, po + i * d);
  }
  if (want) {
    out.node = make_node({table}, [table, og = out.grad, ids, d]() {
      if (!table.requires_grad) return;
      double* gt = table.grad->data();
      const double* g = og->data();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const std::size_t K = x.shape.back();
  if (gain.shape != Shape{K} || bias.shape != Shape{K}) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(K) +
                     "], got " + shape_str(gain.shape) + " and " +
                     shape_str(bias.shape));
  }
  const std::size_t rows = x.numel() / K;
  const bool want =
      grad_enabled() &&
      (x.requires_grad || gain.requires_grad || bias.requires_grad);
  Tensor out = Tensor::zeros(x.shape, want);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* px = x.ptr();
  const double* pg = gain.ptr();
  const double* pb = bias.ptr();
  double* po = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * K;
    double mu = 0.0;
    for (std::size_t j = 0; j < K; ++j) mu += row[j];
    mu /= static_cast<double>(K);
    double var = 0.0;
    for (std::size_t j = 0; j < K; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(K);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < K; ++j) {
      const double xh = (row[j] - mu) * inv;
      (*xhat)[r * K + j] = xh;
      po[r * K + j] = pg[j] * xh + pb[j];
    }
  }
  if (want) {
    out.node = make_node(
        {x, gain, bias}, [x, gain, bias, og = out.grad, xhat, inv_std, rows, K]() {
          const double* g = og->data();
          const double* pg = gain.ptr();
          double* gx = x.requires_grad ? x.grad->data() : nullptr;
          double* gg = gain.requires_grad ? gain.grad->data() : nullptr;
          double* gb = bias.requires_grad ? bias.grad->data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * K;
            const double* xh = xhat->data() + r * K;
            if (gg || gb) {
              for (std::size_t j = 0; j < K; ++j) {
                if (gg) gg[j] += gr[j] * xh[j];
                if (gb) gb[j] += gr[j];
              }
            }
            if (gx) {
              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
              for (std::size_t j = 0; j < K; ++j) {
                const double dxh = gr[j] * pg[j];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh[j];
              }
              const double inv = (*inv_std)[r];
              const double invK = 1.0 / static_cast<double>(K);
              for (std::size_t j = 0; j < K; ++j) {
                const double dxh = gr[j] * pg[j];
                gx[r * K + j] +=
                    inv * (dxh - invK * sum_dxhat - xh[j] * invK * sum_dxhat_xhat);
              }
            }
          }
        });
  }
  return out;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape));
  }
  if (!loss.requires_grad || !loss.grad) return;
  (*loss.grad)[0] += 1.0;
  if (!loss.node) return;

  // Iterative post-order DFS; reversing it yields a valid reverse-topological
  // visit so each node's backward runs before any of its parents'.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  visited.insert(loss.node.get());
  stack.emplace_back(loss.node.get(), 0);
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      Node* next = node->parents[child].node.get();
      ++child;
      if (next && !visited.count(next)) {
        visited.insert(next);
        stack.emplace_back(next, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
  }
}

void zero_grads(const std::vector<Tensor*>& params) {
  for (Tensor* p : params) p->zero_grad();
}

void AdamState::init(const std::vector<Tensor*>& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const Tensor* p : params) {
    m.emplace_back(p->numel(), 0.0);
    v.emplace_back(p->numel(), 0.0);
  }
}

void adam_step(const std::vector<Tensor*>& params, AdamState& state, double lr) {
  if (state.m.size() != params.size()) state.init(params);
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor* p = params[i];
    if (!p->grad) continue;
    double* w = p->ptr();
    const double* g = p->gptr();
    auto& mi = state.m[i];
    auto& vi = state.v[i];
    for (std::size_t j = 0; j < p->numel(); ++j) {
      mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * g[j];
      vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = mi[j] / bc1;
      const double vhat = vi[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void sgd_step(const std::vector<Tensor*>& params, double lr) {
  for (Tensor* p : params) {
    if (!p->grad) continue;
    double* w = p->ptr();
    const double* g = p->gptr();
    for (std::size_t j = 0; j < p->numel(); ++j) w[j] -= lr * g[j];
  }
}

bool all_finite(const Tensor& t) {
  for (double v : *t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace genatt
