#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "genatt/grad_check.hpp"
#include "genatt/tensor.hpp"

using namespace genatt;

namespace {

Tensor t2(std::vector<double> v, std::size_t r, std::size_t c,
          bool grad = false) {
  return Tensor::from_vector({r, c}, std::move(v), grad);
}

}  // namespace

TEST_CASE("rng stream is counter-deterministic") {
  RngStream a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(a.draws() == 100);
  RngStream c(124);
  bool any_diff = false;
  for (int i = 0; i < 100; ++i) any_diff = any_diff || b.uniform() != c.uniform();
  CHECK(any_diff);
}

TEST_CASE("rng uniform range and normal moments") {
  RngStream r(9);
  double mean = 0.0, var = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  std::vector<double> zs(n);
  for (double& z : zs) z = r.normal();
  for (double z : zs) mean += z;
  mean /= n;
  for (double z : zs) var += (z - mean) * (z - mean);
  var /= n;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("matmul identity and hand product") {
  const Tensor eye = t2({1, 0, 0, 1}, 2, 2);
  const Tensor m = t2({1, 2, 3, 4}, 2, 2);
  const Tensor out = matmul(eye, m);
  CHECK(*out.data == *m.data);

  const Tensor a = t2({1, 2}, 1, 2);
  const Tensor b = t2({3, 4}, 2, 1);
  CHECK(matmul(a, b).value() == doctest::Approx(11.0).epsilon(1e-12));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       "matmul: inner extents disagree, [2, 3] x [4, 2]",
                       ShapeError);
}

TEST_CASE("matmul gradient of sum equals ones times b^T") {
  RngStream rng(5);
  Tensor a = Tensor::randn({3, 4}, rng, true);
  Tensor b = Tensor::randn({4, 2}, rng, true);
  const Tensor loss = sum_all(matmul(a, b));
  backward(loss);
  // d(sum)/da = ones(3,2) . b^T
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      double expected = 0.0;
      for (std::size_t j = 0; j < 2; ++j) expected += (*b.data)[k * 2 + j];
      CHECK((*a.grad)[i * 4 + k] == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  // And against the finite-difference oracle.
  const double err =
      grad_check([&] { return sum_all(matmul(a, b)); }, {&a, &b}, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("softmax rows: symmetry, masking, logistic value") {
  const Tensor flat = softmax_rows(t2({0, 0}, 1, 2));
  CHECK((*flat.data)[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK((*flat.data)[1] == doctest::Approx(0.5).epsilon(1e-12));

  RowMask mask;
  mask.rows = 1;
  mask.cols = 2;
  mask.allowed = {1, 0};
  const Tensor one = softmax_rows(t2({5, 5}, 1, 2), &mask);
  CHECK((*one.data)[0] == 1.0);
  CHECK((*one.data)[1] == 0.0);

  const Tensor logi = softmax_rows(t2({1, 0}, 1, 2));
  CHECK((*logi.data)[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK((*logi.data)[1] == doctest::Approx(0.2689).epsilon(1e-4));
}

TEST_CASE("softmax rejects a fully masked row") {
  RowMask mask;
  mask.rows = 2;
  mask.cols = 2;
  mask.allowed = {1, 1, 0, 0};
  CHECK_THROWS_AS(softmax_rows(Tensor::zeros({2, 2}), &mask), NumericError);
}

TEST_CASE("softmax output is row-stochastic under causal mask") {
  RngStream rng(3);
  const std::size_t n = 6;
  const RowMask mask = causal_mask(n);
  const Tensor s = softmax_rows(Tensor::randn({2, n, n}, rng), &mask);
  const double* p = s.ptr();
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = p[(b * n + i) * n + j];
        CHECK(v >= 0.0);
        if (j > i) CHECK(v == 0.0);
        sum += v;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("grad_check: quadratic is exact") {
  Tensor x = Tensor::from_vector({2}, {1.0, 2.0}, true);
  const double err = grad_check([&] { return sum_all(mul(x, x)); }, {&x});
  CHECK(err < 1e-8);
  zero_grads({&x});
  backward(sum_all(mul(x, x)));
  CHECK((*x.grad)[0] == doctest::Approx(2.0));
  CHECK((*x.grad)[1] == doctest::Approx(4.0));
}

TEST_CASE("grad_check propagates non-finite loss") {
  Tensor x = Tensor::from_vector({1}, {-1.0}, true);
  CHECK_THROWS_AS(grad_check([&] { return log(x); }, {&x}), NumericError);
}

TEST_CASE("elementwise op gradients against finite differences") {
  RngStream rng(11);
  Tensor x = Tensor::randn({3, 4}, rng, true);
  auto check_op = [&](const std::function<Tensor()>& f) {
    const double err = grad_check(f, {&x});
    CHECK(err < 1e-6);
  };
  check_op([&] { return sum_all(exp(scalar_mul(x, 0.5))); });
  check_op([&] { return sum_all(log(scalar_add(mul(x, x), 1.0))); });
  check_op([&] { return sum_all(sqrt(scalar_add(mul(x, x), 0.5))); });
  check_op([&] { return sum_all(tanh(x)); });
  check_op([&] { return sum_all(sigmoid(x)); });
  check_op([&] { return sum_all(gelu(x)); });
  check_op([&] { return mean_all(mul(x, tanh(x))); });
}

TEST_CASE("broadcasting add/mul with gradient reduction") {
  RngStream rng(13);
  Tensor a = Tensor::randn({2, 3, 4}, rng, true);
  Tensor b = Tensor::randn({4}, rng, true);
  Tensor c = Tensor::randn({3, 1}, rng, true);
  const double err = grad_check(
      [&] {
        Tensor y = add(a, b);
        y = mul(y, c);
        return sum_all(mul(y, y));
      },
      {&a, &b, &c});
  CHECK(err < 1e-6);
  CHECK(add(a, b).shape == Shape{2, 3, 4});
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
}

TEST_CASE("reductions keep shape contracts") {
  const Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(sum_all(x).value() == doctest::Approx(21.0));
  CHECK(mean_all(x).value() == doctest::Approx(3.5));
  const Tensor s1 = sum_axis(x, 0);
  CHECK(s1.shape == Shape{3});
  CHECK((*s1.data)[0] == doctest::Approx(5.0));
  const Tensor m1 = mean_axis(x, 1, /*keepdim=*/true);
  CHECK(m1.shape == Shape{2, 1});
  CHECK((*m1.data)[1] == doctest::Approx(5.0));
}

TEST_CASE("dropout: inverted scaling, identity at eval") {
  RngStream rng(17);
  Tensor x = Tensor::full({1000}, 1.0);
  const Tensor eval_out = dropout(x, 0.4, rng, false);
  CHECK(*eval_out.data == *x.data);
  const Tensor train_out = dropout(x, 0.4, rng, true);
  double mean = 0.0;
  std::size_t zeros = 0;
  for (double v : *train_out.data) {
    mean += v;
    if (v == 0.0) ++zeros;
    else CHECK(v == doctest::Approx(1.0 / 0.6));
  }
  mean /= train_out.numel();
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));
  CHECK(zeros > 300);
  CHECK(zeros < 500);
}

TEST_CASE("dropout gradient uses the same mask") {
  RngStream rng(19);
  Tensor x = Tensor::randn({4, 4}, rng, true);
  const double err = grad_check(
      [&] {
        RngStream drop_rng(7);
        const Tensor y = dropout(x, 0.5, drop_rng, true);
        return sum_all(mul(y, y));
      },
      {&x});
  CHECK(err < 1e-6);
}

TEST_CASE("embedding lookup gathers and scatters") {
  Tensor table = Tensor::from_vector({3, 2}, {0, 0, 1, 2, 3, 4}, true);
  const Tensor e = embedding_lookup(table, {2, 1, 1}, {3});
  CHECK(e.shape == Shape{3, 2});
  CHECK((*e.data)[0] == 3.0);
  backward(sum_all(e));
  CHECK((*table.grad)[0] == 0.0);        // row 0 untouched
  CHECK((*table.grad)[2] == 2.0);        // row 1 hit twice
  CHECK((*table.grad)[4] == 1.0);        // row 2 hit once
  CHECK_THROWS_AS(embedding_lookup(table, {3}, {1}), std::out_of_range);
}

TEST_CASE("transpose, reshape, concat, slice round trips") {
  RngStream rng(23);
  const Tensor x = Tensor::randn({2, 3}, rng);
  const Tensor xt = transpose_last2(x);
  CHECK(xt.shape == Shape{3, 2});
  CHECK((*xt.data)[1] == (*x.data)[3]);
  const Tensor back = transpose_last2(xt);
  CHECK(*back.data == *x.data);

  const Tensor r = reshape(x, {3, 2});
  CHECK(r.shape == Shape{3, 2});
  CHECK(*r.data == *x.data);
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);

  const Tensor c = concat_last({x, x});
  CHECK(c.shape == Shape{2, 6});
  const Tensor s = slice_last(c, 3, 3);
  CHECK(s.shape == Shape{2, 3});
  CHECK((*s.data)[0] == (*x.data)[0]);
}

TEST_CASE("adam: zero lr leaves parameters unchanged, descent reduces loss") {
  RngStream rng(29);
  Tensor w = Tensor::randn({4}, rng, true);
  const std::vector<double> before = *w.data;
  AdamState opt;
  zero_grads({&w});
  backward(sum_all(mul(w, w)));
  adam_step({&w}, opt, 0.0);
  CHECK(*w.data == before);

  AdamState opt2;
  double prev = 1e300;
  for (int i = 0; i < 50; ++i) {
    zero_grads({&w});
    const Tensor loss = sum_all(mul(w, w));
    CHECK(loss.value() <= prev + 1e-12);
    prev = loss.value();
    backward(loss);
    adam_step({&w}, opt2, 0.05);
  }
  CHECK(prev < 0.1);
}

TEST_CASE("layer_norm matches a reference row computation") {
  RngStream rng(31);
  Tensor x = Tensor::randn({2, 5}, rng, true);
  Tensor g = Tensor::full({5}, 1.3, true);
  Tensor b = Tensor::full({5}, -0.2, true);
  const Tensor y = layer_norm(x, g, b, 1e-5);
  for (std::size_t r = 0; r < 2; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < 5; ++j) mu += (*x.data)[r * 5 + j];
    mu /= 5;
    double var = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      var += ((*x.data)[r * 5 + j] - mu) * ((*x.data)[r * 5 + j] - mu);
    }
    var /= 5;
    for (std::size_t j = 0; j < 5; ++j) {
      const double ref =
          1.3 * (((*x.data)[r * 5 + j] - mu) / std::sqrt(var + 1e-5)) - 0.2;
      CHECK((*y.data)[r * 5 + j] == doctest::Approx(ref).epsilon(1e-12));
    }
  }
  const double err = grad_check(
      [&] {
        const Tensor out = layer_norm(x, g, b, 1e-5);
        return sum_all(mul(out, out));
      },
      {&x, &g, &b});
  CHECK(err < 1e-6);
}

TEST_CASE("forward ops are deterministic given identical rng state") {
  RngStream r1(77), r2(77);
  Tensor x = Tensor::full({64}, 0.5);
  const Tensor a = dropout(x, 0.3, r1, true);
  const Tensor b = dropout(x, 0.3, r2, true);
  CHECK(*a.data == *b.data);
}

TEST_CASE("no-grad guard suppresses graph construction") {
  RngStream rng(41);
  Tensor x = Tensor::randn({3, 3}, rng, true);
  {
    NoGradGuard guard;
    const Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad);
    CHECK(y.node == nullptr);
  }
  const Tensor y = mul(x, x);
  CHECK(y.requires_grad);
  CHECK(y.node != nullptr);
}
