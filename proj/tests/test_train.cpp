#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "genatt/checks.hpp"
#include "genatt/synthetic.hpp"
#include "genatt/train.hpp"

using namespace genatt;

TEST_CASE("bce: perfect separation is (almost) zero loss") {
  const Tensor pos = Tensor::full({1, 2}, 40.0);
  const Tensor neg = Tensor::full({1, 2}, -40.0);
  const Tensor valid = Tensor::full({1, 2}, 1.0);
  CHECK(bce_loss(pos, neg, valid).value() ==
        doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("bce: zero logits cost ln 2 per term") {
  const Tensor pos = Tensor::zeros({2, 3});
  const Tensor neg = Tensor::zeros({2, 3});
  Tensor valid = Tensor::zeros({2, 3});
  (*valid.data)[0] = 1.0;
  (*valid.data)[4] = 1.0;
  // Mean over the four contributing terms: -log 0.5 each.
  CHECK(bce_loss(pos, neg, valid).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("bce: gradient at zero logit is -0.5 / term count") {
  Tensor pos = Tensor::zeros({1, 1}, true);
  Tensor neg = Tensor::zeros({1, 1}, true);
  const Tensor valid = Tensor::full({1, 1}, 1.0);
  const Tensor loss = bce_loss(pos, neg, valid);
  backward(loss);
  // One valid position contributes two terms, so count = 2.
  CHECK((*pos.grad)[0] == doctest::Approx(-0.5 / 2.0).epsilon(1e-12));
  CHECK((*neg.grad)[0] == doctest::Approx(0.5 / 2.0).epsilon(1e-12));
}

TEST_CASE("bce: empty batch raises") {
  const Tensor zero = Tensor::zeros({1, 2});
  CHECK_THROWS_AS(bce_loss(zero, zero, Tensor::zeros({1, 2})), DataError);
}

TEST_CASE("kl: prior match, unit shift, widened variance") {
  CHECK(kl_loss(Tensor::zeros({1, 1}), Tensor::zeros({1, 1})).value() == 0.0);
  CHECK(kl_loss(Tensor::full({1, 1}, 1.0), Tensor::zeros({1, 1})).value() ==
        doctest::Approx(0.5).epsilon(1e-12));
  // mu = 0, sigma^2 = 2: -(1 + ln 2 - 0 - 2) / 2 = (1 - ln 2) / 2.
  CHECK(kl_loss(Tensor::zeros({1, 1}),
                Tensor::full({1, 1}, std::log(2.0))).value() ==
        doctest::Approx(0.5 * (1.0 - std::log(2.0))).epsilon(1e-12));
}

TEST_CASE("kl is non-negative with equality only at the prior") {
  RngStream rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor mu = Tensor::randn({2, 3}, rng);
    const Tensor lv = Tensor::randn({2, 3}, rng);
    CHECK(kl_loss(mu, lv).value() >= 0.0);
  }
  CHECK(kl_loss(Tensor::zeros({4, 2}), Tensor::zeros({4, 2})).value() == 0.0);
}

TEST_CASE("diffusion loss: exact match, half miss, gradient") {
  RngStream rng(2);
  const Tensor eps = Tensor::randn({2, 3}, rng);
  CHECK(diffusion_loss(eps, eps).value() == 0.0);

  const Tensor e = Tensor::from_vector({1, 2}, {1.0, 0.0});
  const Tensor zero = Tensor::zeros({1, 2});
  CHECK(diffusion_loss(e, zero).value() == doctest::Approx(0.5).epsilon(1e-12));

  Tensor eps_hat = Tensor::randn({2, 3}, rng, true);
  const Tensor loss = diffusion_loss(eps, eps_hat);
  backward(loss);
  for (std::size_t i = 0; i < eps_hat.numel(); ++i) {
    const double expect =
        2.0 * ((*eps_hat.data)[i] - (*eps.data)[i]) / eps_hat.numel();
    CHECK((*eps_hat.grad)[i] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("total loss: gamma weighting") {
  const Tensor rec = Tensor::scalar(0.5);
  const Tensor gen = Tensor::scalar(0.2);
  CHECK(total_loss(rec, gen, 0.0).value() == doctest::Approx(0.5));
  CHECK(total_loss(rec, gen, 1.0).value() == doctest::Approx(0.7));
  CHECK(total_loss(rec, gen, 2.0).value() == doctest::Approx(0.9));
  CHECK_THROWS_AS(total_loss(rec, gen, -1.0), ConfigError);
}

TEST_CASE("total loss gradient equals rec gradient at gamma = 0") {
  Tensor x = Tensor::from_vector({2}, {0.3, -0.8}, true);
  auto rec_of = [&] { return sum_all(mul(x, x)); };
  auto gen_of = [&] { return sum_all(exp(x)); };

  zero_grads({&x});
  backward(total_loss(rec_of(), gen_of(), 0.0));
  const std::vector<double> combined = *x.grad;
  zero_grads({&x});
  backward(rec_of());
  CHECK(combined == *x.grad);
}

TEST_CASE("train_epoch: zero learning rate leaves parameters unchanged") {
  ToyInstance toy = make_toy_instance(Mode::vae);
  const auto params = toy.model.param_list();
  std::vector<std::vector<double>> before;
  for (const Tensor* p : params) before.push_back(*p->data);
  TrainState state(9);
  TrainOptions opts;
  opts.lr = 0.0;
  opts.batch = 2;
  train_epoch(toy.model, toy.split.train, toy.log, state, opts);
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(*params[i]->data == before[i]);
  }
}

TEST_CASE("train_epoch: one epoch on a repeated batch decreases the loss") {
  for (Mode mode : {Mode::deterministic, Mode::vae, Mode::diffusion}) {
    INFO(mode_to_string(mode));
    ToyInstance toy = make_toy_instance(mode);
    // Single repeated batch: duplicate one training row.
    std::vector<FixedSequence> rows(8, toy.split.train[0]);
    const Batch probe = make_batch(rows, 0, rows.size());
    const auto loss_at = [&]() {
      RngStream rng(5005);
      return training_loss(toy.model, probe, toy.log, rng).total.value();
    };
    const double before = loss_at();
    TrainState state(10);
    TrainOptions opts;
    opts.lr = 1e-3;
    opts.batch = 8;
    train_epoch(toy.model, rows, toy.log, state, opts);
    const double after = loss_at();
    CHECK(after < before);
  }
}

TEST_CASE("train_epoch: identical seeds give identical epoch stats") {
  for (int run = 0; run < 1; ++run) {
    ToyInstance a = make_toy_instance(Mode::vae);
    ToyInstance b = make_toy_instance(Mode::vae);
    TrainState sa(21), sb(21);
    TrainOptions opts;
    opts.batch = 2;
    const EpochStats ea = train_epoch(a.model, a.split.train, a.log, sa, opts);
    const EpochStats eb = train_epoch(b.model, b.split.train, b.log, sb, opts);
    CHECK(ea.rec == eb.rec);
    CHECK(ea.gen == eb.gen);
    CHECK(ea.total == eb.total);
  }
}

TEST_CASE("fit: constant validation metric stops at exactly epoch 21") {
  ToyInstance toy = make_toy_instance(Mode::deterministic);
  TrainOptions opts;
  opts.lr = 0.0;  // parameters frozen, so the metric is constant
  opts.batch = 2;
  opts.max_epochs = 500;
  opts.patience = 20;
  const FitResult result = fit(toy.model, toy.split, toy.log, opts);
  CHECK(result.log.size() == 21);
  CHECK(result.best_epoch == 1);
}

TEST_CASE("fit: log has one row per epoch with losses and the metric") {
  ToyInstance toy = make_toy_instance(Mode::vae);
  TrainOptions opts;
  opts.lr = 1e-3;
  opts.batch = 2;
  opts.max_epochs = 4;
  opts.patience = 20;
  const FitResult result = fit(toy.model, toy.split, toy.log, opts);
  REQUIRE(result.log.size() == 4);
  for (std::size_t i = 0; i < result.log.size(); ++i) {
    CHECK(result.log[i].epoch == static_cast<int>(i + 1));
    CHECK(std::isfinite(result.log[i].rec_loss));
    CHECK(std::isfinite(result.log[i].gen_loss));
    CHECK(std::isfinite(result.log[i].val_ndcg20));
    CHECK(result.log[i].seconds >= 0.0);
  }
}

TEST_CASE("gamma sweep stays finite and is recorded") {
  for (double gamma : {0.1, 0.2, 0.4, 0.6, 2.0, 4.0}) {
    ToyInstance toy = make_toy_instance(Mode::vae);
    toy.model.config.gamma = gamma;
    TrainOptions opts;
    opts.lr = 1e-3;
    opts.batch = 2;
    opts.max_epochs = 2;
    const FitResult result = fit(toy.model, toy.split, toy.log, opts);
    REQUIRE(result.log.size() == 2);
    for (const TrainLogRow& row : result.log) {
      CHECK(std::isfinite(row.total_loss));
      CHECK(std::isfinite(row.gen_loss));
    }
  }
}

TEST_CASE("seeded end-to-end determinism: identical runs, identical params") {
  SyntheticSpec spec;
  spec.users = 20;
  spec.items = 24;
  spec.cats = 4;
  spec.seed = 6;
  const InteractionLog log = make_synthetic_corpus(spec);
  const SplitSet split = leave_one_out_split(log, 8);

  auto run = [&]() {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.n = 8;
    cfg.T = 4;
    cfg.mode = Mode::diffusion;
    cfg.num_items = log.num_items;
    cfg.seed = 77;
    Model m = init_model(cfg);
    TrainOptions opts;
    opts.batch = 8;
    opts.max_epochs = 2;
    const FitResult r = fit(m, split, log, opts);
    std::vector<double> flat;
    for (Tensor* p : m.param_list()) {
      flat.insert(flat.end(), p->data->begin(), p->data->end());
    }
    return std::make_pair(flat, r);
  };
  const auto [params_a, fit_a] = run();
  const auto [params_b, fit_b] = run();
  CHECK(params_a == params_b);  // bitwise
  REQUIRE(fit_a.log.size() == fit_b.log.size());
  for (std::size_t i = 0; i < fit_a.log.size(); ++i) {
    CHECK(fit_a.log[i].rec_loss == fit_b.log[i].rec_loss);
    CHECK(fit_a.log[i].gen_loss == fit_b.log[i].gen_loss);
    CHECK(fit_a.log[i].val_ndcg20 == fit_b.log[i].val_ndcg20);
  }
}

TEST_CASE("pad embedding row stays zero across updates") {
  ToyInstance toy = make_toy_instance(Mode::vae);
  TrainState state(3);
  TrainOptions opts;
  opts.lr = 1e-2;
  opts.batch = 2;
  for (int epoch = 0; epoch < 3; ++epoch) {
    train_epoch(toy.model, toy.split.train, toy.log, state, opts);
    for (int j = 0; j < toy.model.config.d; ++j) {
      CHECK((*toy.model.params.emb.item_table.data)[j] == 0.0);
    }
  }
}
