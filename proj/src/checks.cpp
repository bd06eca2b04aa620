#include "genatt/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <cstdio>
#include <numeric>

#include "genatt/grad_check.hpp"
#include "genatt/metrics.hpp"
#include "genatt/train.hpp"
#include "json.hpp"

namespace genatt {

namespace {

struct CheckOutcome {
  bool pass = true;
  std::string detail;
};

void expect(CheckOutcome& out, bool cond, const std::string& what) {
  if (!cond && out.pass) {
    out.pass = false;
    out.detail = what;
  }
}

std::string fmt_err(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3e", v);
  return buf;
}

// ---- toy data ----

InteractionLog toy_log() {
  InteractionLog log;
  log.num_items = 8;
  log.item_keys = {"", "i1", "i2", "i3", "i4", "i5", "i6", "i7", "i8"};
  log.user_keys = {"u1", "u2"};
  log.users = {{1, 2, 3, 4, 5, 6}, {2, 4, 6, 8, 3, 5}};
  log.categories.assign(9, {});
  log.categories[1] = {0};
  log.categories[2] = {0, 1};
  log.categories[3] = {1};
  log.categories[4] = {2};
  log.categories[5] = {1, 2};
  log.categories[6] = {0};
  log.categories[7] = {2};
  log.categories[8] = {0, 2};
  log.num_categories = 3;
  return log;
}

CheckOutcome check_rng_determinism(bool) {
  CheckOutcome out;
  RngStream a(42), b(42), c(43);
  bool same = true, diff = false;
  for (int i = 0; i < 1000; ++i) {
    const double va = a.uniform();
    same = same && va == b.uniform();
    diff = diff || va != c.uniform();
  }
  expect(out, same, "identical seeds diverged");
  expect(out, diff, "different seeds coincided on 1000 draws");
  RngStream d(42);
  double mean = 0.0;
  for (int i = 0; i < 10000; ++i) mean += d.normal();
  mean /= 10000.0;
  expect(out, std::abs(mean) < 0.05, "normal draws badly centered");
  return out;
}

CheckOutcome check_op_gradients(bool inject) {
  CheckOutcome out;
  RngStream rng(7);
  const double tol = 1e-6;
  double worst = 0.0;
  auto track = [&](const std::string& op, double err) {
    worst = std::max(worst, err);
    expect(out, err < tol, op + " gradient error " + fmt_err(err));
  };

  {
    Tensor a = Tensor::randn({3, 4}, rng, true);
    Tensor b = Tensor::randn({4, 2}, rng, true);
    track("matmul", grad_check([&] { return sum_all(matmul(a, b)); }, {&a, &b}));
  }
  {
    Tensor a = Tensor::randn({2, 3, 4}, rng, true);
    Tensor b = Tensor::randn({4, 5}, rng, true);
    track("matmul-batched",
          grad_check([&] { return sum_all(mul(matmul(a, b), matmul(a, b))); },
                     {&a, &b}));
  }
  {
    Tensor x = Tensor::randn({2, 4, 4}, rng, true);
    const RowMask mask = causal_mask(4);
    track("softmax-rows", grad_check(
                              [&] {
                                Tensor s = softmax_rows(x, &mask);
                                return sum_all(mul(s, s));
                              },
                              {&x}));
  }
  {
    Tensor x = Tensor::randn({3, 5}, rng, true);
    Tensor g = Tensor::randn({5}, rng, true);
    Tensor b = Tensor::randn({5}, rng, true);
    track("layer-norm",
          grad_check(
              [&] {
                Tensor y = layer_norm(x, g, b);
                return sum_all(mul(y, y));
              },
              {&x, &g, &b}));
  }
  {
    Tensor x = Tensor::randn({4, 3}, rng, true);
    track("elementwise-chain",
          grad_check(
              [&] {
                Tensor y = tanh(x);
                y = add(y, sigmoid(x));
                y = mul(y, gelu(x));
                y = add(y, exp(scalar_mul(x, 0.3)));
                y = add(y, log(scalar_add(mul(x, x), 1.5)));
                y = add(y, sqrt(scalar_add(mul(x, x), 1.0)));
                return mean_all(y);
              },
              {&x}));
  }
  {
    Tensor x = Tensor::randn({2, 6}, rng, true);
    track("concat-slice",
          grad_check(
              [&] {
                Tensor a = slice_last(x, 0, 2);
                Tensor b = slice_last(x, 2, 4);
                Tensor y = concat_last({b, a});
                return sum_all(mul(y, y));
              },
              {&x}));
  }
  {
    Tensor table = Tensor::randn({5, 3}, rng, true);
    const std::vector<int> ids = {0, 2, 4, 2};
    track("embedding-lookup",
          grad_check(
              [&] {
                Tensor e = embedding_lookup(table, ids, {2, 2});
                return sum_all(mul(e, e));
              },
              {&table}));
  }
  {
    Tensor x = Tensor::randn({2, 3, 4}, rng, true);
    track("reductions",
          grad_check(
              [&] {
                Tensor s = sum_axis(x, 1);
                Tensor m = mean_axis(x, 2);
                return add(sum_all(mul(s, s)), sum_all(mul(m, m)));
              },
              {&x}));
  }
  {
    Tensor x = Tensor::randn({4, 4}, rng, true);
    track("transpose-reshape",
          grad_check(
              [&] {
                Tensor y = transpose_last2(x);
                y = reshape(y, {2, 8});
                return sum_all(mul(y, y));
              },
              {&x}));
  }
  {
    Tensor x = Tensor::randn({3, 3}, rng, true);
    track("dropout-clamp",
          grad_check(
              [&] {
                RngStream drop_rng(99);
                Tensor y = dropout(x, 0.4, drop_rng, true);
                return sum_all(mul(clamp(y, -2.0, 2.0), y));
              },
              {&x}));
  }
  {
    Tensor mu = Tensor::randn({2, 4}, rng, true);
    Tensor lv = Tensor::randn({2, 4}, rng, true);
    Tensor eps = Tensor::randn({2, 4}, rng);
    track("reparameterize",
          grad_check(
              [&] {
                Tensor z = reparameterize(mu, lv, eps);
                return add(sum_all(mul(z, z)), kl_loss(mu, lv));
              },
              {&mu, &lv}));
  }
  if (inject) worst += 1.0;
  expect(out, worst < tol, "injected gradient corruption");
  out.detail = out.pass ? "max rel err " + fmt_err(worst) : out.detail;
  return out;
}

CheckOutcome check_model_gradients(Mode mode, bool inject) {
  CheckOutcome out;
  ToyInstance toy = make_toy_instance(mode);
  const auto params = toy.model.param_list();
  std::size_t total = 0;
  for (const Tensor* p : params) total += p->numel();
  const auto loss_fn = [&]() {
    RngStream rng(2024);
    return training_loss(toy.model, toy.batch, toy.log, rng).total;
  };
  double err = grad_check(loss_fn, params);
  if (inject) err += 1.0;
  out.pass = err < 1e-3;
  out.detail = mode_to_string(mode) + ": rel err " + fmt_err(err) +
               " over " + std::to_string(total) + " params";
  return out;
}

CheckOutcome check_diffusion_roundtrip(bool) {
  CheckOutcome out;
  const NoiseSchedule sched = build_schedule(50, 1e-4, 0.02);
  RngStream rng(5);
  const Tensor a0 = Tensor::randn({2, 1, 1, 4, 4}, rng);
  double worst = 0.0;
  for (int t = 1; t <= sched.T; ++t) {
    const Tensor eps = Tensor::randn(a0.shape, rng);
    const Tensor a_t = diffusion_forward(a0, t, eps, sched);
    const Tensor back = diffusion_reverse_step(a_t, eps, t, sched);
    for (std::size_t i = 0; i < a0.numel(); ++i) {
      worst = std::max(worst, std::abs((*back.data)[i] - (*a0.data)[i]));
    }
  }
  expect(out, worst <= 1e-12,
         "roundtrip error " + fmt_err(worst) + " > 1e-12");
  if (out.pass) out.detail = "max abs err " + fmt_err(worst);
  return out;
}

CheckOutcome check_softmax_contracts(bool) {
  CheckOutcome out;
  RngStream rng(11);
  const std::size_t n = 5;
  const RowMask mask = causal_mask(n);
  Tensor x = Tensor::randn({3, n, n}, rng);
  // Large magnitudes exercise the row-max stabilization.
  for (double& v : *x.data) v *= 300.0;
  const Tensor s = softmax_rows(x, &mask);
  expect(out, all_finite(s), "softmax overflowed on large logits");
  const double* p = s.ptr();
  for (std::size_t b = 0; b < 3 && out.pass; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = p[(b * n + i) * n + j];
        if (j > i) expect(out, v == 0.0, "masked entry not exactly zero");
        expect(out, v >= 0.0, "negative probability");
        sum += v;
      }
      expect(out, std::abs(sum - 1.0) <= 1e-6, "row does not sum to 1");
    }
  }
  bool threw = false;
  try {
    RowMask dead = causal_mask(2);
    dead.allowed[0] = 0;  // row 0 fully masked
    softmax_rows(Tensor::zeros({2, 2}), &dead);
  } catch (const NumericError&) {
    threw = true;
  }
  expect(out, threw, "fully masked row did not raise");
  return out;
}

CheckOutcome check_collapse(Mode mode, bool) {
  CheckOutcome out;
  ToyInstance toy = make_toy_instance(mode);
  NoGradGuard no_grad;
  RngStream enc_rng(1);
  const ForwardOutput fo =
      forward(toy.model, toy.batch, enc_rng, false, false);
  const Tensor h_g = fo.encoded.last.detach();

  auto generate = [&](bool collapse) {
    return [&, collapse](RngStream& r) {
      return generate_attention(toy.model, fo.embedded, h_g, r, collapse)
          .normalized;
    };
  };
  if (mode == Mode::vae) {
    expect(out, collapse_check(generate(true), 100, 200),
           "sigma=0 generations differ");
    expect(out, !collapse_check(generate(false), 100, 200),
           "distinct noise produced identical attention");
  } else {
    expect(out, collapse_check(generate(false), 100, 100),
           "frozen-seed generations differ");
    expect(out, !collapse_check(generate(false), 100, 200),
           "distinct seeds produced identical attention");
  }
  return out;
}

CheckOutcome check_stochastic_variance(bool) {
  CheckOutcome out;
  for (Mode mode : {Mode::vae, Mode::diffusion}) {
    ToyInstance toy = make_toy_instance(mode);
    NoGradGuard no_grad;
    RngStream enc_rng(1);
    const ForwardOutput fo =
        forward(toy.model, toy.batch, enc_rng, false, false);
    const Tensor h_g = fo.encoded.last.detach();

    auto sample_variance = [&](bool collapse, std::uint64_t base_seed,
                               bool frozen) {
      std::vector<Tensor> draws;
      for (int k = 0; k < 100; ++k) {
        RngStream r(frozen ? base_seed : base_seed + k);
        draws.push_back(
            generate_attention(toy.model, fo.embedded, h_g, r, collapse)
                .normalized);
      }
      // Deviations from the first draw keep the variance exactly zero when
      // every regeneration is bitwise identical.
      const std::size_t n = draws[0].numel();
      double max_var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double base = (*draws[0].data)[i];
        double mean_dev = 0.0;
        for (const Tensor& d : draws) mean_dev += (*d.data)[i] - base;
        mean_dev /= draws.size();
        double var = 0.0;
        for (const Tensor& d : draws) {
          const double dev = (*d.data)[i] - base;
          var += (dev - mean_dev) * (dev - mean_dev);
        }
        max_var = std::max(max_var, var / draws.size());
      }
      return max_var;
    };

    const bool collapse_mode = mode == Mode::vae;
    const double live = sample_variance(false, 900, false);
    const double dead = sample_variance(collapse_mode, 900, !collapse_mode
                                                               ? true
                                                               : false);
    expect(out, live > 0.0,
           mode_to_string(mode) + ": no entry varied across regenerations");
    expect(out, dead == 0.0,
           mode_to_string(mode) + ": collapse-mode variance " +
               fmt_err(dead) + " != 0");
  }
  return out;
}

CheckOutcome check_theorem1_realizability(bool) {
  CheckOutcome out;
  const std::size_t B = 2, n = 4, d = 4, d_h = 8;
  RngStream rng(31);
  // Fixed deterministic-attention target on a toy instance.
  const Tensor m_seq = Tensor::randn({B, n, d}, rng);
  const Tensor target =
      scalar_mul(matmul(m_seq, transpose_last2(m_seq)), 1.0 / std::sqrt(4.0))
          .detach();
  const Tensor target5 = reshape(target, {B, 1, 1, n, n});

  VaeParams p = init_vae(d_h, n, 1, 1, rng);
  const Tensor h_g = Tensor::randn({B, d_h}, rng);
  std::vector<Tensor*> params = {&p.enc_w1, &p.enc_b1, &p.enc_w2, &p.enc_b2,
                                 &p.dec_shared_w, &p.dec_shared_b,
                                 &p.dec_head_w[0], &p.dec_head_b[0]};
  AdamState opt;
  const RowMask mask = causal_mask(n);
  double mse = 1e9;
  int steps = 0;
  for (; steps < 2000; ++steps) {
    zero_grads(params);
    auto [mu, log_var] = vae_encode(h_g, p);
    const GenAttention att = vae_decode(mu, p, 1, 1, n, mask);  // sigma = 0
    const Tensor diff = sub(att.logits, target5);
    const Tensor loss = mean_all(mul(diff, diff));
    mse = loss.value();
    if (mse < 1e-3) break;
    backward(loss);
    adam_step(params, opt, 1e-2);
  }
  expect(out, mse < 1e-3,
         "logit MSE " + fmt_err(mse) + " after 2000 steps");
  if (out.pass) {
    out.detail = "MSE " + fmt_err(mse) + " after " +
                 std::to_string(steps) + " steps";
  }
  return out;
}

CheckOutcome check_metric_oracle(bool) {
  CheckOutcome out;
  // Every ranking of a 6-item catalog, every target: compare against direct
  // recomputation from the permutation itself.
  std::vector<int> perm = {1, 2, 3, 4, 5, 6};
  std::size_t cases = 0;
  do {
    std::vector<double> scores(6);
    for (int pos = 0; pos < 6; ++pos) {
      scores[perm[pos] - 1] = 6.0 - pos;  // perm[0] ranked first
    }
    for (int target = 1; target <= 6; ++target) {
      const RankedList ranked = rank_items(scores, target, {}, 6);
      const int expected_rank =
          1 + static_cast<int>(std::find(perm.begin(), perm.end(), target) -
                               perm.begin());
      expect(out, ranked.target_rank == expected_rank, "rank mismatch");
      expect(out, std::equal(perm.begin(), perm.end(), ranked.items.begin()),
             "top-N order mismatch");
      for (int N : {1, 2, 3, 4, 5, 6}) {
        const double nd = ndcg_at(ranked.target_rank, N);
        const double re = recall_at(ranked.target_rank, N);
        const double brute_re = expected_rank <= N ? 1.0 : 0.0;
        const double brute_nd =
            expected_rank <= N ? 1.0 / std::log2(expected_rank + 1.0) : 0.0;
        expect(out, nd == brute_nd, "ndcg mismatch");
        expect(out, re == brute_re, "recall mismatch");
        expect(out, nd <= re, "ndcg exceeded recall");
      }
      expect(out, mrr(ranked.target_rank) == 1.0 / expected_rank,
             "mrr mismatch");
      ++cases;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  expect(out, cases == 720 * 6, "permutation count off");

  // Closed-form spot values.
  expect(out, ndcg_at(1, 5) == 1.0, "ndcg rank 1");
  expect(out, std::abs(ndcg_at(3, 5) - 0.5) <= 1e-12, "ndcg rank 3 != 0.5");
  expect(out, ndcg_at(6, 5) == 0.0, "ndcg out of window");
  expect(out, std::abs(mrr(4) - 0.25) <= 1e-12, "mrr rank 4");

  // Diversity metrics against hand-set categories.
  const InteractionLog log = toy_log();
  RankedList list;
  list.items = {1, 3, 4};
  expect(out,
         std::abs(category_coverage(list, log.categories, log.num_categories,
                                    3) -
                  1.0) <= 1e-12,
         "cc: {0},{1},{2} should cover all 3");
  RankedList same;
  same.items = {1, 6};  // both category {0}
  const auto ild_same = intra_list_distance(same, log.categories, 2);
  expect(out, ild_same && std::abs(*ild_same) <= 1e-12, "ild identical != 0");
  RankedList disjoint;
  disjoint.items = {1, 4};  // {0} vs {2}
  const auto ild_dis = intra_list_distance(disjoint, log.categories, 2);
  expect(out, ild_dis && std::abs(*ild_dis - 1.0) <= 1e-12,
         "ild disjoint != 1");
  return out;
}

CheckOutcome check_pad_truncate(bool) {
  CheckOutcome out;
  const FixedSequence a = pad_truncate({1, 2, 3, 4, 5, 6, 7}, 5);
  expect(out, a.items == std::vector<int>({3, 4, 5, 6, 7}),
         "truncate-from-start violated");
  const FixedSequence b = pad_truncate({1, 2, 3}, 5);
  expect(out, b.items == std::vector<int>({0, 0, 1, 2, 3}), "left-pad violated");
  const FixedSequence c = pad_truncate({}, 3);
  expect(out, c.items == std::vector<int>({0, 0, 0}), "empty input");
  const FixedSequence idem = pad_truncate(a.items, 5);
  expect(out, idem.items == a.items, "pad_truncate not idempotent");
  return out;
}

struct NamedCheck {
  std::string name;
  CheckOutcome (*fn)(bool);
};

CheckOutcome model_grad_det(bool inject) {
  return check_model_gradients(Mode::deterministic, inject);
}
CheckOutcome model_grad_vae(bool inject) {
  return check_model_gradients(Mode::vae, inject);
}
CheckOutcome model_grad_diff(bool inject) {
  return check_model_gradients(Mode::diffusion, inject);
}
CheckOutcome collapse_vae(bool inject) {
  return check_collapse(Mode::vae, inject);
}
CheckOutcome collapse_diff(bool inject) {
  return check_collapse(Mode::diffusion, inject);
}

const std::vector<NamedCheck>& registry() {
  static const std::vector<NamedCheck> checks = {
      {"rng-determinism", check_rng_determinism},
      {"op-gradients", check_op_gradients},
      {"model-gradients-deterministic", model_grad_det},
      {"model-gradients-vae", model_grad_vae},
      {"model-gradients-diffusion", model_grad_diff},
      {"diffusion-roundtrip", check_diffusion_roundtrip},
      {"softmax-contracts", check_softmax_contracts},
      {"collapse-vae", collapse_vae},
      {"collapse-diffusion", collapse_diff},
      {"stochastic-variance", check_stochastic_variance},
      {"theorem1-realizability", check_theorem1_realizability},
      {"metric-oracle", check_metric_oracle},
      {"pad-truncate", check_pad_truncate},
  };
  return checks;
}

}  // namespace

ToyInstance make_toy_instance(Mode mode, int T, std::uint64_t seed) {
  ToyInstance toy;
  toy.log = toy_log();
  toy.split = leave_one_out_split(toy.log, 4);
  ModelConfig cfg;
  cfg.d = 4;
  cfg.n = 4;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.T = T;
  cfg.mode = mode;
  cfg.seed = seed;
  cfg.num_items = toy.log.num_items;
  cfg.dropout = 0.4;
  toy.model = init_model(cfg);
  toy.batch = make_batch(toy.split.train, 0, toy.split.train.size());
  return toy;
}

std::vector<std::string> check_names() {
  std::vector<std::string> names;
  for (const auto& c : registry()) names.push_back(c.name);
  return names;
}

std::vector<CheckResult> run_checks(const std::vector<std::string>& only,
                                    const std::string& inject_failure) {
  if (!inject_failure.empty()) {
    const bool gradient_check =
        inject_failure == "op-gradients" ||
        inject_failure.rfind("model-gradients", 0) == 0;
    if (!gradient_check) {
      throw ConfigError("failure injection supports gradient checks only, not " +
                        inject_failure);
    }
  }
  if (!only.empty()) {
    for (const std::string& name : only) {
      const auto& reg = registry();
      const bool known =
          std::any_of(reg.begin(), reg.end(),
                      [&](const NamedCheck& c) { return c.name == name; });
      if (!known) throw ConfigError("unknown check: " + name);
    }
  }
  std::vector<CheckResult> results;
  for (const auto& check : registry()) {
    if (!only.empty() &&
        std::find(only.begin(), only.end(), check.name) == only.end()) {
      continue;
    }
    const auto start = std::chrono::steady_clock::now();
    CheckResult r;
    r.name = check.name;
    try {
      const CheckOutcome outcome = check.fn(check.name == inject_failure);
      r.pass = outcome.pass;
      r.detail = outcome.detail;
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    results.push_back(std::move(r));
  }
  return results;
}

void write_checks_json(const std::vector<CheckResult>& results,
                       const std::string& path) {
  nlohmann::json checks = nlohmann::json::array();
  bool all = true;
  for (const CheckResult& r : results) {
    checks.push_back({{"name", r.name},
                      {"pass", r.pass},
                      {"detail", r.detail},
                      {"seconds", r.seconds}});
    all = all && r.pass;
  }
  nlohmann::json doc = {{"checks", checks}, {"all_pass", all}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checks report: " + path);
  out << doc.dump(2) << "\n";
}

}  // namespace genatt
