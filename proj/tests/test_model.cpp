#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "genatt/checks.hpp"
#include "genatt/grad_check.hpp"
#include "genatt/train.hpp"

using namespace genatt;
namespace fs = std::filesystem;

namespace {

Tensor identity_attention(std::size_t B, std::size_t H, std::size_t n) {
  Tensor a = Tensor::zeros({B, H, n, n});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        (*a.data)[((b * H + h) * n + i) * n + i] = 1.0;
      }
    }
  }
  return a;
}

Tensor causal_uniform_attention(std::size_t B, std::size_t n) {
  Tensor a = Tensor::zeros({B, 1, n, n});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        (*a.data)[(b * n + i) * n + j] = 1.0 / (i + 1);
      }
    }
  }
  return a;
}

}  // namespace

TEST_CASE("apply_generated_attention: identity head returns the input") {
  RngStream rng(1);
  const Tensor x = Tensor::randn({2, 4, 3}, rng);
  const Tensor out = apply_generated_attention(identity_attention(2, 1, 4), x);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK((*out.data)[i] == doctest::Approx((*x.data)[i]).epsilon(1e-12));
  }
}

TEST_CASE("apply_generated_attention: causal uniform is the prefix mean") {
  RngStream rng(2);
  const std::size_t B = 2, n = 5, d = 3;
  const Tensor x = Tensor::randn({B, n, d}, rng);
  const Tensor out = apply_generated_attention(causal_uniform_attention(B, n), x);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t q = 0; q <= i; ++q) {
          mean += (*x.data)[(b * n + q) * d + j];
        }
        mean /= (i + 1);
        CHECK((*out.data)[(b * n + i) * d + j] ==
              doctest::Approx(mean).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("apply_generated_attention: head outputs are averaged") {
  RngStream rng(3);
  const std::size_t B = 1, n = 4, d = 3;
  const Tensor x = Tensor::randn({B, n, d}, rng);
  Tensor two_heads = Tensor::zeros({B, 2, n, n});
  // Head 0: causal uniform. Head 1: identity.
  const Tensor uni = causal_uniform_attention(B, n);
  const Tensor eye = identity_attention(B, 1, n);
  std::copy(uni.data->begin(), uni.data->end(), two_heads.data->begin());
  std::copy(eye.data->begin(), eye.data->end(),
            two_heads.data->begin() + n * n);
  const Tensor out = apply_generated_attention(two_heads, x);
  const Tensor half = apply_generated_attention(uni, x);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double expect = 0.5 * ((*half.data)[i] + (*x.data)[i]);
    CHECK((*out.data)[i] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("apply_generated_attention rejects unnormalized weights") {
  RngStream rng(4);
  const Tensor x = Tensor::randn({1, 3, 2}, rng);
  Tensor bad = identity_attention(1, 1, 3);
  (*bad.data)[0] = 0.7;  // row 0 sums to 0.7
  CHECK_THROWS_AS(apply_generated_attention(bad, x), NumericError);
  Tensor negative = causal_uniform_attention(1, 3);
  (*negative.data)[3] = -0.5;
  (*negative.data)[4] = 1.5;
  CHECK_THROWS_AS(apply_generated_attention(negative, x), NumericError);
}

TEST_CASE("transformer_block: zero FFN + identity attention vs composed reference") {
  RngStream rng(5);
  const std::size_t B = 2, n = 3, d = 4;
  const Tensor x = Tensor::randn({B, n, d}, rng);
  BlockParams p;
  p.ln1_gain = Tensor::full({d}, 1.0, true);
  p.ln1_bias = Tensor::zeros({d}, true);
  p.ln2_gain = Tensor::full({d}, 1.0, true);
  p.ln2_bias = Tensor::zeros({d}, true);
  p.ffn_w1 = Tensor::zeros({d, 4 * d}, true);
  p.ffn_b1 = Tensor::zeros({4 * d}, true);
  p.ffn_w2 = Tensor::zeros({4 * d, d}, true);
  p.ffn_b2 = Tensor::zeros({d}, true);
  RngStream drop(1);
  const Tensor out = transformer_block(x, identity_attention(B, 1, n), p, 0.0,
                                       drop, false);
  // Composed reference: ln(ln(2x) + 0).
  const Tensor ref = layer_norm(layer_norm(scalar_mul(x, 2.0), p.ln1_gain,
                                           p.ln1_bias),
                                p.ln2_gain, p.ln2_bias);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    CHECK((*out.data)[i] == doctest::Approx((*ref.data)[i]).epsilon(1e-12));
  }
  CHECK(out.shape == x.shape);
}

TEST_CASE("transformer_block: eval mode is dropout-free and deterministic") {
  ToyInstance toy = make_toy_instance(Mode::deterministic);
  NoGradGuard no_grad;
  RngStream r1(10), r2(999);  // different streams must not matter at eval
  const ForwardOutput a = forward(toy.model, toy.batch, r1, false);
  const ForwardOutput b = forward(toy.model, toy.batch, r2, false);
  CHECK(*a.hidden.data == *b.hidden.data);
  CHECK(*a.scores.data == *b.scores.data);
}

TEST_CASE("forward: deterministic mode gives identical scores across calls") {
  ToyInstance toy = make_toy_instance(Mode::deterministic);
  NoGradGuard no_grad;
  RngStream r1(1), r2(2);
  const ForwardOutput a = forward(toy.model, toy.batch, r1, false);
  const ForwardOutput b = forward(toy.model, toy.batch, r2, false);
  CHECK(*a.scores.data == *b.scores.data);
}

TEST_CASE("forward: vae mode with fresh noise changes the scores") {
  ToyInstance toy = make_toy_instance(Mode::vae);
  NoGradGuard no_grad;
  RngStream r1(1), r2(2);
  const ForwardOutput a = forward(toy.model, toy.batch, r1, false);
  const ForwardOutput b = forward(toy.model, toy.batch, r2, false);
  CHECK(*a.scores.data != *b.scores.data);
}

TEST_CASE("forward: collapse override makes vae behave deterministically") {
  ToyInstance toy = make_toy_instance(Mode::vae);
  NoGradGuard no_grad;
  ForwardOverrides collapse;
  collapse.collapse_sigma = true;
  RngStream r1(1), r2(2);
  const ForwardOutput a = forward(toy.model, toy.batch, r1, false, true,
                                  &collapse);
  const ForwardOutput b = forward(toy.model, toy.batch, r2, false, true,
                                  &collapse);
  CHECK(*a.scores.data == *b.scores.data);
}

TEST_CASE("forward: score shape excludes the pad item") {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.n = 4;
  cfg.mode = Mode::deterministic;
  cfg.num_items = 10;
  cfg.seed = 3;
  Model m = init_model(cfg);
  std::vector<FixedSequence> rows(2);
  for (auto& r : rows) {
    r = pad_truncate({1, 2, 3}, 4);
    r.target = 4;
    r.user = 0;
  }
  const Batch batch = make_batch(rows, 0, 2);
  NoGradGuard no_grad;
  RngStream rng(1);
  const ForwardOutput out = forward(m, batch, rng, false);
  CHECK(out.scores.shape == Shape{2, 10});
}

TEST_CASE("score_items: self-similarity, orthogonality, loop oracle") {
  RngStream rng(6);
  Tensor table = Tensor::randn({5, 3}, rng, true);
  for (std::size_t j = 0; j < 3; ++j) (*table.data)[j] = 0.0;

  // h equal to item 2's embedding scores item 2 with its squared norm.
  Tensor h = Tensor::zeros({1, 3});
  double norm2 = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    const double v = (*table.data)[2 * 3 + j];
    (*h.data)[j] = v;
    norm2 += v * v;
  }
  const Tensor s = score_items(h, table);
  CHECK(s.shape == Shape{1, 4});
  CHECK((*s.data)[1] == doctest::Approx(norm2).epsilon(1e-12));

  const Tensor zero_scores = score_items(Tensor::zeros({2, 3}), table);
  for (double v : *zero_scores.data) CHECK(v == 0.0);

  const Tensor hr = Tensor::randn({2, 3}, rng);
  const Tensor sr = score_items(hr, table);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t it = 1; it <= 4; ++it) {
      double dot = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        dot += (*hr.data)[b * 3 + j] * (*table.data)[it * 3 + j];
      }
      CHECK((*sr.data)[b * 4 + it - 1] == doctest::Approx(dot).epsilon(1e-12));
    }
  }
}

TEST_CASE("checkpoint: bit-exact round trip") {
  ToyInstance toy = make_toy_instance(Mode::vae);
  const auto path = (fs::temp_directory_path() / "genatt_ckpt.bin").string();
  save_checkpoint(toy.model, path);
  Model loaded = load_checkpoint(path);
  const auto a = toy.model.named_params();
  const auto b = loaded.named_params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(*a[i].second->data == *b[i].second->data);  // bitwise
  }
  CHECK(config_to_json(loaded.config) == config_to_json(toy.model.config));
}

TEST_CASE("checkpoint: schema mismatch is detected") {
  ToyInstance toy = make_toy_instance(Mode::vae);
  const auto path = (fs::temp_directory_path() / "genatt_ckpt2.bin").string();
  save_checkpoint(toy.model, path);
  // Truncate the file to force a mismatch.
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  out.close();
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt"), DataError);
}

TEST_CASE("causality: deterministic mode is end-to-end exact") {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.n = 6;
  cfg.layers = 2;
  cfg.mode = Mode::deterministic;
  cfg.num_items = 12;
  cfg.seed = 5;
  cfg.dropout = 0.0;
  Model m = init_model(cfg);

  std::vector<FixedSequence> rows(1);
  rows[0] = pad_truncate({1, 2, 3, 4, 5, 6}, 6);
  rows[0].user = 0;
  const Batch base = make_batch(rows, 0, 1);

  std::vector<FixedSequence> rows2(1);
  rows2[0] = pad_truncate({1, 2, 3, 9, 10, 11}, 6);  // suffix perturbed
  rows2[0].user = 0;
  const Batch perturbed = make_batch(rows2, 0, 1);

  NoGradGuard no_grad;
  RngStream r1(1), r2(1);
  const ForwardOutput a = forward(m, base, r1, false);
  const ForwardOutput b = forward(m, perturbed, r2, false);
  const std::size_t d = cfg.d;
  for (std::size_t i = 0; i < 3; ++i) {  // positions before the perturbation
    for (std::size_t j = 0; j < d; ++j) {
      CHECK((*a.hidden.data)[i * d + j] == (*b.hidden.data)[i * d + j]);
    }
  }
  // And the prefix positions' item scores, via the shared prediction head.
  const Tensor ha = select_step(a.hidden, 2);
  const Tensor hb = select_step(b.hidden, 2);
  const Tensor sa = score_items(ha, m.params.emb.item_table);
  const Tensor sb = score_items(hb, m.params.emb.item_table);
  CHECK(*sa.data == *sb.data);
}

TEST_CASE("causality: generative modes are exact given fixed conditioning") {
  for (Mode mode : {Mode::vae, Mode::diffusion}) {
    ModelConfig cfg;
    cfg.d = 4;
    cfg.n = 6;
    cfg.T = 4;
    cfg.mode = mode;
    cfg.num_items = 12;
    cfg.seed = 5;
    cfg.dropout = 0.0;
    Model m = init_model(cfg);

    std::vector<FixedSequence> rows(1);
    rows[0] = pad_truncate({1, 2, 3, 4, 5, 6}, 6);
    rows[0].user = 0;
    std::vector<FixedSequence> rows2(1);
    rows2[0] = pad_truncate({1, 2, 3, 9, 10, 11}, 6);
    rows2[0].user = 0;

    NoGradGuard no_grad;
    RngStream r1(1);
    const ForwardOutput a = forward(m, make_batch(rows, 0, 1), r1, false);
    // Conditioning (h_g and generator noise) frozen from the base run: the
    // only remaining path from the suffix into earlier positions would be the
    // causal mask, which must block it exactly.
    const Tensor h_g = a.encoded.last.detach();
    ForwardOverrides ov;
    ov.h_g = &h_g;
    RngStream r2(1);
    const ForwardOutput b =
        forward(m, make_batch(rows2, 0, 1), r2, false, true, &ov);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK((*a.hidden.data)[i * 4 + j] == (*b.hidden.data)[i * 4 + j]);
      }
    }
  }
}

TEST_CASE("full-model gradient check passes for all three modes") {
  for (Mode mode : {Mode::deterministic, Mode::vae, Mode::diffusion}) {
    ToyInstance toy = make_toy_instance(mode);
    const auto params = toy.model.param_list();
    const double err = grad_check(
        [&] {
          RngStream rng(404);
          return training_loss(toy.model, toy.batch, toy.log, rng).total;
        },
        params);
    INFO(mode_to_string(mode));
    CHECK(err < 1e-3);
  }
}

TEST_CASE("multi-layer multi-head stacks: shapes and gradients") {
  for (Mode mode : {Mode::vae, Mode::diffusion}) {
    InteractionLog log;
    log.num_items = 8;
    log.item_keys = {"", "i1", "i2", "i3", "i4", "i5", "i6", "i7", "i8"};
    log.user_keys = {"u1", "u2"};
    log.users = {{1, 2, 3, 4, 5}, {2, 4, 6, 8, 3}};
    log.categories.assign(9, {});
    const SplitSet split = leave_one_out_split(log, 4);

    ModelConfig cfg;
    cfg.d = 4;
    cfg.n = 4;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.T = 2;
    cfg.mode = mode;
    cfg.seed = 23;
    cfg.num_items = log.num_items;
    Model m = init_model(cfg);
    const Batch batch = make_batch(split.train, 0, split.train.size());

    RngStream rng(3);
    const ForwardOutput out = forward(m, batch, rng, false);
    CHECK(out.attention.normalized.shape == Shape{2, 2, 2, 4, 4});
    CHECK(out.hidden.shape == Shape{2, 4, 4});

    const auto params = m.param_list();
    const double err = grad_check(
        [&] {
          RngStream grad_rng(777);
          return training_loss(m, batch, log, grad_rng).total;
        },
        params);
    INFO(mode_to_string(mode));
    CHECK(err < 1e-3);
  }
}

TEST_CASE("model config resolves derived defaults") {
  ModelConfig cfg;
  cfg.d = 32;
  cfg.n = 50;
  cfg.num_items = 10;
  cfg.resolve();
  CHECK(cfg.d_h == 64);
  CHECK(cfg.T == 50);
  ModelConfig bad;
  bad.num_items = 0;
  CHECK_THROWS_AS(bad.resolve(), ConfigError);
}
