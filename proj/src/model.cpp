#include "genatt/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace genatt {

Mode mode_from_string(const std::string& s) {
  if (s == "deterministic") return Mode::deterministic;
  if (s == "vae") return Mode::vae;
  if (s == "diffusion") return Mode::diffusion;
  throw ConfigError("unknown mode: " + s +
                    " (expected deterministic | vae | diffusion)");
}

std::string mode_to_string(Mode m) {
  switch (m) {
    case Mode::deterministic: return "deterministic";
    case Mode::vae: return "vae";
    case Mode::diffusion: return "diffusion";
  }
  return "?";
}

void ModelConfig::resolve() {
  if (d_h <= 0) d_h = 2 * d;
  if (T <= 0) T = n;
  if (d < 1 || n < 1 || layers < 1 || heads < 1) {
    throw ConfigError("model config: d, n, layers, heads must be positive");
  }
  if (num_items < 1) {
    throw ConfigError("model config: num_items must be set before init");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("model config: dropout must be in [0, 1)");
  }
  if (gamma < 0.0) throw ConfigError("model config: gamma must be >= 0");
}

std::vector<std::pair<std::string, Tensor*>> Model::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("item_table", &params.emb.item_table);
  out.emplace_back("pos_table", &params.emb.pos_table);
  out.emplace_back("gru.wz", &params.gru.wz);
  out.emplace_back("gru.wr", &params.gru.wr);
  out.emplace_back("gru.wh", &params.gru.wh);
  out.emplace_back("gru.uz", &params.gru.uz);
  out.emplace_back("gru.ur", &params.gru.ur);
  out.emplace_back("gru.uh", &params.gru.uh);
  out.emplace_back("gru.bz", &params.gru.bz);
  out.emplace_back("gru.br", &params.gru.br);
  out.emplace_back("gru.bh", &params.gru.bh);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    BlockParams& b = params.blocks[l];
    out.emplace_back(pre + "ln1_gain", &b.ln1_gain);
    out.emplace_back(pre + "ln1_bias", &b.ln1_bias);
    out.emplace_back(pre + "ln2_gain", &b.ln2_gain);
    out.emplace_back(pre + "ln2_bias", &b.ln2_bias);
    out.emplace_back(pre + "ffn_w1", &b.ffn_w1);
    out.emplace_back(pre + "ffn_b1", &b.ffn_b1);
    out.emplace_back(pre + "ffn_w2", &b.ffn_w2);
    out.emplace_back(pre + "ffn_b2", &b.ffn_b2);
  }
  if (config.mode == Mode::vae) {
    out.emplace_back("vae.enc_w1", &params.vae.enc_w1);
    out.emplace_back("vae.enc_b1", &params.vae.enc_b1);
    out.emplace_back("vae.enc_w2", &params.vae.enc_w2);
    out.emplace_back("vae.enc_b2", &params.vae.enc_b2);
    out.emplace_back("vae.dec_shared_w", &params.vae.dec_shared_w);
    out.emplace_back("vae.dec_shared_b", &params.vae.dec_shared_b);
    for (std::size_t i = 0; i < params.vae.dec_head_w.size(); ++i) {
      out.emplace_back("vae.dec_head_w" + std::to_string(i),
                       &params.vae.dec_head_w[i]);
      out.emplace_back("vae.dec_head_b" + std::to_string(i),
                       &params.vae.dec_head_b[i]);
    }
  }
  if (config.mode == Mode::diffusion) {
    out.emplace_back("diff.w1", &params.diff.w1);
    out.emplace_back("diff.b1", &params.diff.b1);
    out.emplace_back("diff.w2", &params.diff.w2);
    out.emplace_back("diff.b2", &params.diff.b2);
  }
  return out;
}

std::vector<Tensor*> Model::param_list() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

Model init_model(const ModelConfig& config_in) {
  Model m;
  m.config = config_in;
  m.config.resolve();
  const ModelConfig& c = m.config;
  RngStream rng(c.seed);

  const double be = 1.0 / std::sqrt(static_cast<double>(c.d));
  m.params.emb.item_table = Tensor::uniform(
      {static_cast<std::size_t>(c.num_items + 1), static_cast<std::size_t>(c.d)},
      -be, be, rng, true);
  // Pad row stays zero.
  for (int j = 0; j < c.d; ++j) (*m.params.emb.item_table.data)[j] = 0.0;
  m.params.emb.pos_table = Tensor::uniform(
      {static_cast<std::size_t>(c.n), static_cast<std::size_t>(c.d)}, -be, be,
      rng, true);
  m.params.gru = init_gru(c.d, c.d_h, rng);

  const double bd = 1.0 / std::sqrt(static_cast<double>(c.d));
  const double b4 = 1.0 / std::sqrt(static_cast<double>(4 * c.d));
  for (int l = 0; l < c.layers; ++l) {
    BlockParams b;
    b.ln1_gain = Tensor::full({static_cast<std::size_t>(c.d)}, 1.0, true);
    b.ln1_bias = Tensor::zeros({static_cast<std::size_t>(c.d)}, true);
    b.ln2_gain = Tensor::full({static_cast<std::size_t>(c.d)}, 1.0, true);
    b.ln2_bias = Tensor::zeros({static_cast<std::size_t>(c.d)}, true);
    b.ffn_w1 = Tensor::uniform(
        {static_cast<std::size_t>(c.d), static_cast<std::size_t>(4 * c.d)}, -bd,
        bd, rng, true);
    b.ffn_b1 = Tensor::zeros({static_cast<std::size_t>(4 * c.d)}, true);
    b.ffn_w2 = Tensor::uniform(
        {static_cast<std::size_t>(4 * c.d), static_cast<std::size_t>(c.d)}, -b4,
        b4, rng, true);
    b.ffn_b2 = Tensor::zeros({static_cast<std::size_t>(c.d)}, true);
    m.params.blocks.push_back(std::move(b));
  }
  if (c.mode == Mode::vae) {
    m.params.vae = init_vae(c.d_h, c.n, c.layers, c.heads, rng);
  }
  if (c.mode == Mode::diffusion) {
    m.params.diff = init_diffusion(c.d_h, c.n, c.layers, c.heads, rng);
  }
  m.schedule = build_schedule(c.T, c.beta_start, c.beta_end);
  m.mask = causal_mask(c.n);
  return m;
}

Batch make_batch(const std::vector<FixedSequence>& rows, std::size_t begin,
                 std::size_t count) {
  if (begin + count > rows.size()) {
    throw DataError("make_batch: range out of bounds");
  }
  Batch b;
  b.size = count;
  b.n = rows.empty() ? 0 : rows[begin].items.size();
  b.ids.reserve(count * b.n);
  for (std::size_t i = begin; i < begin + count; ++i) {
    const FixedSequence& r = rows[i];
    b.ids.insert(b.ids.end(), r.items.begin(), r.items.end());
    b.mask.insert(b.mask.end(), r.mask.begin(), r.mask.end());
    b.pos_targets.insert(b.pos_targets.end(), r.pos_targets.begin(),
                         r.pos_targets.end());
    b.targets.push_back(r.target);
    b.users.push_back(r.user);
  }
  return b;
}

Tensor apply_generated_attention(const Tensor& a, const Tensor& x,
                                 double att_dropout, RngStream* rng,
                                 bool training) {
  if (a.shape.size() != 4 || x.shape.size() != 3 || a.shape[0] != x.shape[0] ||
      a.shape[2] != x.shape[1] || a.shape[3] != x.shape[1]) {
    throw ShapeError("apply_generated_attention: attention " +
                     shape_str(a.shape) + " does not match input " +
                     shape_str(x.shape));
  }
  // Contract: rows are stochastic (non-negative, summing to 1).
  const std::size_t n = a.shape[3];
  const double* pa = a.ptr();
  const std::size_t row_count = a.numel() / n;
  for (std::size_t r = 0; r < row_count; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = pa[r * n + j];
      if (v < 0.0) {
        throw NumericError("apply_generated_attention: negative weight");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw NumericError(
          "apply_generated_attention: row not normalized, sum = " +
          std::to_string(sum));
    }
  }
  Tensor weights = a;
  if (training && att_dropout > 0.0) {
    if (!rng) throw ConfigError("apply_generated_attention: dropout needs rng");
    weights = dropout(a, att_dropout, *rng, true);
  }
  const std::size_t B = x.shape[0], d = x.shape[2];
  const Tensor x4 = reshape(x, {B, 1, n, d});
  const Tensor per_head = matmul(weights, x4);  // B x H x n x d
  return mean_axis(per_head, 1);
}

Tensor transformer_block(const Tensor& x, const Tensor& a, const BlockParams& p,
                         double dropout_rate, RngStream& rng, bool training) {
  const Tensor att =
      apply_generated_attention(a, x, dropout_rate, &rng, training);
  const Tensor y = layer_norm(add(x, dropout(att, dropout_rate, rng, training)),
                              p.ln1_gain, p.ln1_bias);
  const Tensor mid = gelu(add(matmul(y, p.ffn_w1), p.ffn_b1));
  const Tensor ffn = add(matmul(mid, p.ffn_w2), p.ffn_b2);
  return layer_norm(add(y, dropout(ffn, dropout_rate, rng, training)),
                    p.ln2_gain, p.ln2_bias);
}

Tensor score_items(const Tensor& h_last, const Tensor& item_table) {
  const std::size_t num_items = item_table.shape[0] - 1;
  const Tensor items = slice_rows(item_table, 1, num_items);
  return matmul(h_last, transpose_last2(items));
}

GenAttention generate_attention(const Model& m, const Tensor& embedded,
                                const Tensor& h_g, RngStream& rng,
                                bool collapse_sigma) {
  const ModelConfig& c = m.config;
  switch (c.mode) {
    case Mode::deterministic:
      return deterministic_attention(embedded, embedded, &m.mask);
    case Mode::vae: {
      auto [mu, log_var] = vae_encode(h_g, m.params.vae);
      Tensor z;
      if (collapse_sigma) {
        z = mu;
      } else {
        const Tensor eps = Tensor::randn(mu.shape, rng);
        z = reparameterize(mu, log_var, eps);
      }
      GenAttention att = vae_decode(z, m.params.vae, c.layers, c.heads, c.n,
                                    m.mask);
      att.latent.mu = mu;
      att.latent.log_var = log_var;
      att.latent.z = z;
      return att;
    }
    case Mode::diffusion:
      return generate_attention_diffusion(h_g, m.schedule, m.params.diff, rng,
                                          embedded.shape[0], c.layers, c.heads,
                                          c.n, m.mask);
  }
  throw ConfigError("generate_attention: unhandled mode");
}

ForwardOutput forward(const Model& m, const Batch& batch, RngStream& rng,
                      bool training, bool with_scores,
                      const ForwardOverrides* overrides) {
  const ModelConfig& c = m.config;
  if (batch.n != static_cast<std::size_t>(c.n)) {
    throw ShapeError("forward: batch length " + std::to_string(batch.n) +
                     " != configured n " + std::to_string(c.n));
  }
  ForwardOutput out;
  out.embedded = embed_sequence(batch.ids, batch.size, batch.n, m.params.emb);
  out.encoded = encode_sequence(out.embedded, batch.mask, m.params.gru);

  const bool collapse = overrides && overrides->collapse_sigma;
  const Tensor& h_g = overrides && overrides->h_g ? *overrides->h_g
                                                  : out.encoded.last;
  out.attention = generate_attention(m, out.embedded, h_g, rng, collapse);

  // Layer count of the generated stack; the deterministic baseline produces a
  // single stack shared by every block.
  const std::size_t stack_layers = out.attention.normalized.shape[1];
  const std::size_t stack_heads = out.attention.normalized.shape[2];
  const std::size_t B = batch.size, n = batch.n;
  const Tensor flat = reshape(out.attention.normalized,
                              {B, stack_layers, stack_heads * n * n});
  Tensor x = out.embedded;
  for (int l = 0; l < c.layers; ++l) {
    const std::size_t idx =
        std::min<std::size_t>(l, stack_layers - 1);
    const Tensor a_layer =
        reshape(select_step(flat, idx), {B, stack_heads, n, n});
    x = transformer_block(x, a_layer, m.params.blocks[l], c.dropout, rng,
                          training);
  }
  out.hidden = x;
  if (with_scores) {
    out.scores = score_items(select_step(out.hidden, n - 1),
                             m.params.emb.item_table);
  }
  return out;
}

namespace {

void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::ifstream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

std::string config_to_json(const ModelConfig& c) {
  nlohmann::json j = {
      {"d", c.d},           {"n", c.n},
      {"layers", c.layers}, {"heads", c.heads},
      {"d_h", c.d_h},       {"T", c.T},
      {"beta_start", c.beta_start},
      {"beta_end", c.beta_end},
      {"gamma", c.gamma},   {"dropout", c.dropout},
      {"mode", mode_to_string(c.mode)},
      {"seed", c.seed},     {"num_items", c.num_items},
  };
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ModelConfig c;
  c.d = j.at("d");
  c.n = j.at("n");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.d_h = j.at("d_h");
  c.T = j.at("T");
  c.beta_start = j.at("beta_start");
  c.beta_end = j.at("beta_end");
  c.gamma = j.at("gamma");
  c.dropout = j.at("dropout");
  c.mode = mode_from_string(j.at("mode"));
  c.seed = j.at("seed");
  c.num_items = j.at("num_items");
  return c;
}

void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write("GENATT01", 8);
  const std::string cfg = config_to_json(m.config);
  write_u64(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  Model& mm = const_cast<Model&>(m);
  const auto named = mm.named_params();
  write_u64(out, named.size());
  for (const auto& [name, t] : named) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, t->shape.size());
    for (std::size_t e : t->shape) write_u64(out, e);
    out.write(reinterpret_cast<const char*>(t->ptr()),
              static_cast<std::streamsize>(t->numel() * sizeof(double)));
  }
  if (!out) throw DataError("checkpoint write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8] = {};
  in.read(magic, 8);
  if (std::memcmp(magic, "GENATT01", 8) != 0) {
    throw DataError("not a genatt checkpoint: " + path);
  }
  const std::uint64_t cfg_len = read_u64(in);
  std::string cfg(cfg_len, '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  Model m = init_model(config_from_json(cfg));
  const auto named = m.named_params();
  const std::uint64_t count = read_u64(in);
  if (count != named.size()) {
    throw DataError("checkpoint/config mismatch: " + std::to_string(count) +
                    " tensors stored, model has " +
                    std::to_string(named.size()));
  }
  for (const auto& [name, t] : named) {
    const std::uint64_t name_len = read_u64(in);
    std::string stored(name_len, '\0');
    in.read(stored.data(), static_cast<std::streamsize>(name_len));
    if (stored != name) {
      throw DataError("checkpoint/config mismatch: expected tensor `" + name +
                      "`, found `" + stored + "`");
    }
    const std::uint64_t rank = read_u64(in);
    Shape shape(rank);
    for (auto& e : shape) e = read_u64(in);
    if (shape != t->shape) {
      throw DataError("checkpoint/config mismatch: tensor `" + name +
                      "` stored as " + shape_str(shape) + ", model expects " +
                      shape_str(t->shape));
    }
    in.read(reinterpret_cast<char*>(t->ptr()),
            static_cast<std::streamsize>(t->numel() * sizeof(double)));
  }
  if (!in) throw DataError("checkpoint truncated: " + path);
  return m;
}

}  // namespace genatt
