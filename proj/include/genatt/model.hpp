#pragma once

#include <string>
#include <utility>
#include <vector>

#include "genatt/attention.hpp"
#include "genatt/data.hpp"
#include "genatt/encoder.hpp"
#include "genatt/tensor.hpp"

namespace genatt {

enum class Mode { deterministic, vae, diffusion };

Mode mode_from_string(const std::string& s);
std::string mode_to_string(Mode m);

struct ModelConfig {
  int d = 64;
  int n = 50;
  int layers = 1;
  int heads = 1;
  int d_h = 0;  // 0 -> 2 * d
  int T = 0;    // 0 -> n
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double gamma = 1.0;
  double dropout = 0.4;
  Mode mode = Mode::vae;
  std::uint64_t seed = 1;
  int num_items = 0;

  // Fills derived defaults (d_h = 2d, T = n) and validates.
  void resolve();
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
  Tensor ffn_w1, ffn_b1;  // d -> 4d
  Tensor ffn_w2, ffn_b2;  // 4d -> d
};

struct ModelParams {
  EmbeddingTables emb;
  GruParams gru;
  std::vector<BlockParams> blocks;
  VaeParams vae;    // populated in vae mode
  DiffusionParams diff;  // populated in diffusion mode
};

struct Model {
  ModelConfig config;
  ModelParams params;
  NoiseSchedule schedule;
  RowMask mask;  // causal, n x n

  // Stable (name, tensor) listing used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<Tensor*> param_list();
};

Model init_model(const ModelConfig& config);

// A batch of fixed sequences flattened for the tensor ops.
struct Batch {
  std::size_t size = 0;
  std::size_t n = 0;
  std::vector<int> ids;          // size * n
  std::vector<std::uint8_t> mask;
  std::vector<int> pos_targets;  // size * n, 0 = unsupervised position
  std::vector<int> targets;      // per-row held-out target (eval rows)
  std::vector<int> users;
};

Batch make_batch(const std::vector<FixedSequence>& rows, std::size_t begin,
                 std::size_t count);

struct ForwardOverrides {
  bool collapse_sigma = false;   // vae: use z = mu
  const Tensor* h_g = nullptr;   // condition generation on a fixed summary
};

struct ForwardOutput {
  Tensor embedded;        // B x n x d
  EncodedSequence encoded;  // S and h_g
  GenAttention attention;
  Tensor hidden;  // B x n x d after all blocks
  Tensor scores;  // B x num_items, final-position scores (eval path)
};

// Head-averaged application O = mean_h(A_h X) with no value projection.
// Validates that `a` is row-stochastic before (optionally) applying weight
// dropout.
Tensor apply_generated_attention(const Tensor& a, const Tensor& x,
                                 double att_dropout = 0.0,
                                 RngStream* rng = nullptr,
                                 bool training = false);

Tensor transformer_block(const Tensor& x, const Tensor& a, const BlockParams& p,
                         double dropout_rate, RngStream& rng, bool training);

// Final-position dot products against item rows 1..num_items.
Tensor score_items(const Tensor& h_last, const Tensor& item_table);

GenAttention generate_attention(const Model& m, const Tensor& embedded,
                                const Tensor& h_g, RngStream& rng,
                                bool collapse_sigma = false);

// embed -> encode -> generate attention -> blocks; computes final-position
// scores when `with_scores` is set.
ForwardOutput forward(const Model& m, const Batch& batch, RngStream& rng,
                      bool training, bool with_scores = true,
                      const ForwardOverrides* overrides = nullptr);

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

std::string config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const std::string& text);

}  // namespace genatt
