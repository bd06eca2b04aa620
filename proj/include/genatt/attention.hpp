#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "genatt/tensor.hpp"

namespace genatt {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Latent quantities recorded by the VAE generator.
struct LatentState {
  Tensor mu;       // B x d_h
  Tensor log_var;  // B x d_h
  Tensor z;        // B x d_h
  Tensor h_s;      // B x d_h shared decoder state
};

// A stack of generated attention matrices: raw logits plus the causally
// masked, row-stochastic form the model actually applies.
struct GenAttention {
  Tensor logits;      // B x L x H x n x n
  Tensor normalized;  // B x L x H x n x n
  LatentState latent;                  // vae aux
  std::vector<Tensor> predicted_noise;  // diffusion aux, reverse order T..1
};

// T-step linear beta schedule with alpha[t] = 1 - beta[t]; t is 1-based.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;

  double beta_at(int t) const;
  double alpha_at(int t) const;
};

NoiseSchedule build_schedule(int T, double beta_start, double beta_end);

struct VaeParams {
  Tensor enc_w1, enc_b1;  // d_h -> d_h hidden
  Tensor enc_w2, enc_b2;  // d_h -> 2 d_h (mu | log_var)
  Tensor dec_shared_w, dec_shared_b;        // d_h -> d_h shared state
  std::vector<Tensor> dec_head_w;           // per (layer, head): d_h -> n^2
  std::vector<Tensor> dec_head_b;
};

struct DiffusionParams {
  Tensor w1, b1;  // (L*H*n^2 + 2 d_h) -> d_h
  Tensor w2, b2;  // d_h -> L*H*n^2
};

VaeParams init_vae(std::size_t d_h, std::size_t n, std::size_t layers,
                   std::size_t heads, RngStream& rng);
DiffusionParams init_diffusion(std::size_t d_h, std::size_t n,
                               std::size_t layers, std::size_t heads,
                               RngStream& rng);

// Causal mask + row softmax over generated logits [B, L, H, n, n].
Tensor normalize_attention(const Tensor& logits, const RowMask& mask);

// Scaled dot-product baseline: softmax(mask(Q K^T / sqrt(d))) as a
// single-layer single-head stack.
GenAttention deterministic_attention(const Tensor& q, const Tensor& k,
                                     const RowMask* mask);

// mu, log_var = f(h_g): one hidden tanh layer, log_var clamped to [-10, 10].
std::pair<Tensor, Tensor> vae_encode(const Tensor& h_g, const VaeParams& p);

// z = mu + exp(log_var / 2) * eps; gradient flows to mu and log_var only.
Tensor reparameterize(const Tensor& mu, const Tensor& log_var,
                      const Tensor& eps);

// Shared tanh map z -> h_s, then one affine head per (layer, head) projecting
// h_s to n^2 logits; stacked to B x L x H x n x n and normalized.
GenAttention vae_decode(const Tensor& z, const VaeParams& p, std::size_t layers,
                        std::size_t heads, std::size_t n, const RowMask& mask);

// A_t = sqrt(alpha_t) A_0 + sqrt(1 - alpha_t) eps.
Tensor diffusion_forward(const Tensor& a0, int t, const Tensor& eps,
                         const NoiseSchedule& sched);

// eps_hat = f(A_t, h_g, t): flattened state + summary + sinusoidal step
// embedding through a two-layer tanh map back to A_t's shape.
Tensor predict_noise(const Tensor& a_t, const Tensor& h_g, int t,
                     const DiffusionParams& p);
// Same map with one timestep per batch row.
Tensor predict_noise_batch(const Tensor& a_t, const Tensor& h_g,
                           const std::vector<int>& t, const DiffusionParams& p);

// A_{t-1} = (A_t - sqrt(1 - alpha_t) eps_hat) / sqrt(alpha_t).
Tensor diffusion_reverse_step(const Tensor& a_t, const Tensor& eps_hat, int t,
                              const NoiseSchedule& sched);

// Full reverse chain from standard-normal noise; the closing step at t=1 is
// A_gen = A_1 - eps_hat_1 * sqrt(1 - alpha_1), then causal normalization.
GenAttention generate_attention_diffusion(const Tensor& h_g,
                                          const NoiseSchedule& sched,
                                          const DiffusionParams& p,
                                          RngStream& rng, std::size_t batch,
                                          std::size_t layers, std::size_t heads,
                                          std::size_t n, const RowMask& mask);

// True iff two runs of the generator produce bitwise-identical normalized
// attention. Collapse configurations (sigma = 0, or identical seeds for the
// diffusion chain) must yield true; non-degenerate noise must yield false.
bool collapse_check(const std::function<Tensor(RngStream&)>& generate,
                    std::uint64_t seed_a, std::uint64_t seed_b);

// Sinusoidal position/timestep embedding row of the given width.
std::vector<double> sinusoidal_embedding(int t, std::size_t dim);

}  // namespace genatt
