#include "genatt/attention.hpp"

#include <cmath>

namespace genatt {

double NoiseSchedule::beta_at(int t) const {
  if (t < 1 || t > T) {
    throw std::out_of_range("noise schedule: step " + std::to_string(t) +
                            " outside [1, " + std::to_string(T) + "]");
  }
  return beta[t - 1];
}

double NoiseSchedule::alpha_at(int t) const {
  if (t < 1 || t > T) {
    throw std::out_of_range("noise schedule: step " + std::to_string(t) +
                            " outside [1, " + std::to_string(T) + "]");
  }
  return alpha[t - 1];
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("build_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ConfigError("build_schedule: need 0 < beta_start <= beta_end < 1, got " +
                      std::to_string(beta_start) + ", " +
                      std::to_string(beta_end));
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  for (int t = 0; t < T; ++t) {
    s.beta[t] = T == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * t / (T - 1.0);
    s.alpha[t] = 1.0 - s.beta[t];
  }
  return s;
}

VaeParams init_vae(std::size_t d_h, std::size_t n, std::size_t layers,
                   std::size_t heads, RngStream& rng) {
  const double b1 = 1.0 / std::sqrt(static_cast<double>(d_h));
  VaeParams p;
  p.enc_w1 = Tensor::uniform({d_h, d_h}, -b1, b1, rng, true);
  p.enc_b1 = Tensor::zeros({d_h}, true);
  p.enc_w2 = Tensor::uniform({d_h, 2 * d_h}, -b1, b1, rng, true);
  p.enc_b2 = Tensor::zeros({2 * d_h}, true);
  p.dec_shared_w = Tensor::uniform({d_h, d_h}, -b1, b1, rng, true);
  p.dec_shared_b = Tensor::zeros({d_h}, true);
  for (std::size_t i = 0; i < layers * heads; ++i) {
    p.dec_head_w.push_back(Tensor::uniform({d_h, n * n}, -b1, b1, rng, true));
    p.dec_head_b.push_back(Tensor::zeros({n * n}, true));
  }
  return p;
}

DiffusionParams init_diffusion(std::size_t d_h, std::size_t n,
                               std::size_t layers, std::size_t heads,
                               RngStream& rng) {
  const std::size_t flat = layers * heads * n * n;
  const std::size_t in_dim = flat + 2 * d_h;
  const double b_in = 1.0 / std::sqrt(static_cast<double>(in_dim));
  const double b_h = 1.0 / std::sqrt(static_cast<double>(d_h));
  DiffusionParams p;
  p.w1 = Tensor::uniform({in_dim, d_h}, -b_in, b_in, rng, true);
  p.b1 = Tensor::zeros({d_h}, true);
  p.w2 = Tensor::uniform({d_h, flat}, -b_h, b_h, rng, true);
  p.b2 = Tensor::zeros({flat}, true);
  return p;
}

Tensor normalize_attention(const Tensor& logits, const RowMask& mask) {
  return softmax_rows(logits, &mask);
}

GenAttention deterministic_attention(const Tensor& q, const Tensor& k,
                                     const RowMask* mask) {
  if (q.shape.size() != 3 || k.shape.size() != 3) {
    throw ShapeError("deterministic_attention: expected B x n x d inputs, got " +
                     shape_str(q.shape) + " and " + shape_str(k.shape));
  }
  const std::size_t d = q.shape[2];
  if (d == 0) throw ConfigError("deterministic_attention: d must be positive");
  if (k.shape[2] != d) {
    throw ShapeError("deterministic_attention: query dim " + std::to_string(d) +
                     " != key dim " + std::to_string(k.shape[2]));
  }
  const std::size_t B = q.shape[0], n = q.shape[1];
  Tensor scores =
      scalar_mul(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(double(d)));
  GenAttention out;
  out.logits = reshape(scores, {B, 1, 1, n, n});
  out.normalized = softmax_rows(out.logits, mask);
  return out;
}

std::pair<Tensor, Tensor> vae_encode(const Tensor& h_g, const VaeParams& p) {
  const std::size_t d_h = p.enc_w1.shape[0];
  const Tensor hidden = tanh(add(matmul(h_g, p.enc_w1), p.enc_b1));
  const Tensor out = add(matmul(hidden, p.enc_w2), p.enc_b2);
  Tensor mu = slice_last(out, 0, d_h);
  Tensor log_var = clamp(slice_last(out, d_h, d_h), -10.0, 10.0);
  return {mu, log_var};
}

Tensor reparameterize(const Tensor& mu, const Tensor& log_var,
                      const Tensor& eps) {
  if (mu.shape != log_var.shape || mu.shape != eps.shape) {
    throw ShapeError("reparameterize: shapes disagree, " + shape_str(mu.shape) +
                     ", " + shape_str(log_var.shape) + ", " +
                     shape_str(eps.shape));
  }
  const Tensor sigma = exp(scalar_mul(log_var, 0.5));
  return add(mu, mul(sigma, eps.detach()));
}

GenAttention vae_decode(const Tensor& z, const VaeParams& p, std::size_t layers,
                        std::size_t heads, std::size_t n, const RowMask& mask) {
  if (p.dec_head_w.size() != layers * heads) {
    throw ConfigError("vae_decode: decoder configured for " +
                      std::to_string(p.dec_head_w.size()) + " heads, need " +
                      std::to_string(layers * heads));
  }
  if (p.dec_head_w.front().shape[1] != n * n) {
    throw ConfigError("vae_decode: head width " +
                      std::to_string(p.dec_head_w.front().shape[1]) +
                      " != n^2 = " + std::to_string(n * n));
  }
  const std::size_t B = z.shape[0];
  GenAttention out;
  out.latent.h_s = tanh(add(matmul(z, p.dec_shared_w), p.dec_shared_b));
  std::vector<Tensor> head_logits;
  head_logits.reserve(layers * heads);
  for (std::size_t i = 0; i < layers * heads; ++i) {
    head_logits.push_back(
        add(matmul(out.latent.h_s, p.dec_head_w[i]), p.dec_head_b[i]));
  }
  out.logits = reshape(concat_last(head_logits), {B, layers, heads, n, n});
  out.normalized = softmax_rows(out.logits, &mask);
  return out;
}

Tensor diffusion_forward(const Tensor& a0, int t, const Tensor& eps,
                         const NoiseSchedule& sched) {
  const double alpha = sched.alpha_at(t);
  return add(scalar_mul(a0, std::sqrt(alpha)),
             scalar_mul(eps, std::sqrt(1.0 - alpha)));
}

Tensor diffusion_reverse_step(const Tensor& a_t, const Tensor& eps_hat, int t,
                              const NoiseSchedule& sched) {
  const double alpha = sched.alpha_at(t);
  return scalar_mul(sub(a_t, scalar_mul(eps_hat, std::sqrt(1.0 - alpha))),
                    1.0 / std::sqrt(alpha));
}

std::vector<double> sinusoidal_embedding(int t, std::size_t dim) {
  std::vector<double> emb(dim, 0.0);
  for (std::size_t i = 0; 2 * i < dim; ++i) {
    const double freq =
        std::pow(10000.0, -2.0 * static_cast<double>(i) /
                              static_cast<double>(dim));
    emb[2 * i] = std::sin(t * freq);
    if (2 * i + 1 < dim) emb[2 * i + 1] = std::cos(t * freq);
  }
  return emb;
}

Tensor predict_noise_batch(const Tensor& a_t, const Tensor& h_g,
                           const std::vector<int>& t, const DiffusionParams& p) {
  if (a_t.shape.size() != 5) {
    throw ShapeError("predict_noise: expected B x L x H x n x n state, got " +
                     shape_str(a_t.shape));
  }
  const std::size_t B = a_t.shape[0];
  const std::size_t flat = a_t.numel() / B;
  const std::size_t d_h = h_g.shape[1];
  if (t.size() != B) {
    throw ShapeError("predict_noise: " + std::to_string(t.size()) +
                     " timesteps for batch " + std::to_string(B));
  }
  if (p.w1.shape[0] != flat + 2 * d_h) {
    throw ConfigError("predict_noise: predictor expects input width " +
                      std::to_string(p.w1.shape[0]) + ", got " +
                      std::to_string(flat + 2 * d_h));
  }
  Tensor t_emb = Tensor::zeros({B, d_h});
  for (std::size_t b = 0; b < B; ++b) {
    const auto row = sinusoidal_embedding(t[b], d_h);
    std::copy(row.begin(), row.end(), t_emb.ptr() + b * d_h);
  }
  const Tensor input = concat_last({reshape(a_t, {B, flat}), h_g, t_emb});
  const Tensor hidden = tanh(add(matmul(input, p.w1), p.b1));
  const Tensor out = add(matmul(hidden, p.w2), p.b2);
  return reshape(out, a_t.shape);
}

Tensor predict_noise(const Tensor& a_t, const Tensor& h_g, int t,
                     const DiffusionParams& p) {
  return predict_noise_batch(a_t, h_g, std::vector<int>(a_t.shape[0], t), p);
}

GenAttention generate_attention_diffusion(const Tensor& h_g,
                                          const NoiseSchedule& sched,
                                          const DiffusionParams& p,
                                          RngStream& rng, std::size_t batch,
                                          std::size_t layers, std::size_t heads,
                                          std::size_t n, const RowMask& mask) {
  GenAttention out;
  Tensor a = Tensor::randn({batch, layers, heads, n, n}, rng);
  for (int t = sched.T; t >= 2; --t) {
    const Tensor eps_hat = predict_noise(a, h_g, t, p);
    out.predicted_noise.push_back(eps_hat);
    a = diffusion_reverse_step(a, eps_hat, t, sched);
    if (!all_finite(a)) {
      throw NumericError("generate_attention_diffusion: non-finite state at t=" +
                         std::to_string(t));
    }
  }
  const Tensor eps_hat1 = predict_noise(a, h_g, 1, p);
  out.predicted_noise.push_back(eps_hat1);
  const double alpha1 = sched.alpha_at(1);
  out.logits = sub(a, scalar_mul(eps_hat1, std::sqrt(1.0 - alpha1)));
  if (!all_finite(out.logits)) {
    throw NumericError("generate_attention_diffusion: non-finite output at t=1");
  }
  out.normalized = softmax_rows(out.logits, &mask);
  return out;
}

bool collapse_check(const std::function<Tensor(RngStream&)>& generate,
                    std::uint64_t seed_a, std::uint64_t seed_b) {
  RngStream ra(seed_a);
  RngStream rb(seed_b);
  const Tensor a = generate(ra);
  const Tensor b = generate(rb);
  if (a.shape != b.shape) return false;
  return *a.data == *b.data;  // bitwise equality of doubles
}

}  // namespace genatt
