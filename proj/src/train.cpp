#include "genatt/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "genatt/metrics.hpp"

namespace genatt {

Tensor bce_loss(const Tensor& pos_scores, const Tensor& neg_scores,
                const Tensor& valid_mask) {
  if (pos_scores.shape != neg_scores.shape ||
      pos_scores.shape != valid_mask.shape) {
    throw ShapeError("bce_loss: shapes disagree, " +
                     shape_str(pos_scores.shape) + ", " +
                     shape_str(neg_scores.shape) + ", " +
                     shape_str(valid_mask.shape));
  }
  double valid = 0.0;
  for (double v : *valid_mask.data) valid += v;
  if (valid <= 0.0) throw DataError("bce_loss: no valid positions in batch");

  const double lo = 1e-7, hi = 1.0 - 1e-7;
  const Tensor p_pos = clamp(sigmoid(pos_scores), lo, hi);
  const Tensor p_neg_c = clamp(sigmoid(scalar_mul(neg_scores, -1.0)), lo, hi);
  const Tensor terms =
      scalar_mul(add(log(p_pos), log(p_neg_c)), -1.0);
  const Tensor masked = mul(terms, valid_mask.detach());
  // Mean over every term: each valid position contributes a positive and a
  // negative term.
  return scalar_mul(sum_all(masked), 1.0 / (2.0 * valid));
}

Tensor kl_loss(const Tensor& mu, const Tensor& log_var) {
  if (mu.shape != log_var.shape) {
    throw ShapeError("kl_loss: shapes disagree, " + shape_str(mu.shape) +
                     " and " + shape_str(log_var.shape));
  }
  const std::size_t batch = mu.shape.size() >= 2 ? mu.shape[0] : 1;
  // -1/2 sum(1 + log_var - mu^2 - exp(log_var)), averaged over the batch.
  const Tensor inner = sub(sub(scalar_add(log_var, 1.0), mul(mu, mu)),
                           exp(log_var));
  return scalar_mul(sum_all(inner), -0.5 / static_cast<double>(batch));
}

Tensor diffusion_loss(const Tensor& eps, const Tensor& eps_hat) {
  if (eps.shape != eps_hat.shape) {
    throw ShapeError("diffusion_loss: shapes disagree, " +
                     shape_str(eps.shape) + " and " + shape_str(eps_hat.shape));
  }
  const Tensor diff = sub(eps_hat, eps.detach());
  return mean_all(mul(diff, diff));
}

Tensor total_loss(const Tensor& rec, const Tensor& gen, double gamma) {
  if (gamma < 0.0) throw ConfigError("total_loss: gamma must be >= 0");
  return add(rec, scalar_mul(gen, gamma));
}

BatchLoss training_loss(const Model& m, const Batch& batch,
                        const InteractionLog& log, RngStream& rng) {
  const ModelConfig& c = m.config;
  const ForwardOutput out =
      forward(m, batch, rng, /*training=*/true, /*with_scores=*/false);

  // Per-position positive and sampled negative scores.
  std::vector<int> neg_ids(batch.pos_targets.size(), 0);
  Tensor valid = Tensor::zeros({batch.size, batch.n});
  for (std::size_t b = 0; b < batch.size; ++b) {
    std::unordered_set<int> owned;
    if (batch.users[b] >= 0) {
      const auto& hist = log.users[batch.users[b]];
      owned.insert(hist.begin(), hist.end());
    } else {
      for (std::size_t p = 0; p < batch.n; ++p) {
        const int it = batch.ids[b * batch.n + p];
        if (it != 0) owned.insert(it);
      }
    }
    for (std::size_t p = 0; p < batch.n; ++p) {
      const int target = batch.pos_targets[b * batch.n + p];
      if (target == 0) continue;
      (*valid.data)[b * batch.n + p] = 1.0;
      neg_ids[b * batch.n + p] =
          negative_sample(target, owned, c.num_items, rng);
    }
  }
  const Tensor pos_emb = embedding_lookup(m.params.emb.item_table,
                                          batch.pos_targets,
                                          {batch.size, batch.n});
  const Tensor neg_emb = embedding_lookup(m.params.emb.item_table, neg_ids,
                                          {batch.size, batch.n});
  const Tensor pos_scores = sum_axis(mul(out.hidden, pos_emb), 2);
  const Tensor neg_scores = sum_axis(mul(out.hidden, neg_emb), 2);

  BatchLoss loss;
  loss.rec = bce_loss(pos_scores, neg_scores, valid);
  switch (c.mode) {
    case Mode::deterministic:
      loss.gen = Tensor::scalar(0.0);
      break;
    case Mode::vae:
      loss.gen = kl_loss(out.attention.latent.mu, out.attention.latent.log_var);
      break;
    case Mode::diffusion: {
      // Corrupt a zero-initialized state at one uniform timestep per row and
      // regress the predictor onto the drawn noise.
      const std::size_t B = batch.size;
      const std::size_t L = c.layers, H = c.heads, n = batch.n;
      std::vector<int> ts(B);
      Tensor coeff = Tensor::zeros({B, 1, 1, 1, 1});
      for (std::size_t b = 0; b < B; ++b) {
        ts[b] = 1 + static_cast<int>(rng.uniform_int(c.T));
        (*coeff.data)[b] = std::sqrt(1.0 - m.schedule.alpha_at(ts[b]));
      }
      const Tensor eps = Tensor::randn({B, L, H, n, n}, rng);
      const Tensor a_t = mul(coeff, eps);  // sqrt(alpha_t) * 0 + sqrt(1-a) eps
      const Tensor eps_hat =
          predict_noise_batch(a_t, out.encoded.last, ts, m.params.diff);
      loss.gen = diffusion_loss(eps, eps_hat);
      break;
    }
  }
  loss.total = total_loss(loss.rec, loss.gen, c.gamma);
  return loss;
}

EpochStats train_epoch(Model& m, const std::vector<FixedSequence>& train_rows,
                       const InteractionLog& log, TrainState& state,
                       const TrainOptions& opts) {
  if (train_rows.empty()) throw DataError("train_epoch: no training rows");
  std::vector<std::size_t> order(train_rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[state.rng.uniform_int(i)]);
  }

  const auto params = m.param_list();
  const std::size_t pad_row_width = m.config.d;
  EpochStats stats;
  const std::size_t bs = opts.batch > 0 ? opts.batch : train_rows.size();
  for (std::size_t begin = 0; begin < order.size(); begin += bs) {
    const std::size_t count = std::min(bs, order.size() - begin);
    std::vector<FixedSequence> rows;
    rows.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      rows.push_back(train_rows[order[begin + i]]);
    }
    const Batch batch = make_batch(rows, 0, count);
    zero_grads(params);
    const BatchLoss loss = training_loss(m, batch, log, state.rng);
    const double rec = loss.rec.value();
    const double gen = loss.gen.value();
    const double total = loss.total.value();
    if (!std::isfinite(total)) {
      throw NumericError("train_epoch: non-finite loss at batch " +
                         std::to_string(stats.batches) + " (rec=" +
                         std::to_string(rec) + ", gen=" + std::to_string(gen) +
                         ")");
    }
    backward(loss.total);
    // The pad embedding row is frozen at zero.
    for (std::size_t j = 0; j < pad_row_width; ++j) {
      (*m.params.emb.item_table.grad)[j] = 0.0;
    }
    adam_step(params, state.opt, opts.lr);
    for (std::size_t j = 0; j < pad_row_width; ++j) {
      (*m.params.emb.item_table.data)[j] = 0.0;
    }
    stats.rec += rec;
    stats.gen += gen;
    stats.total += total;
    ++stats.batches;
  }
  stats.rec /= static_cast<double>(stats.batches);
  stats.gen /= static_cast<double>(stats.batches);
  stats.total /= static_cast<double>(stats.batches);
  return stats;
}

FitResult fit(Model& m, const SplitSet& split, const InteractionLog& log,
              const TrainOptions& opts) {
  TrainState state(m.config.seed + 1);
  state.patience_left = opts.patience;
  FitResult result;

  std::vector<std::vector<double>> best_values;
  const auto params = m.param_list();
  auto snapshot = [&]() {
    best_values.clear();
    for (const Tensor* p : params) best_values.push_back(*p->data);
  };
  auto restore = [&]() {
    for (std::size_t i = 0; i < params.size(); ++i) {
      *params[i]->data = best_values[i];
    }
  };
  snapshot();

  EvalOptions eval_opts;
  eval_opts.seed = m.config.seed + 2;
  for (int epoch = 1; epoch <= opts.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    state.epoch = epoch;
    const EpochStats stats = train_epoch(m, split.train, log, state, opts);
    const double ndcg = validation_ndcg(m, split.valid, log, 20, eval_opts);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    result.log.push_back(
        {epoch, stats.rec, stats.gen, stats.total, ndcg, seconds});
    if (opts.verbose) {
      std::printf("epoch %d rec %.6f gen %.6f total %.6f ndcg@20 %.6f (%.2fs)\n",
                  epoch, stats.rec, stats.gen, stats.total, ndcg, seconds);
    }
    if (ndcg > result.best_metric) {
      result.best_metric = ndcg;
      result.best_epoch = epoch;
      state.best_metric = ndcg;
      state.patience_left = opts.patience;
      snapshot();
    } else {
      --state.patience_left;
      if (state.patience_left <= 0) break;
    }
  }
  restore();
  return result;
}

void write_train_log(const std::vector<TrainLogRow>& rows,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write training log: " + path);
  out << "epoch,rec_loss,gen_loss,total_loss,val_ndcg20,seconds\n";
  char buf[256];
  for (const TrainLogRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.3f\n",
                  r.epoch, r.rec_loss, r.gen_loss, r.total_loss, r.val_ndcg20,
                  r.seconds);
    out << buf;
  }
}

}  // namespace genatt
