#pragma once

#include <optional>
#include <string>
#include <vector>

#include "genatt/model.hpp"

namespace genatt {

// Mean of -log sigma(pos) and -log(1 - sigma(neg)) over every term at valid
// positions (both terms of a position count toward the mean); probabilities
// clamped to [1e-7, 1 - 1e-7].
Tensor bce_loss(const Tensor& pos_scores, const Tensor& neg_scores,
                const Tensor& valid_mask);

// Mean over the batch of -1/2 sum(1 + log_var - mu^2 - exp(log_var)).
Tensor kl_loss(const Tensor& mu, const Tensor& log_var);

// Mean squared error between drawn and predicted noise.
Tensor diffusion_loss(const Tensor& eps, const Tensor& eps_hat);

Tensor total_loss(const Tensor& rec, const Tensor& gen, double gamma);

struct TrainOptions {
  double lr = 1e-3;
  int batch = 128;
  int max_epochs = 500;
  int patience = 20;
  int eval_avg = 1;
  bool verbose = false;
};

struct EpochStats {
  double rec = 0.0;
  double gen = 0.0;
  double total = 0.0;
  std::size_t batches = 0;
};

struct TrainState {
  int epoch = 0;
  double best_metric = -1.0;
  int patience_left = 0;
  AdamState opt;
  RngStream rng;

  explicit TrainState(std::uint64_t seed) : rng(seed) {}
};

struct TrainLogRow {
  int epoch;
  double rec_loss;
  double gen_loss;
  double total_loss;
  double val_ndcg20;
  double seconds;
};

struct FitResult {
  std::vector<TrainLogRow> log;
  double best_metric = -1.0;  // any first evaluation counts as an improvement
  int best_epoch = 0;
};

// Computes the joint training loss for one batch (recommendation BCE plus the
// mode's generative term). Exposed for gradient checking.
struct BatchLoss {
  Tensor rec;
  Tensor gen;
  Tensor total;
};
BatchLoss training_loss(const Model& m, const Batch& batch,
                        const InteractionLog& log, RngStream& rng);

// One pass over the training rows: shuffle, forward, backprop, Adam update.
// Aborts with NumericError naming the batch on a non-finite loss.
EpochStats train_epoch(Model& m, const std::vector<FixedSequence>& train_rows,
                       const InteractionLog& log, TrainState& state,
                       const TrainOptions& opts);

// Full loop with NDCG@20 validation early stopping; the model is left holding
// the best-validation parameters.
FitResult fit(Model& m, const SplitSet& split, const InteractionLog& log,
              const TrainOptions& opts);

void write_train_log(const std::vector<TrainLogRow>& rows,
                     const std::string& path);

}  // namespace genatt
