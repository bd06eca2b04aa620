#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "genatt/model.hpp"

namespace genatt {

struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Top-N items by descending score (ties broken by ascending item id) plus the
// 1-based rank of the held-out target in the full catalog ranking.
struct RankedList {
  int user = -1;
  std::vector<int> items;
  int target_rank = 0;
};

// Full-catalog ranking; excluded items get a -inf surrogate. scores[j] is the
// score of item j+1. Throws ProtocolError if the target itself is excluded.
RankedList rank_items(const std::vector<double>& scores, int target,
                      const std::vector<int>& exclusions, int top_n,
                      int user = -1);

double ndcg_at(int target_rank, int N);
double recall_at(int target_rank, int N);
double mrr(int target_rank);

// |union of categories of the top-N items| / num_categories.
double category_coverage(const RankedList& list,
                         const std::vector<std::vector<int>>& categories,
                         int num_categories, int N);

// Mean pairwise (1 - cosine) between binary category vectors of the top-N
// items; items without categories are unusable, < 2 usable items -> nullopt.
std::optional<double> intra_list_distance(
    const RankedList& list, const std::vector<std::vector<int>>& categories,
    int N);

struct MetricTable {
  // Keys like "ndcg@10", "recall@5", "mrr", "cc@20", "ild@10".
  std::map<std::string, double> values;

  double at(const std::string& key) const;
};

struct EvalOptions {
  std::vector<int> cutoffs = {5, 10, 20};
  int top_n = 20;
  bool exclude_input_items = true;
  int avg_count = 1;          // stochastic passes averaged per user
  std::uint64_t seed = 1;
  int batch = 256;
};

// Scores every row with the callback and aggregates per-user metrics.
MetricTable evaluate_scorer(
    const std::function<std::vector<double>(const FixedSequence&)>& scorer,
    const std::vector<FixedSequence>& rows, const InteractionLog& log,
    const EvalOptions& opts);

// Model evaluation: dropout-free forward passes, scores averaged over
// opts.avg_count seeded passes.
MetricTable evaluate(const Model& m, const std::vector<FixedSequence>& rows,
                     const InteractionLog& log, const EvalOptions& opts);

// Mean NDCG@N only (the early-stopping signal).
double validation_ndcg(const Model& m, const std::vector<FixedSequence>& rows,
                       const InteractionLog& log, int N,
                       const EvalOptions& opts);

// Model scores for a batch of rows, averaged over opts.avg_count passes.
std::vector<std::vector<double>> model_scores(
    const Model& m, const std::vector<FixedSequence>& rows,
    const EvalOptions& opts);

// Baselines for comparative checks.
std::vector<double> popularity_scores(const InteractionLog& log);
std::vector<double> random_scores(int num_items, RngStream& rng);

void write_metrics_csv(const MetricTable& table, const std::string& path);
void write_metrics_json(const MetricTable& table, const std::string& path);

}  // namespace genatt
