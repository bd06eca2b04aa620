#include "genatt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "json.hpp"

namespace genatt {

namespace {
constexpr double kNegInf = -1e300;
}

RankedList rank_items(const std::vector<double>& scores, int target,
                      const std::vector<int>& exclusions, int top_n,
                      int user) {
  const int num_items = static_cast<int>(scores.size());
  if (target < 1 || target > num_items) {
    throw ProtocolError("rank_items: target " + std::to_string(target) +
                        " outside catalog of " + std::to_string(num_items));
  }
  std::vector<double> s = scores;
  for (int ex : exclusions) {
    if (ex == target) {
      throw ProtocolError("rank_items: target " + std::to_string(target) +
                          " is excluded from the candidate set");
    }
    if (ex >= 1 && ex <= num_items) s[ex - 1] = kNegInf;
  }
  const double target_score = s[target - 1];
  int rank = 1;
  for (int j = 0; j < num_items; ++j) {
    const int item = j + 1;
    if (item == target) continue;
    if (s[j] > target_score || (s[j] == target_score && item < target)) ++rank;
  }
  std::vector<int> order(num_items);
  std::iota(order.begin(), order.end(), 1);
  const int keep = std::min(top_n, num_items);
  std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                    [&](int a, int b) {
                      if (s[a - 1] != s[b - 1]) return s[a - 1] > s[b - 1];
                      return a < b;
                    });
  RankedList out;
  out.user = user;
  out.items.assign(order.begin(), order.begin() + keep);
  out.target_rank = rank;
  return out;
}

double ndcg_at(int target_rank, int N) {
  if (target_rank < 1) throw ProtocolError("ndcg_at: rank must be >= 1");
  if (target_rank > N) return 0.0;
  return 1.0 / std::log2(static_cast<double>(target_rank) + 1.0);
}

double recall_at(int target_rank, int N) {
  if (target_rank < 1) throw ProtocolError("recall_at: rank must be >= 1");
  return target_rank <= N ? 1.0 : 0.0;
}

double mrr(int target_rank) {
  if (target_rank < 1) throw ProtocolError("mrr: rank must be >= 1");
  return 1.0 / static_cast<double>(target_rank);
}

double category_coverage(const RankedList& list,
                         const std::vector<std::vector<int>>& categories,
                         int num_categories, int N) {
  if (num_categories < 1) {
    throw ProtocolError("category_coverage: num_categories must be >= 1");
  }
  std::unordered_set<int> covered;
  const int limit = std::min<std::size_t>(N, list.items.size());
  for (int i = 0; i < limit; ++i) {
    const int item = list.items[i];
    if (item >= 0 && static_cast<std::size_t>(item) < categories.size()) {
      covered.insert(categories[item].begin(), categories[item].end());
    }
  }
  return static_cast<double>(covered.size()) / num_categories;
}

std::optional<double> intra_list_distance(
    const RankedList& list, const std::vector<std::vector<int>>& categories,
    int N) {
  const int limit = std::min<std::size_t>(N, list.items.size());
  std::vector<const std::vector<int>*> usable;
  for (int i = 0; i < limit; ++i) {
    const int item = list.items[i];
    if (item >= 0 && static_cast<std::size_t>(item) < categories.size() &&
        !categories[item].empty()) {
      usable.push_back(&categories[item]);
    }
  }
  if (usable.size() < 2) return std::nullopt;
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < usable.size(); ++i) {
    for (std::size_t j = i + 1; j < usable.size(); ++j) {
      // Binary membership vectors: dot = |intersection|, norm = sqrt(size).
      const auto& a = *usable[i];
      const auto& b = *usable[j];
      std::size_t inter = 0;
      std::size_t ia = 0, ib = 0;
      while (ia < a.size() && ib < b.size()) {
        if (a[ia] == b[ib]) {
          ++inter;
          ++ia;
          ++ib;
        } else if (a[ia] < b[ib]) {
          ++ia;
        } else {
          ++ib;
        }
      }
      const double cosine =
          static_cast<double>(inter) /
          (std::sqrt(static_cast<double>(a.size())) *
           std::sqrt(static_cast<double>(b.size())));
      sum += 1.0 - cosine;
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

double MetricTable::at(const std::string& key) const {
  const auto it = values.find(key);
  if (it == values.end()) {
    throw ProtocolError("metric table has no entry `" + key + "`");
  }
  return it->second;
}

MetricTable evaluate_scorer(
    const std::function<std::vector<double>(const FixedSequence&)>& scorer,
    const std::vector<FixedSequence>& rows, const InteractionLog& log,
    const EvalOptions& opts) {
  MetricTable table;
  if (rows.empty()) throw ProtocolError("evaluate: no rows");
  std::map<std::string, double> sums;
  std::map<std::string, std::size_t> counts;
  const int max_cutoff =
      *std::max_element(opts.cutoffs.begin(), opts.cutoffs.end());
  for (const FixedSequence& row : rows) {
    const std::vector<double> scores = scorer(row);
    std::vector<int> exclusions;
    if (opts.exclude_input_items) {
      for (int it : row.items) {
        if (it != 0 && it != row.target) exclusions.push_back(it);
      }
    }
    const RankedList ranked = rank_items(scores, row.target, exclusions,
                                         std::max(opts.top_n, max_cutoff),
                                         row.user);
    for (int N : opts.cutoffs) {
      sums["ndcg@" + std::to_string(N)] += ndcg_at(ranked.target_rank, N);
      counts["ndcg@" + std::to_string(N)] += 1;
      sums["recall@" + std::to_string(N)] += recall_at(ranked.target_rank, N);
      counts["recall@" + std::to_string(N)] += 1;
      if (log.num_categories > 0) {
        sums["cc@" + std::to_string(N)] +=
            category_coverage(ranked, log.categories, log.num_categories, N);
        counts["cc@" + std::to_string(N)] += 1;
        const auto ild = intra_list_distance(ranked, log.categories, N);
        if (ild.has_value()) {
          sums["ild@" + std::to_string(N)] += *ild;
          counts["ild@" + std::to_string(N)] += 1;
        }
      }
    }
    sums["mrr"] += mrr(ranked.target_rank);
    counts["mrr"] += 1;
  }
  for (const auto& [key, sum] : sums) {
    table.values[key] = sum / static_cast<double>(counts[key]);
  }
  return table;
}

std::vector<std::vector<double>> model_scores(
    const Model& m, const std::vector<FixedSequence>& rows,
    const EvalOptions& opts) {
  NoGradGuard no_grad;
  std::vector<std::vector<double>> all(rows.size());
  const int num_items = m.config.num_items;
  for (auto& v : all) v.assign(num_items, 0.0);
  const std::size_t bs = opts.batch > 0 ? opts.batch : rows.size();
  for (std::size_t begin = 0; begin < rows.size(); begin += bs) {
    const std::size_t count = std::min(bs, rows.size() - begin);
    const Batch batch = make_batch(rows, begin, count);
    for (int pass = 0; pass < std::max(opts.avg_count, 1); ++pass) {
      RngStream rng(opts.seed + static_cast<std::uint64_t>(pass) * 7919);
      const ForwardOutput out = forward(m, batch, rng, /*training=*/false);
      const double* s = out.scores.ptr();
      for (std::size_t b = 0; b < count; ++b) {
        for (int j = 0; j < num_items; ++j) {
          all[begin + b][j] += s[b * num_items + j];
        }
      }
    }
    const double inv = 1.0 / std::max(opts.avg_count, 1);
    for (std::size_t b = 0; b < count; ++b) {
      for (double& v : all[begin + b]) v *= inv;
    }
  }
  return all;
}

MetricTable evaluate(const Model& m, const std::vector<FixedSequence>& rows,
                     const InteractionLog& log, const EvalOptions& opts) {
  const auto scores = model_scores(m, rows, opts);
  std::size_t next = 0;
  return evaluate_scorer(
      [&](const FixedSequence&) { return scores[next++]; }, rows, log, opts);
}

double validation_ndcg(const Model& m, const std::vector<FixedSequence>& rows,
                       const InteractionLog& log, int N,
                       const EvalOptions& opts) {
  const auto scores = model_scores(m, rows, opts);
  double sum = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<int> exclusions;
    if (opts.exclude_input_items) {
      for (int it : rows[i].items) {
        if (it != 0 && it != rows[i].target) exclusions.push_back(it);
      }
    }
    const RankedList ranked =
        rank_items(scores[i], rows[i].target, exclusions, N, rows[i].user);
    sum += ndcg_at(ranked.target_rank, N);
  }
  (void)log;
  return rows.empty() ? 0.0 : sum / static_cast<double>(rows.size());
}

std::vector<double> popularity_scores(const InteractionLog& log) {
  std::vector<double> s(log.num_items, 0.0);
  for (const auto& seq : log.users) {
    for (int it : seq) s[it - 1] += 1.0;
  }
  return s;
}

std::vector<double> random_scores(int num_items, RngStream& rng) {
  std::vector<double> s(num_items);
  for (double& v : s) v = rng.uniform();
  return s;
}

void write_metrics_csv(const MetricTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics csv: " + path);
  out << "metric,N,value\n";
  char buf[64];
  for (const auto& [key, value] : table.values) {
    std::string metric = key;
    std::string n = "";
    const std::size_t at = key.find('@');
    if (at != std::string::npos) {
      metric = key.substr(0, at);
      n = key.substr(at + 1);
    }
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    out << metric << ',' << n << ',' << buf << '\n';
  }
}

void write_metrics_json(const MetricTable& table, const std::string& path) {
  nlohmann::json j(table.values);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics json: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace genatt
