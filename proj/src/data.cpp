#include "genatt/data.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace genatt {

namespace {

struct RawRow {
  int user;
  int item;
  double ts;
  std::size_t line;
};

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return out;
}

bool parse_double(const std::string& s, double* out) {
  if (s.empty()) return false;
  char* end = nullptr;
  *out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

std::string trim_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

InteractionLog load_interactions(const std::string& path,
                                 const std::string& categories_path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interaction file: " + path);

  std::unordered_map<std::string, int> user_index;
  std::unordered_map<std::string, int> item_index;
  InteractionLog log;
  log.item_keys.push_back("");  // pad slot

  std::vector<RawRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim_cr(line);
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_tabs(line);
    double ts = 0.0;
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() ||
        !parse_double(fields[2], &ts)) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": expected `user<TAB>item<TAB>timestamp`, got: " + line);
    }
    auto [uit, unew] = user_index.try_emplace(
        fields[0], static_cast<int>(log.user_keys.size()));
    if (unew) {
      log.user_keys.push_back(fields[0]);
      log.users.emplace_back();
    }
    auto [iit, inew] = item_index.try_emplace(
        fields[1], static_cast<int>(log.item_keys.size()));
    if (inew) log.item_keys.push_back(fields[1]);
    rows.push_back({uit->second, iit->second, ts, lineno});
  }
  if (rows.empty()) throw DataError("empty interaction log: " + path);
  log.num_items = static_cast<int>(log.item_keys.size()) - 1;

  // Stable sort keeps file order for equal timestamps.
  std::stable_sort(rows.begin(), rows.end(),
                   [](const RawRow& a, const RawRow& b) { return a.ts < b.ts; });
  for (const RawRow& r : rows) log.users[r.user].push_back(r.item);

  log.categories.assign(log.num_items + 1, {});
  if (!categories_path.empty()) {
    std::ifstream cin_file(categories_path);
    if (!cin_file) throw DataError("cannot open category file: " + categories_path);
    std::unordered_map<std::string, int> cat_index;
    std::size_t cline = 0;
    while (std::getline(cin_file, line)) {
      ++cline;
      line = trim_cr(line);
      if (line.empty() || line[0] == '#') continue;
      const auto fields = split_tabs(line);
      if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
        throw DataError(categories_path + ":" + std::to_string(cline) +
                        ": expected `item<TAB>category`, got: " + line);
      }
      const auto item_it = item_index.find(fields[0]);
      if (item_it == item_index.end()) continue;  // metadata for unseen item
      const auto [cit, cnew] = cat_index.try_emplace(
          fields[1], static_cast<int>(cat_index.size()));
      log.categories[item_it->second].push_back(cit->second);
    }
    log.num_categories = static_cast<int>(cat_index.size());
    for (auto& cats : log.categories) {
      std::sort(cats.begin(), cats.end());
      cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
    }
  }
  return log;
}

InteractionLog filter_min_interactions(const InteractionLog& log, int k) {
  if (k < 1) throw DataError("filter_min_interactions: k must be >= 1");

  std::vector<std::vector<int>> users = log.users;
  std::vector<bool> user_alive(users.size(), true);
  std::vector<bool> item_alive(log.num_items + 1, true);

  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t u = 0; u < users.size(); ++u) {
      if (user_alive[u] && users[u].size() < static_cast<std::size_t>(k)) {
        user_alive[u] = false;
        users[u].clear();
        changed = true;
      }
    }
    std::vector<std::size_t> item_count(log.num_items + 1, 0);
    for (std::size_t u = 0; u < users.size(); ++u) {
      if (!user_alive[u]) continue;
      for (int it : users[u]) ++item_count[it];
    }
    for (int it = 1; it <= log.num_items; ++it) {
      if (item_alive[it] && item_count[it] < static_cast<std::size_t>(k)) {
        item_alive[it] = false;
        changed = true;
      }
    }
    if (changed) {
      for (std::size_t u = 0; u < users.size(); ++u) {
        if (!user_alive[u]) continue;
        auto& seq = users[u];
        seq.erase(std::remove_if(seq.begin(), seq.end(),
                                 [&](int it) { return !item_alive[it]; }),
                  seq.end());
      }
    }
  }

  InteractionLog out;
  std::vector<int> item_remap(log.num_items + 1, 0);
  out.item_keys.push_back("");
  for (int it = 1; it <= log.num_items; ++it) {
    if (item_alive[it]) {
      item_remap[it] = static_cast<int>(out.item_keys.size());
      out.item_keys.push_back(log.item_keys[it]);
    }
  }
  out.num_items = static_cast<int>(out.item_keys.size()) - 1;
  out.categories.assign(out.num_items + 1, {});
  for (int it = 1; it <= log.num_items; ++it) {
    if (item_alive[it]) out.categories[item_remap[it]] = log.categories[it];
  }
  // Densify surviving categories, preserving their relative order.
  std::map<int, int> cat_remap;
  for (const auto& cats : out.categories) {
    for (int c : cats) cat_remap.emplace(c, 0);
  }
  int next_cat = 0;
  for (auto& [old_id, new_id] : cat_remap) new_id = next_cat++;
  for (auto& cats : out.categories) {
    for (int& c : cats) c = cat_remap[c];
  }
  out.num_categories = next_cat;

  for (std::size_t u = 0; u < users.size(); ++u) {
    if (!user_alive[u]) continue;
    out.user_keys.push_back(log.user_keys[u]);
    std::vector<int> seq;
    seq.reserve(users[u].size());
    for (int it : users[u]) seq.push_back(item_remap[it]);
    out.users.push_back(std::move(seq));
  }
  if (out.users.empty()) {
    throw DataError("filter_min_interactions: nothing left at k=" +
                    std::to_string(k));
  }
  return out;
}

FixedSequence pad_truncate(const std::vector<int>& seq, int n) {
  if (n < 1) throw DataError("pad_truncate: n must be >= 1");
  FixedSequence out;
  out.items.assign(n, 0);
  out.mask.assign(n, 0);
  out.pos_targets.assign(n, 0);
  const std::size_t keep = std::min<std::size_t>(seq.size(), n);
  for (std::size_t i = 0; i < keep; ++i) {
    out.items[n - keep + i] = seq[seq.size() - keep + i];
    out.mask[n - keep + i] = 1;
  }
  return out;
}

SplitSet leave_one_out_split(const InteractionLog& log, int n) {
  SplitSet split;
  for (std::size_t u = 0; u < log.users.size(); ++u) {
    const auto& seq = log.users[u];
    const std::size_t m = seq.size();
    if (m < 3) {
      ++split.skipped_users;
      continue;
    }
    FixedSequence test =
        pad_truncate(std::vector<int>(seq.begin(), seq.end() - 1), n);
    test.target = seq[m - 1];
    test.user = static_cast<int>(u);
    split.test.push_back(std::move(test));

    FixedSequence valid =
        pad_truncate(std::vector<int>(seq.begin(), seq.end() - 2), n);
    valid.target = seq[m - 2];
    valid.user = static_cast<int>(u);
    split.valid.push_back(std::move(valid));

    // Training region is seq[0 .. m-3]; inputs are all but its last item and
    // each position predicts the item after it. The last pad position (when
    // present) carries the empty-prefix pair predicting seq[0].
    FixedSequence train =
        pad_truncate(std::vector<int>(seq.begin(), seq.end() - 3), n);
    train.user = static_cast<int>(u);
    const std::size_t kept = std::min<std::size_t>(m - 3, n);
    const std::size_t first_real = n - kept;
    for (std::size_t p = first_real; p < static_cast<std::size_t>(n); ++p) {
      const std::size_t src = (m - 3) - kept + (p - first_real);
      train.pos_targets[p] = seq[src + 1];
    }
    if (first_real >= 1) train.pos_targets[first_real - 1] = seq[0];
    split.train.push_back(std::move(train));
  }
  return split;
}

int negative_sample(int target, const std::unordered_set<int>& user_items,
                    int num_items, RngStream& rng) {
  (void)target;  // target is a user item by construction
  if (static_cast<std::size_t>(num_items) <= user_items.size()) {
    throw DataError("negative_sample: no item outside the user's history");
  }
  for (int attempt = 0; attempt < 64; ++attempt) {
    const int cand = 1 + static_cast<int>(rng.uniform_int(num_items));
    if (!user_items.count(cand)) return cand;
  }
  // Dense history: enumerate the complement and index into it directly.
  std::vector<int> valid;
  valid.reserve(num_items - user_items.size());
  for (int it = 1; it <= num_items; ++it) {
    if (!user_items.count(it)) valid.push_back(it);
  }
  return valid[rng.uniform_int(valid.size())];
}

void write_split_manifest(const SplitSet& split, const InteractionLog& log,
                          const std::string& path) {
  nlohmann::json users = nlohmann::json::object();
  for (std::size_t i = 0; i < split.test.size(); ++i) {
    const auto& key = log.user_keys[split.test[i].user];
    users[key] = {{"test_target", log.item_keys[split.test[i].target]},
                  {"valid_target", log.item_keys[split.valid[i].target]}};
  }
  nlohmann::json doc = {{"users", users},
                        {"skipped_users", split.skipped_users}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write split manifest: " + path);
  out << doc.dump(2) << "\n";
}

void write_dataset_stats(const InteractionLog& log, const SplitSet& split,
                         const std::string& path) {
  const std::size_t interactions = log.num_interactions();
  const double denom =
      static_cast<double>(log.users.size()) * std::max(log.num_items, 1);
  nlohmann::json doc = {
      {"users", log.users.size()},
      {"items", log.num_items},
      {"interactions", interactions},
      {"density", interactions / std::max(denom, 1.0)},
      {"categories", log.num_categories},
      {"train_sequences", split.train.size()},
      {"valid_sequences", split.valid.size()},
      {"test_sequences", split.test.size()},
      {"skipped_users", split.skipped_users},
  };
  std::ofstream out(path);
  if (!out) throw DataError("cannot write stats: " + path);
  out << doc.dump(2) << "\n";
}

void write_interactions(const InteractionLog& log,
                        const std::string& interactions_path,
                        const std::string& categories_path) {
  std::ofstream out(interactions_path);
  if (!out) throw DataError("cannot write interactions: " + interactions_path);
  for (std::size_t u = 0; u < log.users.size(); ++u) {
    for (std::size_t t = 0; t < log.users[u].size(); ++t) {
      out << log.user_keys[u] << '\t' << log.item_keys[log.users[u][t]] << '\t'
          << t << '\n';
    }
  }
  if (categories_path.empty()) return;
  std::ofstream cout_file(categories_path);
  if (!cout_file) throw DataError("cannot write categories: " + categories_path);
  for (int it = 1; it <= log.num_items; ++it) {
    for (int c : log.categories[it]) {
      cout_file << log.item_keys[it] << "\tc" << c << '\n';
    }
  }
}

}  // namespace genatt
