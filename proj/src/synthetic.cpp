#include "genatt/synthetic.hpp"

namespace genatt {

InteractionLog make_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.items < spec.cats || spec.cats < 2 || spec.users < 1) {
    throw DataError("make_synthetic_corpus: need items >= cats >= 2, users >= 1");
  }
  RngStream rng(spec.seed);
  InteractionLog log;
  log.num_items = spec.items;
  log.num_categories = spec.cats;
  log.item_keys.push_back("");
  log.categories.assign(spec.items + 1, {});
  const int per_cluster = spec.items / spec.cats;
  for (int it = 1; it <= spec.items; ++it) {
    log.item_keys.push_back("i" + std::to_string(it));
    const int cluster = std::min((it - 1) / per_cluster, spec.cats - 1);
    log.categories[it] = {cluster};
  }

  auto cluster_items = [&](int cluster) {
    const int lo = cluster * per_cluster + 1;
    const int hi = cluster == spec.cats - 1 ? spec.items
                                            : (cluster + 1) * per_cluster;
    return std::pair<int, int>{lo, hi};
  };

  for (int u = 0; u < spec.users; ++u) {
    log.user_keys.push_back("u" + std::to_string(u + 1));
    const int c1 = static_cast<int>(rng.uniform_int(spec.cats));
    int c2 = static_cast<int>(rng.uniform_int(spec.cats - 1));
    if (c2 >= c1) ++c2;
    const int len =
        spec.min_len +
        static_cast<int>(rng.uniform_int(spec.max_len - spec.min_len + 1));
    std::vector<int> seq;
    seq.reserve(len);
    for (int t = 0; t < len; ++t) {
      int item;
      if (rng.uniform() < spec.in_cluster) {
        const int cluster = rng.uniform() < 0.5 ? c1 : c2;
        const auto [lo, hi] = cluster_items(cluster);
        item = lo + static_cast<int>(rng.uniform_int(hi - lo + 1));
      } else {
        item = 1 + static_cast<int>(rng.uniform_int(spec.items));
      }
      seq.push_back(item);
    }
    log.users.push_back(std::move(seq));
  }
  return log;
}

void write_synthetic_corpus(const SyntheticSpec& spec,
                            const std::string& interactions_path,
                            const std::string& categories_path) {
  const InteractionLog log = make_synthetic_corpus(spec);
  write_interactions(log, interactions_path, categories_path);
}

}  // namespace genatt
