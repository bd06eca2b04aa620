#pragma once

#include <cstdint>
#include <string>

#include "genatt/data.hpp"

namespace genatt {

// Preference-cluster corpus: items are split evenly into `cats` category
// clusters and each user draws most interactions from two personal clusters,
// giving the next-item task learnable structure without external data.
struct SyntheticSpec {
  int users = 500;
  int items = 200;
  int cats = 10;
  int min_len = 15;
  int max_len = 30;
  double in_cluster = 0.9;
  std::uint64_t seed = 1;
};

InteractionLog make_synthetic_corpus(const SyntheticSpec& spec);

void write_synthetic_corpus(const SyntheticSpec& spec,
                            const std::string& interactions_path,
                            const std::string& categories_path);

}  // namespace genatt
