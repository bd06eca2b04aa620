#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "genatt/rng.hpp"

namespace genatt {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Per-user chronological item sequences plus item -> category metadata.
// Item ids are dense in [1, num_items]; 0 is reserved for padding. User and
// item keys retain the original file identifiers for audit output.
struct InteractionLog {
  std::vector<std::vector<int>> users;
  std::vector<std::string> user_keys;
  std::vector<std::string> item_keys;  // index 1..num_items; [0] unused
  int num_items = 0;
  std::vector<std::vector<int>> categories;  // item id -> sorted category ids
  int num_categories = 0;

  std::size_t num_interactions() const {
    std::size_t n = 0;
    for (const auto& u : users) n += u.size();
    return n;
  }
};

// Length-n left-padded sequence. For training rows, pos_targets[p] holds the
// item the model should predict at position p (0 = no supervision there);
// evaluation rows carry a single held-out target instead.
struct FixedSequence {
  std::vector<int> items;
  std::vector<std::uint8_t> mask;  // true = real item
  std::vector<int> pos_targets;
  int target = 0;
  int user = -1;
};

struct SplitSet {
  std::vector<FixedSequence> train;
  std::vector<FixedSequence> valid;
  std::vector<FixedSequence> test;
  int skipped_users = 0;
};

// Reads `user \t item \t timestamp` rows (UTF-8, # comments skipped) and an
// optional `item \t category` file. Ids are densified in first-appearance
// order; per-user lists are sorted by timestamp, file order breaking ties.
InteractionLog load_interactions(const std::string& path,
                                 const std::string& categories_path = "");

// Iteratively drops users with < k interactions and items with < k
// occurrences until a fixed point, then re-densifies ids.
InteractionLog filter_min_interactions(const InteractionLog& log, int k);

// Last item held out as test, second-to-last as validation; training rows
// carry one (prefix, next) pair per remaining position as per-position
// targets on a shared padded sequence. Users with < 3 interactions are
// counted in skipped_users.
SplitSet leave_one_out_split(const InteractionLog& log, int n);

// Keeps the last n items, left-padding with 0.
FixedSequence pad_truncate(const std::vector<int>& seq, int n);

// Uniform draw over items the user never interacted with (never 0).
int negative_sample(int target, const std::unordered_set<int>& user_items,
                    int num_items, RngStream& rng);

void write_split_manifest(const SplitSet& split, const InteractionLog& log,
                          const std::string& path);
void write_dataset_stats(const InteractionLog& log, const SplitSet& split,
                         const std::string& path);

// Re-emits a log as interaction/category files in the loader's format.
void write_interactions(const InteractionLog& log,
                        const std::string& interactions_path,
                        const std::string& categories_path);

}  // namespace genatt
