#pragma once

#include <cstdint>
#include <vector>

#include "genatt/tensor.hpp"

namespace genatt {

// Item and position tables. Row 0 of the item table is the padding slot and
// stays all-zero across updates (the optimizer masks it).
struct EmbeddingTables {
  Tensor item_table;  // (num_items + 1) x d
  Tensor pos_table;   // n x d
};

struct GruParams {
  Tensor wz, wr, wh;  // d x d_h input maps
  Tensor uz, ur, uh;  // d_h x d_h recurrent maps
  Tensor bz, br, bh;  // d_h biases
};

struct EncodedSequence {
  Tensor states;  // B x n x d_h, one state per step
  Tensor last;    // B x d_h, state at the final position (global summary)
};

// out[b, i] = item_table[ids[b, i]] + pos_table[i].
Tensor embed_sequence(const std::vector<int>& ids, std::size_t batch,
                      std::size_t n, const EmbeddingTables& tables);

// Single-layer gated recurrent pass, left to right. Padded positions copy the
// previous state through unchanged, so padding never perturbs the summary.
EncodedSequence encode_sequence(const Tensor& embedded,
                                const std::vector<std::uint8_t>& mask,
                                const GruParams& params);

GruParams init_gru(std::size_t d, std::size_t d_h, RngStream& rng);

}  // namespace genatt
