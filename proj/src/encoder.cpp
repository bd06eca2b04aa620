#include "genatt/encoder.hpp"

#include <cmath>

namespace genatt {

Tensor embed_sequence(const std::vector<int>& ids, std::size_t batch,
                      std::size_t n, const EmbeddingTables& tables) {
  if (ids.size() != batch * n) {
    throw ShapeError("embed_sequence: " + std::to_string(ids.size()) +
                     " ids for batch " + std::to_string(batch) + " x " +
                     std::to_string(n));
  }
  if (tables.pos_table.shape[0] != n) {
    throw ShapeError("embed_sequence: position table has " +
                     std::to_string(tables.pos_table.shape[0]) +
                     " rows, sequence length is " + std::to_string(n));
  }
  Tensor items = embedding_lookup(tables.item_table, ids, {batch, n});
  return add(items, tables.pos_table);  // pos broadcasts over the batch
}

EncodedSequence encode_sequence(const Tensor& embedded,
                                const std::vector<std::uint8_t>& mask,
                                const GruParams& params) {
  if (embedded.shape.size() != 3) {
    throw ShapeError("encode_sequence: expected B x n x d input, got " +
                     shape_str(embedded.shape));
  }
  const std::size_t B = embedded.shape[0];
  const std::size_t n = embedded.shape[1];
  const std::size_t d_h = params.uz.shape[0];
  if (mask.size() != B * n) {
    throw ShapeError("encode_sequence: mask size " +
                     std::to_string(mask.size()) + " != B*n");
  }

  // Input projections for all steps at once.
  const Tensor xz = matmul(embedded, params.wz);
  const Tensor xr = matmul(embedded, params.wr);
  const Tensor xh = matmul(embedded, params.wh);

  Tensor h = Tensor::zeros({B, d_h});
  std::vector<Tensor> states;
  states.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    const Tensor zt = sigmoid(add(add(select_step(xz, t), matmul(h, params.uz)),
                                  params.bz));
    const Tensor rt = sigmoid(add(add(select_step(xr, t), matmul(h, params.ur)),
                                  params.br));
    const Tensor cand = tanh(add(
        add(select_step(xh, t), matmul(mul(rt, h), params.uh)), params.bh));
    // h_new = (1 - z) * h + z * cand
    Tensor h_new = add(mul(sub(Tensor::full({1}, 1.0), zt), h), mul(zt, cand));

    // Copy-through on padded positions: h_t = m * h_new + (1 - m) * h.
    Tensor step_mask = Tensor::zeros({B, 1});
    Tensor inv_mask = Tensor::zeros({B, 1});
    for (std::size_t b = 0; b < B; ++b) {
      (*step_mask.data)[b] = mask[b * n + t] ? 1.0 : 0.0;
      (*inv_mask.data)[b] = mask[b * n + t] ? 0.0 : 1.0;
    }
    h = add(mul(step_mask, h_new), mul(inv_mask, h));
    if (!all_finite(h)) {
      throw NumericError("encode_sequence: non-finite state at position " +
                         std::to_string(t));
    }
    states.push_back(h);
  }
  EncodedSequence out;
  out.states = stack_steps(states);
  out.last = h;
  return out;
}

GruParams init_gru(std::size_t d, std::size_t d_h, RngStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_h));
  GruParams p;
  p.wz = Tensor::uniform({d, d_h}, -bound, bound, rng, true);
  p.wr = Tensor::uniform({d, d_h}, -bound, bound, rng, true);
  p.wh = Tensor::uniform({d, d_h}, -bound, bound, rng, true);
  p.uz = Tensor::uniform({d_h, d_h}, -bound, bound, rng, true);
  p.ur = Tensor::uniform({d_h, d_h}, -bound, bound, rng, true);
  p.uh = Tensor::uniform({d_h, d_h}, -bound, bound, rng, true);
  p.bz = Tensor::zeros({d_h}, true);
  p.br = Tensor::zeros({d_h}, true);
  p.bh = Tensor::zeros({d_h}, true);
  return p;
}

}  // namespace genatt
