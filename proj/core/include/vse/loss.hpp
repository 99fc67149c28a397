#pragma once

// Symmetric Max-of-Hinges triplet loss with in-batch hard negative mining.

#include <cstdint>
#include <utility>
#include <vector>

#include "vse/tensor.hpp"

namespace vse {

struct LossConfig {
  float margin = 0.2f;
  // Optional BxB row-major matrix; nonzero = exclude (j) as a negative for
  // row/column k. The diagonal is always excluded regardless.
  const std::vector<std::uint8_t>* duplicate_mask = nullptr;
  // Eq.-style sum over the batch when true; mean (sum / B) when false.
  bool sum_over_batch = false;
};

// S[k][j] = <img_k, txt_j>; inputs are expected row-normalized upstream.
TensorPtr similarity_matrix(Tape& tape, const TensorPtr& img_emb, const TensorPtr& txt_emb);

// Both symmetric hinge terms; gradient flows only to the diagonal and the
// argmax negatives. B=1 or fully masked rows contribute 0.
TensorPtr mh_loss(Tape& tape, const TensorPtr& img_emb, const TensorPtr& txt_emb,
                  const LossConfig& cfg);

// Per-row (i2t) and per-column (t2i) argmax over unmasked off-diagonal
// entries of S; -1 where no candidate exists. Ties pick the smallest index.
std::pair<std::vector<int>, std::vector<int>> hard_negative_indices(
    const Tensor& S, const std::vector<std::uint8_t>* duplicate_mask = nullptr);

}  // namespace vse
