#include "vse/loss.hpp"

#include <algorithm>
#include <cmath>

namespace vse {

TensorPtr similarity_matrix(Tape& tape, const TensorPtr& img_emb, const TensorPtr& txt_emb) {
  if (img_emb->cols() != txt_emb->cols())
    throw ConfigError("similarity_matrix: embedding dims differ, " +
                      std::to_string(img_emb->cols()) + " vs " +
                      std::to_string(txt_emb->cols()));
  if (img_emb->rows() != txt_emb->rows())
    throw ConfigError("similarity_matrix: batch sizes differ");
  return tape.matmul_nt(img_emb, txt_emb);
}

std::pair<std::vector<int>, std::vector<int>> hard_negative_indices(
    const Tensor& S, const std::vector<std::uint8_t>* duplicate_mask) {
  const int B = S.rows();
  if (S.cols() != B) throw ConfigError("hard_negative_indices: S must be square");
  if (duplicate_mask && static_cast<int>(duplicate_mask->size()) != B * B)
    throw ConfigError("hard_negative_indices: mask size mismatch");
  auto excluded = [&](int k, int j) {
    if (k == j) return true;
    return duplicate_mask && (*duplicate_mask)[static_cast<std::size_t>(k) * B + j] != 0;
  };
  std::vector<int> i2t(B, -1), t2i(B, -1);
  for (int k = 0; k < B; ++k) {
    for (int j = 0; j < B; ++j) {
      if (excluded(k, j)) continue;
      if (i2t[k] < 0 || S.at(k, j) > S.at(k, i2t[k])) i2t[k] = j;
    }
    for (int j = 0; j < B; ++j) {
      if (excluded(j, k)) continue;
      if (t2i[k] < 0 || S.at(j, k) > S.at(t2i[k], k)) t2i[k] = j;
    }
  }
  return {i2t, t2i};
}

TensorPtr mh_loss(Tape& tape, const TensorPtr& img_emb, const TensorPtr& txt_emb,
                  const LossConfig& cfg) {
  if (cfg.margin < 0.0f) throw ConfigError("mh_loss: margin must be >= 0");
  const int B = img_emb->rows();
  auto S = similarity_matrix(tape, img_emb, txt_emb);
  auto [i2t, t2i] = hard_negative_indices(*S, cfg.duplicate_mask);

  const float norm = cfg.sum_over_batch ? 1.0f : 1.0f / static_cast<float>(B);
  float total = 0.0f;
  // active hinges: (row k, argmax j, +/- pairs applied in backward)
  struct Active {
    int k, j;
    bool row_term;  // true: i2t term over row k; false: t2i term over column k
  };
  std::vector<Active> active;
  for (int k = 0; k < B; ++k) {
    if (i2t[k] >= 0) {
      float h = S->at(k, i2t[k]) - S->at(k, k) + cfg.margin;
      if (!std::isfinite(h)) total = h;  // surface bad inputs instead of skipping
      if (h > 0.0f) {
        total += h;
        active.push_back({k, i2t[k], true});
      }
    }
    if (t2i[k] >= 0) {
      float h = S->at(t2i[k], k) - S->at(k, k) + cfg.margin;
      if (!std::isfinite(h)) total = h;
      if (h > 0.0f) {
        total += h;
        active.push_back({k, t2i[k], false});
      }
    }
  }
  auto loss = Tensor::zeros({1, 1}, S->requires_grad);
  loss->data[0] = total * norm;
  tape.record(loss, [S, loss, active = std::move(active), norm] {
    if (!S->requires_grad) return;
    const float g = loss->grad[0] * norm;
    for (auto& a : active) {
      if (a.row_term) {
        S->grad[static_cast<std::size_t>(a.k) * S->cols() + a.j] += g;
      } else {
        S->grad[static_cast<std::size_t>(a.j) * S->cols() + a.k] += g;
      }
      S->grad[static_cast<std::size_t>(a.k) * S->cols() + a.k] -= g;
    }
  });
  return loss;
}

}  // namespace vse
