#pragma once

// Two-stage training: stage 1 warms up with the image projection optionally
// frozen, stage 2 trains everything; per-epoch validation with
// best-checkpoint retention.

#include <cstdint>
#include <string>
#include <vector>

#include "vse/data.hpp"
#include "vse/encoders.hpp"
#include "vse/loss.hpp"
#include "vse/retrieval.hpp"
#include "vse/tensor.hpp"

namespace vse {

struct LrSchedule {
  float init_lr = 1e-4f;
  std::vector<int> halve_after;  // sorted ascending

  void validate() const;
};

// Initial rate halved once per threshold at or below `epoch`.
float lr_at(const LrSchedule& schedule, int epoch);

struct StageConfig {
  int epochs = 0;
  LrSchedule lr;
};

struct TrainConfig {
  int batch_size = 256;
  StageConfig stage1{2, {1e-4f, {1}}};
  StageConfig stage2{30, {4e-5f, {5, 10}}};
  float margin = 0.2f;
  std::uint64_t seed = 42;
  bool shuffle = true;
  std::vector<int> eval_ks = {1, 10, 50, 100};
  bool loss_sum_over_batch = false;
  bool stage1_freeze_image_proj = false;
  bool group_aware_batching = false;
  int threads = 1;

  void validate() const;
};

struct TrainLogEntry {
  int epoch = 0;  // global, monotone across stages
  int stage = 1;
  float mean_loss = 0.0f;
  float lr = 0.0f;
  std::map<int, double> val_recall_t2i, val_recall_i2t;
  double wall_time_sec = 0.0;
};

struct TrainResult {
  ParamMap best_params;
  std::vector<TrainLogEntry> log;
  double best_metric = -1.0;  // val R@1 t2i + i2t
  int best_epoch = -1;
};

// Epoch-seeded shuffled index batches; a trailing batch of size < 2 is
// dropped (the loss needs at least one negative). With `groups`, no batch
// holds two items of the same non-empty group.
std::vector<std::vector<int>> make_batches(int dataset_size, int batch_size, std::uint64_t seed,
                                           int epoch, bool shuffle,
                                           const std::vector<std::string>* groups = nullptr);

TrainResult train(const ModelConfig& model_cfg, const Dataset& data, const Vocabulary& vocab,
                  const TrainConfig& cfg, ParamMap initial_params = {});

std::string log_entry_json(const TrainLogEntry& e);

// Embeds a set of examples with the current params; rows are unit-norm.
EmbeddingIndex embed_images(const ModelConfig& cfg, const ParamMap& params,
                            const Dataset& data, const std::vector<int>& idx);
EmbeddingIndex embed_texts(const ModelConfig& cfg, const ParamMap& params, const Dataset& data,
                           const std::vector<int>& idx, const Vocabulary& vocab);

}  // namespace vse
