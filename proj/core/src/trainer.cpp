#include "vse/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace vse {

void LrSchedule::validate() const {
  if (init_lr < 0.0f) throw ConfigError("schedule: lr must be >= 0");
  if (!std::is_sorted(halve_after.begin(), halve_after.end()))
    throw ConfigError("schedule: halve_after must be sorted ascending");
}

float lr_at(const LrSchedule& schedule, int epoch) {
  if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
  int halvings = 0;
  for (int t : schedule.halve_after)
    if (t <= epoch) ++halvings;
  return schedule.init_lr * std::pow(0.5f, static_cast<float>(halvings));
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  if (stage1.epochs < 0 || stage2.epochs < 0) throw ConfigError("train: epochs must be >= 0");
  stage1.lr.validate();
  stage2.lr.validate();
  if (margin < 0.0f) throw ConfigError("train: margin must be >= 0");
  if (eval_ks.empty()) throw ConfigError("train: eval_ks must be non-empty");
}

std::vector<std::vector<int>> make_batches(int dataset_size, int batch_size, std::uint64_t seed,
                                           int epoch, bool shuffle,
                                           const std::vector<std::string>* groups) {
  if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
  std::vector<int> order(dataset_size);
  for (int i = 0; i < dataset_size; ++i) order[i] = i;
  if (shuffle) {
    std::mt19937_64 rng(seed ^ (static_cast<std::uint64_t>(epoch) * 0x9e3779b97f4a7c15ull));
    std::shuffle(order.begin(), order.end(), rng);
  }

  std::vector<std::vector<int>> batches;
  if (!groups) {
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
      std::vector<int> b(order.begin() + i,
                         order.begin() + std::min(order.size(), i + batch_size));
      batches.push_back(std::move(b));
    }
  } else {
    if (static_cast<int>(groups->size()) != dataset_size)
      throw ConfigError("make_batches: group list size mismatch");
    std::vector<int> remaining = order;
    while (!remaining.empty()) {
      std::vector<int> batch;
      std::unordered_set<std::string> used;
      std::vector<int> next;
      for (int idx : remaining) {
        const std::string& g = (*groups)[idx];
        if (static_cast<int>(batch.size()) < batch_size &&
            (g.empty() || used.insert(g).second)) {
          batch.push_back(idx);
        } else {
          next.push_back(idx);
        }
      }
      batches.push_back(std::move(batch));
      remaining = std::move(next);
    }
  }
  // the loss needs at least one negative
  if (!batches.empty() && batches.back().size() < 2) batches.pop_back();
  return batches;
}

namespace {

ParamMap clone_params(const ParamMap& params) {
  ParamMap out;
  for (auto& [name, t] : params) {
    auto c = Tensor::zeros(t->shape, t->requires_grad);
    c->data = t->data;
    out.emplace(name, std::move(c));
  }
  return out;
}

TensorPtr feature_batch(const Dataset& data, const std::vector<int>& idx, int dim) {
  auto t = Tensor::zeros({static_cast<int>(idx.size()), dim});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& f = data.examples[idx[i]].image_features;
    if (static_cast<int>(f.size()) != dim)
      throw DataError("feature dim mismatch for id " + data.examples[idx[i]].id);
    std::copy(f.begin(), f.end(), t->data.begin() + i * dim);
  }
  return t;
}

EmbeddingIndex to_index(const TensorPtr& emb, const Dataset& data, const std::vector<int>& idx) {
  EmbeddingIndex out;
  out.num_rows = emb->rows();
  out.dim = emb->cols();
  out.matrix = emb->data;
  out.ids.reserve(idx.size());
  for (int i : idx) out.ids.push_back(data.examples[i].id);
  return out;
}

}  // namespace

EmbeddingIndex embed_images(const ModelConfig& cfg, const ParamMap& params, const Dataset& data,
                            const std::vector<int>& idx) {
  Tape tape(false);
  std::vector<TensorPtr> chunks;
  constexpr int kChunk = 512;
  for (std::size_t i = 0; i < idx.size(); i += kChunk) {
    std::vector<int> part(idx.begin() + i, idx.begin() + std::min(idx.size(), i + kChunk));
    chunks.push_back(encode_image(tape, feature_batch(data, part, cfg.image_feat_dim), params, cfg));
  }
  return to_index(tape.concat_rows(chunks), data, idx);
}

EmbeddingIndex embed_texts(const ModelConfig& cfg, const ParamMap& params, const Dataset& data,
                           const std::vector<int>& idx, const Vocabulary& vocab) {
  Tape tape(false);
  std::vector<TensorPtr> chunks;
  constexpr int kChunk = 512;
  for (std::size_t i = 0; i < idx.size(); i += kChunk) {
    std::vector<TokenSequence> batch;
    for (std::size_t j = i; j < std::min(idx.size(), i + kChunk); ++j)
      batch.push_back(encode(data.examples[idx[j]].title, vocab, cfg.transformer.max_len));
    chunks.push_back(encode_text(tape, batch, params, cfg));
  }
  return to_index(tape.concat_rows(chunks), data, idx);
}

TrainResult train(const ModelConfig& model_cfg, const Dataset& data, const Vocabulary& vocab,
                  const TrainConfig& cfg, ParamMap initial_params) {
  model_cfg.validate();
  cfg.validate();
  if (data.train_idx.empty()) throw ConfigError("train: empty training split");
  if (data.val_idx.empty()) throw ConfigError("train: empty validation split");

  ParamMap params =
      initial_params.empty() ? init_params(model_cfg, cfg.seed) : std::move(initial_params);

  // tokenize once
  std::vector<TokenSequence> tokens(data.examples.size());
  for (std::size_t i = 0; i < data.examples.size(); ++i)
    tokens[i] = encode(data.examples[i].title, vocab, model_cfg.transformer.max_len);

  std::vector<std::string> groups;
  if (cfg.group_aware_batching) {
    groups.reserve(data.examples.size());
    for (auto& ex : data.examples) groups.push_back(ex.group_id);
  }

  TrainResult result;
  int global_epoch = 0;

  auto run_stage = [&](int stage, const StageConfig& stage_cfg, bool freeze_image) {
    std::vector<TensorPtr> trainable;
    std::vector<std::string> frozen =
        freeze_image ? image_tower_param_names(model_cfg) : std::vector<std::string>{};
    for (auto& [name, t] : params) {
      bool is_frozen = std::find(frozen.begin(), frozen.end(), name) != frozen.end();
      t->requires_grad = !is_frozen;
      if (!is_frozen) trainable.push_back(t);
    }
    AdamState adam = AdamState::init(trainable, std::max(stage_cfg.lr.init_lr, 0.0f));

    for (int epoch = 0; epoch < stage_cfg.epochs; ++epoch, ++global_epoch) {
      auto t0 = std::chrono::steady_clock::now();
      adam.lr = lr_at(stage_cfg.lr, epoch);

      auto batches =
          make_batches(static_cast<int>(data.train_idx.size()), cfg.batch_size, cfg.seed,
                       global_epoch, cfg.shuffle, cfg.group_aware_batching ? &groups : nullptr);
      double loss_sum = 0.0;
      int batch_count = 0;
      LossConfig loss_cfg;
      loss_cfg.margin = cfg.margin;
      loss_cfg.sum_over_batch = cfg.loss_sum_over_batch;

      for (std::size_t bi = 0; bi < batches.size(); ++bi) {
        std::vector<int> ex_idx;
        ex_idx.reserve(batches[bi].size());
        for (int k : batches[bi]) ex_idx.push_back(data.train_idx[k]);

        Tape tape;
        auto feats = feature_batch(data, ex_idx, model_cfg.image_feat_dim);
        std::vector<TokenSequence> batch_tokens;
        batch_tokens.reserve(ex_idx.size());
        for (int i : ex_idx) batch_tokens.push_back(tokens[i]);

        auto img_emb = encode_image(tape, feats, params, model_cfg);
        auto txt_emb = encode_text(tape, batch_tokens, params, model_cfg);
        auto loss = mh_loss(tape, img_emb, txt_emb, loss_cfg);
        float loss_val = loss->data[0];
        if (!std::isfinite(loss_val))
          throw NumericError("train: non-finite loss at stage " + std::to_string(stage) +
                             " epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(bi));
        tape.backward(loss);
        adam_step(trainable, adam);
        zero_grads(params);
        loss_sum += loss_val;
        ++batch_count;
      }

      // per-epoch validation
      auto img_index = embed_images(model_cfg, params, data, data.val_idx);
      auto txt_index = embed_texts(model_cfg, params, data, data.val_idx, vocab);
      std::vector<int> partners(data.val_idx.size());
      for (std::size_t i = 0; i < partners.size(); ++i) partners[i] = static_cast<int>(i);
      std::vector<int> ks;
      for (int k : cfg.eval_ks) ks.push_back(std::min<int>(k, img_index.num_rows));
      auto t2i = recall_at_k("t2i", txt_index.matrix, txt_index.num_rows, txt_index.dim,
                             img_index, partners, ks, 512ull << 20, cfg.threads);
      auto i2t = recall_at_k("i2t", img_index.matrix, img_index.num_rows, img_index.dim,
                             txt_index, partners, ks, 512ull << 20, cfg.threads);

      TrainLogEntry entry;
      entry.epoch = global_epoch;
      entry.stage = stage;
      entry.mean_loss = batch_count ? static_cast<float>(loss_sum / batch_count) : 0.0f;
      entry.lr = adam.lr;
      entry.val_recall_t2i = t2i.recall_at;
      entry.val_recall_i2t = i2t.recall_at;
      entry.wall_time_sec =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.log.push_back(entry);

      const int k1 = ks.front();
      double metric = t2i.recall_at.at(k1) + i2t.recall_at.at(k1);
      if (metric > result.best_metric) {
        result.best_metric = metric;
        result.best_epoch = global_epoch;
        result.best_params = clone_params(params);
      }
    }
  };

  run_stage(1, cfg.stage1, cfg.stage1_freeze_image_proj);
  for (auto& [name, t] : params) t->requires_grad = true;
  run_stage(2, cfg.stage2, false);

  if (result.best_params.empty()) result.best_params = clone_params(params);  // 0 epochs total
  for (auto& [name, t] : result.best_params) t->requires_grad = true;
  return result;
}

std::string log_entry_json(const TrainLogEntry& e) {
  nlohmann::json j;
  j["epoch"] = e.epoch;
  j["stage"] = e.stage;
  j["mean_loss"] = e.mean_loss;
  j["lr"] = e.lr;
  for (auto& [k, v] : e.val_recall_t2i) j["val_r_t2i"][std::to_string(k)] = v;
  for (auto& [k, v] : e.val_recall_i2t) j["val_r_i2t"][std::to_string(k)] = v;
  j["wall_time_sec"] = e.wall_time_sec;
  return j.dump();
}

}  // namespace vse
