#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_set>

#include "vse/trainer.hpp"

using namespace vse;

namespace {

// small AVG-encoder setup trained on the synthetic generator output
struct Fixture {
  Dataset data;
  Vocabulary vocab;
  ModelConfig model;

  explicit Fixture(int classes = 4, int train_n = 64, int val_n = 16) {
    SyntheticSpec spec;
    spec.num_classes = classes;
    spec.train_samples = train_n;
    spec.val_samples = val_n;
    spec.test_samples = val_n;
    spec.feature_dim = 8;
    spec.title_len_mean = 6.0f;
    spec.title_len_sd = 1.0f;
    spec.atoms_per_class = 6;
    data = generate_synthetic(spec);

    std::vector<std::string> corpus;
    for (auto& ex : data.examples) corpus.push_back(ex.title);
    VocabTrainConfig vcfg;
    vcfg.target_size = 120;
    vocab = train_vocab(corpus, vcfg).vocab;

    model.embed_dim = 16;
    model.word_dim = 8;
    model.text_encoder = TextEncoderKind::kAvg;
    model.image_feat_dim = 8;
    model.avg.fc_dim = 16;
    model.transformer.max_len = 16;
    model.vocab_size = vocab.size();
  }
};

TrainConfig quick_config(int stage1_epochs, int stage2_epochs) {
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.stage1 = {stage1_epochs, {1e-2f, {}}};
  cfg.stage2 = {stage2_epochs, {5e-3f, {}}};
  cfg.eval_ks = {1, 5};
  cfg.seed = 7;
  return cfg;
}

bool params_equal(const ParamMap& a, const ParamMap& b) {
  if (a.size() != b.size()) return false;
  for (auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second->data != t->data) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("lr_at implements halve-after thresholds exactly") {
  LrSchedule stage1{1e-4f, {1}};
  CHECK(lr_at(stage1, 0) == doctest::Approx(1e-4f));
  CHECK(lr_at(stage1, 1) == doctest::Approx(5e-5f));

  LrSchedule stage2{4e-5f, {5, 10}};
  CHECK(lr_at(stage2, 0) == doctest::Approx(4e-5f));
  CHECK(lr_at(stage2, 4) == doctest::Approx(4e-5f));
  CHECK(lr_at(stage2, 5) == doctest::Approx(2e-5f));
  CHECK(lr_at(stage2, 9) == doctest::Approx(2e-5f));
  CHECK(lr_at(stage2, 10) == doctest::Approx(1e-5f));
  CHECK(lr_at(stage2, 29) == doctest::Approx(1e-5f));

  // never increases with epoch
  float prev = 1e9f;
  for (int e = 0; e < 40; ++e) {
    float lr = lr_at(stage2, e);
    CHECK(lr <= prev);
    prev = lr;
  }

  CHECK_THROWS_AS(lr_at(stage2, -1), ConfigError);
  LrSchedule bad{1e-4f, {10, 5}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("make_batches splits sizes and drops a trailing singleton") {
  auto b = make_batches(10, 4, 0, 0, false);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 4);
  CHECK(b[1].size() == 4);
  CHECK(b[2].size() == 2);
  CHECK(b[0] == std::vector<int>{0, 1, 2, 3});  // unshuffled order is identity

  auto dropped = make_batches(9, 4, 0, 0, false);
  CHECK(dropped.size() == 2);  // the lone 9th example is dropped

  CHECK(make_batches(1, 4, 0, 0, false).empty());
}

TEST_CASE("shuffling is epoch-seeded and deterministic") {
  auto a = make_batches(100, 16, 42, 3, true);
  auto b = make_batches(100, 16, 42, 3, true);
  CHECK(a == b);
  auto c = make_batches(100, 16, 42, 4, true);
  CHECK(a != c);
  auto d = make_batches(100, 16, 43, 3, true);
  CHECK(a != d);

  // every index appears exactly once
  std::set<int> seen;
  for (auto& batch : a)
    for (int i : batch) CHECK(seen.insert(i).second);
  CHECK(seen.size() == 100);
}

TEST_CASE("group-aware batching never repeats a group inside a batch") {
  std::vector<std::string> groups;
  for (int i = 0; i < 120; ++i)
    groups.push_back(i % 5 == 0 ? "" : "g" + std::to_string(i / 3));  // triples + loners
  for (int epoch = 0; epoch < 100; ++epoch) {
    auto batches = make_batches(120, 8, 11, epoch, true, &groups);
    std::set<int> seen;
    for (auto& batch : batches) {
      std::unordered_set<std::string> used;
      for (int i : batch) {
        CHECK(seen.insert(i).second);
        if (!groups[i].empty()) CHECK(used.insert(groups[i]).second);
      }
    }
    // everything is scheduled except possibly a dropped tail of size < 2
    CHECK(seen.size() >= 119);
  }
}

TEST_CASE("training with all learning rates zero leaves parameters bit-identical") {
  Fixture fx;
  auto initial = init_params(fx.model, 3);
  ParamMap copy;
  for (auto& [name, t] : initial) {
    auto c = Tensor::zeros(t->shape, true);
    c->data = t->data;
    copy.emplace(name, c);
  }
  auto cfg = quick_config(1, 1);
  cfg.stage1.lr.init_lr = 0.0f;
  cfg.stage2.lr.init_lr = 0.0f;
  auto result = train(fx.model, fx.data, fx.vocab, cfg, std::move(initial));
  CHECK(params_equal(result.best_params, copy));
}

TEST_CASE("stage-1 freeze keeps the image projection untouched") {
  Fixture fx;
  auto initial = init_params(fx.model, 3);
  std::vector<float> w0 = initial.at("img.proj.w")->data;
  std::vector<float> fc0 = initial.at("text.avg.fc.w")->data;
  auto cfg = quick_config(2, 0);
  cfg.stage1_freeze_image_proj = true;
  auto result = train(fx.model, fx.data, fx.vocab, cfg, std::move(initial));
  CHECK(result.best_params.at("img.proj.w")->data == w0);
  CHECK(result.best_params.at("text.avg.fc.w")->data != fc0);
  CHECK(result.best_params.at("img.proj.w")->requires_grad);
}

TEST_CASE("zero total epochs returns the initial parameters and an empty log") {
  Fixture fx;
  auto initial = init_params(fx.model, 5);
  std::vector<float> w0 = initial.at("img.proj.w")->data;
  auto result = train(fx.model, fx.data, fx.vocab, quick_config(0, 0), std::move(initial));
  CHECK(result.log.empty());
  CHECK(result.best_epoch == -1);
  CHECK(result.best_params.at("img.proj.w")->data == w0);
}

TEST_CASE("training is fully deterministic across runs") {
  Fixture fx;
  auto cfg = quick_config(1, 2);
  auto a = train(fx.model, fx.data, fx.vocab, cfg);
  auto b = train(fx.model, fx.data, fx.vocab, cfg);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].mean_loss == b.log[i].mean_loss);
    CHECK(a.log[i].val_recall_t2i == b.log[i].val_recall_t2i);
  }
  CHECK(a.best_epoch == b.best_epoch);
  CHECK(params_equal(a.best_params, b.best_params));
}

TEST_CASE("loss decreases on separable synthetic data") {
  Fixture fx(4, 128, 32);
  auto cfg = quick_config(0, 4);
  auto result = train(fx.model, fx.data, fx.vocab, cfg);
  REQUIRE(result.log.size() == 4);
  CHECK(result.log.back().mean_loss < result.log.front().mean_loss);
  // stage/epoch bookkeeping
  for (std::size_t i = 0; i < result.log.size(); ++i) {
    CHECK(result.log[i].epoch == static_cast<int>(i));
    CHECK(result.log[i].stage == 2);
    CHECK(result.log[i].wall_time_sec >= 0.0);
  }
}

TEST_CASE("best checkpoint reproduces its logged validation recall") {
  Fixture fx(4, 96, 24);
  auto cfg = quick_config(1, 3);
  auto result = train(fx.model, fx.data, fx.vocab, cfg);
  REQUIRE(result.best_epoch >= 0);
  const auto& entry = result.log.at(result.best_epoch);

  auto img = embed_images(fx.model, result.best_params, fx.data, fx.data.val_idx);
  auto txt = embed_texts(fx.model, result.best_params, fx.data, fx.data.val_idx, fx.vocab);
  std::vector<int> partners(fx.data.val_idx.size());
  std::iota(partners.begin(), partners.end(), 0);
  std::vector<int> ks;
  for (auto& [k, v] : entry.val_recall_t2i) ks.push_back(k);
  auto t2i = recall_at_k("t2i", txt.matrix, txt.num_rows, txt.dim, img, partners, ks);
  auto i2t = recall_at_k("i2t", img.matrix, img.num_rows, img.dim, txt, partners, ks);
  for (int k : ks) {
    CHECK(t2i.recall_at.at(k) == doctest::Approx(entry.val_recall_t2i.at(k)));
    CHECK(i2t.recall_at.at(k) == doctest::Approx(entry.val_recall_i2t.at(k)));
  }
  CHECK(result.best_metric ==
        doctest::Approx(entry.val_recall_t2i.at(ks.front()) + entry.val_recall_i2t.at(ks.front())));
}

TEST_CASE("non-finite loss aborts with stage, epoch and batch context") {
  Fixture fx;
  auto bad = fx.data;
  bad.examples[bad.train_idx[0]].image_features[0] = std::nanf("");
  try {
    train(fx.model, bad, fx.vocab, quick_config(1, 0));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    std::string msg = e.what();
    CHECK(msg.find("stage") != std::string::npos);
    CHECK(msg.find("epoch") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
  }
}

TEST_CASE("train validates its inputs") {
  Fixture fx;
  TrainConfig bad = quick_config(1, 0);
  bad.batch_size = 1;
  CHECK_THROWS_AS(train(fx.model, fx.data, fx.vocab, bad), ConfigError);

  auto no_val = fx.data;
  no_val.val_idx.clear();
  CHECK_THROWS_AS(train(fx.model, no_val, fx.vocab, quick_config(1, 0)), ConfigError);
}

TEST_CASE("log entries serialize to json") {
  TrainLogEntry e;
  e.epoch = 3;
  e.stage = 2;
  e.mean_loss = 0.25f;
  e.lr = 1e-4f;
  e.val_recall_t2i[1] = 0.5;
  auto js = log_entry_json(e);
  CHECK(js.find("\"epoch\":3") != std::string::npos);
  CHECK(js.find("val_r_t2i") != std::string::npos);
}
