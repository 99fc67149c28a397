#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "vse/encoders.hpp"

using namespace vse;
using namespace vse::testing;

namespace {

ModelConfig tiny_config(TextEncoderKind kind) {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.word_dim = 6;
  cfg.image_feat_dim = 5;
  cfg.vocab_size = 20;
  cfg.text_encoder = kind;
  cfg.transformer = {2, 2, 6, 12, 16};
  cfg.rnn = {7, 2};
  cfg.avg = {10};
  return cfg;
}

TokenSequence make_seq(std::vector<int> ids, int max_len = 16) {
  TokenSequence s;
  s.length = static_cast<int>(ids.size());
  s.max_len = max_len;
  ids.resize(max_len, 0);
  s.ids = std::move(ids);
  return s;
}

float row_norm(const TensorPtr& t, int r) {
  float ss = 0.0f;
  for (int c = 0; c < t->cols(); ++c) ss += t->at(r, c) * t->at(r, c);
  return std::sqrt(ss);
}

}  // namespace

TEST_CASE("init_params determinism") {
  auto cfg = tiny_config(TextEncoderKind::kTransformer);
  auto a = init_params(cfg, 7);
  auto b = init_params(cfg, 7);
  auto c = init_params(cfg, 8);
  REQUIRE(a.size() == b.size());
  bool any_diff_seed = false;
  for (auto& [name, t] : a) {
    CHECK(t->data == b.at(name)->data);
    if (t->data != c.at(name)->data) any_diff_seed = true;
  }
  CHECK(any_diff_seed);
}

TEST_CASE("all encoders emit finite unit-norm embeddings") {
  std::mt19937 rng(3);
  for (auto kind :
       {TextEncoderKind::kAvg, TextEncoderKind::kRnn, TextEncoderKind::kTransformer}) {
    auto cfg = tiny_config(kind);
    for (int trial = 0; trial < 20; ++trial) {
      auto params = init_params(cfg, 100 + trial);
      Tape tape(false);
      std::vector<TokenSequence> batch;
      for (int b = 0; b < 4; ++b) {
        int len = 1 + static_cast<int>(rng() % 6);
        std::vector<int> ids;
        for (int i = 0; i < len; ++i) ids.push_back(3 + rng() % 17);
        batch.push_back(make_seq(ids));
      }
      auto emb = encode_text(tape, batch, params, cfg);
      for (int r = 0; r < emb->rows(); ++r) {
        CHECK(std::abs(row_norm(emb, r) - 1.0f) < 1e-6f);
        for (int c = 0; c < emb->cols(); ++c) CHECK(std::isfinite(emb->at(r, c)));
      }
      auto feats = Tensor::from_values({3, 5}, random_vec(rng, 15));
      auto img = encode_image(tape, feats, params, cfg);
      for (int r = 0; r < img->rows(); ++r) CHECK(std::abs(row_norm(img, r) - 1.0f) < 1e-6f);
    }
  }
}

TEST_CASE("encode_image scale invariance with zero bias") {
  auto cfg = tiny_config(TextEncoderKind::kAvg);
  auto params = init_params(cfg, 1);
  std::fill(params.at("img.proj.b")->data.begin(), params.at("img.proj.b")->data.end(), 0.0f);
  Tape tape(false);
  std::mt19937 rng(5);
  auto v = random_vec(rng, 5);
  auto scaled = v;
  for (auto& x : scaled) x *= 10.0f;
  auto e1 = encode_image(tape, Tensor::from_values({1, 5}, v), params, cfg);
  auto e2 = encode_image(tape, Tensor::from_values({1, 5}, scaled), params, cfg);
  for (int c = 0; c < 8; ++c) CHECK(e1->at(0, c) == doctest::Approx(e2->at(0, c)).epsilon(1e-5));
}

TEST_CASE("encode_image zero features are deterministic") {
  auto cfg = tiny_config(TextEncoderKind::kAvg);
  auto params = init_params(cfg, 1);
  Tape tape(false);
  auto z = Tensor::zeros({1, 5});
  auto e1 = encode_image(tape, z, params, cfg);
  auto e2 = encode_image(tape, z, params, cfg);
  CHECK(e1->data == e2->data);
}

TEST_CASE("encode_image dimension mismatch") {
  auto cfg = tiny_config(TextEncoderKind::kAvg);
  auto params = init_params(cfg, 1);
  Tape tape(false);
  CHECK_THROWS_AS(encode_image(tape, Tensor::zeros({1, 4}), params, cfg), ConfigError);
}

TEST_CASE("avg encoder is order invariant, bitwise") {
  auto cfg = tiny_config(TextEncoderKind::kAvg);
  auto params = init_params(cfg, 2);
  Tape tape(false);
  auto a = encode_text_avg(tape, {make_seq({3, 4, 5, 6})}, params, cfg);
  auto b = encode_text_avg(tape, {make_seq({6, 5, 4, 3})}, params, cfg);
  CHECK(a->data == b->data);
}

TEST_CASE("avg encoder pad invariance") {
  auto cfg = tiny_config(TextEncoderKind::kAvg);
  auto params = init_params(cfg, 2);
  Tape tape(false);
  auto unpadded = make_seq({3, 4, 5, 6, 7}, 5);
  auto padded = make_seq({3, 4, 5, 6, 7}, 16);
  auto a = encode_text_avg(tape, {unpadded}, params, cfg);
  auto b = encode_text_avg(tape, {padded}, params, cfg);
  CHECK(a->data == b->data);
}

TEST_CASE("rnn length-1 equals one cell step; zero length rejected") {
  auto cfg = tiny_config(TextEncoderKind::kRnn);
  auto params = init_params(cfg, 3);
  Tape tape(false);
  auto one = encode_text_rnn(tape, {make_seq({5})}, params, cfg);
  CHECK(std::abs(row_norm(one, 0) - 1.0f) < 1e-6f);
  CHECK_THROWS_AS(encode_text_rnn(tape, {make_seq({})}, params, cfg), ConfigError);
}

TEST_CASE("rnn pad invariance via last-real-state selection") {
  auto cfg = tiny_config(TextEncoderKind::kRnn);
  auto params = init_params(cfg, 3);
  Tape tape(false);
  auto a = encode_text_rnn(tape, {make_seq({3, 4, 5}, 3)}, params, cfg);
  auto b = encode_text_rnn(tape, {make_seq({3, 4, 5}, 16)}, params, cfg);
  CHECK(a->data == b->data);
}

TEST_CASE("rnn and transformer are order sensitive") {
  for (auto kind : {TextEncoderKind::kRnn, TextEncoderKind::kTransformer}) {
    auto cfg = tiny_config(kind);
    auto params = init_params(cfg, 4);
    Tape tape(false);
    auto a = encode_text(tape, {make_seq({3, 4, 5, 6})}, params, cfg);
    auto b = encode_text(tape, {make_seq({4, 3, 5, 6})}, params, cfg);
    bool differ = false;
    for (std::size_t i = 0; i < a->data.size(); ++i)
      if (a->data[i] != b->data[i]) differ = true;
    CHECK(differ);
  }
}

TEST_CASE("transformer pad invariance") {
  auto cfg = tiny_config(TextEncoderKind::kTransformer);
  auto params = init_params(cfg, 5);
  Tape tape(false);
  auto a = encode_text_transformer(tape, {make_seq({3, 4, 5}, 3)}, params, cfg);
  auto b = encode_text_transformer(tape, {make_seq({3, 4, 5}, 16)}, params, cfg);
  for (std::size_t i = 0; i < a->data.size(); ++i)
    CHECK(std::abs(a->data[i] - b->data[i]) < 1e-6f);
}

TEST_CASE("transformer rejects over-long sequences") {
  auto cfg = tiny_config(TextEncoderKind::kTransformer);
  auto params = init_params(cfg, 5);
  Tape tape(false);
  std::vector<int> ids(cfg.transformer.max_len + 1, 3);
  TokenSequence seq;
  seq.ids = ids;
  seq.length = static_cast<int>(ids.size());
  seq.max_len = static_cast<int>(ids.size());
  CHECK_THROWS_AS(encode_text_transformer(tape, {seq}, params, cfg), ConfigError);
}

TEST_CASE("attention weights over masked positions are exactly zero") {
  auto cfg = tiny_config(TextEncoderKind::kTransformer);
  auto params = init_params(cfg, 6);
  const int L = 4, H = cfg.transformer.hidden;
  std::mt19937 rng(9);
  Tape tape(false);
  auto x = Tensor::from_values({L, H}, random_vec(rng, L * H));
  // mask out the last position as PAD for every query
  auto mask = Tensor::zeros({L, L});
  for (int r = 0; r < L; ++r) mask->at(r, L - 1) = -1e9f;
  // probe the softmax directly through the same mask construction
  auto scores = tape.matmul_nt(x, x);
  auto weights = tape.softmax(tape.add(tape.scale(scores, 0.1f), mask));
  for (int r = 0; r < L; ++r) CHECK(weights->at(r, L - 1) == 0.0f);
  // and through the full attention path
  auto out = multi_head_attention(tape, x, mask, params, "text.tf.l0.attn",
                                  cfg.transformer.heads);
  CHECK(out->rows() == L);
  for (float v : out->data) CHECK(std::isfinite(v));
}

TEST_CASE("single-block attention closed form on a 2-token input") {
  // 1 head; wq = wk = 0 so attention is exactly uniform; wv = wo = identity,
  // all biases zero. Output row = mean of the value rows = mean of inputs.
  const int H = 4;
  ParamMap params;
  auto zero_w = [&](const std::string& n) { params.emplace(n, Tensor::zeros({H, H})); };
  auto zero_b = [&](const std::string& n) { params.emplace(n, Tensor::zeros({1, H})); };
  auto eye = Tensor::zeros({H, H});
  for (int i = 0; i < H; ++i) eye->at(i, i) = 1.0f;
  zero_w("blk.wq");
  zero_w("blk.wk");
  params.emplace("blk.wv", eye);
  auto eye2 = Tensor::zeros({H, H});
  for (int i = 0; i < H; ++i) eye2->at(i, i) = 1.0f;
  params.emplace("blk.wo", eye2);
  zero_b("blk.bq");
  zero_b("blk.bk");
  zero_b("blk.bv");
  zero_b("blk.bo");

  Tape tape(false);
  auto x = Tensor::from_values({2, H}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto out = multi_head_attention(tape, x, nullptr, params, "blk", 1);
  for (int c = 0; c < H; ++c) {
    float expect = (x->at(0, c) + x->at(1, c)) / 2.0f;  // hand computation
    CHECK(out->at(0, c) == doctest::Approx(expect).epsilon(1e-6));
    CHECK(out->at(1, c) == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("end-to-end encoder gradients match finite differences") {
  std::mt19937 rng(31);
  for (auto kind :
       {TextEncoderKind::kAvg, TextEncoderKind::kRnn, TextEncoderKind::kTransformer}) {
    ModelConfig cfg;
    cfg.embed_dim = 3;
    cfg.word_dim = 4;
    cfg.image_feat_dim = 3;
    cfg.vocab_size = 8;
    cfg.text_encoder = kind;
    cfg.transformer = {1, 2, 4, 6, 8};
    cfg.rnn = {3, 2};
    cfg.avg = {5};
    auto params = init_params(cfg, 55);
    // bump magnitudes so finite differences are well-conditioned
    std::mt19937 prng(77);
    for (auto& [name, t] : params)
      if (name.find(".b") == std::string::npos)
        for (auto& v : t->data) v *= 10.0f;

    std::vector<TokenSequence> batch{make_seq({3, 4, 5}, 8), make_seq({6, 7}, 8)};
    auto weights = random_vec(rng, 2 * cfg.embed_dim, -1.0f, 1.0f);

    auto forward = [&](Tape& tape) {
      auto emb = encode_text(tape, batch, params, cfg);
      return tape.sum_all(tape.mul(emb, Tensor::from_values({2, cfg.embed_dim}, weights)));
    };
    Tape tape;
    auto loss = forward(tape);
    tape.backward(loss);

    for (const char* pname : {"text.word_emb", "text.out.w"}) {
      auto& t = params.at(pname);
      auto grads = t->grad;
      auto eval = [&]() {
        Tape fwd(false);
        return static_cast<double>(forward(fwd)->data[0]);
      };
      CHECK(max_rel_err(finite_diff(t->data, eval), grads) < 1e-3);
    }
    zero_grads(params);
  }
}

TEST_CASE("model config validation and round-trip") {
  auto cfg = tiny_config(TextEncoderKind::kTransformer);
  cfg.transformer.heads = 5;  // 6 % 5 != 0
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  auto good = tiny_config(TextEncoderKind::kRnn);
  std::string path = "model_config_test.txt";
  save_model_config(path, good);
  auto loaded = load_model_config(path);
  CHECK(loaded.embed_dim == good.embed_dim);
  CHECK(loaded.text_encoder == good.text_encoder);
  CHECK(loaded.rnn.hidden == good.rnn.hidden);
  CHECK(loaded.transformer.max_len == good.transformer.max_len);
  std::remove(path.c_str());
}
