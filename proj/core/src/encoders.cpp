#include "vse/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace vse {

namespace {

constexpr float kInitSigma = 0.02f;

std::vector<int> real_ids(const TokenSequence& seq) {
  return {seq.ids.begin(), seq.ids.begin() + seq.length};
}

void check_ids(const std::vector<TokenSequence>& batch, int vocab_size) {
  for (auto& seq : batch)
    for (int i = 0; i < seq.length; ++i)
      if (seq.ids[i] < 0 || seq.ids[i] >= vocab_size)
        throw ConfigError("encode_text: token id " + std::to_string(seq.ids[i]) +
                          " outside vocabulary of size " + std::to_string(vocab_size));
}

const TensorPtr& p(const ParamMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("missing parameter: " + name);
  return it->second;
}

TensorPtr linear(Tape& tape, const TensorPtr& x, const ParamMap& params,
                 const std::string& prefix) {
  return tape.add(tape.matmul(x, p(params, prefix + ".w")), p(params, prefix + ".b"));
}

}  // namespace

std::string to_string(TextEncoderKind k) {
  switch (k) {
    case TextEncoderKind::kAvg: return "avg";
    case TextEncoderKind::kRnn: return "rnn";
    case TextEncoderKind::kTransformer: return "transformer";
  }
  return "?";
}

TextEncoderKind text_encoder_from_string(const std::string& s) {
  if (s == "avg") return TextEncoderKind::kAvg;
  if (s == "rnn") return TextEncoderKind::kRnn;
  if (s == "transformer") return TextEncoderKind::kTransformer;
  throw ConfigError("unknown text encoder '" + s + "' (expected avg, rnn or transformer)");
}

void ModelConfig::validate() const {
  if (embed_dim <= 0) throw ConfigError("config: embed_dim must be > 0");
  if (word_dim <= 0) throw ConfigError("config: word_dim must be > 0");
  if (image_feat_dim <= 0) throw ConfigError("config: image_feat_dim must be > 0");
  if (vocab_size <= 0) throw ConfigError("config: vocab_size must be > 0");
  if (transformer.max_len < 1) throw ConfigError("config: max_len must be >= 1");
  if (text_encoder == TextEncoderKind::kTransformer) {
    if (transformer.hidden % transformer.heads != 0)
      throw ConfigError("config: transformer hidden must be divisible by heads");
    if (transformer.hidden != word_dim)
      throw ConfigError("config: transformer hidden must equal word_dim");
    if (transformer.layers < 1) throw ConfigError("config: transformer needs >= 1 layer");
  }
  if (text_encoder == TextEncoderKind::kRnn && (rnn.hidden <= 0 || rnn.layers < 1))
    throw ConfigError("config: bad GRU dimensions");
  if (text_encoder == TextEncoderKind::kAvg && avg.fc_dim <= 0)
    throw ConfigError("config: avg fc_dim must be > 0");
}

void save_model_config(const std::string& path, const ModelConfig& cfg) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("config: cannot open " + path + " for writing");
  os << "embed_dim=" << cfg.embed_dim << "\n"
     << "word_dim=" << cfg.word_dim << "\n"
     << "text_encoder=" << to_string(cfg.text_encoder) << "\n"
     << "image_feat_dim=" << cfg.image_feat_dim << "\n"
     << "vocab_size=" << cfg.vocab_size << "\n"
     << "transformer.layers=" << cfg.transformer.layers << "\n"
     << "transformer.heads=" << cfg.transformer.heads << "\n"
     << "transformer.hidden=" << cfg.transformer.hidden << "\n"
     << "transformer.ffn_dim=" << cfg.transformer.ffn_dim << "\n"
     << "transformer.max_len=" << cfg.transformer.max_len << "\n"
     << "rnn.hidden=" << cfg.rnn.hidden << "\n"
     << "rnn.layers=" << cfg.rnn.layers << "\n"
     << "avg.fc_dim=" << cfg.avg.fc_dim << "\n";
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("config: cannot open " + path);
  ModelConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("config: missing '=' at " + path + ":" + std::to_string(lineno));
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "embed_dim") cfg.embed_dim = std::stoi(val);
    else if (key == "word_dim") cfg.word_dim = std::stoi(val);
    else if (key == "text_encoder") cfg.text_encoder = text_encoder_from_string(val);
    else if (key == "image_feat_dim") cfg.image_feat_dim = std::stoi(val);
    else if (key == "vocab_size") cfg.vocab_size = std::stoi(val);
    else if (key == "transformer.layers") cfg.transformer.layers = std::stoi(val);
    else if (key == "transformer.heads") cfg.transformer.heads = std::stoi(val);
    else if (key == "transformer.hidden") cfg.transformer.hidden = std::stoi(val);
    else if (key == "transformer.ffn_dim") cfg.transformer.ffn_dim = std::stoi(val);
    else if (key == "transformer.max_len") cfg.transformer.max_len = std::stoi(val);
    else if (key == "rnn.hidden") cfg.rnn.hidden = std::stoi(val);
    else if (key == "rnn.layers") cfg.rnn.layers = std::stoi(val);
    else if (key == "avg.fc_dim") cfg.avg.fc_dim = std::stoi(val);
    else throw DataError("config: unknown key '" + key + "' in " + path);
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

class ParamBuilder {
 public:
  explicit ParamBuilder(std::uint64_t seed) : rng_(seed) {}

  void weight(ParamMap& m, const std::string& name, int r, int c) {
    auto t = Tensor::zeros({r, c}, true);
    for (auto& v : t->data) v = trunc_normal(kInitSigma);
    m.emplace(name, std::move(t));
  }
  // fan-in scaled variant for recurrent cells, which stall with a flat sigma
  void weight_scaled(ParamMap& m, const std::string& name, int r, int c) {
    const float sigma = 1.0f / std::sqrt(static_cast<float>(r));
    auto t = Tensor::zeros({r, c}, true);
    for (auto& v : t->data) v = trunc_normal(sigma);
    m.emplace(name, std::move(t));
  }
  void bias(ParamMap& m, const std::string& name, int n) {
    m.emplace(name, Tensor::zeros({1, n}, true));
  }
  void ones(ParamMap& m, const std::string& name, int n) {
    auto t = Tensor::zeros({1, n}, true);
    std::fill(t->data.begin(), t->data.end(), 1.0f);
    m.emplace(name, std::move(t));
  }

 private:
  float trunc_normal(float sigma) {
    std::normal_distribution<float> dist(0.0f, sigma);
    float v;
    do {
      v = dist(rng_);
    } while (std::abs(v) > 2.0f * sigma);
    return v;
  }
  std::mt19937_64 rng_;
};

}  // namespace

ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamBuilder b(seed);
  ParamMap m;
  const int D = cfg.embed_dim, E = cfg.word_dim, F = cfg.image_feat_dim, V = cfg.vocab_size;

  b.weight(m, "img.proj.w", F, D);
  b.bias(m, "img.proj.b", D);
  b.weight(m, "text.word_emb", V, E);

  switch (cfg.text_encoder) {
    case TextEncoderKind::kAvg: {
      b.weight(m, "text.avg.fc.w", E, cfg.avg.fc_dim);
      b.bias(m, "text.avg.fc.b", cfg.avg.fc_dim);
      b.weight(m, "text.out.w", cfg.avg.fc_dim, D);
      b.bias(m, "text.out.b", D);
      break;
    }
    case TextEncoderKind::kRnn: {
      const int H = cfg.rnn.hidden;
      for (int l = 0; l < cfg.rnn.layers; ++l) {
        const int in = (l == 0) ? E : H;
        std::string pre = "text.rnn.l" + std::to_string(l);
        for (const char* g : {"z", "r", "n"}) {
          b.weight_scaled(m, pre + ".w" + g, in, H);
          b.weight_scaled(m, pre + ".u" + g, H, H);
        }
        b.bias(m, pre + ".bz", H);
        b.bias(m, pre + ".br", H);
        b.bias(m, pre + ".bni", H);
        b.bias(m, pre + ".bnh", H);
      }
      b.weight(m, "text.out.w", H, D);
      b.bias(m, "text.out.b", D);
      break;
    }
    case TextEncoderKind::kTransformer: {
      const int H = cfg.transformer.hidden;
      b.weight(m, "text.pos_emb", cfg.transformer.max_len + 1, E);  // +1 for BOS
      for (int l = 0; l < cfg.transformer.layers; ++l) {
        std::string pre = "text.tf.l" + std::to_string(l);
        b.ones(m, pre + ".ln1.g", H);
        b.bias(m, pre + ".ln1.b", H);
        for (const char* g : {"q", "k", "v", "o"}) {
          b.weight(m, pre + ".attn.w" + g, H, H);
          b.bias(m, pre + ".attn.b" + g, H);
        }
        b.ones(m, pre + ".ln2.g", H);
        b.bias(m, pre + ".ln2.b", H);
        b.weight(m, pre + ".ffn.w1", H, cfg.transformer.ffn_dim);
        b.bias(m, pre + ".ffn.b1", cfg.transformer.ffn_dim);
        b.weight(m, pre + ".ffn.w2", cfg.transformer.ffn_dim, H);
        b.bias(m, pre + ".ffn.b2", H);
      }
      b.ones(m, "text.tf.lnf.g", H);
      b.bias(m, "text.tf.lnf.b", H);
      b.weight(m, "text.out.w", H, D);
      b.bias(m, "text.out.b", D);
      break;
    }
  }
  return m;
}

std::vector<std::string> image_tower_param_names(const ModelConfig&) {
  return {"img.proj.w", "img.proj.b"};
}

// ---------------------------------------------------------------------------
// Towers

TensorPtr encode_image(Tape& tape, const TensorPtr& features, const ParamMap& params,
                       const ModelConfig& cfg) {
  if (features->cols() != cfg.image_feat_dim)
    throw ConfigError("encode_image: feature dim " + std::to_string(features->cols()) +
                      " != configured " + std::to_string(cfg.image_feat_dim));
  return tape.l2_normalize(linear(tape, features, params, "img.proj"));
}

TensorPtr encode_text_avg(Tape& tape, const std::vector<TokenSequence>& batch,
                          const ParamMap& params, const ModelConfig& cfg) {
  check_ids(batch, cfg.vocab_size);
  const auto& word_emb = p(params, "text.word_emb");
  std::vector<TensorPtr> means;
  means.reserve(batch.size());
  for (auto& seq : batch) {
    if (seq.length == 0) {
      means.push_back(Tensor::zeros({1, cfg.word_dim}));  // degenerate: empty title
    } else {
      // canonical id order keeps the mean bitwise order-invariant
      auto ids = real_ids(seq);
      std::sort(ids.begin(), ids.end());
      means.push_back(tape.mean_rows(tape.embedding_lookup(word_emb, ids)));
    }
  }
  auto x = tape.concat_rows(means);
  x = tape.relu(linear(tape, x, params, "text.avg.fc"));
  return tape.l2_normalize(linear(tape, x, params, "text.out"));
}

namespace {

TensorPtr gru_cell(Tape& tape, const TensorPtr& x, const TensorPtr& h, const ParamMap& params,
                   const std::string& pre) {
  auto z = tape.sigmoid(tape.add(
      tape.add(tape.matmul(x, p(params, pre + ".wz")), tape.matmul(h, p(params, pre + ".uz"))),
      p(params, pre + ".bz")));
  auto r = tape.sigmoid(tape.add(
      tape.add(tape.matmul(x, p(params, pre + ".wr")), tape.matmul(h, p(params, pre + ".ur"))),
      p(params, pre + ".br")));
  auto hn = tape.add(tape.matmul(h, p(params, pre + ".un")), p(params, pre + ".bnh"));
  auto n = tape.tanh_(tape.add(tape.add(tape.matmul(x, p(params, pre + ".wn")),
                                        p(params, pre + ".bni")),
                               tape.mul(r, hn)));
  // h' = n + z * (h - n)
  return tape.add(n, tape.mul(z, tape.sub(h, n)));
}

}  // namespace

TensorPtr encode_text_rnn(Tape& tape, const std::vector<TokenSequence>& batch,
                          const ParamMap& params, const ModelConfig& cfg) {
  check_ids(batch, cfg.vocab_size);
  const auto& word_emb = p(params, "text.word_emb");
  const int H = cfg.rnn.hidden;
  const int B = static_cast<int>(batch.size());
  int T = 0;
  for (auto& seq : batch) {
    if (seq.length == 0)
      throw ConfigError("encode_text_rnn: zero-length sequence (caller must filter)");
    T = std::max(T, seq.length);
  }

  // Lockstep over the batch: steps past an example's length still compute a
  // state, but only the state at length-1 is ever read, so neither values
  // nor gradients leak from the padding.
  std::vector<TensorPtr> layer_in;
  layer_in.reserve(T);
  for (int t = 0; t < T; ++t) {
    std::vector<int> ids(B, 0);
    for (int i = 0; i < B; ++i)
      if (t < batch[i].length) ids[i] = batch[i].ids[t];
    layer_in.push_back(tape.embedding_lookup(word_emb, ids));
  }
  for (int l = 0; l < cfg.rnn.layers; ++l) {
    std::string pre = "text.rnn.l" + std::to_string(l);
    TensorPtr h = Tensor::zeros({B, H});
    std::vector<TensorPtr> layer_out;
    layer_out.reserve(T);
    for (int t = 0; t < T; ++t) {
      h = gru_cell(tape, layer_in[t], h, params, pre);
      layer_out.push_back(h);
    }
    layer_in = std::move(layer_out);
  }
  std::vector<TensorPtr> finals;
  finals.reserve(B);
  for (int i = 0; i < B; ++i)
    finals.push_back(tape.slice_rows(layer_in[batch[i].length - 1], i, 1));
  auto x = tape.concat_rows(finals);
  return tape.l2_normalize(linear(tape, x, params, "text.out"));
}

TensorPtr multi_head_attention(Tape& tape, const TensorPtr& x, const TensorPtr& mask,
                               const ParamMap& params, const std::string& prefix, int heads) {
  const int H = x->cols();
  if (H % heads != 0) throw ConfigError("attention: hidden not divisible by heads");
  const int dk = H / heads;
  auto q = tape.add(tape.matmul(x, p(params, prefix + ".wq")), p(params, prefix + ".bq"));
  auto k = tape.add(tape.matmul(x, p(params, prefix + ".wk")), p(params, prefix + ".bk"));
  auto v = tape.add(tape.matmul(x, p(params, prefix + ".wv")), p(params, prefix + ".bv"));
  std::vector<TensorPtr> head_out;
  head_out.reserve(heads);
  const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk));
  for (int h = 0; h < heads; ++h) {
    auto qh = tape.slice_cols(q, h * dk, dk);
    auto kh = tape.slice_cols(k, h * dk, dk);
    auto vh = tape.slice_cols(v, h * dk, dk);
    auto scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dk);
    if (mask) scores = tape.add(scores, mask);
    head_out.push_back(tape.matmul(tape.softmax(scores), vh));
  }
  auto concat = tape.concat_cols(head_out);
  return tape.add(tape.matmul(concat, p(params, prefix + ".wo")), p(params, prefix + ".bo"));
}

TensorPtr encode_text_transformer(Tape& tape, const std::vector<TokenSequence>& batch,
                                  const ParamMap& params, const ModelConfig& cfg) {
  check_ids(batch, cfg.vocab_size);
  const auto& word_emb = p(params, "text.word_emb");
  const auto& pos_emb = p(params, "text.pos_emb");
  const int heads = cfg.transformer.heads;
  std::vector<TensorPtr> pooled;
  pooled.reserve(batch.size());
  for (auto& seq : batch) {
    if (seq.length > cfg.transformer.max_len)
      throw ConfigError("encode_text_transformer: sequence length " +
                        std::to_string(seq.length) + " exceeds max_len " +
                        std::to_string(cfg.transformer.max_len));
    std::vector<int> ids{Vocabulary::kBos};
    auto real = real_ids(seq);
    ids.insert(ids.end(), real.begin(), real.end());
    const int L = static_cast<int>(ids.size());
    auto x = tape.add(tape.embedding_lookup(word_emb, ids), tape.slice_rows(pos_emb, 0, L));
    for (int l = 0; l < cfg.transformer.layers; ++l) {
      std::string pre = "text.tf.l" + std::to_string(l);
      // pre-norm residual blocks
      auto h = tape.layer_norm(x, p(params, pre + ".ln1.g"), p(params, pre + ".ln1.b"));
      x = tape.add(x, multi_head_attention(tape, h, nullptr, params, pre + ".attn", heads));
      auto h2 = tape.layer_norm(x, p(params, pre + ".ln2.g"), p(params, pre + ".ln2.b"));
      auto f = tape.gelu(tape.add(tape.matmul(h2, p(params, pre + ".ffn.w1")),
                                  p(params, pre + ".ffn.b1")));
      f = tape.add(tape.matmul(f, p(params, pre + ".ffn.w2")), p(params, pre + ".ffn.b2"));
      x = tape.add(x, f);
    }
    x = tape.layer_norm(x, p(params, "text.tf.lnf.g"), p(params, "text.tf.lnf.b"));
    pooled.push_back(tape.slice_rows(x, 0, 1));  // BOS state
  }
  auto out = tape.concat_rows(pooled);
  return tape.l2_normalize(linear(tape, out, params, "text.out"));
}

TensorPtr encode_text(Tape& tape, const std::vector<TokenSequence>& batch,
                      const ParamMap& params, const ModelConfig& cfg) {
  switch (cfg.text_encoder) {
    case TextEncoderKind::kAvg: return encode_text_avg(tape, batch, params, cfg);
    case TextEncoderKind::kRnn: return encode_text_rnn(tape, batch, params, cfg);
    case TextEncoderKind::kTransformer:
      return encode_text_transformer(tape, batch, params, cfg);
  }
  throw ConfigError("encode_text: bad encoder kind");
}

}  // namespace vse
