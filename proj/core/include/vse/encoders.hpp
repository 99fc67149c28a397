#pragma once

// The two towers: a linear image-feature projection and three
// interchangeable text encoders (word average, 2-layer GRU, transformer),
// all emitting L2-normalized D-dimensional embeddings.

#include <cstdint>
#include <string>
#include <vector>

#include "vse/tensor.hpp"
#include "vse/tokenizer.hpp"

namespace vse {

enum class TextEncoderKind { kAvg, kRnn, kTransformer };

std::string to_string(TextEncoderKind k);
TextEncoderKind text_encoder_from_string(const std::string& s);

struct TransformerConfig {
  int layers = 6;
  int heads = 4;
  int hidden = 128;  // must equal word_dim
  int ffn_dim = 512;
  int max_len = 32;
};

struct RnnConfig {
  int hidden = 256;
  int layers = 2;
};

struct AvgConfig {
  int fc_dim = 512;
};

struct ModelConfig {
  int embed_dim = 256;  // D, the joint space
  int word_dim = 128;   // E
  TextEncoderKind text_encoder = TextEncoderKind::kTransformer;
  int image_feat_dim = 32;  // F
  TransformerConfig transformer;
  RnnConfig rnn;
  AvgConfig avg;
  int vocab_size = 0;  // V, set from the trained vocabulary

  void validate() const;
};

// Key-value serialization, stored beside checkpoints.
void save_model_config(const std::string& path, const ModelConfig& cfg);
ModelConfig load_model_config(const std::string& path);

// Seeded init: truncated normal (sigma 0.02) for weights and embeddings,
// fan-in scaled (sigma 1/sqrt(fan_in)) for GRU cell matrices, zeros for
// biases, ones for layer-norm gains. Covers both towers.
ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed);

// features [BxF] -> unit-norm [BxD]
TensorPtr encode_image(Tape& tape, const TensorPtr& features, const ParamMap& params,
                       const ModelConfig& cfg);

// Dispatches on cfg.text_encoder.
TensorPtr encode_text(Tape& tape, const std::vector<TokenSequence>& batch,
                      const ParamMap& params, const ModelConfig& cfg);

TensorPtr encode_text_avg(Tape& tape, const std::vector<TokenSequence>& batch,
                          const ParamMap& params, const ModelConfig& cfg);
TensorPtr encode_text_rnn(Tape& tape, const std::vector<TokenSequence>& batch,
                          const ParamMap& params, const ModelConfig& cfg);
TensorPtr encode_text_transformer(Tape& tape, const std::vector<TokenSequence>& batch,
                                  const ParamMap& params, const ModelConfig& cfg);

// Multi-head self-attention over x [LxH] with an additive mask [LxL]
// (0 = attend, -inf = blocked). Exposed so masking is testable directly.
TensorPtr multi_head_attention(Tape& tape, const TensorPtr& x, const TensorPtr& mask,
                               const ParamMap& params, const std::string& prefix, int heads);

// Names of parameters the stage-1 freeze flag applies to.
std::vector<std::string> image_tower_param_names(const ModelConfig& cfg);

}  // namespace vse
