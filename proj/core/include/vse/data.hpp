#pragma once

// (image feature, title) pair ingestion plus a synthetic generator that
// makes the encoder-ordering comparison testable at desk scale.

#include <cstdint>
#include <string>
#include <vector>

namespace vse {

struct PairedExample {
  std::string id;
  std::vector<float> image_features;
  std::string title;
  std::string group_id;  // optional duplicate group
};

struct Dataset {
  std::vector<PairedExample> examples;
  std::vector<int> train_idx, val_idx, test_idx;
  int feature_dim = 0;
  int dropped_empty_titles = 0;  // counted, never imputed
};

struct SplitConfig {
  double train = 0.90;
  double val = 0.01;
  double test = 0.09;
};

// Streaming parse of line-delimited JSON records
//   {"id": str, "title": str, "features": [float x F], "group": str?}
// Splits assigned by a stable hash of id unless a manifest maps ids to
// "train"/"val"/"test" (one "id<TAB>split" line each).
Dataset load_dataset(const std::string& path, const SplitConfig& split = {},
                     const std::string& manifest_path = "");

void write_jsonl(const std::string& path, const std::vector<PairedExample>& examples);

// Packed binary cache: magic "VSECACHE", version u32, count u64, F u32,
// then per record: id_len u16 + id, group_len u16 + group, title_len u32 +
// title, F float32 features.
void write_cache(const std::string& path, const std::vector<PairedExample>& examples,
                 int feature_dim);
std::vector<PairedExample> read_cache(const std::string& path);

struct SyntheticSpec {
  int num_classes = 50;       // C; must be even when order_coding
  int train_samples = 5000;
  int val_samples = 500;
  int test_samples = 500;
  int feature_dim = 32;       // F
  float feature_noise = 0.01f;  // sigma
  float latent_weight = 1.0f;   // class latent vs word-atom mean balance
  float title_len_mean = 17.0f;
  float title_len_sd = 5.0f;
  int min_len = 3;
  bool order_coding = false;
  int atoms_per_class = 40;   // word atoms per class (per pair when coded)
  std::uint64_t seed = 1;
};

// Per class: a latent unit vector; features = projection of the latent plus
// the title's word-atom vectors, plus Gaussian noise. Titles are atom
// sequences with Normal(mean, sd) word counts clipped at min_len. With
// order_coding, classes come in pairs that share identical word BAGS per
// item and differ only in word order, so order-blind encoders cannot tell
// them apart. Deterministic for a fixed spec.
Dataset generate_synthetic(const SyntheticSpec& spec);

std::uint64_t stable_hash(const std::string& s);  // FNV-1a 64

}  // namespace vse
