#include "vse/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "vse/tensor.hpp"
#include "vse/tokenizer.hpp"

namespace vse {

std::uint64_t stable_hash(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

constexpr char kCacheMagic[8] = {'V', 'S', 'E', 'C', 'A', 'C', 'H', 'E'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

Dataset load_dataset(const std::string& path, const SplitConfig& split,
                     const std::string& manifest_path) {
  std::ifstream is(path);
  if (!is) throw DataError("load_dataset: cannot open " + path);

  std::unordered_map<std::string, std::string> manifest;
  if (!manifest_path.empty()) {
    std::ifstream ms(manifest_path);
    if (!ms) throw DataError("load_dataset: cannot open manifest " + manifest_path);
    std::string line;
    while (std::getline(ms, line)) {
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw DataError("load_dataset: malformed manifest line: " + line);
      manifest.emplace(line.substr(0, tab), line.substr(tab + 1));
    }
  }

  Dataset ds;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("load_dataset: " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    PairedExample ex;
    try {
      ex.id = j.at("id").get<std::string>();
      ex.title = j.at("title").get<std::string>();
      ex.image_features = j.at("features").get<std::vector<float>>();
      if (j.contains("group")) ex.group_id = j["group"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("load_dataset: " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    for (float f : ex.image_features)
      if (!std::isfinite(f))
        throw DataError("load_dataset: non-finite feature at " + path + ":" +
                        std::to_string(lineno));
    if (ds.feature_dim == 0) ds.feature_dim = static_cast<int>(ex.image_features.size());
    if (static_cast<int>(ex.image_features.size()) != ds.feature_dim)
      throw DataError("load_dataset: feature dim " + std::to_string(ex.image_features.size()) +
                      " != " + std::to_string(ds.feature_dim) + " at " + path + ":" +
                      std::to_string(lineno));
    if (!seen_ids.insert(ex.id).second)
      throw DataError("load_dataset: duplicate id '" + ex.id + "' at line " +
                      std::to_string(lineno));
    if (preprocess(ex.title).empty()) {
      ++ds.dropped_empty_titles;
      continue;
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw DataError("load_dataset: no usable records in " + path);

  const double ptotal = split.train + split.val + split.test;
  for (int i = 0; i < static_cast<int>(ds.examples.size()); ++i) {
    const std::string& id = ds.examples[i].id;
    std::string s;
    if (!manifest.empty()) {
      auto it = manifest.find(id);
      if (it == manifest.end())
        throw DataError("load_dataset: id '" + id + "' missing from manifest");
      s = it->second;
    } else {
      double u = static_cast<double>(stable_hash(id) % 1000000ull) / 1000000.0 * ptotal;
      s = (u < split.train) ? "train" : (u < split.train + split.val) ? "val" : "test";
    }
    if (s == "train") ds.train_idx.push_back(i);
    else if (s == "val") ds.val_idx.push_back(i);
    else if (s == "test") ds.test_idx.push_back(i);
    else throw DataError("load_dataset: unknown split '" + s + "' for id " + id);
  }
  return ds;
}

void write_jsonl(const std::string& path, const std::vector<PairedExample>& examples) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("write_jsonl: cannot open " + path + " for writing");
  for (auto& ex : examples) {
    nlohmann::json j;
    j["id"] = ex.id;
    j["title"] = ex.title;
    j["features"] = ex.image_features;
    if (!ex.group_id.empty()) j["group"] = ex.group_id;
    os << j.dump() << '\n';
  }
  if (!os) throw DataError("write_jsonl: write failed for " + path);
}

void write_cache(const std::string& path, const std::vector<PairedExample>& examples,
                 int feature_dim) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("write_cache: cannot open " + path + " for writing");
  os.write(kCacheMagic, 8);
  put<std::uint32_t>(os, 1);
  put<std::uint64_t>(os, examples.size());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(feature_dim));
  for (auto& ex : examples) {
    if (static_cast<int>(ex.image_features.size()) != feature_dim)
      throw DataError("write_cache: feature dim mismatch for id " + ex.id);
    put<std::uint16_t>(os, static_cast<std::uint16_t>(ex.id.size()));
    os.write(ex.id.data(), static_cast<std::streamsize>(ex.id.size()));
    put<std::uint16_t>(os, static_cast<std::uint16_t>(ex.group_id.size()));
    os.write(ex.group_id.data(), static_cast<std::streamsize>(ex.group_id.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ex.title.size()));
    os.write(ex.title.data(), static_cast<std::streamsize>(ex.title.size()));
    os.write(reinterpret_cast<const char*>(ex.image_features.data()),
             static_cast<std::streamsize>(feature_dim * sizeof(float)));
  }
  if (!os) throw DataError("write_cache: write failed for " + path);
}

std::vector<PairedExample> read_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_cache: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCacheMagic, 8) != 0)
    throw DataError("read_cache: bad magic in " + path);
  auto version = get<std::uint32_t>(is);
  if (version != 1) throw DataError("read_cache: unsupported version");
  auto count = get<std::uint64_t>(is);
  auto dim = get<std::uint32_t>(is);
  std::vector<PairedExample> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    PairedExample ex;
    ex.id.resize(get<std::uint16_t>(is));
    is.read(ex.id.data(), static_cast<std::streamsize>(ex.id.size()));
    ex.group_id.resize(get<std::uint16_t>(is));
    is.read(ex.group_id.data(), static_cast<std::streamsize>(ex.group_id.size()));
    ex.title.resize(get<std::uint32_t>(is));
    is.read(ex.title.data(), static_cast<std::streamsize>(ex.title.size()));
    ex.image_features.resize(dim);
    is.read(reinterpret_cast<char*>(ex.image_features.data()),
            static_cast<std::streamsize>(dim * sizeof(float)));
    if (!is) throw DataError("read_cache: truncated record " + std::to_string(i));
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

std::vector<float> random_unit(std::mt19937_64& rng, int dim) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> v(dim);
  float ss = 0.0f;
  for (auto& x : v) {
    x = nd(rng);
    ss += x * x;
  }
  float n = std::sqrt(std::max(ss, 1e-12f));
  for (auto& x : v) x /= n;
  return v;
}

std::string random_word(std::mt19937_64& rng, std::set<std::string>& used) {
  std::uniform_int_distribution<int> len_d(4, 7);
  std::uniform_int_distribution<int> ch_d(0, 25);
  for (;;) {
    int len = len_d(rng);
    std::string w;
    for (int i = 0; i < len; ++i) w += static_cast<char>('a' + ch_d(rng));
    if (used.insert(w).second) return w;
  }
}

std::string join(const std::vector<int>& atom_ids, const std::vector<std::string>& atoms) {
  std::string out;
  for (std::size_t i = 0; i < atom_ids.size(); ++i) {
    if (i) out += ' ';
    out += atoms[atom_ids[i]];
  }
  return out;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("generate_synthetic: need >= 2 classes");
  if (spec.order_coding && spec.num_classes % 2 != 0)
    throw ConfigError("generate_synthetic: order_coding needs an even class count");
  if (spec.feature_noise < 0.0f) throw ConfigError("generate_synthetic: sigma must be >= 0");
  if (spec.min_len < 3) throw ConfigError("generate_synthetic: min_len must be >= 3");

  std::mt19937_64 rng(spec.seed);
  const int C = spec.num_classes, F = spec.feature_dim;
  const int vocab_groups = spec.order_coding ? C / 2 : C;

  // word atoms and their feature-space directions
  std::set<std::string> used_words;
  std::vector<std::string> atoms;
  std::vector<std::vector<float>> atom_vec;
  std::vector<std::vector<int>> group_atoms(vocab_groups);
  for (int g = 0; g < vocab_groups; ++g) {
    for (int a = 0; a < spec.atoms_per_class; ++a) {
      group_atoms[g].push_back(static_cast<int>(atoms.size()));
      atoms.push_back(random_word(rng, used_words));
      atom_vec.push_back(random_unit(rng, F));
    }
  }
  std::vector<std::vector<float>> class_latent(C);
  for (int c = 0; c < C; ++c) class_latent[c] = random_unit(rng, F);

  std::normal_distribution<float> len_d(spec.title_len_mean, spec.title_len_sd);
  std::normal_distribution<float> noise_d(0.0f, 1.0f);

  // positional=true weights atoms by position (w_i = L - i) so the feature
  // vector depends on token order, not just the bag
  auto make_features = [&](int cls, const std::vector<int>& atom_ids, bool positional) {
    std::vector<float> mean(F, 0.0f);
    const int L = static_cast<int>(atom_ids.size());
    float wsum = 0.0f;
    for (int i = 0; i < L; ++i) {
      float w = positional ? static_cast<float>(L - i) : 1.0f;
      wsum += w;
      for (int d = 0; d < F; ++d) mean[d] += w * atom_vec[atom_ids[i]][d];
    }
    float inv = 1.0f / wsum;
    float ss = 0.0f;
    for (int d = 0; d < F; ++d) {
      mean[d] = mean[d] * inv + spec.latent_weight * class_latent[cls][d];
      ss += mean[d] * mean[d];
    }
    float n = std::sqrt(std::max(ss, 1e-12f));
    for (int d = 0; d < F; ++d) mean[d] = mean[d] / n + spec.feature_noise * noise_d(rng);
    return mean;
  };

  // every item of a coded class pair carries the same fixed multiset of atoms;
  // only the arrangement varies, so order-blind encoders see identical titles
  std::vector<std::vector<int>> pair_bag(vocab_groups);
  if (spec.order_coding) {
    for (int p = 0; p < vocab_groups; ++p) {
      int length = std::max(spec.min_len, static_cast<int>(std::lround(len_d(rng))));
      std::uniform_int_distribution<int> pick(0, spec.atoms_per_class - 1);
      for (int i = 0; i < length; ++i) pair_bag[p].push_back(group_atoms[p][pick(rng)]);
    }
  }

  Dataset ds;
  ds.feature_dim = F;
  int next_id = 0;

  auto emit_split = [&](int count, std::vector<int>& split_idx) {
    int made = 0;
    int cls_cursor = 0;
    while (made < count) {
      if (spec.order_coding) {
        // one twin pair per step: a fresh arrangement of the pair bag and its
        // reversal, one item per class of the pair
        int pair = (cls_cursor / 2) % vocab_groups;
        std::vector<int> fwd = pair_bag[pair];
        std::shuffle(fwd.begin(), fwd.end(), rng);
        std::vector<int> rev(fwd.rbegin(), fwd.rend());
        std::string bag_tag = "pair" + std::to_string(pair) + "-" + std::to_string(next_id);
        for (int twin = 0; twin < 2 && made < count; ++twin) {
          int cls = 2 * pair + twin;
          const auto& order = twin == 0 ? fwd : rev;
          PairedExample ex;
          ex.id = "syn-" + std::to_string(next_id++);
          ex.title = join(order, atoms);
          ex.image_features = make_features(cls, order, true);
          ex.group_id = bag_tag;
          split_idx.push_back(static_cast<int>(ds.examples.size()));
          ds.examples.push_back(std::move(ex));
          ++made;
        }
        cls_cursor += 2;
      } else {
        int length = std::max(spec.min_len,
                              static_cast<int>(std::lround(len_d(rng))));
        int cls = cls_cursor % C;
        std::uniform_int_distribution<int> pick(0, spec.atoms_per_class - 1);
        std::vector<int> atom_ids;
        for (int i = 0; i < length; ++i) atom_ids.push_back(group_atoms[cls][pick(rng)]);
        PairedExample ex;
        ex.id = "syn-" + std::to_string(next_id++);
        ex.title = join(atom_ids, atoms);
        ex.image_features = make_features(cls, atom_ids, false);
        split_idx.push_back(static_cast<int>(ds.examples.size()));
        ds.examples.push_back(std::move(ex));
        ++made;
        ++cls_cursor;
      }
    }
  };

  emit_split(spec.train_samples, ds.train_idx);
  emit_split(spec.val_samples, ds.val_idx);
  emit_split(spec.test_samples, ds.test_idx);
  return ds;
}

}  // namespace vse
