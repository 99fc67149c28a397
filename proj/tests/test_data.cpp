#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "vse/data.hpp"
#include "vse/tensor.hpp"
#include "vse/tokenizer.hpp"

using namespace vse;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

std::vector<PairedExample> sample_examples(int n, int dim) {
  std::vector<PairedExample> out;
  for (int i = 0; i < n; ++i) {
    PairedExample ex;
    ex.id = "item-" + std::to_string(i);
    ex.title = "Blue Denim Jeans " + std::to_string(i);
    for (int d = 0; d < dim; ++d) ex.image_features.push_back(0.1f * i + 0.01f * d);
    if (i % 3 == 0) ex.group_id = "grp-" + std::to_string(i / 3);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

TEST_CASE("jsonl round-trip preserves records and splits everything") {
  TempFile f("data_roundtrip.jsonl");
  auto examples = sample_examples(30, 4);
  write_jsonl(f.path, examples);
  auto ds = load_dataset(f.path);
  REQUIRE(ds.examples.size() == examples.size());
  CHECK(ds.feature_dim == 4);
  CHECK(ds.dropped_empty_titles == 0);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    CHECK(ds.examples[i].id == examples[i].id);
    CHECK(ds.examples[i].title == examples[i].title);
    CHECK(ds.examples[i].group_id == examples[i].group_id);
    CHECK(ds.examples[i].image_features == examples[i].image_features);
  }
  CHECK(ds.train_idx.size() + ds.val_idx.size() + ds.test_idx.size() == examples.size());
}

TEST_CASE("splits are disjoint and deterministic") {
  TempFile f("data_split.jsonl");
  write_jsonl(f.path, sample_examples(200, 3));
  auto a = load_dataset(f.path);
  auto b = load_dataset(f.path);
  CHECK(a.train_idx == b.train_idx);
  CHECK(a.val_idx == b.val_idx);
  CHECK(a.test_idx == b.test_idx);
  std::set<int> seen;
  for (auto* v : {&a.train_idx, &a.val_idx, &a.test_idx})
    for (int i : *v) CHECK(seen.insert(i).second);
  CHECK(seen.size() == a.examples.size());
  // the default 90/1/9 split should put most items in train
  CHECK(a.train_idx.size() > 150);
}

TEST_CASE("split assignment follows the id hash, not file order") {
  TempFile f("data_order.jsonl");
  auto fwd = sample_examples(50, 2);
  auto rev = fwd;
  std::reverse(rev.begin(), rev.end());
  TempFile g("data_order_rev.jsonl");
  write_jsonl(f.path, fwd);
  write_jsonl(g.path, rev);
  auto to_ids = [](const Dataset& ds, const std::vector<int>& idx) {
    std::set<std::string> s;
    for (int i : idx) s.insert(ds.examples[i].id);
    return s;
  };
  auto a = load_dataset(f.path);
  auto b = load_dataset(g.path);
  CHECK(to_ids(a, a.train_idx) == to_ids(b, b.train_idx));
  CHECK(to_ids(a, a.val_idx) == to_ids(b, b.val_idx));
  CHECK(to_ids(a, a.test_idx) == to_ids(b, b.test_idx));
}

TEST_CASE("manifest overrides the hash split") {
  TempFile f("data_manifest.jsonl");
  TempFile m("data_manifest.tsv");
  auto examples = sample_examples(6, 2);
  write_jsonl(f.path, examples);
  {
    std::ofstream os(m.path);
    for (int i = 0; i < 6; ++i)
      os << examples[i].id << '\t' << (i < 4 ? "train" : i == 4 ? "val" : "test") << '\n';
  }
  auto ds = load_dataset(f.path, {}, m.path);
  CHECK(ds.train_idx.size() == 4);
  CHECK(ds.val_idx.size() == 1);
  CHECK(ds.test_idx.size() == 1);

  // an id missing from the manifest is an error
  std::ofstream os(m.path, std::ios::trunc);
  os << examples[0].id << "\ttrain\n";
  os.close();
  CHECK_THROWS_AS(load_dataset(f.path, {}, m.path), DataError);
}

TEST_CASE("empty-after-preprocess titles are dropped and counted") {
  TempFile f("data_empty.jsonl");
  {
    std::ofstream os(f.path);
    os << R"({"id":"a","title":"Blue Jeans","features":[1.0,2.0]})" << '\n';
    os << R"({"id":"b","title":"!!!","features":[3.0,4.0]})" << '\n';
    os << R"({"id":"c","title":"  ","features":[5.0,6.0]})" << '\n';
  }
  auto ds = load_dataset(f.path);
  CHECK(ds.examples.size() == 1);
  CHECK(ds.dropped_empty_titles == 2);
}

TEST_CASE("loader rejects malformed input with a line number") {
  TempFile f("data_bad.jsonl");

  SUBCASE("missing file") { CHECK_THROWS_AS(load_dataset("no_such_file.jsonl", {}), DataError); }

  SUBCASE("broken json") {
    std::ofstream os(f.path);
    os << R"({"id":"a","title":"x y z","features":[1.0]})" << '\n';
    os << "{not json" << '\n';
    os.close();
    try {
      load_dataset(f.path);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
  }

  SUBCASE("feature dim mismatch") {
    std::ofstream os(f.path);
    os << R"({"id":"a","title":"x y z","features":[1.0,2.0]})" << '\n';
    os << R"({"id":"b","title":"x y z","features":[1.0]})" << '\n';
    os.close();
    CHECK_THROWS_AS(load_dataset(f.path), DataError);
  }

  SUBCASE("duplicate id") {
    std::ofstream os(f.path);
    os << R"({"id":"a","title":"x y z","features":[1.0]})" << '\n';
    os << R"({"id":"a","title":"x y w","features":[2.0]})" << '\n';
    os.close();
    CHECK_THROWS_AS(load_dataset(f.path), DataError);
  }

  SUBCASE("all titles empty") {
    std::ofstream os(f.path);
    os << R"({"id":"a","title":"!!!","features":[1.0]})" << '\n';
    os.close();
    CHECK_THROWS_AS(load_dataset(f.path), DataError);
  }

  SUBCASE("non-finite feature") {
    std::ofstream os(f.path);
    os << R"({"id":"a","title":"x y z","features":[1e999]})" << '\n';
    os.close();
    CHECK_THROWS_AS(load_dataset(f.path), DataError);
  }
}

TEST_CASE("binary cache round-trip is exact") {
  TempFile f("data_cache.bin");
  auto examples = sample_examples(20, 5);
  write_cache(f.path, examples, 5);
  auto back = read_cache(f.path);
  REQUIRE(back.size() == examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    CHECK(back[i].id == examples[i].id);
    CHECK(back[i].title == examples[i].title);
    CHECK(back[i].group_id == examples[i].group_id);
    CHECK(back[i].image_features == examples[i].image_features);
  }
}

TEST_CASE("cache rejects bad magic and truncation") {
  TempFile f("data_cache_bad.bin");
  {
    std::ofstream os(f.path, std::ios::binary);
    os << "NOTCACHE" << std::string(16, '\0');
  }
  CHECK_THROWS_AS(read_cache(f.path), DataError);

  auto examples = sample_examples(4, 3);
  write_cache(f.path, examples, 3);
  // chop the last record short
  std::ifstream is(f.path, std::ios::binary);
  std::stringstream buf;
  buf << is.rdbuf();
  std::string bytes = buf.str();
  is.close();
  std::ofstream os(f.path, std::ios::binary | std::ios::trunc);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
  os.close();
  CHECK_THROWS_AS(read_cache(f.path), DataError);
}

TEST_CASE("synthetic generator basic shape and determinism") {
  SyntheticSpec spec;
  spec.num_classes = 6;
  spec.train_samples = 120;
  spec.val_samples = 24;
  spec.test_samples = 24;
  spec.feature_dim = 8;
  auto a = generate_synthetic(spec);
  auto b = generate_synthetic(spec);
  CHECK(a.examples.size() == 168);
  CHECK(a.train_idx.size() == 120);
  CHECK(a.val_idx.size() == 24);
  CHECK(a.test_idx.size() == 24);
  CHECK(a.feature_dim == 8);
  REQUIRE(a.examples.size() == b.examples.size());
  for (std::size_t i = 0; i < a.examples.size(); ++i) {
    CHECK(a.examples[i].id == b.examples[i].id);
    CHECK(a.examples[i].title == b.examples[i].title);
    CHECK(a.examples[i].image_features == b.examples[i].image_features);
  }
  std::set<std::string> ids;
  for (auto& ex : a.examples) {
    CHECK(ids.insert(ex.id).second);
    CHECK(static_cast<int>(ex.image_features.size()) == 8);
    CHECK(!ex.title.empty());
  }

  auto c = generate_synthetic([&] {
    auto s = spec;
    s.seed = 2;
    return s;
  }());
  CHECK(c.examples[0].title != a.examples[0].title);
}

TEST_CASE("synthetic title lengths match the requested distribution") {
  SyntheticSpec spec;
  spec.num_classes = 10;
  spec.train_samples = 10000;
  spec.val_samples = 10;
  spec.test_samples = 10;
  spec.feature_dim = 4;
  auto ds = generate_synthetic(spec);
  double sum = 0.0, sq = 0.0;
  int n = 0;
  for (int i : ds.train_idx) {
    int words = 1;
    for (char c : ds.examples[i].title)
      if (c == ' ') ++words;
    CHECK(words >= spec.min_len);
    sum += words;
    sq += static_cast<double>(words) * words;
    ++n;
  }
  double mean = sum / n;
  double sd = std::sqrt(sq / n - mean * mean);
  CHECK(mean == doctest::Approx(17.0).epsilon(0.06));
  CHECK(sd == doctest::Approx(5.0).epsilon(0.12));
}

TEST_CASE("order coding: twins share the exact word bag in opposite order") {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.train_samples = 400;
  spec.val_samples = 40;
  spec.test_samples = 40;
  spec.feature_dim = 6;
  spec.order_coding = true;
  auto ds = generate_synthetic(spec);

  std::map<std::string, std::vector<int>> by_group;
  for (int i = 0; i < static_cast<int>(ds.examples.size()); ++i)
    by_group[ds.examples[i].group_id].push_back(i);

  auto split_of = [&](int idx) {
    for (int i : ds.train_idx)
      if (i == idx) return 0;
    for (int i : ds.val_idx)
      if (i == idx) return 1;
    return 2;
  };

  int pairs = 0;
  for (auto& [group, members] : by_group) {
    if (members.size() != 2) continue;  // a trailing odd twin can be solo
    ++pairs;
    auto& a = ds.examples[members[0]];
    auto& b = ds.examples[members[1]];
    std::multiset<std::string> bag_a, bag_b;
    std::vector<std::string> seq_a, seq_b;
    for (auto* p : {&a, &b}) {
      std::stringstream ss(p->title);
      std::string w;
      auto& bag = (p == &a) ? bag_a : bag_b;
      auto& seq = (p == &a) ? seq_a : seq_b;
      while (ss >> w) {
        bag.insert(w);
        seq.push_back(w);
      }
    }
    CHECK(bag_a == bag_b);
    std::reverse(seq_b.begin(), seq_b.end());
    CHECK(seq_a == seq_b);
    // twins must never straddle a split boundary
    CHECK(split_of(members[0]) == split_of(members[1]));
    // image features still differ: the class latents are distinct
    CHECK(a.image_features != b.image_features);
  }
  CHECK(pairs > 100);

  SyntheticSpec odd = spec;
  odd.num_classes = 5;
  CHECK_THROWS_AS(generate_synthetic(odd), ConfigError);
}

TEST_CASE("synthetic rejects bad specs") {
  SyntheticSpec bad;
  bad.num_classes = 1;
  CHECK_THROWS_AS(generate_synthetic(bad), ConfigError);
  SyntheticSpec neg;
  neg.feature_noise = -0.5f;
  CHECK_THROWS_AS(generate_synthetic(neg), ConfigError);
}

TEST_CASE("stable_hash is the reference FNV-1a") {
  // published FNV-1a 64 vectors
  CHECK(stable_hash("") == 14695981039346656037ull);
  CHECK(stable_hash("a") == 0xaf63dc4c8601ec8cull);
  CHECK(stable_hash("foobar") == 0x85944171f73967e8ull);
}
