#include "vse/retrieval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "vse/tensor.hpp"

namespace vse {

namespace {

using CEMat =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

constexpr char kEmbMagic[8] = {'V', 'S', 'E', 'E', 'M', 'B', '\0', '\0'};

struct Hit {
  float score;
  int row;
};

// descending score, then ascending row
bool better(const Hit& a, const Hit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.row < b.row;
}

}  // namespace

void EmbeddingIndex::validate() const {
  if (num_rows <= 0 || dim <= 0) throw ConfigError("index: empty");
  if (static_cast<std::size_t>(num_rows) * dim != matrix.size())
    throw ConfigError("index: matrix size mismatch");
  if (static_cast<int>(ids.size()) != num_rows) throw ConfigError("index: id count mismatch");
  std::unordered_set<std::string> seen;
  for (auto& id : ids)
    if (!seen.insert(id).second) throw ConfigError("index: duplicate id '" + id + "'");
  for (int r = 0; r < num_rows; ++r) {
    float ss = 0.0f;
    for (int d = 0; d < dim; ++d) ss += matrix[static_cast<std::size_t>(r) * dim + d] *
                                        matrix[static_cast<std::size_t>(r) * dim + d];
    if (std::abs(std::sqrt(ss) - 1.0f) > 1e-4f)
      throw ConfigError("index: row " + std::to_string(r) + " is not unit-norm");
  }
}

std::vector<std::vector<int>> top_k(const std::vector<float>& queries, int num_queries, int dim,
                                    const EmbeddingIndex& index, int k,
                                    std::size_t memory_budget_bytes, int threads) {
  if (dim != index.dim) throw ConfigError("top_k: query dim != index dim");
  if (k < 1 || k > index.num_rows)
    throw ConfigError("top_k: k=" + std::to_string(k) + " outside [1, " +
                      std::to_string(index.num_rows) + "]");
  if (static_cast<std::size_t>(num_queries) * dim != queries.size())
    throw ConfigError("top_k: query buffer size mismatch");

  // tile height so the QxT score block stays inside the budget
  std::size_t tile = memory_budget_bytes / (sizeof(float) * std::max(num_queries, 1));
  tile = std::max<std::size_t>(tile, 64);
  tile = std::min<std::size_t>(tile, static_cast<std::size_t>(index.num_rows));

  CEMat q(queries.data(), num_queries, dim);
  std::vector<std::vector<Hit>> best(num_queries);
  for (auto& b : best) b.reserve(k + 1);

  for (int start = 0; start < index.num_rows; start += static_cast<int>(tile)) {
    const int rows = std::min<int>(static_cast<int>(tile), index.num_rows - start);
    CEMat block(index.matrix.data() + static_cast<std::size_t>(start) * dim, rows, dim);

    // Each score is a per-row dot product with one fixed reduction order, so
    // a given index row scores identically regardless of tile position and
    // the tie rule stays exact (a GEMM rounds remainder columns differently).
    auto process = [&](int q0, int q1) {
      std::vector<float> scores(static_cast<std::size_t>(rows));
      for (int qi = q0; qi < q1; ++qi) {
        for (int r = 0; r < rows; ++r) scores[r] = q.row(qi).dot(block.row(r));
        auto& heap = best[qi];
        for (int r = 0; r < rows; ++r) {
          Hit h{scores[r], start + r};
          if (static_cast<int>(heap.size()) == k && !better(h, heap.back())) continue;
          auto pos = std::lower_bound(heap.begin(), heap.end(), h, better);
          heap.insert(pos, h);
          if (static_cast<int>(heap.size()) > k) heap.pop_back();
        }
      }
    };
    if (threads <= 1 || num_queries < 2 * threads) {
      process(0, num_queries);
    } else {
      std::vector<std::thread> pool;
      int per = (num_queries + threads - 1) / threads;
      for (int t = 0; t < threads; ++t) {
        int q0 = t * per, q1 = std::min(num_queries, q0 + per);
        if (q0 < q1) pool.emplace_back(process, q0, q1);
      }
      for (auto& th : pool) th.join();
    }
  }

  std::vector<std::vector<int>> out(num_queries);
  for (int qi = 0; qi < num_queries; ++qi) {
    out[qi].reserve(k);
    for (auto& h : best[qi]) out[qi].push_back(h.row);
  }
  return out;
}

RetrievalReport recall_at_k(const std::string& direction, const std::vector<float>& queries,
                            int num_queries, int dim, const EmbeddingIndex& index,
                            const std::vector<int>& partner_row, const std::vector<int>& ks,
                            std::size_t memory_budget_bytes, int threads) {
  if (static_cast<int>(partner_row.size()) != num_queries)
    throw ConfigError("recall_at_k: one partner per query required");
  for (int r : partner_row)
    if (r < 0 || r >= index.num_rows)
      throw DataError("recall_at_k: partner row " + std::to_string(r) + " not in index");
  if (ks.empty()) throw ConfigError("recall_at_k: no K values");
  int max_k = *std::max_element(ks.begin(), ks.end());
  max_k = std::min(max_k, index.num_rows);

  auto ranked = top_k(queries, num_queries, dim, index, max_k, memory_budget_bytes, threads);

  RetrievalReport rep;
  rep.direction = direction;
  rep.num_queries = num_queries;
  rep.per_query_rank.assign(num_queries, -1);
  for (int qi = 0; qi < num_queries; ++qi) {
    auto& r = ranked[qi];
    for (int pos = 0; pos < static_cast<int>(r.size()); ++pos) {
      if (r[pos] == partner_row[qi]) {
        rep.per_query_rank[qi] = pos + 1;
        break;
      }
    }
  }
  for (int k : ks) {
    int kk = std::min(k, index.num_rows);
    int hits = 0;
    for (int rank : rep.per_query_rank)
      if (rank > 0 && rank <= kk) ++hits;
    rep.recall_at[k] = static_cast<double>(hits) / num_queries;
  }
  return rep;
}

void save_embeddings(const std::string& path, const EmbeddingIndex& index) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("save_embeddings: cannot open " + path + " for writing");
  os.write(kEmbMagic, 8);
  std::uint32_t version = 1;
  std::uint64_t m = static_cast<std::uint64_t>(index.num_rows);
  std::uint32_t d = static_cast<std::uint32_t>(index.dim);
  os.write(reinterpret_cast<const char*>(&version), 4);
  os.write(reinterpret_cast<const char*>(&m), 8);
  os.write(reinterpret_cast<const char*>(&d), 4);
  os.write(reinterpret_cast<const char*>(index.matrix.data()),
           static_cast<std::streamsize>(index.matrix.size() * sizeof(float)));
  if (!os) throw DataError("save_embeddings: write failed for " + path);
  std::ofstream ids(path + ".ids", std::ios::trunc);
  for (auto& id : index.ids) ids << id << '\n';
  if (!ids) throw DataError("save_embeddings: write failed for " + path + ".ids");
}

EmbeddingIndex load_embeddings(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("load_embeddings: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kEmbMagic, 8) != 0)
    throw DataError("load_embeddings: bad magic in " + path);
  std::uint32_t version, d;
  std::uint64_t m;
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&m), 8);
  is.read(reinterpret_cast<char*>(&d), 4);
  if (version != 1) throw DataError("load_embeddings: unsupported version");
  EmbeddingIndex idx;
  idx.num_rows = static_cast<int>(m);
  idx.dim = static_cast<int>(d);
  idx.matrix.resize(m * d);
  is.read(reinterpret_cast<char*>(idx.matrix.data()),
          static_cast<std::streamsize>(idx.matrix.size() * sizeof(float)));
  if (!is) throw DataError("load_embeddings: truncated payload in " + path);
  std::ifstream ids(path + ".ids");
  if (!ids) throw DataError("load_embeddings: missing sidecar " + path + ".ids");
  std::string line;
  while (std::getline(ids, line)) idx.ids.push_back(line);
  if (static_cast<std::uint64_t>(idx.ids.size()) != m)
    throw DataError("load_embeddings: sidecar id count mismatch");
  return idx;
}

std::string report_table(const std::vector<RetrievalReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "direction";
  if (!reports.empty())
    for (auto& [k, v] : reports.front().recall_at) os << std::right << std::setw(10) << ("R@" + std::to_string(k));
  os << '\n';
  for (auto& rep : reports) {
    os << std::left << std::setw(10) << rep.direction;
    for (auto& [k, v] : rep.recall_at)
      os << std::right << std::setw(10) << std::fixed << std::setprecision(4) << v;
    os << '\n';
  }
  return os.str();
}

std::string report_json(const std::vector<RetrievalReport>& reports) {
  nlohmann::json j = nlohmann::json::array();
  for (auto& rep : reports) {
    nlohmann::json r;
    r["direction"] = rep.direction;
    r["num_queries"] = rep.num_queries;
    for (auto& [k, v] : rep.recall_at) r["recall_at"][std::to_string(k)] = v;
    j.push_back(r);
  }
  return j.dump(2);
}

}  // namespace vse
