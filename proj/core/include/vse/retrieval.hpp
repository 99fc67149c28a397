#pragma once

// Exact brute-force cosine retrieval and R@K evaluation, tiled so the score
// matrix never exceeds a memory budget.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vse {

struct EmbeddingIndex {
  std::vector<float> matrix;  // row-major MxD, rows unit-norm
  int num_rows = 0;
  int dim = 0;
  std::vector<std::string> ids;  // unique, one per row

  void validate() const;
};

struct RetrievalReport {
  std::string direction;  // "t2i" or "i2t"
  std::map<int, double> recall_at;
  int num_queries = 0;
  std::vector<int> per_query_rank;  // 1-based; -1 when beyond the scanned K
};

// Exact top-K by inner product (cosine order for normalized rows).
// Ties break toward the smaller row position. Tile size is derived from
// memory_budget_bytes; result is independent of tiling and thread count.
std::vector<std::vector<int>> top_k(const std::vector<float>& queries, int num_queries, int dim,
                                    const EmbeddingIndex& index, int k,
                                    std::size_t memory_budget_bytes = 512ull << 20,
                                    int threads = 1);

// Every query must have exactly one partner: partner_row[q] is its row in
// the index. ks need not be sorted; recall is reported for each.
RetrievalReport recall_at_k(const std::string& direction, const std::vector<float>& queries,
                            int num_queries, int dim, const EmbeddingIndex& index,
                            const std::vector<int>& partner_row,
                            const std::vector<int>& ks = {1, 10, 50, 100},
                            std::size_t memory_budget_bytes = 512ull << 20, int threads = 1);

// Binary embedding file: magic "VSEEMB\0\0", version u32, M u64, D u32,
// row-major float32 payload; ids in a "<path>.ids" sidecar, one per line.
void save_embeddings(const std::string& path, const EmbeddingIndex& index);
EmbeddingIndex load_embeddings(const std::string& path);

std::string report_table(const std::vector<RetrievalReport>& reports);
std::string report_json(const std::vector<RetrievalReport>& reports);

}  // namespace vse
