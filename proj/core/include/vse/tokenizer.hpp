#pragma once

// Title normalization, unigram-LM subword vocabulary training (EM + pruning),
// Viterbi segmentation, and id encoding with truncation/padding.

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace vse {

// NFKC-style normalization (fullwidth forms, accented Latin letters, common
// symbol aliases), allowlist filtering, whitespace collapse, lowercasing.
// Total: any UTF-8 input yields a (possibly empty) ASCII string.
// `typo_table` applies whole-word replacements after normalization.
std::string preprocess(const std::string& raw_title,
                       const std::map<std::string, std::string>* typo_table = nullptr);

struct Vocabulary {
  struct Piece {
    std::string text;
    float log_prob;  // <= 0, finite
  };

  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kNumSpecials = 3;

  std::vector<Piece> pieces;  // index == token id; ids 0..2 are the specials
  std::unordered_map<std::string, int> index;

  int size() const { return static_cast<int>(pieces.size()); }
  int piece_id(const std::string& text) const;  // -1 if absent
  void rebuild_index();

  void save(const std::string& path) const;  // "token<TAB>log_prob" per line
  static Vocabulary load(const std::string& path);
};

struct TokenSequence {
  std::vector<int> ids;  // size == max_len, PAD beyond `length`
  int length = 0;        // pre-padding length
  int max_len = 0;
};

struct VocabTrainConfig {
  int target_size = 4000;      // total including specials and single chars
  int seed_size = 100000;      // candidate cap before pruning
  float prune_fraction = 0.25f;  // shrink per pruning round
  int max_piece_len = 8;
  int em_iters_per_round = 2;
};

struct VocabTrainResult {
  Vocabulary vocab;
  // One inner vector per EM round (rounds are separated by pruning steps);
  // within a round the corpus log-likelihood is non-decreasing.
  std::vector<std::vector<double>> em_log_likelihoods;
};

VocabTrainResult train_vocab(const std::vector<std::string>& corpus,
                             const VocabTrainConfig& cfg);

// Maximum-likelihood segmentation under the unigram model. Unknown symbols
// come back as single-character tokens (mapped to UNK at encode time).
// Tie-break: higher score, then fewer pieces, then lexicographically
// earliest token sequence.
std::vector<std::string> segment(const std::string& text, const Vocabulary& vocab);

TokenSequence encode(const std::string& title, const Vocabulary& vocab, int max_len = 32,
                     const std::map<std::string, std::string>* typo_table = nullptr);

// Joins the pieces of an encoded sequence; PAD/BOS skipped, UNK renders as "".
std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab);

}  // namespace vse
