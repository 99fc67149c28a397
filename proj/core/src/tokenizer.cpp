#include "vse/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "vse/tensor.hpp"

namespace vse {

namespace {

// --------------------------------------------------------------------------
// Unicode normalization

// Decodes one UTF-8 codepoint starting at s[i]; advances i. Invalid bytes
// decode as U+FFFD.
char32_t decode_utf8(const std::string& s, std::size_t& i) {
  unsigned char c = static_cast<unsigned char>(s[i]);
  if (c < 0x80) {
    ++i;
    return c;
  }
  int extra = 0;
  char32_t cp = 0;
  if ((c & 0xE0) == 0xC0) {
    cp = c & 0x1F;
    extra = 1;
  } else if ((c & 0xF0) == 0xE0) {
    cp = c & 0x0F;
    extra = 2;
  } else if ((c & 0xF8) == 0xF0) {
    cp = c & 0x07;
    extra = 3;
  } else {
    ++i;
    return 0xFFFD;
  }
  if (i + extra >= s.size()) {
    i = s.size();
    return 0xFFFD;
  }
  for (int k = 1; k <= extra; ++k) {
    unsigned char cc = static_cast<unsigned char>(s[i + k]);
    if ((cc & 0xC0) != 0x80) {
      ++i;
      return 0xFFFD;
    }
    cp = (cp << 6) | (cc & 0x3F);
  }
  i += 1 + extra;
  return cp;
}

// Compatibility/canonical mapping for the ranges product titles actually
// contain: fullwidth forms, accented Latin letters (decomposed, combining
// marks stripped), common punctuation aliases and a few compatibility
// expansions. Everything unmapped and non-ASCII is dropped later.
std::string normalize_codepoint(char32_t cp) {
  // ASCII passes through
  if (cp < 0x80) return std::string(1, static_cast<char>(cp));
  // Fullwidth ASCII block
  if (cp >= 0xFF01 && cp <= 0xFF5E) return std::string(1, static_cast<char>(cp - 0xFEE0));
  if (cp == 0x3000 || cp == 0x00A0 || (cp >= 0x2000 && cp <= 0x200B)) return " ";
  // Latin-1 supplement letters -> base letter
  static const struct {
    char32_t lo, hi;
    char base;
  } kRanges[] = {
      {0xC0, 0xC5, 'A'}, {0xC8, 0xCB, 'E'}, {0xCC, 0xCF, 'I'}, {0xD2, 0xD6, 'O'},
      {0xD9, 0xDC, 'U'}, {0xE0, 0xE5, 'a'}, {0xE8, 0xEB, 'e'}, {0xEC, 0xEF, 'i'},
      {0xF2, 0xF6, 'o'}, {0xF9, 0xFC, 'u'},
  };
  for (auto& r : kRanges)
    if (cp >= r.lo && cp <= r.hi) return std::string(1, r.base);
  switch (cp) {
    case 0xC7: return "C";
    case 0xE7: return "c";
    case 0xD1: return "N";
    case 0xF1: return "n";
    case 0xDD: return "Y";
    case 0xFD: case 0xFF: return "y";
    case 0xC6: return "AE";
    case 0xE6: return "ae";
    case 0xDF: return "ss";
    case 0x152: return "OE";
    case 0x153: return "oe";
    case 0x2018: case 0x2019: case 0x02BC: return "'";
    case 0x201C: case 0x201D: return "\"";
    case 0x2010: case 0x2011: case 0x2012: case 0x2013: case 0x2014: case 0x2015:
      return "-";
    case 0x2044: return "/";
    case 0x2122: return "TM";   // NFKC compatibility expansion
    case 0x2026: return "...";
    case 0xFB01: return "fi";
    case 0xFB02: return "fl";
    default: break;
  }
  // Latin Extended-A: strip the diacritic via the block's regular layout
  if (cp >= 0x100 && cp <= 0x17F) {
    static const char* kExtA =
        "AaAaAaCcCcCcCcDdDdEeEeEeEeEeGgGgGgGgHhHhIiIiIiIiIiJjKkkLlLlLlLlLlNnNnNnnNnOoOoOoRrRrRr"
        "SsSsSsSsTtTtTtUuUuUuUuUuUuWwYyYZzZzZzs";
    std::size_t idx = cp - 0x100;
    if (idx < std::char_traits<char>::length(kExtA))
      return std::string(1, kExtA[idx]);
  }
  // Combining marks vanish
  if (cp >= 0x300 && cp <= 0x36F) return "";
  return "";  // dropped (e.g. (R), (C), CJK)
}

bool allowed_char(char c) {
  if (c >= 'a' && c <= 'z') return true;
  if (c >= '0' && c <= '9') return true;
  switch (c) {
    case ' ': case '-': case '.': case ',': case '/': case '&': case '%': case '\'':
      return true;
    default:
      return false;
  }
}

constexpr float kUnknownCharLogProb = -1e4f;
constexpr float kSpecialLogProb = -100.0f;

}  // namespace

std::string preprocess(const std::string& raw_title,
                       const std::map<std::string, std::string>* typo_table) {
  std::string ascii;
  ascii.reserve(raw_title.size());
  std::size_t i = 0;
  while (i < raw_title.size()) ascii += normalize_codepoint(decode_utf8(raw_title, i));

  std::string filtered;
  filtered.reserve(ascii.size());
  for (char c : ascii) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
    if (allowed_char(c)) filtered += c;
  }

  // collapse whitespace and trim
  std::string out;
  out.reserve(filtered.size());
  bool in_space = true;  // leading spaces dropped
  for (char c : filtered) {
    if (c == ' ') {
      if (!in_space) out += ' ';
      in_space = true;
    } else {
      out += c;
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();

  if (typo_table && !typo_table->empty()) {
    std::istringstream words(out);
    std::string w, rebuilt;
    while (words >> w) {
      auto it = typo_table->find(w);
      if (!rebuilt.empty()) rebuilt += ' ';
      rebuilt += (it != typo_table->end()) ? it->second : w;
    }
    out = rebuilt;
  }
  return out;
}

// --------------------------------------------------------------------------
// Vocabulary

int Vocabulary::piece_id(const std::string& text) const {
  auto it = index.find(text);
  return it == index.end() ? -1 : it->second;
}

void Vocabulary::rebuild_index() {
  index.clear();
  for (int i = 0; i < size(); ++i) index.emplace(pieces[i].text, i);
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("vocab: cannot open " + path + " for writing");
  for (auto& p : pieces) os << p.text << '\t' << p.log_prob << '\n';
  if (!os) throw DataError("vocab: write failed for " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("vocab: cannot open " + path);
  Vocabulary v;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto tab = line.rfind('\t');
    if (tab == std::string::npos)
      throw DataError("vocab: missing tab at " + path + ":" + std::to_string(lineno));
    v.pieces.push_back({line.substr(0, tab), std::stof(line.substr(tab + 1))});
  }
  if (v.size() < kNumSpecials) throw DataError("vocab: file too short: " + path);
  v.rebuild_index();
  return v;
}

// --------------------------------------------------------------------------
// Unigram-LM training

namespace {

struct PieceSet {
  std::vector<std::string> texts;
  std::vector<double> log_probs;
  std::unordered_map<std::string, int> index;
  int max_len = 1;

  int find(const std::string& s) const {
    auto it = index.find(s);
    return it == index.end() ? -1 : it->second;
  }
  void rebuild() {
    index.clear();
    max_len = 1;
    for (int i = 0; i < static_cast<int>(texts.size()); ++i) {
      index.emplace(texts[i], i);
      max_len = std::max(max_len, static_cast<int>(texts[i].size()));
    }
  }
};

double log_sum_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// One EM E-step over the corpus: accumulates expected piece counts and
// returns the total log-likelihood under the current probabilities.
double em_estep(const std::vector<std::pair<std::string, int>>& corpus, const PieceSet& ps,
                std::vector<double>& counts) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  double total_ll = 0.0;
  for (auto& [title, freq] : corpus) {
    const int n = static_cast<int>(title.size());
    if (n == 0) continue;
    std::vector<double> fwd(n + 1, kNegInf), bwd(n + 1, kNegInf);
    fwd[0] = 0.0;
    for (int i = 0; i < n; ++i) {
      if (fwd[i] == kNegInf) continue;
      for (int l = 1; l <= std::min(ps.max_len, n - i); ++l) {
        int id = ps.find(title.substr(i, l));
        if (id < 0) continue;
        fwd[i + l] = log_sum_exp(fwd[i + l], fwd[i] + ps.log_probs[id]);
      }
    }
    bwd[n] = 0.0;
    for (int i = n - 1; i >= 0; --i) {
      for (int l = 1; l <= std::min(ps.max_len, n - i); ++l) {
        int id = ps.find(title.substr(i, l));
        if (id < 0 || bwd[i + l] == kNegInf) continue;
        bwd[i] = log_sum_exp(bwd[i], ps.log_probs[id] + bwd[i + l]);
      }
    }
    const double z = fwd[n];
    if (z == kNegInf) continue;  // unreachable: singles cover the alphabet
    total_ll += static_cast<double>(freq) * z;
    for (int i = 0; i < n; ++i) {
      if (fwd[i] == kNegInf) continue;
      for (int l = 1; l <= std::min(ps.max_len, n - i); ++l) {
        int id = ps.find(title.substr(i, l));
        if (id < 0 || bwd[i + l] == kNegInf) continue;
        counts[id] += freq * std::exp(fwd[i] + ps.log_probs[id] + bwd[i + l] - z);
      }
    }
  }
  return total_ll;
}

// Viterbi best log-prob of `text` under ps, optionally excluding one piece id.
double viterbi_score(const std::string& text, const PieceSet& ps, int exclude_id = -1) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  const int n = static_cast<int>(text.size());
  std::vector<double> best(n + 1, kNegInf);
  best[0] = 0.0;
  for (int i = 0; i < n; ++i) {
    if (best[i] == kNegInf) continue;
    for (int l = 1; l <= std::min(ps.max_len, n - i); ++l) {
      int id = ps.find(text.substr(i, l));
      if (id < 0 || id == exclude_id) continue;
      best[i + l] = std::max(best[i + l], best[i] + ps.log_probs[id]);
    }
  }
  return best[n];
}

// Viterbi piece-usage frequencies over the corpus.
std::vector<double> viterbi_frequencies(const std::vector<std::pair<std::string, int>>& corpus,
                                        const PieceSet& ps) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> freq(ps.texts.size(), 0.0);
  for (auto& [title, f] : corpus) {
    const int n = static_cast<int>(title.size());
    if (n == 0) continue;
    std::vector<double> best(n + 1, kNegInf);
    std::vector<int> back(n + 1, -1);  // chosen piece id ending at position
    std::vector<int> back_len(n + 1, 0);
    best[0] = 0.0;
    for (int i = 0; i < n; ++i) {
      if (best[i] == kNegInf) continue;
      for (int l = 1; l <= std::min(ps.max_len, n - i); ++l) {
        int id = ps.find(title.substr(i, l));
        if (id < 0) continue;
        double cand = best[i] + ps.log_probs[id];
        if (cand > best[i + l]) {
          best[i + l] = cand;
          back[i + l] = id;
          back_len[i + l] = l;
        }
      }
    }
    if (best[n] == kNegInf) continue;
    for (int pos = n; pos > 0; pos -= back_len[pos]) freq[back[pos]] += f;
  }
  return freq;
}

void normalize_log_probs(PieceSet& ps, const std::vector<double>& counts) {
  double total = 0.0;
  for (double c : counts) total += c;
  if (total <= 0.0) throw ConfigError("train_vocab: degenerate corpus, no piece mass");
  constexpr double kFloor = 1e-9;
  double floored_total = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i)
    floored_total += std::max(counts[i], kFloor);
  for (std::size_t i = 0; i < counts.size(); ++i)
    ps.log_probs[i] = std::log(std::max(counts[i], kFloor) / floored_total);
}

}  // namespace

VocabTrainResult train_vocab(const std::vector<std::string>& corpus_in,
                             const VocabTrainConfig& cfg) {
  if (corpus_in.empty()) throw ConfigError("train_vocab: empty corpus");

  // dedupe into (title, freq)
  std::unordered_map<std::string, int> title_freq;
  for (auto& t : corpus_in)
    if (!t.empty()) ++title_freq[t];
  if (title_freq.empty()) throw ConfigError("train_vocab: corpus has no non-empty titles");
  std::vector<std::pair<std::string, int>> corpus(title_freq.begin(), title_freq.end());
  std::sort(corpus.begin(), corpus.end());

  // alphabet = every char seen
  std::vector<int> char_count(256, 0);
  for (auto& [t, f] : corpus)
    for (unsigned char c : t) char_count[c] += f;
  std::vector<std::string> singles;
  for (int c = 0; c < 256; ++c)
    if (char_count[c] > 0) singles.emplace_back(1, static_cast<char>(c));

  const int min_size = static_cast<int>(singles.size()) + Vocabulary::kNumSpecials;
  if (cfg.target_size < min_size)
    throw ConfigError("train_vocab: target_size " + std::to_string(cfg.target_size) +
                      " below alphabet+specials size " + std::to_string(min_size));

  // seed candidates: substrings of length 2..max_piece_len occurring >= 2 times
  std::unordered_map<std::string, long long> sub_count;
  for (auto& [t, f] : corpus) {
    const int n = static_cast<int>(t.size());
    for (int i = 0; i < n; ++i)
      for (int l = 2; l <= std::min(cfg.max_piece_len, n - i); ++l)
        sub_count[t.substr(i, l)] += f;
  }
  std::vector<std::pair<std::string, long long>> cands;
  for (auto& [s, c] : sub_count)
    if (c >= 2) cands.emplace_back(s, c);
  // score by count * length, the usual likelihood-mass proxy for seeding
  std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
    auto sa = a.second * static_cast<long long>(a.first.size());
    auto sb = b.second * static_cast<long long>(b.first.size());
    if (sa != sb) return sa > sb;
    return a.first < b.first;
  });
  const std::size_t cand_cap =
      cfg.seed_size > static_cast<int>(singles.size())
          ? static_cast<std::size_t>(cfg.seed_size - static_cast<int>(singles.size()))
          : 0;
  if (cands.size() > cand_cap) cands.resize(cand_cap);

  PieceSet ps;
  std::vector<double> init_counts;
  for (auto& s : singles) {
    ps.texts.push_back(s);
    init_counts.push_back(static_cast<double>(char_count[static_cast<unsigned char>(s[0])]));
  }
  for (auto& [s, c] : cands) {
    ps.texts.push_back(s);
    init_counts.push_back(static_cast<double>(c) * s.size());
  }
  ps.log_probs.assign(ps.texts.size(), 0.0);
  ps.rebuild();
  normalize_log_probs(ps, init_counts);

  const int target_pieces = cfg.target_size - Vocabulary::kNumSpecials;
  const int num_singles = static_cast<int>(singles.size());

  VocabTrainResult result;
  while (true) {
    // EM round
    result.em_log_likelihoods.emplace_back();
    for (int it = 0; it < cfg.em_iters_per_round; ++it) {
      std::vector<double> counts(ps.texts.size(), 0.0);
      double ll = em_estep(corpus, ps, counts);
      result.em_log_likelihoods.back().push_back(ll);
      normalize_log_probs(ps, counts);
    }
    if (static_cast<int>(ps.texts.size()) <= target_pieces) break;

    // prune lowest-likelihood-loss multi-char pieces
    std::vector<double> freq = viterbi_frequencies(corpus, ps);
    struct Scored {
      double loss;
      int id;
    };
    std::vector<Scored> prunable;
    for (int i = num_singles; i < static_cast<int>(ps.texts.size()); ++i) {
      double loss;
      if (freq[i] <= 0.0) {
        loss = -std::numeric_limits<double>::infinity();  // unused, drop first
      } else {
        double alt = viterbi_score(ps.texts[i], ps, i);
        loss = freq[i] * (ps.log_probs[i] - alt);
      }
      prunable.push_back({loss, i});
    }
    std::sort(prunable.begin(), prunable.end(), [&](const Scored& a, const Scored& b) {
      if (a.loss != b.loss) return a.loss < b.loss;
      return ps.texts[a.id] < ps.texts[b.id];
    });
    const int keep_total = std::max(
        target_pieces, static_cast<int>(std::ceil(ps.texts.size() * (1.0 - cfg.prune_fraction))));
    int to_drop = static_cast<int>(ps.texts.size()) - keep_total;
    if (to_drop <= 0) to_drop = static_cast<int>(ps.texts.size()) - target_pieces;
    std::vector<char> dropped(ps.texts.size(), 0);
    for (int k = 0; k < to_drop && k < static_cast<int>(prunable.size()); ++k)
      dropped[prunable[k].id] = 1;

    PieceSet next;
    std::vector<double> kept_counts;
    for (int i = 0; i < static_cast<int>(ps.texts.size()); ++i) {
      if (dropped[i]) continue;
      next.texts.push_back(ps.texts[i]);
      next.log_probs.push_back(ps.log_probs[i]);
    }
    next.rebuild();
    ps = std::move(next);
    // renormalize the survivors
    std::vector<double> probs(ps.texts.size());
    for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(ps.log_probs[i]);
    normalize_log_probs(ps, probs);
  }

  // assemble, sorted by descending probability for stable, diffable ids
  std::vector<int> order(ps.texts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (ps.log_probs[a] != ps.log_probs[b]) return ps.log_probs[a] > ps.log_probs[b];
    return ps.texts[a] < ps.texts[b];
  });
  Vocabulary vocab;
  vocab.pieces.push_back({"<pad>", kSpecialLogProb});
  vocab.pieces.push_back({"<unk>", kSpecialLogProb});
  vocab.pieces.push_back({"<bos>", kSpecialLogProb});
  for (int id : order)
    vocab.pieces.push_back({ps.texts[id], static_cast<float>(ps.log_probs[id])});
  vocab.rebuild_index();
  result.vocab = std::move(vocab);
  return result;
}

// --------------------------------------------------------------------------
// Segmentation

std::vector<std::string> segment(const std::string& text, const Vocabulary& vocab) {
  const int n = static_cast<int>(text.size());
  if (n == 0) return {};
  int max_len = 1;
  for (auto& p : vocab.pieces) max_len = std::max(max_len, static_cast<int>(p.text.size()));

  struct Cell {
    double score = -std::numeric_limits<double>::infinity();
    int count = 0;
    int len = 0;  // length of the chosen first piece
  };
  std::vector<Cell> best(n + 1);
  best[n] = {0.0, 0, 0};
  // suffix DP; ties: higher score, fewer pieces, lexicographically
  // earliest first piece (remainders are canonical by induction)
  for (int i = n - 1; i >= 0; --i) {
    for (int l = 1; l <= std::min(max_len, n - i); ++l) {
      std::string piece = text.substr(i, l);
      int id = vocab.piece_id(piece);
      double lp;
      if (id >= Vocabulary::kNumSpecials) {
        lp = vocab.pieces[id].log_prob;
      } else if (l == 1) {
        lp = kUnknownCharLogProb;  // unknown symbol, kept as its own char
      } else {
        continue;
      }
      const Cell& rest = best[i + l];
      if (rest.len == 0 && i + l != n) continue;
      if (rest.score == -std::numeric_limits<double>::infinity() && i + l != n) continue;
      double score = lp + rest.score;
      int count = 1 + rest.count;
      Cell& cur = best[i];
      bool better = false;
      if (score > cur.score) {
        better = true;
      } else if (score == cur.score) {
        if (count < cur.count) {
          better = true;
        } else if (count == cur.count && cur.len > 0) {
          better = piece < text.substr(i, cur.len);
        }
      }
      if (better) cur = {score, count, l};
    }
  }
  std::vector<std::string> out;
  for (int pos = 0; pos < n; pos += best[pos].len) out.push_back(text.substr(pos, best[pos].len));
  return out;
}

TokenSequence encode(const std::string& title, const Vocabulary& vocab, int max_len,
                     const std::map<std::string, std::string>* typo_table) {
  if (max_len < 1) throw ConfigError("encode: max_len must be >= 1");
  std::string clean = preprocess(title, typo_table);
  // Words are segmented independently with a literal " " piece between them,
  // so a word's pieces do not depend on its position in the title.
  std::vector<std::string> tokens;
  std::size_t start = 0;
  while (start <= clean.size()) {
    std::size_t end = clean.find(' ', start);
    if (end == std::string::npos) end = clean.size();
    if (end > start) {
      auto word = segment(clean.substr(start, end - start), vocab);
      if (start > 0) tokens.emplace_back(" ");
      tokens.insert(tokens.end(), word.begin(), word.end());
    }
    start = end + 1;
  }
  TokenSequence seq;
  seq.max_len = max_len;
  seq.ids.assign(static_cast<std::size_t>(max_len), Vocabulary::kPad);
  seq.length = std::min<int>(max_len, static_cast<int>(tokens.size()));
  for (int i = 0; i < seq.length; ++i) {
    int id = vocab.piece_id(tokens[i]);
    seq.ids[i] = (id >= 0) ? id : Vocabulary::kUnk;
  }
  return seq;
}

std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (int i = 0; i < seq.length; ++i) {
    int id = seq.ids[i];
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kUnk) continue;
    if (id < 0 || id >= vocab.size())
      throw DataError("detokenize: id " + std::to_string(id) + " out of range");
    out += vocab.pieces[id].text;
  }
  return out;
}

}  // namespace vse
