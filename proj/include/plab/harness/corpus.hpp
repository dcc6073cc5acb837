#pragma once

// Corpus file format: one sequence per line, token ids as space-separated
// decimal integers. Blank lines are ignored when reading.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "plab/core/error.hpp"
#include "plab/core/rng.hpp"
#include "plab/objectives/objectives.hpp"

namespace plab {

constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

inline std::uint64_t hash_sequences(const std::vector<Sequence>& seqs) {
  std::uint64_t h = fnv1a("seqs");
  for (const auto& s : seqs) {
    for (int t : s) {
      h = fnv1a(std::to_string(t), h);
      h = fnv1a(" ", h);
    }
    h = fnv1a("\n", h);
  }
  return h;
}

enum class CorpusKind { zipf_synthetic, byte_text };

inline std::string to_string(CorpusKind k) { return k == CorpusKind::zipf_synthetic ? "zipf-synthetic" : "byte-text"; }

inline CorpusKind parse_corpus_kind(std::string_view s) {
  if (s == "zipf-synthetic") return CorpusKind::zipf_synthetic;
  if (s == "byte-text") return CorpusKind::byte_text;
  throw ConfigError("unknown corpus kind '" + std::string(s) + "'");
}

struct ZipfOptions {
  std::size_t vocab = 252;   // ordinary tokens only
  double exponent = 1.1;
  std::size_t min_len = 8;
  std::size_t max_len = 28;
  double copy_prob = 0.5;    // chance that a token repeats the one `lag` positions back
  std::size_t max_lag = 4;
};

/// Zipfian token stream with a copy-from-lag structure. A copied token is itself
/// a Zipf draw, so the marginal distribution stays Zipfian while the sequences
/// carry context a model can learn.
class ZipfSampler {
 public:
  explicit ZipfSampler(const ZipfOptions& o) : opts_(o) {
    if (o.vocab < 2) throw ConfigError("zipf vocabulary too small");
    if (o.min_len < 2 || o.max_len < o.min_len) throw ConfigError("invalid zipf length range");
    cdf_.resize(o.vocab);
    double total = 0.0;
    for (std::size_t r = 0; r < o.vocab; ++r) {
      total += std::pow(static_cast<double>(r + 1), -o.exponent);
      cdf_[r] = total;
    }
    for (double& c : cdf_) c /= total;
  }

  int draw(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1));
  }

  Sequence sequence(Rng& rng) const {
    const std::size_t len = opts_.min_len + static_cast<std::size_t>(rng.below(opts_.max_len - opts_.min_len + 1));
    const std::size_t lag = 1 + static_cast<std::size_t>(rng.below(opts_.max_lag));
    Sequence s;
    s.reserve(len);
    for (std::size_t p = 0; p < len; ++p) {
      if (p >= lag && rng.bernoulli(opts_.copy_prob)) {
        s.push_back(s[p - lag]);
      } else {
        s.push_back(draw(rng));
      }
    }
    return s;
  }

 private:
  ZipfOptions opts_;
  std::vector<double> cdf_;
};

inline std::vector<Sequence> generate_zipf_corpus(std::size_t size, std::uint64_t seed, const ZipfOptions& opts = {}) {
  if (size == 0) throw ConfigError("corpus size must be positive");
  ZipfSampler sampler(opts);
  Rng rng(derive_seed(seed, 0x21bf));
  std::vector<Sequence> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) out.push_back(sampler.sequence(rng));
  return out;
}

/// Byte tokenizer: one token per byte. Bytes that collide with the reserved
/// top-of-vocabulary ids are replaced by '?'.
inline Sequence tokenize_bytes(std::string_view text, std::size_t regular_vocab = 252) {
  Sequence s;
  s.reserve(text.size());
  for (char c : text) {
    const int b = static_cast<unsigned char>(c);
    s.push_back(static_cast<std::size_t>(b) < regular_vocab ? b : '?');
  }
  return s;
}

/// Splits text into lines, then each line into chunks of at most max_len bytes.
/// Chunks shorter than min_len are dropped.
inline std::vector<Sequence> byte_corpus_from_text(std::string_view text, std::size_t max_len = 28,
                                                   std::size_t min_len = 4, std::size_t limit = 0) {
  std::vector<Sequence> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    for (std::size_t p = 0; p < line.size(); p += max_len) {
      const auto chunk = line.substr(p, std::min(max_len, line.size() - p));
      if (chunk.size() >= min_len) out.push_back(tokenize_bytes(chunk));
      if (limit != 0 && out.size() == limit) return out;
    }
    start = end + 1;
  }
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_corpus(const std::vector<Sequence>& seqs, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& s : seqs) {
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " " : "") << s[i];
    os << '\n';
  }
  if (!os) throw IoError("failed writing '" + path + "'");
}

inline std::vector<Sequence> read_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open corpus '" + path + "'");
  std::vector<Sequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    Sequence s;
    long v = 0;
    while (ls >> v) {
      if (v < 0) throw IoError("negative token id on line " + std::to_string(lineno));
      s.push_back(static_cast<int>(v));
    }
    if (!ls.eof()) throw IoError("malformed token on line " + std::to_string(lineno) + " of '" + path + "'");
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

/// Slope of log(frequency) against log(rank) over the `top` most frequent tokens.
inline double rank_frequency_slope(const std::vector<Sequence>& corpus, std::size_t top = 50) {
  std::vector<double> counts;
  for (const auto& s : corpus) {
    for (int t : s) {
      if (static_cast<std::size_t>(t) >= counts.size()) counts.resize(static_cast<std::size_t>(t) + 1, 0.0);
      counts[static_cast<std::size_t>(t)] += 1.0;
    }
  }
  std::sort(counts.begin(), counts.end(), std::greater<>());
  while (!counts.empty() && counts.back() == 0.0) counts.pop_back();
  const std::size_t k = std::min(top, counts.size());
  if (k < 2) throw Error("too few distinct tokens for a rank-frequency fit");
  double mx = 0.0, my = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    mx += std::log(static_cast<double>(r + 1));
    my += std::log(counts[r]);
  }
  mx /= static_cast<double>(k);
  my /= static_cast<double>(k);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    const double dx = std::log(static_cast<double>(r + 1)) - mx;
    sxy += dx * (std::log(counts[r]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace plab
