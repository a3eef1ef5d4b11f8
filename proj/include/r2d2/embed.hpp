#pragma once

// Text embedding. `HashedTfidfEmbedder` weights tokens by TF-IDF and sums a
// fixed pseudo-random signed direction per token, then L2-normalizes. The
// `TextEmbedder` interface lets a learned paragraph-vector model replace it.

#include <Eigen/Core>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "r2d2/error.hpp"
#include "r2d2/random.hpp"
#include "r2d2/serialize.hpp"

namespace r2d2::embed {

using Vector = Eigen::VectorXd;

inline constexpr std::size_t kDefaultDimension = 300;
inline constexpr std::uint64_t kDefaultProjectionSeed = 0x5eed'0f'd0c2'7ec0ULL;

/// Lowercase, split on anything non-alphanumeric, drop tokens shorter than 2.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (current.size() >= 2) tokens.push_back(current);
    current.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) && c < 0x80) current.push_back(static_cast<char>(std::tolower(c)));
    else flush();
  }
  flush();
  return tokens;
}

struct Embedding {
  Vector vector;
  /// True when no token survived tokenization (or all had zero weight).
  bool degenerate = false;
};

class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual std::size_t dimension() const = 0;
  virtual Embedding embed(std::string_view text) const = 0;
  /// Identifies the fitted state; inventories bound to one embedder reject another.
  virtual std::uint64_t fingerprint() const = 0;
};

class HashedTfidfEmbedder final : public TextEmbedder {
 public:
  HashedTfidfEmbedder() = default;

  static HashedTfidfEmbedder fit(std::span<const std::string> texts,
                                 std::size_t dimension = kDefaultDimension,
                                 std::uint64_t seed = kDefaultProjectionSeed) {
    if (dimension == 0) throw ArgumentError("embedding dimension must be positive");
    if (texts.empty()) throw DataError("cannot fit an embedder on an empty text list");
    HashedTfidfEmbedder e;
    e.dimension_ = dimension;
    e.seed_ = seed;
    for (const auto& text : texts) {
      auto tokens = tokenize(text);
      if (tokens.empty()) continue;
      std::sort(tokens.begin(), tokens.end());
      tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
      ++e.documents_;
      for (auto& t : tokens) ++e.document_frequency_[std::move(t)];
    }
    if (e.documents_ == 0) throw DataError("every text is empty after tokenization; nothing to fit");
    e.update_fingerprint();
    return e;
  }

  std::size_t dimension() const override { return dimension_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t document_count() const { return documents_; }
  std::uint64_t fingerprint() const override { return fingerprint_; }
  const std::map<std::string, std::size_t, std::less<>>& document_frequencies() const {
    return document_frequency_;
  }

  std::size_t document_frequency(std::string_view token) const {
    const auto it = document_frequency_.find(token);
    return it == document_frequency_.end() ? 0 : it->second;
  }

  /// ln((N + 1) / (df + 1)); an unseen token gets ln(N + 1).
  double idf(std::string_view token) const {
    const double n = static_cast<double>(documents_);
    return std::log((n + 1.0) / (static_cast<double>(document_frequency(token)) + 1.0));
  }

  /// Signed direction of a token: components are +-1/sqrt(dimension), with
  /// signs drawn from a splitmix stream keyed by the token hash and the seed.
  Vector token_direction(std::string_view token) const {
    Vector d(static_cast<Eigen::Index>(dimension_));
    std::uint64_t state = fnv1a64(token) ^ seed_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dimension_));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < dimension_; ++i) {
      if (i % 64 == 0) bits = splitmix64(state);
      d[static_cast<Eigen::Index>(i)] = (bits & 1ULL) ? scale : -scale;
      bits >>= 1;
    }
    return d;
  }

  Embedding embed(std::string_view text) const override {
    if (dimension_ == 0) throw ContractError("embedder used before fit");
    Embedding out{Vector::Zero(static_cast<Eigen::Index>(dimension_)), true};
    const auto tokens = tokenize(text);
    if (tokens.empty()) return out;
    std::map<std::string_view, double> tf;
    for (const auto& t : tokens) tf[t] += 1.0;
    for (const auto& [token, count] : tf) {
      const double w = count * idf(token);
      if (w != 0.0) out.vector += w * token_direction(token);
    }
    const double norm = out.vector.norm();
    if (norm == 0.0 || !std::isfinite(norm)) {
      out.vector.setZero();
      return out;
    }
    out.vector /= norm;
    out.degenerate = false;
    return out;
  }

  // Text sidecar: "r2d2-embedder 1", then dimension/seed/documents/vocabulary
  // header lines and one "<token> <df>" line per vocabulary entry.
  void save(std::ostream& out) const {
    out << "r2d2-embedder 1\n"
        << "dimension " << dimension_ << '\n'
        << "seed " << seed_ << '\n'
        << "documents " << documents_ << '\n'
        << "vocabulary " << document_frequency_.size() << '\n';
    for (const auto& [token, df] : document_frequency_) out << token << ' ' << df << '\n';
  }

  static HashedTfidfEmbedder load(std::istream& in) {
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != "r2d2-embedder" || version != 1) throw DataError("not an r2d2-embedder v1 sidecar");
    HashedTfidfEmbedder e;
    std::string key;
    std::size_t vocabulary = 0;
    in >> key >> e.dimension_;
    if (key != "dimension") throw DataError("embedder sidecar: expected 'dimension'");
    in >> key >> e.seed_;
    if (key != "seed") throw DataError("embedder sidecar: expected 'seed'");
    in >> key >> e.documents_;
    if (key != "documents") throw DataError("embedder sidecar: expected 'documents'");
    in >> key >> vocabulary;
    if (key != "vocabulary") throw DataError("embedder sidecar: expected 'vocabulary'");
    for (std::size_t i = 0; i < vocabulary; ++i) {
      std::string token;
      std::size_t df = 0;
      if (!(in >> token >> df)) throw DataError("embedder sidecar truncated");
      e.document_frequency_.emplace(std::move(token), df);
    }
    if (!in || e.dimension_ == 0) throw DataError("embedder sidecar malformed");
    e.update_fingerprint();
    return e;
  }

  void write(io::Writer& w) const {
    w.tag("EMBD");
    w.u64(dimension_);
    w.u64(seed_);
    w.u64(documents_);
    w.u64(document_frequency_.size());
    for (const auto& [token, df] : document_frequency_) {
      w.str(token);
      w.u64(df);
    }
  }

  static HashedTfidfEmbedder read(io::Reader& r) {
    r.expect_tag("EMBD");
    HashedTfidfEmbedder e;
    e.dimension_ = r.u64();
    e.seed_ = r.u64();
    e.documents_ = r.u64();
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      auto token = r.str();
      e.document_frequency_.emplace(std::move(token), r.u64());
    }
    e.update_fingerprint();
    return e;
  }

  friend bool operator==(const HashedTfidfEmbedder& a, const HashedTfidfEmbedder& b) {
    return a.dimension_ == b.dimension_ && a.seed_ == b.seed_ && a.documents_ == b.documents_ &&
           a.document_frequency_ == b.document_frequency_;
  }

 private:
  void update_fingerprint() {
    std::uint64_t h = hash_combine(dimension_, seed_);
    h = hash_combine(h, documents_);
    for (const auto& [token, df] : document_frequency_) h = hash_combine(hash_combine(h, fnv1a64(token)), df);
    fingerprint_ = h;
  }

  std::size_t dimension_ = 0;
  std::uint64_t seed_ = kDefaultProjectionSeed;
  std::size_t documents_ = 0;
  std::map<std::string, std::size_t, std::less<>> document_frequency_;
  std::uint64_t fingerprint_ = 0;
};

/// dot(a, b) / (|a| |b|), or 0 when either vector is zero.
inline double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size())
    throw ArgumentError("cosine: length mismatch (" + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + ")");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

}  // namespace r2d2::embed
