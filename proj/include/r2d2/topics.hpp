#pragma once

// Topics are the recommendable items. They are found by k-means over turn
// embeddings, and each topic gets a continuous action vector: the mean turn
// embedding (doc300) or the mean principal-component projection (pca36/pca2).

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "r2d2/corpus.hpp"
#include "r2d2/embed.hpp"
#include "r2d2/error.hpp"
#include "r2d2/random.hpp"
#include "r2d2/serialize.hpp"

namespace r2d2::topics {

using embed::Vector;

struct TopicModel {
  int k = 0;
  std::vector<Vector> centroids;
  std::vector<std::string> labels;
  std::uint64_t seed = 0;
  /// Sum of squared distances after every Lloyd iteration.
  std::vector<double> objective_trace;
  int iterations = 0;

  std::string label(int topic) const {
    if (topic >= 0 && static_cast<std::size_t>(topic) < labels.size() && !labels[topic].empty())
      return labels[topic];
    return "topic " + std::to_string(topic);
  }
};

struct TopicLabel {
  int topic = 0;
  bool degenerate = false;
};

inline constexpr int kMaxLloydIterations = 100;
inline constexpr double kCentroidShiftTolerance = 1e-6;

namespace detail {

inline int nearest(const std::vector<Vector>& points, const Vector& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d = (points[i] - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

inline TopicModel lloyd(const std::vector<Vector>& points, int k, Rng& rng);

}  // namespace detail

inline constexpr int kDefaultRestarts = 10;

/// Seeded k-means++ initialization followed by Lloyd iterations until every
/// centroid moves less than 1e-6 or 100 iterations have run. The run with the
/// lowest final objective among `restarts` initializations is kept.
inline TopicModel fit_points(const std::vector<Vector>& points, int k, std::uint64_t seed,
                             int restarts = kDefaultRestarts) {
  if (k < 2) throw ArgumentError("topic count must be at least 2, got " + std::to_string(k));
  std::vector<std::size_t> distinct;
  for (std::size_t i = 0; i < points.size() && distinct.size() < static_cast<std::size_t>(k); ++i) {
    bool fresh = true;
    for (auto j : distinct)
      if (points[j] == points[i]) {
        fresh = false;
        break;
      }
    if (fresh) distinct.push_back(i);
  }
  if (distinct.size() < static_cast<std::size_t>(k))
    throw DataError("k-means needs at least " + std::to_string(k) + " distinct embeddings, found " +
                    std::to_string(distinct.size()));

  if (restarts < 1) throw ArgumentError("k-means needs at least one restart");

  Rng rng(seed);
  TopicModel best;
  for (int run = 0; run < restarts; ++run) {
    auto model = detail::lloyd(points, k, rng);
    model.seed = seed;
    if (run == 0 || model.objective_trace.back() < best.objective_trace.back()) best = std::move(model);
  }
  return best;
}

namespace detail {

inline TopicModel lloyd(const std::vector<Vector>& points, int k, Rng& rng) {
  const std::size_t n = points.size();
  TopicModel model;
  model.k = k;
  model.centroids.push_back(points[rng.index(n)]);
  std::vector<double> d2(n);
  while (model.centroids.size() < static_cast<std::size_t>(k)) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : model.centroids) best = std::min(best, (points[i] - c).squaredNorm());
      d2[i] = best;
      total += best;
    }
    double target = rng.uniform() * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      target -= d2[i];
      if (target < 0.0) {
        pick = i;
        break;
      }
    }
    while (d2[pick] <= 0.0) pick = (pick + n - 1) % n;
    model.centroids.push_back(points[pick]);
  }

  std::vector<int> assignment(n, -1);
  for (int iter = 0; iter < kMaxLloydIterations; ++iter) {
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      assignment[i] = detail::nearest(model.centroids, points[i]);
      objective += (points[i] - model.centroids[assignment[i]]).squaredNorm();
    }
    std::vector<Vector> sums(k, Vector::Zero(points.front().size()));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[assignment[i]] += points[i];
      ++counts[assignment[i]];
    }
    double max_shift = 0.0;
    for (int c = 0; c < k; ++c) {
      Vector next;
      if (counts[c] == 0) {
        // Empty cluster: restart it at the point worst served by its centroid.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = (points[i] - model.centroids[assignment[i]]).squaredNorm();
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        next = points[far];
      } else {
        next = sums[c] / static_cast<double>(counts[c]);
      }
      max_shift = std::max(max_shift, (next - model.centroids[c]).norm());
      model.centroids[c] = std::move(next);
    }
    model.objective_trace.push_back(objective);
    model.iterations = iter + 1;
    if (max_shift < kCentroidShiftTolerance) break;
  }
  return model;
}

}  // namespace detail

inline TopicModel fit_topics(const embed::TextEmbedder& e, const std::vector<corpus::Turn>& turns, int k,
                             std::uint64_t seed) {
  if (k < 2) throw ArgumentError("topic count must be at least 2, got " + std::to_string(k));
  std::vector<Vector> points;
  points.reserve(turns.size());
  for (const auto& t : turns) {
    auto embedded = e.embed(t.text);
    if (!embedded.degenerate) points.push_back(std::move(embedded.vector));
  }
  return fit_points(points, k, seed);
}

/// Nearest centroid by Euclidean distance; ties resolve to the lowest id.
inline TopicLabel label_vector(const TopicModel& tm, const Vector& v, bool degenerate = false) {
  return TopicLabel{detail::nearest(tm.centroids, v), degenerate};
}

inline TopicLabel label_turn(const TopicModel& tm, const embed::TextEmbedder& e, const corpus::Turn& turn) {
  const auto embedded = e.embed(turn.text);
  return label_vector(tm, embedded.vector, embedded.degenerate);
}

/// Labels each topic with its three most characteristic tokens (summed
/// TF-IDF weight over member turns), in descending weight.
template <class Embedder>
std::vector<std::string> describe_topics(const TopicModel& tm, const Embedder& e,
                                         const std::vector<corpus::Turn>& turns, std::size_t words = 3) {
  std::vector<std::map<std::string, double>> weight(tm.k);
  for (const auto& t : turns) {
    const auto label = label_turn(tm, e, t);
    if (label.degenerate) continue;
    for (const auto& token : embed::tokenize(t.text)) weight[label.topic][token] += e.idf(token);
  }
  std::vector<std::string> labels;
  for (int c = 0; c < tm.k; ++c) {
    std::vector<std::pair<std::string, double>> ranked(weight[c].begin(), weight[c].end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::string label;
    for (std::size_t i = 0; i < std::min(words, ranked.size()); ++i) {
      if (!label.empty()) label += '/';
      label += ranked[i].first;
    }
    labels.push_back(label);
  }
  return labels;
}

enum class ActionKind { doc300, pca36, pca2 };

inline std::string_view to_string(ActionKind k) {
  switch (k) {
    case ActionKind::doc300: return "doc300";
    case ActionKind::pca36: return "pca36";
    case ActionKind::pca2: return "pca2";
  }
  return "doc300";
}

inline std::optional<ActionKind> parse_action_kind(std::string_view s) {
  for (auto k : {ActionKind::doc300, ActionKind::pca36, ActionKind::pca2})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

enum class DecodeMetric { euclidean, cosine };

struct ActionSpace {
  ActionKind kind = ActionKind::doc300;
  std::vector<Vector> topic_actions;
  /// PCA kinds only: orthonormal columns and the data mean they are centered on.
  Eigen::MatrixXd pca_basis;
  Vector pca_mean;
  DecodeMetric metric = DecodeMetric::euclidean;

  int k() const { return static_cast<int>(topic_actions.size()); }
  Eigen::Index dimension() const { return topic_actions.empty() ? 0 : topic_actions.front().size(); }

  /// Maps an embedding into this space (identity for doc300).
  Vector project(const Vector& embedding) const {
    if (kind == ActionKind::doc300) return embedding;
    return pca_basis.transpose() * (embedding - pca_mean);
  }
};

inline Eigen::Index pca_components(ActionKind k) {
  switch (k) {
    case ActionKind::pca36: return 36;
    case ActionKind::pca2: return 2;
    case ActionKind::doc300: return 0;
  }
  return 0;
}

struct PrincipalComponents {
  Eigen::MatrixXd basis;  // columns, descending variance
  Vector mean;
  Vector variances;       // all eigenvalues, descending
};

/// Top `components` eigenvectors of the sample covariance of `rows`
/// (one observation per row). Each column's largest-magnitude entry is made
/// positive so the basis is reproducible.
inline PrincipalComponents principal_components(const Eigen::MatrixXd& rows, Eigen::Index components) {
  if (rows.rows() < 2) throw DataError("PCA needs at least 2 observations");
  if (components < 1 || components > rows.cols())
    throw ArgumentError("PCA: cannot keep " + std::to_string(components) + " of " + std::to_string(rows.cols()) +
                        " dimensions");
  PrincipalComponents pc;
  pc.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centered = rows.rowwise() - pc.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(rows.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("PCA eigendecomposition failed");
  const Eigen::Index d = cov.rows();
  pc.variances = solver.eigenvalues().reverse();
  pc.basis.resize(d, components);
  for (Eigen::Index c = 0; c < components; ++c) {
    Vector col = solver.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col[arg] < 0) col = -col;
    pc.basis.col(c) = col;
  }
  return pc;
}

/// `labeled_turns` pairs each turn with its topic id. Every topic needs at
/// least one member.
inline ActionSpace build_action_space(const TopicModel& tm, const embed::TextEmbedder& e,
                                      const std::vector<std::pair<corpus::Turn, int>>& labeled_turns,
                                      ActionKind kind) {
  std::vector<Vector> embeddings;
  std::vector<int> labels;
  for (const auto& [turn, topic] : labeled_turns) {
    if (topic < 0 || topic >= tm.k) throw ArgumentError("topic label " + std::to_string(topic) + " out of range");
    embeddings.push_back(e.embed(turn.text).vector);
    labels.push_back(topic);
  }
  ActionSpace as;
  as.kind = kind;
  if (kind != ActionKind::doc300) {
    const auto dim = static_cast<Eigen::Index>(e.dimension());
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(embeddings.size()), dim);
    for (std::size_t i = 0; i < embeddings.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = embeddings[i].transpose();
    auto pc = principal_components(rows, std::min(pca_components(kind), dim));
    as.pca_basis = std::move(pc.basis);
    as.pca_mean = std::move(pc.mean);
  }
  const Eigen::Index out_dim = kind == ActionKind::doc300 ? static_cast<Eigen::Index>(e.dimension()) : as.pca_basis.cols();
  std::vector<Vector> sums(tm.k, Vector::Zero(out_dim));
  std::vector<std::size_t> counts(tm.k, 0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    sums[labels[i]] += as.project(embeddings[i]);
    ++counts[labels[i]];
  }
  for (int c = 0; c < tm.k; ++c) {
    if (counts[c] == 0) throw DataError("cannot build action space: topic " + std::to_string(c) + " has no turns");
    as.topic_actions.push_back(sums[c] / static_cast<double>(counts[c]));
  }
  return as;
}

namespace detail {

inline double action_distance(const ActionSpace& as, int topic, const Vector& a) {
  if (as.metric == DecodeMetric::cosine) return 1.0 - embed::cosine(as.topic_actions[topic], a);
  return (as.topic_actions[topic] - a).norm();
}

inline void check_dimension(const ActionSpace& as, const Vector& a) {
  if (a.size() != as.dimension())
    throw ArgumentError("action has dimension " + std::to_string(a.size()) + ", space expects " +
                        std::to_string(as.dimension()));
}

}  // namespace detail

/// Nearest topic action; ties resolve to the lowest id.
inline int decode_action(const ActionSpace& as, const Vector& a) {
  detail::check_dimension(as, a);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < as.k(); ++c) {
    const double d = detail::action_distance(as, c, a);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

struct RankedTopic {
  int topic_id = 0;
  double distance = 0.0;
};

inline std::vector<RankedTopic> rank_topics(const ActionSpace& as, const Vector& a, int n) {
  if (n < 1 || n > as.k())
    throw ArgumentError("rank_topics: n must lie in [1, " + std::to_string(as.k()) + "], got " + std::to_string(n));
  detail::check_dimension(as, a);
  std::vector<RankedTopic> ranked;
  for (int c = 0; c < as.k(); ++c) ranked.push_back({c, detail::action_distance(as, c, a)});
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) { return x.distance < y.distance; });
  ranked.resize(static_cast<std::size_t>(n));
  return ranked;
}

inline void write(io::Writer& w, const TopicModel& tm) {
  w.tag("TOPC");
  w.i64(tm.k);
  w.u64(tm.seed);
  w.i64(tm.iterations);
  for (const auto& c : tm.centroids) w.vec(c);
  w.u64(tm.labels.size());
  for (const auto& l : tm.labels) w.str(l);
  w.reals(tm.objective_trace);
}

inline TopicModel read_topic_model(io::Reader& r) {
  r.expect_tag("TOPC");
  TopicModel tm;
  tm.k = static_cast<int>(r.i64());
  if (tm.k < 2 || tm.k > 100000) throw DataError("checkpoint topic model: bad K");
  tm.seed = r.u64();
  tm.iterations = static_cast<int>(r.i64());
  for (int c = 0; c < tm.k; ++c) tm.centroids.push_back(r.vec());
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) tm.labels.push_back(r.str());
  tm.objective_trace = r.reals();
  return tm;
}

inline void write(io::Writer& w, const ActionSpace& as) {
  w.tag("ACTS");
  w.u8(static_cast<std::uint8_t>(as.kind));
  w.u8(static_cast<std::uint8_t>(as.metric));
  w.u64(as.topic_actions.size());
  for (const auto& a : as.topic_actions) w.vec(a);
  w.mat(as.pca_basis);
  w.vec(as.pca_mean);
}

inline ActionSpace read_action_space(io::Reader& r) {
  r.expect_tag("ACTS");
  ActionSpace as;
  const auto kind = r.u8();
  const auto metric = r.u8();
  if (kind > 2 || metric > 1) throw DataError("checkpoint action space: bad enum code");
  as.kind = static_cast<ActionKind>(kind);
  as.metric = static_cast<DecodeMetric>(metric);
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) as.topic_actions.push_back(r.vec());
  as.pca_basis = r.mat();
  as.pca_mean = r.vec();
  return as;
}

}  // namespace r2d2::topics
