#pragma once

// Sessions as users, topics as items, alliance scores as ratings: frames of
// ten scored and topic-labeled turn pairs become RL states, the therapist's
// next topic is the action, and the patient's alliance scale is the reward.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "r2d2/agents.hpp"
#include "r2d2/alliance.hpp"
#include "r2d2/corpus.hpp"
#include "r2d2/embed.hpp"
#include "r2d2/error.hpp"
#include "r2d2/topics.hpp"

namespace r2d2::recsys {

using agents::Transition;
using nn::Vector;

inline constexpr std::size_t kFramePairs = 10;

/// Per-pair block of a frame: patient and therapist (task, bond, goal) and
/// the therapist turn's topic.
struct PairFeatures {
  std::array<double, 3> patient{};
  std::array<double, 3> therapist{};
  int topic = 0;
};

inline std::size_t state_dimension(int k) { return kFramePairs * (6 + static_cast<std::size_t>(k)); }

inline std::array<double, 3> triple(const alliance::AllianceScore& s) { return {s.task, s.bond, s.goal}; }

inline PairFeatures featurize_pair(const corpus::TurnPair& pair, const alliance::Inventory& inv,
                                   const embed::TextEmbedder& e, const topics::TopicModel& tm) {
  PairFeatures f;
  f.patient = triple(alliance::score_turn(inv, e, pair.patient_turn));
  f.therapist = triple(alliance::score_turn(inv, e, pair.therapist_turn));
  f.topic = topics::label_turn(tm, e, pair.therapist_turn).topic;
  return f;
}

inline std::vector<PairFeatures> featurize(const std::vector<corpus::TurnPair>& pairs, const alliance::Inventory& inv,
                                           const embed::TextEmbedder& e, const topics::TopicModel& tm) {
  std::vector<PairFeatures> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(featurize_pair(p, inv, e, tm));
  return out;
}

/// Flattens exactly ten pair blocks into a 10 * (6 + K) state vector.
inline Vector frame_state(std::span<const PairFeatures> window, int k) {
  if (window.size() != kFramePairs)
    throw ArgumentError("a frame holds exactly " + std::to_string(kFramePairs) + " pairs, got " +
                        std::to_string(window.size()));
  const auto block = static_cast<Eigen::Index>(6 + k);
  Vector s = Vector::Zero(static_cast<Eigen::Index>(state_dimension(k)));
  for (std::size_t i = 0; i < window.size(); ++i) {
    const auto& f = window[i];
    if (f.topic < 0 || f.topic >= k) throw ArgumentError("pair topic out of range");
    const Eigen::Index base = static_cast<Eigen::Index>(i) * block;
    for (int c = 0; c < 3; ++c) {
      s[base + c] = f.patient[static_cast<std::size_t>(c)];
      s[base + 3 + c] = f.therapist[static_cast<std::size_t>(c)];
    }
    s[base + 6 + f.topic] = 1.0;
  }
  return s;
}

inline double scale_value(const std::array<double, 3>& t, alliance::Scale s) { return t[static_cast<std::size_t>(s)]; }

/// Where a transition came from: session position in the input list and the
/// first pair of its state window.
struct TransitionOrigin {
  std::size_t session = 0;
  std::size_t start_pair = 0;
};

struct TransitionSet {
  std::vector<Transition> transitions;
  std::vector<TransitionOrigin> origins;
  std::size_t skipped_sessions = 0;
};

/// Sliding frames with stride 1 over already featurized sessions.
inline TransitionSet frames_to_transitions(const std::vector<std::vector<PairFeatures>>& sessions,
                                           const topics::ActionSpace& as, alliance::Scale scale) {
  TransitionSet out;
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    const auto& pairs = sessions[s];
    if (pairs.size() < kFramePairs + 1) {
      ++out.skipped_sessions;
      continue;
    }
    for (std::size_t t = 0; t + kFramePairs < pairs.size(); ++t) {
      const auto& next = pairs[t + kFramePairs];
      if (next.topic < 0 || next.topic >= as.k()) throw ArgumentError("pair topic outside the action space");
      Transition tr;
      tr.state = frame_state(std::span(pairs).subspan(t, kFramePairs), as.k());
      tr.action = as.topic_actions[static_cast<std::size_t>(next.topic)];
      tr.reward = scale_value(next.patient, scale);
      tr.next_state = frame_state(std::span(pairs).subspan(t + 1, kFramePairs), as.k());
      tr.terminal = t + kFramePairs + 1 == pairs.size();
      out.transitions.push_back(std::move(tr));
      out.origins.push_back({s, t});
    }
  }
  return out;
}

inline TransitionSet build_transitions(const std::vector<corpus::Session>& sessions, const alliance::Inventory& inv,
                                       const embed::TextEmbedder& e, const topics::TopicModel& tm,
                                       const topics::ActionSpace& as, alliance::Scale scale) {
  if (tm.k != as.k()) throw CompatibilityError("topic model and action space disagree on K");
  std::vector<std::vector<PairFeatures>> featurized;
  featurized.reserve(sessions.size());
  for (const auto& s : sessions) featurized.push_back(featurize(corpus::pair_turns(s), inv, e, tm));
  return frames_to_transitions(featurized, as, scale);
}

class UndefinedCorrelation : public Error {
 public:
  UndefinedCorrelation() : Error("correlation undefined: a sequence has zero variance") {}
};

/// Sample Pearson correlation, accumulated in one pass with Welford-style
/// co-moment updates.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ArgumentError("pearson: sequences differ in length");
  if (x.size() < 2) throw ArgumentError("pearson: need at least 2 observations");
  double mean_x = 0.0, mean_y = 0.0, m2x = 0.0, m2y = 0.0, cxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(i + 1);
    const double dx = x[i] - mean_x;
    const double dy = y[i] - mean_y;
    mean_x += dx / n;
    mean_y += dy / n;
    m2x += dx * (x[i] - mean_x);
    m2y += dy * (y[i] - mean_y);
    cxy += dx * (y[i] - mean_y);
  }
  if (!(m2x > 0.0) || !(m2y > 0.0)) throw UndefinedCorrelation();
  return std::clamp(cxy / std::sqrt(m2x * m2y), -1.0, 1.0);
}

struct Metrics {
  /// Empty when either flattened sequence has zero variance.
  std::optional<double> pearson_r;
  double topic_accuracy = 0.0;
  /// Mean logged reward over transitions whose decoded topic matches the
  /// logged topic; empty when none match.
  std::optional<double> mean_reward;
  std::size_t transitions = 0;
};

inline Metrics evaluate(std::span<const Vector> predicted, std::span<const Transition> test,
                        const topics::ActionSpace& as) {
  if (predicted.size() != test.size()) throw ArgumentError("evaluate: one prediction per transition required");
  if (test.size() < 2) throw DataError("evaluate: need at least 2 test transitions");
  std::vector<double> xs, ys;
  std::size_t hits = 0;
  double matched_reward = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& p = predicted[i];
    const auto& truth = test[i].action;
    if (p.size() != truth.size()) throw ArgumentError("evaluate: prediction dimension mismatch");
    for (Eigen::Index c = 0; c < p.size(); ++c) {
      xs.push_back(p[c]);
      ys.push_back(truth[c]);
    }
    if (topics::decode_action(as, p) == topics::decode_action(as, truth)) {
      ++hits;
      matched_reward += test[i].reward;
    }
  }
  Metrics m;
  m.transitions = test.size();
  try {
    m.pearson_r = pearson(xs, ys);
  } catch (const UndefinedCorrelation&) {
    m.pearson_r.reset();
  }
  m.topic_accuracy = static_cast<double>(hits) / static_cast<double>(test.size());
  if (hits > 0) m.mean_reward = matched_reward / static_cast<double>(hits);
  return m;
}

inline std::vector<Vector> predict(const agents::Agent& agent, std::span<const Transition> test) {
  std::vector<Vector> out;
  out.reserve(test.size());
  for (const auto& t : test) out.push_back(agents::select_action(agent, t.state));
  return out;
}

inline Metrics evaluate(const agents::Agent& agent, std::span<const Transition> test, const topics::ActionSpace& as) {
  const auto predicted = predict(agent, test);
  return evaluate(predicted, test, as);
}

struct TrainConfig {
  agents::AgentConfig agent;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
};

/// Epoch means; NaN for losses the algorithm does not produce.
struct EpochLoss {
  double critic = 0.0;
  double critic2 = 0.0;
  double actor = 0.0;
  double vae = 0.0;
};

struct TrainResult {
  agents::Agent agent;
  std::vector<EpochLoss> trace;
};

inline std::size_t updates_per_epoch(std::size_t transitions, std::size_t batch) {
  return (transitions + batch - 1) / batch;
}

/// Offline training: each epoch runs ceil(|buffer| / batch) updates on
/// uniformly resampled minibatches.
inline TrainResult train(const TrainConfig& cfg, std::vector<Transition> transitions, agents::ActionBox box) {
  if (transitions.empty()) throw DataError("training needs at least one transition");
  const auto state_dim = static_cast<std::size_t>(transitions.front().state.size());
  TrainResult result{agents::Agent(cfg.agent, state_dim, std::move(box), hash_combine(cfg.seed, 1)), {}};
  agents::ReplayBuffer buffer(std::move(transitions), hash_combine(cfg.seed, 2));
  const std::size_t steps = updates_per_epoch(buffer.size(), cfg.agent.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sums[4] = {0, 0, 0, 0};
    std::size_t counts[4] = {0, 0, 0, 0};
    for (std::size_t step = 0; step < steps; ++step) {
      const auto losses = agents::update(result.agent, buffer.sample(cfg.agent.batch_size));
      const double values[4] = {losses.critic, losses.critic2, losses.actor, losses.vae};
      for (int i = 0; i < 4; ++i)
        if (!std::isnan(values[i])) {
          sums[i] += values[i];
          ++counts[i];
        }
    }
    auto mean = [&](int i) { return counts[i] ? sums[i] / static_cast<double>(counts[i]) : std::nan(""); };
    result.trace.push_back({mean(0), mean(1), mean(2), mean(3)});
  }
  return result;
}

struct Recommendation {
  int topic_id = 0;
  std::string label;
  double score = 0.0;  // negated distance to the agent's action
};

inline std::vector<Recommendation> recommend(const agents::Agent& agent, const topics::ActionSpace& as,
                                             const topics::TopicModel& tm, const Vector& state, int n) {
  const auto ranked = topics::rank_topics(as, agents::select_action(agent, state), n);
  std::vector<Recommendation> out;
  for (const auto& r : ranked) out.push_back({r.topic_id, tm.label(r.topic_id), -r.distance});
  return out;
}

}  // namespace r2d2::recsys
