#pragma once

// Synthetic therapy corpus with a planted topic->reward rule.
//
// Each therapist turn draws words from one topic vocabulary. For pair j the
// best topic is a function of the previous pair:
//   best_j = (topic_{j-1} + (aligned_{j-1} ? 1 : 3)) mod K,   best_0 = 0,
// where aligned_j means topic_j == best_j. The patient turn of pair j quotes
// one positively keyed inventory item per scale when the pair is aligned and
// one negatively keyed item per scale otherwise, so every alliance scale
// rewards the best topic. The logged therapist picks the best topic
// with probability `behavior_best_prob` and a uniformly random other topic
// otherwise.

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "r2d2/alliance.hpp"
#include "r2d2/corpus.hpp"
#include "r2d2/embed.hpp"
#include "r2d2/error.hpp"
#include "r2d2/random.hpp"

namespace r2d2::synthetic {

struct GeneratorConfig {
  std::size_t sessions = 200;
  std::size_t turns_per_session = 40;
  int topics = 7;
  double behavior_best_prob = 0.9;
  int aligned_step = 1;
  int misaligned_step = 3;
  std::size_t therapist_words = 6;
};

/// Planted ground truth for one session, indexed by pair.
struct PlantedSession {
  std::vector<int> topic;
  std::vector<int> best;
};

struct SyntheticCorpus {
  std::vector<corpus::Session> sessions;
  std::vector<PlantedSession> planted;
};

inline int planted_best(int previous_topic, bool previous_aligned, int k, int aligned_step = 1,
                        int misaligned_step = 3) {
  return (previous_topic + (previous_aligned ? aligned_step : misaligned_step)) % k;
}

inline std::vector<std::string> topic_vocabulary(int topic) {
  static const std::vector<std::vector<std::string>> themed = {
      {"discover", "remember", "childhood", "realize", "figure", "identity", "memories", "reflect", "insight",
       "wonder", "younger", "past"},
      {"play", "games", "fun", "toys", "sport", "laughing", "party", "music", "dancing", "hobby", "playground",
       "weekend"},
      {"angry", "scared", "sad", "furious", "afraid", "crying", "upset", "rage", "fear", "grief", "tears", "hurt"},
      {"count", "counting", "tally", "twice", "times", "repeat", "checking", "list", "track", "often", "daily",
       "always"},
      {"busy", "exercise", "walk", "reach", "help", "call", "friend", "routine", "breathe", "schedule", "outside",
       "support"},
      {"number", "seven", "eleven", "dozen", "hundred", "thousand", "percent", "digits", "math", "figures",
       "amount", "zero"},
      {"continue", "keep", "going", "doing", "persist", "ongoing", "still", "further", "onward", "maintain",
       "carry", "proceed"},
  };
  if (topic >= 0 && static_cast<std::size_t>(topic) < themed.size()) return themed[static_cast<std::size_t>(topic)];
  std::vector<std::string> words;
  for (int w = 0; w < 12; ++w) words.push_back("tp" + std::to_string(topic) + "w" + std::to_string(w));
  return words;
}

inline std::string sample_words(const std::vector<std::string>& vocabulary, std::size_t count, Rng& rng) {
  std::string text;
  for (std::size_t i = 0; i < count; ++i) {
    if (!text.empty()) text += ' ';
    text += vocabulary[rng.index(vocabulary.size())];
  }
  return text;
}

/// Patient reply built from one inventory item per scale, positively keyed
/// items when the therapist's topic was the best one and negatively keyed
/// items otherwise.
inline std::string patient_response(const alliance::Inventory& inv, bool aligned, Rng& rng) {
  std::string text;
  for (auto scale : alliance::kScales) {
    std::vector<const alliance::InventoryItem*> pool;
    for (const auto& item : inv.items())
      if (item.scale == scale && (item.sign > 0) == aligned) pool.push_back(&item);
    if (pool.empty()) throw ValidationError("inventory has no " + std::string(aligned ? "positive" : "negative") +
                                            " item for scale " + std::string(alliance::to_string(scale)));
    if (!text.empty()) text += ' ';
    text += pool[rng.index(pool.size())]->text;
  }
  return text;
}

inline std::string therapist_utterance(int topic, std::size_t words, Rng& rng) {
  return sample_words(topic_vocabulary(topic), words, rng);
}

inline SyntheticCorpus generate_synthetic(const GeneratorConfig& cfg, std::uint64_t seed) {
  if (cfg.topics < 2) throw ArgumentError("synthetic corpus needs at least 2 topics");
  if (cfg.turns_per_session < 2) throw ArgumentError("sessions need at least 2 turns");
  if (!(cfg.behavior_best_prob >= 0.0 && cfg.behavior_best_prob <= 1.0))
    throw ArgumentError("behavior_best_prob must lie in [0, 1]");
  if (cfg.therapist_words == 0) throw ArgumentError("therapist word count must be positive");

  static constexpr corpus::Condition kConditions[] = {corpus::Condition::anxiety, corpus::Condition::depression,
                                                      corpus::Condition::schizophrenia, corpus::Condition::suicidal};
  const auto inv = alliance::default_inventory();
  Rng rng(seed);
  SyntheticCorpus out;
  const std::size_t pairs = cfg.turns_per_session / 2;
  for (std::size_t s = 0; s < cfg.sessions; ++s) {
    corpus::Session session;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%04zu", s);
    session.session_id = id;
    session.condition = kConditions[s % 4];
    PlantedSession planted;
    int previous_topic = 0;
    bool previous_aligned = true;
    for (std::size_t j = 0; j < pairs; ++j) {
      const int best = j == 0 ? 0 : planted_best(previous_topic, previous_aligned, cfg.topics, cfg.aligned_step, cfg.misaligned_step);
      int topic = best;
      if (!rng.bernoulli(cfg.behavior_best_prob)) {
        topic = static_cast<int>(rng.index(static_cast<std::size_t>(cfg.topics - 1)));
        if (topic >= best) ++topic;
      }
      const bool aligned = topic == best;
      const auto patient_text = patient_response(inv, aligned, rng);
      const auto therapist_text = therapist_utterance(topic, cfg.therapist_words, rng);
      session.turns.push_back({session.session_id, 2 * j, corpus::Speaker::patient, patient_text, std::nullopt});
      session.turns.push_back({session.session_id, 2 * j + 1, corpus::Speaker::therapist, therapist_text, std::nullopt});
      planted.topic.push_back(topic);
      planted.best.push_back(best);
      previous_topic = topic;
      previous_aligned = aligned;
    }
    if (cfg.turns_per_session % 2 == 1) {
      session.turns.push_back({session.session_id, 2 * pairs, corpus::Speaker::patient,
                               patient_response(inv, true, rng), std::nullopt});
    }
    out.sessions.push_back(std::move(session));
    out.planted.push_back(std::move(planted));
  }
  return out;
}

}  // namespace r2d2::synthetic
