#pragma once

// End-to-end training and evaluation runs plus the checkpoint format that
// bundles every fitted artifact.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "r2d2/agents.hpp"
#include "r2d2/alliance.hpp"
#include "r2d2/corpus.hpp"
#include "r2d2/embed.hpp"
#include "r2d2/error.hpp"
#include "r2d2/random.hpp"
#include "r2d2/recsys.hpp"
#include "r2d2/serialize.hpp"
#include "r2d2/topics.hpp"

namespace r2d2::pipeline {

struct RunConfig {
  agents::AgentConfig agent;
  alliance::Scale scale = alliance::Scale::task;
  topics::ActionKind action_kind = topics::ActionKind::doc300;
  int topics = 7;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  double test_fraction = 0.05;
  std::size_t embed_dimension = embed::kDefaultDimension;
  std::optional<corpus::Condition> condition;

  bool operator==(const RunConfig&) const = default;
};

/// Everything needed to score, label, and recommend without the corpus.
struct Model {
  RunConfig config;
  embed::HashedTfidfEmbedder embedder;
  alliance::Inventory inventory;
  topics::TopicModel topics;
  topics::ActionSpace actions;
  agents::Agent agent;
};

struct Report {
  RunConfig config;
  recsys::Metrics metrics;
  std::size_t train_transitions = 0;
  std::size_t test_transitions = 0;
  std::size_t skipped_sessions = 0;
  std::vector<recsys::EpochLoss> trace;
};

/// Wraps a failure with the name of the pipeline stage that raised it while
/// keeping the original exit code.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const Error& cause)
      : Error(stage + ": " + cause.what()), code_(cause.exit_code()) {}
  ExitCode exit_code() const noexcept override { return code_; }

 private:
  ExitCode code_;
};

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

inline std::uint64_t embedder_seed(std::uint64_t seed) { return hash_combine(seed, 3); }
inline std::uint64_t topic_seed(std::uint64_t seed) { return hash_combine(seed, 4); }

inline std::vector<corpus::Session> select_sessions(const std::vector<corpus::Session>& sessions,
                                                    const RunConfig& cfg) {
  if (!cfg.condition) return sessions;
  auto subset = corpus::filter_condition(sessions, *cfg.condition);
  if (subset.empty())
    throw DataError("no sessions with condition '" + std::string(corpus::to_string(*cfg.condition)) + "'");
  return subset;
}

inline std::vector<corpus::Turn> therapist_turns(const std::vector<corpus::Session>& sessions) {
  std::vector<corpus::Turn> out;
  for (const auto& s : sessions)
    for (const auto& t : s.turns)
      if (t.speaker == corpus::Speaker::therapist) out.push_back(t);
  return out;
}

inline corpus::CorpusSplit split_for(const std::vector<corpus::Session>& sessions, const RunConfig& cfg) {
  return stage("split", [&] { return corpus::split_corpus(select_sessions(sessions, cfg), cfg.test_fraction, cfg.seed); });
}

/// Fits the embedder, binds the inventory, clusters therapist turns, and
/// builds the action space, all from the training side of the split.
inline Model fit_artifacts(const corpus::CorpusSplit& split, alliance::Inventory inventory, const RunConfig& cfg) {
  Model m;
  m.config = cfg;
  m.embedder = stage("embed", [&] {
    std::vector<std::string> texts;
    for (const auto& s : split.train)
      for (const auto& t : s.turns) texts.push_back(t.text);
    return embed::HashedTfidfEmbedder::fit(texts, cfg.embed_dimension, embedder_seed(cfg.seed));
  });
  m.inventory = std::move(inventory);
  m.inventory.bind(m.embedder);
  const auto therapist = therapist_turns(split.train);
  m.topics = stage("topics", [&] {
    auto tm = topics::fit_topics(m.embedder, therapist, cfg.topics, topic_seed(cfg.seed));
    tm.labels = topics::describe_topics(tm, m.embedder, therapist);
    return tm;
  });
  m.actions = stage("actions", [&] {
    std::vector<std::pair<corpus::Turn, int>> labeled;
    for (const auto& t : therapist) {
      const auto label = topics::label_turn(m.topics, m.embedder, t);
      if (!label.degenerate) labeled.emplace_back(t, label.topic);
    }
    return topics::build_action_space(m.topics, m.embedder, labeled, cfg.action_kind);
  });
  return m;
}

inline recsys::TransitionSet transitions_for(const Model& m, const std::vector<corpus::Session>& sessions) {
  return recsys::build_transitions(sessions, m.inventory, m.embedder, m.topics, m.actions, m.config.scale);
}

struct TrainOutput {
  Model model;
  Report report;
};

inline TrainOutput run_train(const std::vector<corpus::Session>& sessions, alliance::Inventory inventory,
                             const RunConfig& cfg) {
  stage("config", [&] {
    cfg.agent.validate();
    if (cfg.topics < 2) throw ArgumentError("topic count must be at least 2");
    return 0;
  });
  const auto split = split_for(sessions, cfg);
  TrainOutput out{fit_artifacts(split, std::move(inventory), cfg), {}};
  auto& m = out.model;
  const auto train_set = stage("transitions", [&] { return transitions_for(m, split.train); });
  const auto test_set = stage("transitions", [&] { return transitions_for(m, split.test); });
  auto result = stage("train", [&] {
    recsys::TrainConfig tc{cfg.agent, cfg.epochs, cfg.seed};
    return recsys::train(tc, train_set.transitions, agents::ActionBox::around(m.actions.topic_actions));
  });
  m.agent = std::move(result.agent);
  out.report.config = cfg;
  out.report.trace = std::move(result.trace);
  out.report.train_transitions = train_set.transitions.size();
  out.report.test_transitions = test_set.transitions.size();
  out.report.skipped_sessions = train_set.skipped_sessions + test_set.skipped_sessions;
  out.report.metrics = stage("evaluate", [&] { return recsys::evaluate(m.agent, test_set.transitions, m.actions); });
  return out;
}

struct EvalOptions {
  /// Score the logged actions against themselves instead of the agent.
  bool replay_ground_truth = false;
  std::optional<int> expected_topics;
  std::optional<std::size_t> expected_inventory_items;
};

inline Report run_eval(const Model& m, const std::vector<corpus::Session>& sessions, std::uint64_t split_seed,
                       const EvalOptions& opts = {}) {
  if (opts.expected_topics && *opts.expected_topics != m.topics.k)
    throw CompatibilityError("checkpoint has K = " + std::to_string(m.topics.k) + ", requested K = " +
                             std::to_string(*opts.expected_topics));
  if (opts.expected_inventory_items && *opts.expected_inventory_items != m.inventory.size())
    throw CompatibilityError("checkpoint inventory has " + std::to_string(m.inventory.size()) +
                             " items, supplied inventory has " + std::to_string(*opts.expected_inventory_items));
  if (!m.inventory.bound_to(m.embedder)) throw CompatibilityError("checkpoint inventory is not bound to its embedder");
  if (m.actions.k() != m.topics.k) throw CompatibilityError("checkpoint action space and topic model disagree on K");
  if (m.agent.action_dim() != static_cast<std::size_t>(m.actions.dimension()))
    throw CompatibilityError("agent action dimension does not match the action space");
  if (m.agent.state_dim() != recsys::state_dimension(m.topics.k))
    throw CompatibilityError("agent state dimension does not match K");

  RunConfig cfg = m.config;
  cfg.seed = split_seed;
  const auto split = split_for(sessions, cfg);
  const auto test_set = stage("transitions", [&] { return transitions_for(m, split.test); });
  Report r;
  r.config = m.config;
  r.config.seed = split_seed;
  r.test_transitions = test_set.transitions.size();
  r.skipped_sessions = test_set.skipped_sessions;
  r.metrics = stage("evaluate", [&] {
    if (!opts.replay_ground_truth) return recsys::evaluate(m.agent, test_set.transitions, m.actions);
    std::vector<nn::Vector> truth;
    for (const auto& t : test_set.transitions) truth.push_back(t.action);
    return recsys::evaluate(truth, test_set.transitions, m.actions);
  });
  return r;
}

inline nlohmann::json optional_number(const std::optional<double>& v) {
  if (v && std::isfinite(*v)) return *v;
  return nullptr;
}

/// One machine-parseable JSON object per run.
inline std::string metrics_line(const Report& r) {
  nlohmann::ordered_json j;
  j["algorithm"] = agents::to_string(r.config.agent.algorithm);
  j["scale"] = alliance::to_string(r.config.scale);
  j["condition"] = r.config.condition ? std::string(corpus::to_string(*r.config.condition)) : std::string("all");
  j["action_space"] = topics::to_string(r.config.action_kind);
  j["topics"] = r.config.topics;
  j["seed"] = r.config.seed;
  j["pearson_r"] = optional_number(r.metrics.pearson_r);
  j["topic_accuracy"] = r.metrics.topic_accuracy;
  j["mean_reward"] = optional_number(r.metrics.mean_reward);
  j["test_transitions"] = r.metrics.transitions;
  j["train_transitions"] = r.train_transitions;
  j["skipped_sessions"] = r.skipped_sessions;
  return j.dump();
}

inline constexpr char kCheckpointMagic[] = "R2D2CKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write(io::Writer& w, const RunConfig& c) {
  w.tag("RCFG");
  agents::write(w, c.agent);
  w.u8(static_cast<std::uint8_t>(c.scale));
  w.u8(static_cast<std::uint8_t>(c.action_kind));
  w.i64(c.topics);
  w.u64(c.epochs);
  w.u64(c.seed);
  w.f64(c.test_fraction);
  w.u64(c.embed_dimension);
  w.u8(c.condition ? 1 + static_cast<std::uint8_t>(*c.condition) : 0);
}

inline RunConfig read_run_config(io::Reader& r) {
  r.expect_tag("RCFG");
  RunConfig c;
  c.agent = agents::read_agent_config(r);
  const auto scale = r.u8();
  if (scale > 2) throw DataError("checkpoint: bad rating scale");
  c.scale = static_cast<alliance::Scale>(scale);
  const auto kind = r.u8();
  if (kind > 2) throw DataError("checkpoint: bad action-space kind");
  c.action_kind = static_cast<topics::ActionKind>(kind);
  c.topics = static_cast<int>(r.i64());
  c.epochs = r.u64();
  c.seed = r.u64();
  c.test_fraction = r.f64();
  c.embed_dimension = r.u64();
  const auto cond = r.u8();
  if (cond > 5) throw DataError("checkpoint: bad condition");
  if (cond) c.condition = static_cast<corpus::Condition>(cond - 1);
  return c;
}

inline void write_checkpoint(std::ostream& out, const Model& m) {
  io::Writer w(out);
  for (const char* p = kCheckpointMagic; *p; ++p) w.u8(static_cast<std::uint8_t>(*p));
  w.u32(kCheckpointVersion);
  write(w, m.config);
  m.embedder.write(w);
  alliance::write(w, m.inventory);
  topics::write(w, m.topics);
  topics::write(w, m.actions);
  agents::write(w, m.agent);
}

inline Model read_checkpoint(std::istream& in) {
  io::Reader r(in);
  for (const char* p = kCheckpointMagic; *p; ++p)
    if (r.u8() != static_cast<std::uint8_t>(*p)) throw DataError("not a checkpoint file (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw CompatibilityError("unsupported checkpoint version " + std::to_string(version));
  Model m;
  m.config = read_run_config(r);
  m.embedder = embed::HashedTfidfEmbedder::read(r);
  m.inventory = alliance::read_inventory_binary(r);
  m.inventory.bind(m.embedder);
  m.topics = topics::read_topic_model(r);
  m.actions = topics::read_action_space(r);
  m.agent = agents::read_agent(r);
  return m;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  write_checkpoint(out, m);
  out.flush();
  if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(in);
}

}  // namespace r2d2::pipeline
