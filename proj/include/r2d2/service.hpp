#pragma once

// Live-session engine. Clients speak newline-delimited JSON records; each
// record's `type` selects the handler. Every accepted turn is answered by one
// annotation, and by a recommendation once ten pairs have completed and a new
// patient turn arrives.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "r2d2/agents.hpp"
#include "r2d2/alliance.hpp"
#include "r2d2/corpus.hpp"
#include "r2d2/error.hpp"
#include "r2d2/pipeline.hpp"
#include "r2d2/recsys.hpp"
#include "r2d2/topics.hpp"

namespace r2d2::service {

using json = nlohmann::ordered_json;

/// Milliseconds since the epoch; injectable so tests and replays are stable.
using Clock = std::function<std::int64_t()>;

inline std::int64_t system_clock_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

/// Returns 0, 1, 2, ... on successive calls.
inline Clock counting_clock(std::int64_t start = 0) {
  auto next = std::make_shared<std::atomic<std::int64_t>>(start);
  return [next] { return next->fetch_add(1); };
}

inline json error_message(std::string code, std::string detail) {
  json j;
  j["type"] = "error";
  j["code"] = std::move(code);
  j["detail"] = std::move(detail);
  return j;
}

struct EngineConfig {
  int top_n = 3;
  /// One `<session_id>.jsonl` file per session when set; logs are always
  /// kept in memory as well.
  std::optional<std::filesystem::path> log_dir;
};

struct Selection {
  int round = 0;
  int topic_id = 0;
  nn::Vector state;
  double reward = 0.0;
  std::optional<nn::Vector> next_state;
};

struct SessionSummary {
  std::string session_id;
  std::size_t turns = 0;
  std::optional<double> mean_task, mean_bond, mean_goal;
  std::size_t recommendations = 0;
  std::size_t selections = 0;
};

class LiveSession {
 public:
  std::string id;
  std::string inventory_name;
  std::shared_ptr<const alliance::Inventory> inventory;
  int top_n = 3;
  std::int64_t created_ms = 0;

  std::vector<corpus::Turn> turns;
  std::vector<std::string> log;
  std::unique_ptr<std::ofstream> log_file;

  std::deque<recsys::PairFeatures> window;
  std::optional<std::string> pending_patient;
  std::optional<std::pair<std::string, std::string>> last_pair;
  bool last_turn_completed_pair = false;
  std::size_t pairs = 0;

  int round = 0;
  std::optional<int> open_round;
  std::optional<nn::Vector> open_state;
  std::optional<nn::Vector> open_next_state;
  double open_reward = 0.0;
  bool selected_this_round = false;
  std::vector<Selection> selections;
  std::size_t recommendations = 0;

  double sum[3] = {0, 0, 0};
  std::mutex mutex;

  void append_log(json record) {
    const auto line = record.dump();
    log.push_back(line);
    if (log_file) {
      *log_file << line << '\n';
      log_file->flush();
      if (!*log_file) throw DataError("session " + id + ": log write failed");
    }
  }
};

class Engine {
 public:
  Engine(std::shared_ptr<const pipeline::Model> model, EngineConfig config = {}, Clock clock = system_clock_ms)
      : model_(std::move(model)), config_(std::move(config)), clock_(std::move(clock)) {
    if (!model_) throw ArgumentError("engine needs a model");
    if (config_.top_n < 1 || config_.top_n > model_->topics.k)
      throw ArgumentError("top-n must lie in [1, " + std::to_string(model_->topics.k) + "]");
    if (config_.log_dir) std::filesystem::create_directories(*config_.log_dir);
    inventories_["default"] = std::make_shared<const alliance::Inventory>(model_->inventory);
  }

  const pipeline::Model& model() const { return *model_; }
  const EngineConfig& config() const { return config_; }

  /// Makes `inv` selectable by name in `hello`; items are embedded with the
  /// model's embedder.
  void register_inventory(const std::string& name, alliance::Inventory inv) {
    inv.bind(model_->embedder);
    std::lock_guard lock(registry_mutex_);
    inventories_[name] = std::make_shared<const alliance::Inventory>(std::move(inv));
  }

  std::size_t live_sessions() const {
    std::lock_guard lock(registry_mutex_);
    return sessions_.size();
  }

  json health() const {
    json j;
    j["status"] = "ok";
    j["sessions"] = live_sessions();
    j["algorithm"] = agents::to_string(model_->config.agent.algorithm);
    j["scale"] = alliance::to_string(model_->config.scale);
    j["action_space"] = topics::to_string(model_->actions.kind);
    j["topics"] = model_->topics.k;
    j["embed_dimension"] = model_->embedder.dimension();
    j["inventory_items"] = model_->inventory.size();
    j["top_n"] = config_.top_n;
    json labels = json::array();
    for (int k = 0; k < model_->topics.k; ++k) labels.push_back(model_->topics.label(k));
    j["topic_labels"] = labels;
    return j;
  }

  /// Handles one client record and returns the replies in send order.
  std::vector<json> handle(const json& msg) {
    try {
      if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string())
        return {error_message("bad_request", "record must be an object with a string 'type'")};
      const auto type = msg["type"].get<std::string>();
      if (type == "hello") return on_hello(msg);
      if (type == "turn") return on_turn(msg);
      if (type == "select") return on_select(msg);
      if (type == "end") return on_end(msg);
      return {error_message("bad_request", "unsupported message type '" + type + "'")};
    } catch (const json::exception& e) {
      return {error_message("bad_request", e.what())};
    } catch (const Error& e) {
      return {error_message("internal", e.what())};
    }
  }

  std::vector<std::string> handle_line(const std::string& line) {
    std::vector<json> replies;
    try {
      replies = handle(json::parse(line));
    } catch (const json::parse_error& e) {
      replies = {error_message("bad_request", std::string("invalid JSON: ") + e.what())};
    }
    std::vector<std::string> out;
    for (const auto& r : replies) out.push_back(r.dump());
    return out;
  }

  /// Copy of a live session's log lines.
  std::vector<std::string> session_log(const std::string& id) const {
    auto s = find(id);
    if (!s) throw ArgumentError("unknown session '" + id + "'");
    std::lock_guard lock(s->mutex);
    return s->log;
  }

  /// Logs of sessions closed through `end`, kept for export and inspection.
  std::vector<std::string> closed_log(const std::string& id) const {
    std::lock_guard lock(registry_mutex_);
    const auto it = closed_logs_.find(id);
    if (it == closed_logs_.end()) throw ArgumentError("no closed session '" + id + "'");
    return it->second;
  }

  /// One transition per recorded selection: the recommendation's state, the
  /// selected topic's action, the triggering patient turn's scale score as
  /// reward, and the window after that pair completed (terminal otherwise).
  std::vector<agents::Transition> export_transitions(const std::string& id) const {
    std::vector<Selection> selections;
    {
      auto s = find(id);
      if (s) {
        std::lock_guard lock(s->mutex);
        selections = s->selections;
      } else {
        std::lock_guard lock(registry_mutex_);
        const auto it = closed_selections_.find(id);
        if (it == closed_selections_.end()) throw ArgumentError("unknown session '" + id + "'");
        selections = it->second;
      }
    }
    std::vector<agents::Transition> out;
    for (const auto& sel : selections) {
      agents::Transition t;
      t.state = sel.state;
      t.action = model_->actions.topic_actions[static_cast<std::size_t>(sel.topic_id)];
      t.reward = sel.reward;
      t.terminal = !sel.next_state.has_value();
      t.next_state = sel.next_state ? *sel.next_state : sel.state;
      out.push_back(std::move(t));
    }
    return out;
  }

 private:
  std::shared_ptr<LiveSession> find(const std::string& id) const {
    std::lock_guard lock(registry_mutex_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  static std::optional<std::string> session_field(const json& msg) {
    if (!msg.contains("session_id") || !msg["session_id"].is_string()) return std::nullopt;
    return msg["session_id"].get<std::string>();
  }

  json stamp(json record) const {
    record["timestamp"] = clock_();
    return record;
  }

  std::vector<json> on_hello(const json& msg) {
    std::string inventory_name = "default";
    if (msg.contains("inventory") && !msg["inventory"].is_null()) {
      if (!msg["inventory"].is_string()) return {error_message("bad_request", "'inventory' must be a string")};
      inventory_name = msg["inventory"].get<std::string>();
    }
    int top_n = config_.top_n;
    if (msg.contains("top_n") && !msg["top_n"].is_null()) {
      if (!msg["top_n"].is_number_integer()) return {error_message("bad_request", "'top_n' must be an integer")};
      top_n = msg["top_n"].get<int>();
      if (top_n < 1 || top_n > model_->topics.k)
        return {error_message("out_of_range", "top_n must lie in [1, " + std::to_string(model_->topics.k) + "]")};
    }
    auto session = std::make_shared<LiveSession>();
    {
      std::lock_guard lock(registry_mutex_);
      const auto inv = inventories_.find(inventory_name);
      if (inv == inventories_.end())
        return {error_message("unknown_inventory", "no inventory named '" + inventory_name + "'")};
      char id[32];
      std::snprintf(id, sizeof id, "live-%06llu", static_cast<unsigned long long>(++next_session_));
      session->id = id;
      session->inventory = inv->second;
    }
    session->inventory_name = inventory_name;
    session->top_n = top_n;
    session->created_ms = clock_();
    if (config_.log_dir) {
      session->log_file = std::make_unique<std::ofstream>(*config_.log_dir / (session->id + ".jsonl"),
                                                          std::ios::binary | std::ios::trunc);
      if (!*session->log_file) throw DataError("cannot open log for session " + session->id);
    }
    json ack;
    ack["type"] = "ack";
    ack["of"] = "hello";
    ack["session_id"] = session->id;
    ack["inventory"] = inventory_name;
    ack["items"] = session->inventory->size();
    ack["top_n"] = top_n;
    ack["topics"] = model_->topics.k;
    ack["window"] = recsys::kFramePairs;
    {
      json open;
      open["type"] = "open";
      open["session_id"] = session->id;
      open["inventory"] = inventory_name;
      open["items"] = session->inventory->size();
      open["top_n"] = top_n;
      open["timestamp"] = session->created_ms;
      session->append_log(std::move(open));
    }
    std::lock_guard lock(registry_mutex_);
    sessions_[session->id] = session;
    return {ack};
  }

  recsys::PairFeatures pair_features(const LiveSession& s, const std::string& patient,
                                     const std::string& therapist) const {
    corpus::TurnPair pair;
    pair.patient_turn.speaker = corpus::Speaker::patient;
    pair.patient_turn.text = patient;
    pair.therapist_turn.speaker = corpus::Speaker::therapist;
    pair.therapist_turn.text = therapist;
    return recsys::featurize_pair(pair, *s.inventory, model_->embedder, model_->topics);
  }

  void complete_pair(LiveSession& s, const std::string& patient, const std::string& therapist) {
    s.window.push_back(pair_features(s, patient, therapist));
    if (s.window.size() > recsys::kFramePairs) s.window.pop_front();
    s.last_pair = {patient, therapist};
    ++s.pairs;
    if (s.open_round && !s.open_next_state && s.window.size() == recsys::kFramePairs) {
      s.open_next_state = current_state(s);
      for (auto& sel : s.selections)
        if (sel.round == *s.open_round && !sel.next_state) sel.next_state = s.open_next_state;
    }
  }

  nn::Vector current_state(const LiveSession& s) const {
    const std::vector<recsys::PairFeatures> frame(s.window.begin(), s.window.end());
    return recsys::frame_state(frame, model_->topics.k);
  }

  std::vector<json> on_turn(const json& msg) {
    const auto id = session_field(msg);
    if (!id) return {error_message("bad_request", "turn needs a string 'session_id'")};
    auto s = find(*id);
    if (!s) return {error_message("unknown_session", "no open session '" + *id + "'")};
    if (!msg.contains("speaker") || !msg["speaker"].is_string())
      return {error_message("bad_request", "turn needs a string 'speaker'")};
    const auto speaker = corpus::parse_speaker(msg["speaker"].get<std::string>());
    if (!speaker) return {error_message("bad_request", "unknown speaker '" + msg["speaker"].get<std::string>() + "'")};
    if (!msg.contains("text") || !msg["text"].is_string())
      return {error_message("bad_request", "turn needs a string 'text'")};
    const auto text = msg["text"].get<std::string>();
    if (corpus::trim(text).empty()) return {error_message("bad_request", "turn text is empty")};

    std::lock_guard lock(s->mutex);
    const bool merged = !s->turns.empty() && s->turns.back().speaker == *speaker;
    corpus::Turn turn{s->id, s->turns.size(), *speaker, text, clock_()};
    {
      corpus::Session meta;
      meta.condition = corpus::Condition::unlabeled;
      json record = corpus::turn_record(meta, turn);
      json typed;
      typed["type"] = "turn";
      for (auto& [k, v] : record.items()) typed[k] = v;
      s->append_log(std::move(typed));
    }
    s->turns.push_back(turn);

    const auto score = alliance::score_text(*s->inventory, model_->embedder, text);
    const auto embedded = model_->embedder.embed(text);
    const auto label = topics::label_vector(model_->topics, embedded.vector, embedded.degenerate);
    s->sum[0] += score.task;
    s->sum[1] += score.bond;
    s->sum[2] += score.goal;

    if (*speaker == corpus::Speaker::patient) {
      if (merged && s->pending_patient) {
        *s->pending_patient += ' ';
        *s->pending_patient += text;
      } else {
        s->pending_patient = text;
      }
      s->last_turn_completed_pair = false;
    } else if (merged) {
      if (s->last_turn_completed_pair && s->last_pair && !s->window.empty()) {
        s->last_pair->second += ' ';
        s->last_pair->second += text;
        s->window.back() = pair_features(*s, s->last_pair->first, s->last_pair->second);
      }
    } else if (s->pending_patient) {
      complete_pair(*s, *s->pending_patient, text);
      s->pending_patient.reset();
      s->last_turn_completed_pair = true;
    } else {
      s->last_turn_completed_pair = false;
    }

    json annotation;
    annotation["type"] = "annotation";
    annotation["session_id"] = s->id;
    annotation["turn_index"] = turn.index;
    annotation["speaker"] = corpus::to_string(*speaker);
    annotation["task"] = score.task;
    annotation["bond"] = score.bond;
    annotation["goal"] = score.goal;
    annotation["topic_id"] = label.topic;
    annotation["window"] = s->window.size();
    if (merged) annotation["merged"] = true;
    s->append_log(stamp(annotation));
    std::vector<json> replies{annotation};

    if (merged) {
      json ack;
      ack["type"] = "ack";
      ack["of"] = "turn";
      ack["session_id"] = s->id;
      ack["turn_index"] = turn.index;
      ack["merged"] = true;
      ack["detail"] = "consecutive " + std::string(corpus::to_string(*speaker)) + " turns merged";
      replies.push_back(ack);
    } else if (*speaker == corpus::Speaker::patient && s->window.size() == recsys::kFramePairs) {
      const auto state = current_state(*s);
      const auto ranked = recsys::recommend(model_->agent, model_->actions, model_->topics, state, s->top_n);
      ++s->round;
      ++s->recommendations;
      s->open_round = s->round;
      s->open_state = state;
      s->open_next_state.reset();
      s->open_reward = alliance::score_text(*s->inventory, model_->embedder, text)[model_->config.scale];
      s->selected_this_round = false;
      json rec;
      rec["type"] = "recommendation";
      rec["session_id"] = s->id;
      rec["round"] = s->round;
      json list = json::array();
      for (const auto& r : ranked) {
        json item;
        item["topic_id"] = r.topic_id;
        item["label"] = r.label;
        item["score"] = r.score;
        list.push_back(item);
      }
      rec["ranked"] = list;
      s->append_log(stamp(rec));
      replies.push_back(rec);
    }
    return replies;
  }

  std::vector<json> on_select(const json& msg) {
    const auto id = session_field(msg);
    if (!id) return {error_message("bad_request", "select needs a string 'session_id'")};
    auto s = find(*id);
    if (!s) return {error_message("unknown_session", "no open session '" + *id + "'")};
    if (!msg.contains("topic_id") || !msg["topic_id"].is_number_integer())
      return {error_message("bad_request", "select needs an integer 'topic_id'")};
    const auto topic = msg["topic_id"].get<std::int64_t>();
    if (topic < 0 || topic >= model_->topics.k)
      return {error_message("out_of_range", "topic_id " + std::to_string(topic) + " outside [0, " +
                                                std::to_string(model_->topics.k) + ")")};
    std::lock_guard lock(s->mutex);
    if (!s->open_round) return {error_message("no_recommendation", "no recommendation has been issued")};
    int round = *s->open_round;
    if (msg.contains("round") && !msg["round"].is_null()) {
      if (!msg["round"].is_number_integer()) return {error_message("bad_request", "'round' must be an integer")};
      round = msg["round"].get<int>();
      if (round != *s->open_round)
        return {error_message("round_expired", "round " + std::to_string(round) + " is not the current round " +
                                                   std::to_string(*s->open_round))};
    }
    if (s->selected_this_round)
      return {error_message("already_selected", "round " + std::to_string(round) + " already has a selection")};
    s->selected_this_round = true;
    Selection sel{round, static_cast<int>(topic), *s->open_state, s->open_reward, s->open_next_state};
    s->selections.push_back(sel);
    json record;
    record["type"] = "selection";
    record["session_id"] = s->id;
    record["round"] = round;
    record["topic_id"] = topic;
    record["state"] = std::vector<double>(sel.state.data(), sel.state.data() + sel.state.size());
    s->append_log(stamp(record));
    json ack;
    ack["type"] = "ack";
    ack["of"] = "select";
    ack["session_id"] = s->id;
    ack["round"] = round;
    ack["topic_id"] = topic;
    return {ack};
  }

  std::vector<json> on_end(const json& msg) {
    const auto id = session_field(msg);
    if (!id) return {error_message("bad_request", "end needs a string 'session_id'")};
    std::shared_ptr<LiveSession> s;
    {
      std::lock_guard lock(registry_mutex_);
      const auto it = sessions_.find(*id);
      if (it == sessions_.end()) return {error_message("unknown_session", "no open session '" + *id + "'")};
      s = it->second;
      sessions_.erase(it);
    }
    std::lock_guard lock(s->mutex);
    const auto summary = summarize(*s);
    json j;
    j["type"] = "ack";
    j["of"] = "end";
    j["session_id"] = s->id;
    j["summary"] = summary_json(summary);
    json record = j;
    record["type"] = "end";
    s->append_log(stamp(record));
    if (s->log_file) s->log_file->close();
    {
      std::lock_guard reg(registry_mutex_);
      closed_logs_[s->id] = s->log;
      closed_selections_[s->id] = s->selections;
    }
    return {j};
  }

  static SessionSummary summarize(const LiveSession& s) {
    SessionSummary sum;
    sum.session_id = s.id;
    sum.turns = s.turns.size();
    if (sum.turns) {
      const double n = static_cast<double>(sum.turns);
      sum.mean_task = s.sum[0] / n;
      sum.mean_bond = s.sum[1] / n;
      sum.mean_goal = s.sum[2] / n;
    }
    sum.recommendations = s.recommendations;
    sum.selections = s.selections.size();
    return sum;
  }

  static json summary_json(const SessionSummary& s) {
    json j;
    j["turns"] = s.turns;
    j["mean_task"] = pipeline::optional_number(s.mean_task);
    j["mean_bond"] = pipeline::optional_number(s.mean_bond);
    j["mean_goal"] = pipeline::optional_number(s.mean_goal);
    j["recommendations"] = s.recommendations;
    j["selections"] = s.selections;
    return j;
  }

  std::shared_ptr<const pipeline::Model> model_;
  EngineConfig config_;
  Clock clock_;
  mutable std::mutex registry_mutex_;
  std::map<std::string, std::shared_ptr<LiveSession>> sessions_;
  std::map<std::string, std::shared_ptr<const alliance::Inventory>> inventories_;
  std::map<std::string, std::vector<std::string>> closed_logs_;
  std::map<std::string, std::vector<Selection>> closed_selections_;
  std::uint64_t next_session_ = 0;
};

/// Replays a stored session through `engine` exactly as a wire client
/// would, returning every reply line in order. With `select_top`, the top
/// ranked topic of each recommendation is selected.
inline std::vector<std::string> simulate(Engine& engine, const corpus::Session& session, bool select_top = false,
                                         std::string* session_id = nullptr) {
  std::vector<std::string> transcript;
  auto send = [&](const json& msg) {
    auto replies = engine.handle(msg);
    for (const auto& r : replies) transcript.push_back(r.dump());
    return replies;
  };
  json hello;
  hello["type"] = "hello";
  const auto ack = send(hello);
  if (ack.empty() || ack.front()["type"] != "ack") throw DataError("simulate: engine rejected hello");
  const auto id = ack.front()["session_id"].get<std::string>();
  if (session_id) *session_id = id;
  for (const auto& t : session.turns) {
    json turn;
    turn["type"] = "turn";
    turn["session_id"] = id;
    turn["speaker"] = corpus::to_string(t.speaker);
    turn["text"] = t.text;
    for (const auto& r : send(turn))
      if (select_top && r["type"] == "recommendation" && !r["ranked"].empty()) {
        json sel;
        sel["type"] = "select";
        sel["session_id"] = id;
        sel["round"] = r["round"];
        sel["topic_id"] = r["ranked"][0]["topic_id"];
        send(sel);
      }
  }
  json end;
  end["type"] = "end";
  end["session_id"] = id;
  send(end);
  return transcript;
}

}  // namespace r2d2::service
