#include "r2d2/service.hpp"
#include "r2d2/synthetic.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "oracles.hpp"

using namespace r2d2;
using service::json;

namespace {

struct Fixture {
  std::shared_ptr<const pipeline::Model> model;
  std::vector<corpus::Session> sessions;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    synthetic::GeneratorConfig g;
    g.sessions = 30;
    Fixture out;
    out.sessions = synthetic::generate_synthetic(g, 21).sessions;
    pipeline::RunConfig cfg;
    cfg.agent.hidden = {16, 16};
    cfg.epochs = 1;
    cfg.seed = 2;
    out.model = std::make_shared<const pipeline::Model>(
        pipeline::run_train(out.sessions, alliance::default_inventory(), cfg).model);
    return out;
  }();
  return f;
}

service::Engine engine(service::EngineConfig cfg = {}) {
  return service::Engine(fixture().model, std::move(cfg), service::counting_clock());
}

std::string open(service::Engine& e) {
  json hello;
  hello["type"] = "hello";
  const auto r = e.handle(hello);
  return r.at(0).at("session_id").get<std::string>();
}

std::vector<json> turn(service::Engine& e, const std::string& id, const std::string& speaker, const std::string& text) {
  json t;
  t["type"] = "turn";
  t["session_id"] = id;
  t["speaker"] = speaker;
  t["text"] = text;
  return e.handle(t);
}

std::vector<json> send_turns(service::Engine& e, const std::string& id, const corpus::Session& s, std::size_t n) {
  std::vector<json> out;
  for (std::size_t i = 0; i < n; ++i)
    for (auto& r : turn(e, id, std::string(corpus::to_string(s.turns[i].speaker)), s.turns[i].text)) out.push_back(r);
  return out;
}

std::size_t count_type(const std::vector<json>& replies, const std::string& type) {
  return static_cast<std::size_t>(
      std::count_if(replies.begin(), replies.end(), [&](const json& j) { return j["type"] == type; }));
}

json select(service::Engine& e, const std::string& id, std::int64_t topic) {
  json s;
  s["type"] = "select";
  s["session_id"] = id;
  s["topic_id"] = topic;
  return e.handle(s).at(0);
}

json close(service::Engine& e, const std::string& id) {
  json s;
  s["type"] = "end";
  s["session_id"] = id;
  return e.handle(s).at(0);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("r2d2_service_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Service, HelloGivesDistinctSessionIds) {
  auto e = engine();
  const auto a = open(e), b = open(e);
  EXPECT_NE(a, b);
  EXPECT_EQ(e.live_sessions(), 2u);
  json hello;
  hello["type"] = "hello";
  const auto ack = e.handle(hello).at(0);
  EXPECT_EQ(ack["type"], "ack");
  EXPECT_EQ(ack["items"], 36);
  EXPECT_EQ(ack["topics"], 7);
  EXPECT_EQ(ack["top_n"], 3);
  EXPECT_EQ(ack["window"], 10);
}

TEST(Service, CustomInventoryItemCountEchoed) {
  const auto dir = temp_dir("inv");
  const auto path = dir / "small.jsonl";
  {
    std::ofstream out(path);
    out << R"({"id":1,"scale":"task","sign":1,"text":"we work on the right things"})" << '\n'
        << R"({"id":2,"scale":"bond","sign":1,"text":"i trust my therapist"})" << '\n'
        << R"({"id":3,"scale":"goal","sign":1,"text":"we share the same goals"})" << '\n'
        << R"({"id":4,"scale":"task","sign":-1,"text":"these exercises are pointless"})" << '\n'
        << R"({"id":5,"scale":"bond","sign":-1,"text":"i feel judged here"})" << '\n';
  }
  auto e = engine();
  const auto loaded = alliance::load_inventory(path);
  e.register_inventory("mine", loaded);
  json hello;
  hello["type"] = "hello";
  hello["inventory"] = "mine";
  const auto ack = e.handle(hello).at(0);
  EXPECT_EQ(ack["type"], "ack");
  EXPECT_EQ(ack["inventory"], "mine");
  EXPECT_EQ(ack["items"].get<std::size_t>(), loaded.size());
  std::filesystem::remove_all(dir);
}

TEST(Service, UnknownInventoryCreatesNoSession) {
  auto e = engine();
  json hello;
  hello["type"] = "hello";
  hello["inventory"] = "missing";
  const auto r = e.handle(hello);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0]["type"], "error");
  EXPECT_EQ(r[0]["code"], "unknown_inventory");
  EXPECT_EQ(e.live_sessions(), 0u);
}

TEST(Service, ColdStartHasNoRecommendation) {
  auto e = engine();
  const auto id = open(e);
  const auto r = turn(e, id, "patient", fixture().sessions[0].turns[0].text);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0]["type"], "annotation");
  EXPECT_EQ(r[0]["turn_index"], 0);
  EXPECT_EQ(r[0]["window"], 0);
}

TEST(Service, TwentyOneTurnsGiveOneRecommendation) {
  auto e = engine();
  const auto id = open(e);
  const auto& s = fixture().sessions[0];
  std::vector<json> replies;
  for (std::size_t i = 0; i < 21; ++i) {
    const auto r = turn(e, id, std::string(corpus::to_string(s.turns[i].speaker)), s.turns[i].text);
    // Turns 0..19 complete ten pairs; turn 20 is the next patient turn.
    EXPECT_EQ(count_type(r, "recommendation"), i == 20 ? 1u : 0u) << "turn " << i;
    replies.insert(replies.end(), r.begin(), r.end());
  }
  EXPECT_EQ(count_type(replies, "annotation"), 21u);
  EXPECT_EQ(count_type(replies, "recommendation"), 1u);
  const auto& rec = replies.back();
  ASSERT_EQ(rec["type"], "recommendation");
  EXPECT_EQ(rec["round"], 1);
  ASSERT_EQ(rec["ranked"].size(), 3u);

  // Offline: frame of the first ten pairs, agent action, ranking by distance.
  const auto& m = *fixture().model;
  corpus::Session first = s;
  first.turns.resize(20);
  const auto features = recsys::featurize(corpus::pair_turns(first), m.inventory, m.embedder, m.topics);
  ASSERT_EQ(features.size(), 10u);
  const auto state = recsys::frame_state(features, m.topics.k);
  const auto a = agents::select_action(m.agent, state);
  std::vector<std::vector<double>> actions;
  for (const auto& t : m.actions.topic_actions) actions.emplace_back(t.data(), t.data() + t.size());
  const std::vector<double> av(a.data(), a.data() + a.size());
  const auto order = oracle::ranking(actions, av);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(rec["ranked"][r]["topic_id"], order[r]);
    EXPECT_NEAR(rec["ranked"][r]["score"].get<double>(),
                -std::sqrt(oracle::sq_distance(actions[static_cast<std::size_t>(order[r])], av)), 1e-12);
  }
}

TEST(Service, WindowNeverExceedsTen) {
  auto e = engine();
  const auto id = open(e);
  const auto replies = send_turns(e, id, fixture().sessions[1], 40);
  for (const auto& r : replies)
    if (r["type"] == "annotation") EXPECT_LE(r["window"].get<int>(), 10);
  // Patient turns 20, 22, ..., 38 each open a round.
  EXPECT_EQ(count_type(replies, "recommendation"), 10u);
}

TEST(Service, SameTextSameScores) {
  auto e = engine();
  const auto id = open(e);
  const auto a = turn(e, id, "patient", "i feel my therapist genuinely cares about me").at(0);
  turn(e, id, "therapist", "tell me more");
  const auto b = turn(e, id, "patient", "i feel my therapist genuinely cares about me").at(0);
  for (const char* k : {"task", "bond", "goal", "topic_id"}) EXPECT_EQ(a[k], b[k]) << k;
}

TEST(Service, ConsecutiveSpeakerTurnsMerge) {
  auto e = engine();
  const auto id = open(e);
  turn(e, id, "patient", "hello");
  const auto r = turn(e, id, "patient", "still me");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0]["type"], "annotation");
  EXPECT_EQ(r[0]["merged"], true);
  EXPECT_EQ(r[1]["type"], "ack");
  EXPECT_EQ(r[1]["merged"], true);
}

TEST(Service, TurnErrors) {
  auto e = engine();
  EXPECT_EQ(turn(e, "nope", "patient", "hi").at(0)["code"], "unknown_session");
  const auto id = open(e);
  EXPECT_EQ(turn(e, id, "narrator", "hi").at(0)["code"], "bad_request");
  EXPECT_EQ(turn(e, id, "patient", "   ").at(0)["code"], "bad_request");
  EXPECT_EQ(service::json::parse(e.handle_line("{not json").at(0))["code"], "bad_request");
  EXPECT_EQ(service::json::parse(e.handle_line(R"({"type":"dance"})").at(0))["code"], "bad_request");
}

TEST(Service, SelectionRules) {
  auto e = engine();
  const auto id = open(e);
  EXPECT_EQ(select(e, id, 0)["code"], "no_recommendation");
  send_turns(e, id, fixture().sessions[0], 21);
  EXPECT_EQ(select(e, id, 99)["code"], "out_of_range");
  EXPECT_EQ(select(e, id, -1)["code"], "out_of_range");
  const auto before = e.session_log(id).size();
  const auto ack = select(e, id, 4);
  EXPECT_EQ(ack["type"], "ack");
  EXPECT_EQ(ack["round"], 1);
  const auto log = e.session_log(id);
  ASSERT_EQ(log.size(), before + 1);
  EXPECT_EQ(json::parse(log.back())["type"], "selection");
  EXPECT_EQ(json::parse(log.back())["topic_id"], 4);
  EXPECT_EQ(select(e, id, 5)["code"], "already_selected");
  json stale;
  stale["type"] = "select";
  stale["session_id"] = id;
  stale["round"] = 7;
  stale["topic_id"] = 1;
  EXPECT_EQ(e.handle(stale).at(0)["code"], "round_expired");
}

TEST(Service, ExportedActionIsSelectedTopicAction) {
  auto e = engine();
  const auto id = open(e);
  const auto& s = fixture().sessions[0];
  send_turns(e, id, s, 21);
  select(e, id, 2);
  auto exported = e.export_transitions(id);
  ASSERT_EQ(exported.size(), 1u);
  EXPECT_TRUE(exported[0].action.isApprox(fixture().model->actions.topic_actions[2], 0.0));
  EXPECT_TRUE(exported[0].terminal);
  // The therapist reply completes the pair and fills in the next state.
  turn(e, id, "therapist", s.turns[21].text);
  exported = e.export_transitions(id);
  EXPECT_FALSE(exported[0].terminal);
  const auto& m = *fixture().model;
  corpus::Session upto = s;
  upto.turns.resize(22);
  const auto f = recsys::featurize(corpus::pair_turns(upto), m.inventory, m.embedder, m.topics);
  const std::vector<recsys::PairFeatures> last(f.end() - 10, f.end());
  EXPECT_TRUE(exported[0].next_state.isApprox(recsys::frame_state(last, m.topics.k), 0.0));
  EXPECT_DOUBLE_EQ(exported[0].reward, alliance::score_text(m.inventory, m.embedder, s.turns[20].text).task);
}

TEST(Service, CloseImmediatelyAndTwice) {
  auto e = engine();
  const auto id = open(e);
  const auto ack = close(e, id);
  EXPECT_EQ(ack["type"], "ack");
  EXPECT_EQ(ack["summary"]["turns"], 0);
  EXPECT_TRUE(ack["summary"]["mean_task"].is_null());
  EXPECT_EQ(e.live_sessions(), 0u);
  EXPECT_EQ(close(e, id)["code"], "unknown_session");
}

TEST(Service, SummaryMeanMatchesOfflineRecomputation) {
  auto e = engine();
  const auto id = open(e);
  send_turns(e, id, fixture().sessions[2], 30);
  const auto summary = close(e, id)["summary"];
  EXPECT_EQ(summary["turns"], 30);
  // Rescore every logged turn with a plain cosine + signed sum.
  const auto& m = *fixture().model;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& line : e.closed_log(id)) {
    const auto j = json::parse(line);
    if (j["type"] != "turn") continue;
    const auto v = m.embedder.embed(j["text"].get<std::string>()).vector;
    const std::vector<double> tv(v.data(), v.data() + v.size());
    for (const auto& item : m.inventory.items()) {
      if (item.scale != alliance::Scale::task) continue;
      const auto iv = m.embedder.embed(item.text).vector;
      sum += item.sign * oracle::cosine(tv, std::vector<double>(iv.data(), iv.data() + iv.size()));
    }
    ++n;
  }
  ASSERT_EQ(n, 30u);
  EXPECT_NEAR(summary["mean_task"].get<double>(), sum / 30.0, 1e-12);
}

TEST(Service, LogReimportsThroughCorpus) {
  const auto dir = temp_dir("log");
  service::EngineConfig cfg;
  cfg.log_dir = dir;
  auto e = engine(cfg);
  const auto id = open(e);
  const auto& s = fixture().sessions[3];
  send_turns(e, id, s, 25);
  select(e, id, 1);
  close(e, id);

  std::ifstream file(dir / (id + ".jsonl"));
  std::stringstream disk;
  disk << file.rdbuf();
  std::string memory;
  for (const auto& l : e.closed_log(id)) memory += l + '\n';
  EXPECT_EQ(disk.str(), memory);

  const auto back = corpus::load_corpus(dir / (id + ".jsonl"));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].session_id, id);
  ASSERT_EQ(back[0].turns.size(), 25u);
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_EQ(back[0].turns[i].text, s.turns[i].text);
    EXPECT_EQ(back[0].turns[i].speaker, s.turns[i].speaker);
    EXPECT_TRUE(back[0].turns[i].timestamp_ms.has_value());
  }
  std::filesystem::remove_all(dir);
}

TEST(Service, LogIsAppendOnly) {
  auto e = engine();
  const auto id = open(e);
  const auto& s = fixture().sessions[4];
  std::vector<std::string> prev;
  for (std::size_t i = 0; i < 24; ++i) {
    turn(e, id, std::string(corpus::to_string(s.turns[i].speaker)), s.turns[i].text);
    const auto now = e.session_log(id);
    ASSERT_GE(now.size(), prev.size());
    EXPECT_TRUE(std::equal(prev.begin(), prev.end(), now.begin()));
    prev = now;
  }
}

TEST(Service, InterleavedSessionsMatchSerialRuns) {
  auto fixed = [] { return std::int64_t{1000}; };
  const auto& a = fixture().sessions[5];
  const auto& b = fixture().sessions[6];

  service::Engine serial(fixture().model, {}, fixed);
  const auto sa = open(serial), sb = open(serial);
  send_turns(serial, sa, a, 40);
  send_turns(serial, sb, b, 40);

  service::Engine mixed(fixture().model, {}, fixed);
  const auto ma = open(mixed), mb = open(mixed);
  std::thread ta([&] { send_turns(mixed, ma, a, 40); });
  std::thread tb([&] { send_turns(mixed, mb, b, 40); });
  ta.join();
  tb.join();
  EXPECT_EQ(serial.session_log(sa), mixed.session_log(ma));
  EXPECT_EQ(serial.session_log(sb), mixed.session_log(mb));
}

TEST(Service, SimulateIsDeterministic) {
  const auto& s = fixture().sessions[7];
  auto e1 = engine(), e2 = engine();
  const auto t1 = service::simulate(e1, s, true);
  const auto t2 = service::simulate(e2, s, true);
  EXPECT_EQ(t1, t2);
  std::size_t annotations = 0, recommendations = 0;
  for (const auto& l : t1) {
    const auto j = json::parse(l);
    annotations += j["type"] == "annotation";
    recommendations += j["type"] == "recommendation";
  }
  EXPECT_EQ(annotations, 40u);
  EXPECT_EQ(recommendations, 10u);
}

TEST(Service, HealthReportsModel) {
  auto e = engine();
  open(e);
  const auto h = e.health();
  EXPECT_EQ(h["status"], "ok");
  EXPECT_EQ(h["sessions"], 1);
  EXPECT_EQ(h["topics"], 7);
  EXPECT_EQ(h["topic_labels"].size(), 7u);
  EXPECT_EQ(h["inventory_items"], 36);
}

TEST(Service, TopNOutsideRangeRejected) {
  EXPECT_THROW(service::Engine(fixture().model, {8, std::nullopt}), ArgumentError);
  auto e = engine();
  json hello;
  hello["type"] = "hello";
  hello["top_n"] = 0;
  EXPECT_EQ(e.handle(hello).at(0)["code"], "out_of_range");
}
