#include "r2d2/pipeline.hpp"
#include "r2d2/recsys.hpp"
#include "r2d2/synthetic.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace r2d2;
using namespace r2d2::recsys;

namespace {

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

struct Fixture {
  synthetic::SyntheticCorpus corpus;
  pipeline::Model model;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    synthetic::GeneratorConfig g;
    g.sessions = 30;
    out.corpus = synthetic::generate_synthetic(g, 11);
    pipeline::RunConfig cfg;
    cfg.seed = 5;
    corpus::CorpusSplit all{out.corpus.sessions, {}, 0};
    out.model = pipeline::fit_artifacts(all, alliance::default_inventory(), cfg);
    return out;
  }();
  return f;
}

corpus::Session truncated(const corpus::Session& s, std::size_t pairs) {
  corpus::Session out = s;
  out.turns.resize(2 * pairs);
  return out;
}

agents::AgentConfig small(agents::Algorithm a) {
  agents::AgentConfig c;
  c.algorithm = a;
  c.hidden = {32, 32};
  return c;
}

}  // namespace

TEST(Transitions, ElevenPairsGiveOne) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto set = build_transitions({truncated(f.corpus.sessions[0], 11)}, m.inventory, m.embedder, m.topics,
                                     m.actions, alliance::Scale::task);
  ASSERT_EQ(set.transitions.size(), 1u);
  EXPECT_TRUE(set.transitions[0].terminal);
  EXPECT_EQ(set.transitions[0].state.size(), static_cast<Eigen::Index>(state_dimension(7)));
  EXPECT_EQ(state_dimension(7), 130u);
}

TEST(Transitions, TwelvePairsOverlapInNine) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto set = build_transitions({truncated(f.corpus.sessions[1], 12)}, m.inventory, m.embedder, m.topics,
                                     m.actions, alliance::Scale::bond);
  ASSERT_EQ(set.transitions.size(), 2u);
  const auto block = static_cast<Eigen::Index>(6 + 7);
  EXPECT_TRUE((set.transitions[0].state.tail(9 * block).array() == set.transitions[1].state.head(9 * block).array()).all());
  EXPECT_TRUE((set.transitions[0].next_state.array() == set.transitions[1].state.array()).all());
  EXPECT_FALSE(set.transitions[0].terminal);
  EXPECT_TRUE(set.transitions[1].terminal);
}

TEST(Transitions, ShortSessionsSkipped) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto set = build_transitions({truncated(f.corpus.sessions[0], 10), f.corpus.sessions[1]}, m.inventory,
                                     m.embedder, m.topics, m.actions, alliance::Scale::task);
  EXPECT_EQ(set.skipped_sessions, 1u);
  EXPECT_EQ(set.transitions.size(), 10u);
}

TEST(Transitions, CountIsPairsMinusWindow) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto set = build_transitions(f.corpus.sessions, m.inventory, m.embedder, m.topics, m.actions,
                                     alliance::Scale::goal);
  EXPECT_EQ(set.transitions.size(), f.corpus.sessions.size() * (20 - 10));
}

TEST(Transitions, RewardRecomputedIndependently) {
  const auto& f = fixture();
  const auto& m = f.model;
  for (auto scale : alliance::kScales) {
    const auto set = build_transitions(f.corpus.sessions, m.inventory, m.embedder, m.topics, m.actions, scale);
    for (std::size_t i = 0; i < set.transitions.size(); i += 7) {
      const auto& o = set.origins[i];
      const auto& patient = f.corpus.sessions[o.session].turns[2 * (o.start_pair + kFramePairs)];
      ASSERT_EQ(patient.speaker, corpus::Speaker::patient);
      const auto v = to_std(m.embedder.embed(patient.text).vector);
      double want = 0.0;
      for (const auto& item : m.inventory.items())
        if (item.scale == scale) want += item.sign * oracle::cosine(v, to_std(m.embedder.embed(item.text).vector));
      EXPECT_NEAR(set.transitions[i].reward, want, 1e-12);
    }
  }
}

TEST(Transitions, ActionIsLoggedTopicAction) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto set = build_transitions(f.corpus.sessions, m.inventory, m.embedder, m.topics, m.actions,
                                     alliance::Scale::task);
  for (std::size_t i = 0; i < set.transitions.size(); i += 11) {
    const auto& o = set.origins[i];
    const auto& therapist = f.corpus.sessions[o.session].turns[2 * (o.start_pair + kFramePairs) + 1];
    const int topic = topics::label_turn(m.topics, m.embedder, therapist).topic;
    EXPECT_TRUE((set.transitions[i].action.array() == m.actions.topic_actions[static_cast<std::size_t>(topic)].array()).all());
  }
}

TEST(Transitions, MismatchedKRejected) {
  const auto& f = fixture();
  const auto& m = f.model;
  auto other = m.actions;
  other.topic_actions.pop_back();
  EXPECT_THROW(build_transitions(f.corpus.sessions, m.inventory, m.embedder, m.topics, other, alliance::Scale::task),
               CompatibilityError);
}

TEST(Pearson, HandValues) {
  const std::vector<double> a = {1, 2, 4}, b = {2, 3, 9};
  // Deviations (-4,-1,5)/3 and (-8,-5,13)/3: r = 102 / sqrt(42 * 258).
  EXPECT_NEAR(pearson(a, b), 102.0 / std::sqrt(42.0 * 258.0), 1e-12);
  EXPECT_NEAR(pearson(a, b), 0.979863710, 1e-8);
  const std::vector<double> up = {1, 2, 3}, down = {3, 2, 1};
  EXPECT_NEAR(pearson(up, down), -1.0, 1e-12);
  EXPECT_NEAR(pearson(up, up), 1.0, 1e-12);
}

TEST(Pearson, MatchesTwoPassOracle) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto n = 3 + rng.index(200);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal(3.0, 2.0);
      y[i] = 0.5 * x[i] + rng.normal();
    }
    EXPECT_NEAR(pearson(x, y), oracle::pearson(x, y), 1e-12);
  }
}

TEST(Pearson, ConstantSequenceUndefined) {
  const std::vector<double> c = {2, 2, 2}, v = {1, 2, 3};
  EXPECT_THROW(pearson(c, v), UndefinedCorrelation);
  EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), Error);
  EXPECT_THROW(pearson(v, std::vector<double>{1, 2}), ArgumentError);
}

TEST(Evaluate, ReplayAndNegation) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto set = build_transitions(f.corpus.sessions, m.inventory, m.embedder, m.topics, m.actions,
                                     alliance::Scale::task);
  std::vector<Vector> truth, negated;
  for (const auto& t : set.transitions) {
    truth.push_back(t.action);
    negated.push_back(-t.action);
  }
  const auto same = evaluate(truth, set.transitions, m.actions);
  EXPECT_NEAR(*same.pearson_r, 1.0, 1e-12);
  EXPECT_EQ(same.topic_accuracy, 1.0);
  double mean = 0.0;
  for (const auto& t : set.transitions) mean += t.reward;
  EXPECT_NEAR(*same.mean_reward, mean / static_cast<double>(set.transitions.size()), 1e-12);
  EXPECT_NEAR(*evaluate(negated, set.transitions, m.actions).pearson_r, -1.0, 1e-12);
}

TEST(Evaluate, RandomPredictionsUncorrelated) {
  Rng rng(2);
  topics::ActionSpace as;
  for (int c = 0; c < 4; ++c) as.topic_actions.push_back(Vector::Constant(10, c));
  std::vector<agents::Transition> test(100);
  std::vector<Vector> pred(100);
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < 100; ++i) {
    test[i].action = Vector(10);
    pred[i] = Vector(10);
    for (int j = 0; j < 10; ++j) {
      test[i].action[j] = rng.normal();
      pred[i][j] = rng.normal();
      xs.push_back(pred[i][j]);
      ys.push_back(test[i].action[j]);
    }
  }
  const auto m = evaluate(pred, test, as);
  EXPECT_LT(std::abs(*m.pearson_r), 0.1);
  EXPECT_NEAR(*m.pearson_r, oracle::pearson(xs, ys), 1e-12);
}

TEST(Evaluate, NeedsTwoTransitions) {
  topics::ActionSpace as;
  as.topic_actions = {Vector::Zero(2), Vector::Ones(2)};
  std::vector<agents::Transition> one(1);
  one[0].action = Vector::Zero(2);
  std::vector<Vector> p = {Vector::Zero(2)};
  EXPECT_THROW(evaluate(p, one, as), DataError);
}

TEST(Train, ZeroEpochsIsInitialization) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto set = build_transitions(f.corpus.sessions, m.inventory, m.embedder, m.topics, m.actions,
                                     alliance::Scale::task);
  const auto box = agents::ActionBox::around(m.actions.topic_actions);
  TrainConfig cfg{small(agents::Algorithm::td3), 0, 3};
  const auto r = train(cfg, set.transitions, box);
  const agents::Agent fresh(cfg.agent, state_dimension(7), box, hash_combine(3, 1));
  std::stringstream a, b;
  {
    io::Writer wa(a), wb(b);
    agents::write(wa, r.agent);
    agents::write(wb, fresh);
  }
  EXPECT_EQ(a.str(), b.str());
  EXPECT_TRUE(r.trace.empty());
}

TEST(Train, SameSeedBitIdentical) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto set = build_transitions(f.corpus.sessions, m.inventory, m.embedder, m.topics, m.actions,
                                     alliance::Scale::task);
  const auto box = agents::ActionBox::around(m.actions.topic_actions);
  for (auto alg : {agents::Algorithm::ddpg, agents::Algorithm::bcq}) {
    TrainConfig cfg{small(alg), 2, 9};
    std::stringstream a, b;
    {
      io::Writer wa(a), wb(b);
      agents::write(wa, train(cfg, set.transitions, box).agent);
      agents::write(wb, train(cfg, set.transitions, box).agent);
    }
    EXPECT_EQ(a.str(), b.str());
  }
}

TEST(Train, UpdatesPerEpochRoundsUp) {
  EXPECT_EQ(updates_per_epoch(64, 32), 2u);
  EXPECT_EQ(updates_per_epoch(65, 32), 3u);
  EXPECT_EQ(updates_per_epoch(1, 32), 1u);
}

TEST(Train, CriticLossFallsOverFiftyEpochs) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto set = build_transitions(f.corpus.sessions, m.inventory, m.embedder, m.topics, m.actions,
                                     alliance::Scale::task);
  const auto box = agents::ActionBox::around(m.actions.topic_actions);
  for (auto alg : {agents::Algorithm::ddpg, agents::Algorithm::td3, agents::Algorithm::bcq}) {
    const auto r = train(TrainConfig{small(alg), 50, 4}, set.transitions, box);
    ASSERT_EQ(r.trace.size(), 50u);
    EXPECT_LT(r.trace.back().critic, r.trace.front().critic) << agents::to_string(alg);
    EXPECT_EQ(std::isnan(r.trace.front().vae), alg != agents::Algorithm::bcq);
    EXPECT_EQ(std::isnan(r.trace.front().critic2), alg == agents::Algorithm::ddpg);
  }
}

TEST(Recommend, FullRankingAndCenteredActor) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto box = agents::ActionBox::around(m.actions.topic_actions);
  agents::Agent agent(small(agents::Algorithm::ddpg), state_dimension(7), box, 1);
  agent.actor.layers.back().weight.setZero();
  const Vector state = Vector::Ones(static_cast<Eigen::Index>(state_dimension(7)));
  const auto recs = recommend(agent, m.actions, m.topics, state, 7);
  ASSERT_EQ(recs.size(), 7u);
  std::vector<std::vector<double>> pts;
  for (const auto& a : m.actions.topic_actions) pts.push_back(to_std(a));
  const auto want = oracle::ranking(pts, to_std(box.center()));
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(recs[i].topic_id, want[i]);
    EXPECT_NEAR(recs[i].score, -std::sqrt(oracle::sq_distance(pts[static_cast<std::size_t>(want[i])], to_std(box.center()))),
                1e-9);
    EXPECT_EQ(recs[i].label, m.topics.label(recs[i].topic_id));
  }
  EXPECT_EQ(recommend(agent, m.actions, m.topics, state, 3).size(), 3u);
}

TEST(Recommend, IdenticalStatesIdenticalRankings) {
  const auto& f = fixture();
  const auto& m = f.model;
  const auto box = agents::ActionBox::around(m.actions.topic_actions);
  for (auto alg : {agents::Algorithm::ddpg, agents::Algorithm::bcq}) {
    agents::Agent agent(small(alg), state_dimension(7), box, 2);
    const Vector state = Vector::LinSpaced(static_cast<Eigen::Index>(state_dimension(7)), -1, 1);
    const auto a = recommend(agent, m.actions, m.topics, state, 7);
    const auto b = recommend(agent, m.actions, m.topics, state, 7);
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_EQ(a[i].topic_id, b[i].topic_id);
      EXPECT_EQ(a[i].score, b[i].score);
    }
  }
}
