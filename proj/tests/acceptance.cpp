// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Arguments, when given, restrict the run to the named
// criteria.

#include "r2d2/pipeline.hpp"
#include "r2d2/service.hpp"
#include "r2d2/synthetic.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sys/wait.h>
#include <sstream>

#include "oracles.hpp"

using namespace r2d2;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

std::vector<corpus::Session> benchmark_sessions(synthetic::SyntheticCorpus* planted = nullptr) {
  synthetic::GeneratorConfig g;  // 200 sessions x 40 turns, K = 7
  g.misaligned_step = 1;
  auto c = synthetic::generate_synthetic(g, 2024);
  if (planted) *planted = c;
  return c.sessions;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(17);
  double worst = 0.0;
  std::size_t checked = 0;
  for (int n = 0; n < 20; ++n) {
    const std::size_t depth = 1 + rng.index(3);
    std::vector<std::size_t> sizes{1 + rng.index(16)};
    for (std::size_t d = 0; d < depth; ++d) sizes.push_back(1 + rng.index(16));
    sizes.push_back(1 + rng.index(16));
    auto net = nn::Mlp::xavier(sizes, nn::Activation::tanh, nn::Activation::tanh, rng);
    for (auto& l : net.layers)
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = rng.uniform(-0.5, 0.5);
    const Eigen::Index batch = 3;
    nn::Matrix x(static_cast<Eigen::Index>(sizes.front()), batch);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.0, 1.0);
    nn::Matrix c(static_cast<Eigen::Index>(sizes.back()), batch);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform(-1.0, 1.0);

    // Objective sum(c .* f(x)); its output gradient is c.
    auto objective = [&](const nn::Mlp& m, const nn::Matrix& in) { return (c.array() * nn::forward(m, in).array()).sum(); };
    nn::ForwardCache cache;
    nn::forward(net, x, &cache);
    const auto g = nn::backward(net, cache, c);

    const double h = 1e-5;
    auto compare = [&](double analytic, double& param, auto&& eval) {
      const double saved = param;
      param = saved + h;
      const double up = eval();
      param = saved - h;
      const double down = eval();
      param = saved;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
      ++checked;
    };
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      auto& layer = net.layers[l];
      for (Eigen::Index i = 0; i < layer.weight.size(); ++i)
        compare(g.weight[l].data()[i], layer.weight.data()[i], [&] { return objective(net, x); });
      for (Eigen::Index i = 0; i < layer.bias.size(); ++i)
        compare(g.bias[l][i], layer.bias[i], [&] { return objective(net, x); });
    }
    for (Eigen::Index i = 0; i < x.size(); ++i)
      compare(g.input.data()[i], x.data()[i], [&] { return objective(net, x); });
  }
  const double elapsed = seconds_since(t0);
  return {worst <= 1e-4 && elapsed < 10.0,
          std::to_string(checked) + " partials, max relative error " + fmt(worst, 3) + ", " + fmt(elapsed, 3) + " s"};
}

Outcome scoring_oracle() {
  Rng rng(23);
  auto inv = alliance::default_inventory();
  std::vector<std::string> words;
  for (const auto& item : inv.items())
    for (const auto& w : oracle::tokens(item.text)) words.push_back(w);
  for (int k = 0; k < 7; ++k)
    for (const auto& w : synthetic::topic_vocabulary(k)) words.push_back(w);
  std::vector<std::string> turns;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.index(15);
    turns.push_back(synthetic::sample_words(words, n, rng));
  }
  const auto e = embed::HashedTfidfEmbedder::fit(turns, embed::kDefaultDimension, 5);
  inv.bind(e);
  std::vector<std::vector<double>> item_vectors;
  for (const auto& item : inv.items()) item_vectors.push_back(to_std(e.embed(item.text).vector));

  double worst = 0.0;
  bool bounded = true;
  for (const auto& text : turns) {
    corpus::Turn t{"s", 0, corpus::Speaker::patient, text, std::nullopt};
    const auto got = alliance::score_turn(inv, e, t);
    const auto v = to_std(e.embed(text).vector);
    double sums[3] = {0, 0, 0};
    for (std::size_t i = 0; i < inv.size(); ++i) {
      const double cos = oracle::cosine(v, item_vectors[i]);
      worst = std::max(worst, std::abs(cos - got.per_item[i]));
      bounded = bounded && got.per_item[i] >= -1.0 && got.per_item[i] <= 1.0;
      sums[static_cast<int>(inv.items()[i].scale)] += inv.items()[i].sign * cos;
    }
    worst = std::max({worst, std::abs(sums[0] - got.task), std::abs(sums[1] - got.bond), std::abs(sums[2] - got.goal)});
  }
  return {worst <= 1e-12 && bounded, "1000 turns, max deviation " + fmt(worst, 3) + (bounded ? "" : ", item score out of [-1,1]")};
}

Outcome pearson_oracle() {
  Rng rng(29);
  double worst = 0.0, self = 0.0;
  for (int p = 0; p < 100; ++p) {
    const std::size_t n = 2 + rng.index(199);
    std::vector<double> x(n), y(n), neg(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal() * 3.0 + 1.0;
      y[i] = 0.5 * x[i] + rng.normal();
      neg[i] = -x[i];
    }
    worst = std::max(worst, std::abs(recsys::pearson(x, y) - oracle::pearson(x, y)));
    self = std::max({self, std::abs(recsys::pearson(x, x) - 1.0), std::abs(recsys::pearson(x, neg) + 1.0)});
  }
  return {worst <= 1e-12 && self <= 1e-12,
          "100 pairs, max deviation " + fmt(worst, 3) + ", self/negation deviation " + fmt(self, 3)};
}

Outcome decoding_round_trip() {
  synthetic::GeneratorConfig g;
  g.sessions = 40;
  const auto sessions = synthetic::generate_synthetic(g, 31).sessions;
  std::vector<std::string> texts;
  std::vector<corpus::Turn> therapist;
  for (const auto& s : sessions)
    for (const auto& t : s.turns) {
      texts.push_back(t.text);
      if (t.speaker == corpus::Speaker::therapist) therapist.push_back(t);
    }
  const auto e = embed::HashedTfidfEmbedder::fit(texts);
  const auto tm = topics::fit_topics(e, therapist, 7, 3);
  std::vector<std::pair<corpus::Turn, int>> labeled;
  for (const auto& t : therapist) labeled.emplace_back(t, topics::label_turn(tm, e, t).topic);

  std::size_t failures = 0, queries = 0;
  Rng rng(37);
  for (auto kind : {topics::ActionKind::doc300, topics::ActionKind::pca36, topics::ActionKind::pca2}) {
    const auto as = topics::build_action_space(tm, e, labeled, kind);
    for (int k = 0; k < as.k(); ++k) failures += topics::decode_action(as, as.topic_actions[static_cast<std::size_t>(k)]) != k;
    const auto box = agents::ActionBox::around(as.topic_actions);
    std::vector<std::vector<double>> points;
    for (const auto& a : as.topic_actions) points.push_back(to_std(a));
    for (int q = 0; q < 1000; ++q) {
      Eigen::VectorXd a(as.dimension());
      for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = rng.uniform(box.low[i], box.high[i]);
      const int top = topics::rank_topics(as, a, 1).front().topic_id;
      failures += top != topics::decode_action(as, a);
      failures += top != oracle::nearest(points, to_std(a));
      ++queries;
    }
  }
  return {failures == 0, "3 action kinds, " + std::to_string(queries) + " queries, " + std::to_string(failures) + " mismatches"};
}

struct BenchmarkResult {
  double oracle_accuracy = 0.0;
  std::optional<double> pearson_r;
  double seconds = 0.0;
};

pipeline::RunConfig benchmark_config(agents::Algorithm a) {
  pipeline::RunConfig cfg;  // 50 epochs, batch 32, 95/5 split, doc300, K = 7
  cfg.agent.algorithm = a;
  cfg.seed = 11;
  if (a != agents::Algorithm::bcq) {
    cfg.agent.gamma = 0.5;
    cfg.agent.critic_lr = 3e-3;
    cfg.agent.actor_lr = 1e-3;
    if (a == agents::Algorithm::td3) cfg.agent.tau = 0.05;
  }
  return cfg;
}

// Planted topics are mapped to learned clusters by majority vote over the
// training therapist turns; the oracle answer for a held-out state is the
// cluster of that state's planted best topic.
struct PlantedOracle {
  std::map<std::string, std::size_t> index;  // session id -> generator index
  std::vector<int> cluster_of;

  PlantedOracle(const synthetic::SyntheticCorpus& syn, const pipeline::Model& m, const corpus::CorpusSplit& split) {
    for (std::size_t i = 0; i < syn.sessions.size(); ++i) index[syn.sessions[i].session_id] = i;
    std::map<int, std::map<int, int>> votes;
    for (const auto& s : split.train) {
      const auto& planted = syn.planted[index.at(s.session_id)];
      const auto pairs = corpus::pair_turns(s);
      for (std::size_t j = 0; j < pairs.size(); ++j)
        ++votes[planted.topic[j]][topics::label_turn(m.topics, m.embedder, pairs[j].therapist_turn).topic];
    }
    cluster_of.assign(static_cast<std::size_t>(m.topics.k), -1);
    for (const auto& [topic, by_cluster] : votes) {
      int best = -1, count = -1;
      for (const auto& [cluster, n] : by_cluster)
        if (n > count) {
          count = n;
          best = cluster;
        }
      cluster_of[static_cast<std::size_t>(topic)] = best;
    }
  }

  int answer(const synthetic::SyntheticCorpus& syn, const corpus::Session& s, std::size_t start_pair) const {
    return cluster_of[static_cast<std::size_t>(syn.planted[index.at(s.session_id)].best[start_pair + recsys::kFramePairs])];
  }
};

Outcome planted_benchmark() {
  synthetic::SyntheticCorpus syn;
  const auto sessions = benchmark_sessions(&syn);
  bool pass = true;
  std::string detail;
  Rng rng(41);
  std::optional<double> random_accuracy;
  for (auto a : {agents::Algorithm::ddpg, agents::Algorithm::td3, agents::Algorithm::bcq}) {
    const auto cfg = benchmark_config(a);
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = pipeline::run_train(sessions, alliance::default_inventory(), cfg);
    const double elapsed = seconds_since(t0);
    const auto split = pipeline::split_for(sessions, cfg);
    const auto test = pipeline::transitions_for(out.model, split.test);
    const PlantedOracle oracle(syn, out.model, split);
    std::size_t hits = 0, random_hits = 0;
    const auto box = agents::ActionBox::around(out.model.actions.topic_actions);
    for (std::size_t i = 0; i < test.transitions.size(); ++i) {
      const auto& o = test.origins[i];
      const int truth = oracle.answer(syn, split.test[o.session], o.start_pair);
      hits += topics::decode_action(out.model.actions, agents::select_action(out.model.agent, test.transitions[i].state)) == truth;
      Eigen::VectorXd r(box.dimension());
      for (Eigen::Index d = 0; d < r.size(); ++d) r[d] = rng.uniform(box.low[d], box.high[d]);
      random_hits += topics::decode_action(out.model.actions, r) == truth;
    }
    const double n = static_cast<double>(test.transitions.size());
    const double acc = static_cast<double>(hits) / n;
    if (!random_accuracy) random_accuracy = static_cast<double>(random_hits) / n;
    const auto r = out.report.metrics.pearson_r;
    const bool ok = acc >= 0.8 && r && *r >= 0.5 && elapsed < 600.0;
    pass = pass && ok;
    detail += std::string(agents::to_string(a)) + " acc " + fmt(acc, 3) + " r " + (r ? fmt(*r, 3) : "null") + " " +
              fmt(elapsed, 3) + "s" + (ok ? "" : " (below)") + "; ";
  }
  const double bound = 1.0 / 7.0 + 0.05;
  pass = pass && *random_accuracy <= bound;
  detail += "random acc " + fmt(*random_accuracy, 3) + " (bound " + fmt(bound, 3) + ")";
  return {pass, detail};
}


Outcome grid() {
  const auto sessions = benchmark_sessions();
  std::size_t finite = 0;
  std::set<std::pair<std::string, std::string>> cells;
  for (auto a : {agents::Algorithm::ddpg, agents::Algorithm::td3, agents::Algorithm::bcq})
    for (auto scale : alliance::kScales) {
      auto cfg = benchmark_config(a);
      cfg.scale = scale;
      cfg.epochs = 5;
      const auto line = pipeline::metrics_line(pipeline::run_train(sessions, alliance::default_inventory(), cfg).report);
      std::cout << "  " << line << '\n';
      const auto j = nlohmann::json::parse(line);
      cells.emplace(j["algorithm"], j["scale"]);
      finite += j["pearson_r"].is_number() && std::isfinite(j["pearson_r"].get<double>()) &&
                std::isfinite(j["topic_accuracy"].get<double>());
    }
  return {finite == 9 && cells.size() == 9,
          std::to_string(finite) + " finite metrics lines over " + std::to_string(cells.size()) + " cells"};
}

struct Command {
  int status = -1;
  std::string out;
};

Command run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + R2D2_CLI + "\" " + args + " 2>/dev/null";
  Command c;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return c;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) c.out.append(buf, n);
  const int status = ::pclose(pipe);
  c.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("r2d2_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Outcome determinism() {
  const auto dir = scratch_dir();
  const auto corpus = (dir / "corpus.jsonl").string();
  if (run_cli("synth --out " + corpus + " --seed 3").status != 0) return {false, "synth failed"};
  std::string lines[2], ckpts[2];
  for (int i = 0; i < 2; ++i) {
    const auto ckpt = dir / ("run" + std::to_string(i) + ".ckpt");
    const auto c = run_cli("train --corpus " + corpus + " --algorithm td3 --epochs 5 --seed 13 --checkpoint " + ckpt.string());
    if (c.status != 0) return {false, "train exited with " + std::to_string(c.status)};
    lines[i] = c.out;
    ckpts[i] = slurp(ckpt);
  }
  const bool same = lines[0] == lines[1] && ckpts[0] == ckpts[1] && !ckpts[0].empty();
  return {same, std::to_string(ckpts[0].size()) + "-byte checkpoints " + (ckpts[0] == ckpts[1] ? "identical" : "differ") +
                    ", metrics lines " + (lines[0] == lines[1] ? "identical" : "differ")};
}

Outcome bcq_constraint() {
  auto cfg = benchmark_config(agents::Algorithm::bcq);
  cfg.epochs = 10;
  synthetic::GeneratorConfig g;
  g.sessions = 60;
  const auto sessions = synthetic::generate_synthetic(g, 43).sessions;
  const auto out = pipeline::run_train(sessions, alliance::default_inventory(), cfg);
  const auto states = pipeline::transitions_for(out.model, sessions).transitions;
  const double phi = out.model.agent.config().perturbation_limit;
  Rng rng(47);
  double worst = 0.0;
  std::size_t evaluated = 0;
  for (std::size_t i = 0; evaluated < 10000; i = (i + 1) % states.size()) {
    const auto c = agents::bcq_candidates(out.model.agent, states[i].state, 10, rng);
    worst = std::max(worst, (c.perturbed - c.decoded).cwiseAbs().maxCoeff());
    evaluated += static_cast<std::size_t>(c.perturbed.cols());
  }
  return {worst <= phi + 1e-12, std::to_string(evaluated) + " candidates, max |perturbed - decoded| " + fmt(worst, 6) +
                                    " vs phi " + fmt(phi, 6)};
}

Outcome service_conservation() {
  const auto dir = scratch_dir();
  const auto corpus = (dir / "corpus.jsonl").string();
  const auto ckpt = (dir / "service.ckpt").string();
  if (!fs::exists(corpus) && run_cli("synth --out " + corpus + " --seed 3").status != 0) return {false, "synth failed"};
  if (run_cli("train --corpus " + corpus + " --epochs 2 --seed 5 --checkpoint " + ckpt).status != 0)
    return {false, "train failed"};
  const auto script = (dir / "script.jsonl").string();
  if (run_cli("synth --out " + script + " --sessions 1 --turns 21 --seed 8").status != 0) return {false, "synth failed"};
  const auto logs = dir / "logs";
  const auto sim = run_cli("simulate --checkpoint " + ckpt + " --corpus " + script + " --session-id syn-0000 --log-dir " +
                           logs.string());
  if (sim.status != 0) return {false, "simulate exited with " + std::to_string(sim.status)};
  std::size_t annotations = 0, recommendations = 0;
  int first_rec_after = -1;
  std::string session_id;
  std::istringstream in(sim.out);
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] == "ack" && j["of"] == "hello") session_id = j["session_id"];
    if (j["type"] == "annotation") ++annotations;
    if (j["type"] == "recommendation") {
      ++recommendations;
      if (first_rec_after < 0) first_rec_after = static_cast<int>(annotations);
    }
  }
  const auto original = corpus::load_corpus(script).at(0);
  const auto back = corpus::load_corpus(logs / (session_id + ".jsonl"));
  bool lossless = back.size() == 1 && back[0].turns.size() == original.turns.size();
  for (std::size_t i = 0; lossless && i < original.turns.size(); ++i)
    lossless = back[0].turns[i].text == original.turns[i].text && back[0].turns[i].speaker == original.turns[i].speaker &&
               back[0].turns[i].index == i;
  return {annotations == 21 && recommendations == 1 && first_rec_after == 21 && lossless,
          std::to_string(annotations) + " annotations, " + std::to_string(recommendations) +
              " recommendation (after annotation " + std::to_string(first_rec_after) + "), log re-import " +
              (lossless ? "lossless" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient_fidelity", gradient_fidelity},
      {"scoring_oracle", scoring_oracle},
      {"pearson_oracle", pearson_oracle},
      {"decoding_round_trip", decoding_round_trip},
      {"planted_benchmark", planted_benchmark},
      {"grid", grid},
      {"determinism", determinism},
      {"bcq_constraint", bcq_constraint},
      {"service_conservation", service_conservation},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failed += !o.pass;
  }
  fs::remove_all(scratch_dir());
  return failed ? 1 : 0;
}
