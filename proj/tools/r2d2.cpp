// r2d2: synth | train | eval | serve | simulate

#include "r2d2/server.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "r2d2/corpus.hpp"
#include "r2d2/error.hpp"
#include "r2d2/pipeline.hpp"
#include "r2d2/service.hpp"
#include "r2d2/synthetic.hpp"

using namespace r2d2;

namespace {

template <typename T, typename Parse>
T parse_enum(const std::string& text, Parse parse, const char* what) {
  const auto v = parse(text);
  if (!v) throw ArgumentError(std::string("unknown ") + what + " '" + text + "'");
  return *v;
}

corpus::Format parse_format(const std::string& s) {
  if (s == "jsonl") return corpus::Format::jsonl;
  if (s == "tsv") return corpus::Format::tsv;
  throw ArgumentError("unknown corpus format '" + s + "'");
}

std::vector<std::size_t> parse_hidden(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (corpus::trim(part).empty()) continue;
    std::size_t pos = 0;
    const auto v = std::stoul(part, &pos);
    if (v == 0) throw ArgumentError("hidden layer widths must be positive");
    out.push_back(v);
  }
  if (out.empty()) throw ArgumentError("at least one hidden layer is required");
  return out;
}

struct SynthOptions {
  std::string out;
  std::string planted;
  std::uint64_t seed = 0;
  synthetic::GeneratorConfig gen;
};

struct TrainOptions {
  std::string corpus;
  std::string format = "jsonl";
  std::string inventory;
  std::string checkpoint;
  std::string trace;
  std::string algorithm = "ddpg";
  std::string scale = "task";
  std::string action_space = "doc300";
  std::string condition;
  std::string hidden = "64,64";
  pipeline::RunConfig run;
};

struct EvalOptions {
  std::string checkpoint;
  std::string corpus;
  std::string format = "jsonl";
  std::string inventory;
  std::optional<std::uint64_t> seed;
  std::optional<int> topics;
  bool replay = false;
};

struct ServeOptions {
  std::string checkpoint;
  std::string host = "127.0.0.1";
  int port = 7700;
  int health_port = -1;
  int top_n = 3;
  std::string log_dir;
  std::vector<std::string> inventories;
};

struct SimulateOptions {
  std::string checkpoint;
  std::string corpus;
  std::string format = "jsonl";
  std::string session_id;
  std::string log_dir;
  std::string out;
  int top_n = 3;
  bool select_top = false;
};

alliance::Inventory inventory_or_default(const std::string& path) {
  return path.empty() ? alliance::default_inventory() : alliance::load_inventory(path);
}

int cmd_synth(const SynthOptions& o) {
  const auto syn = synthetic::generate_synthetic(o.gen, o.seed);
  corpus::save_corpus(o.out, syn.sessions);
  if (!o.planted.empty()) {
    std::ofstream out(o.planted, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + o.planted + "'");
    for (std::size_t i = 0; i < syn.sessions.size(); ++i) {
      nlohmann::ordered_json j;
      j["session_id"] = syn.sessions[i].session_id;
      j["topic"] = syn.planted[i].topic;
      j["best"] = syn.planted[i].best;
      out << j.dump() << '\n';
    }
  }
  std::cerr << "wrote " << syn.sessions.size() << " sessions to " << o.out << '\n';
  return 0;
}

int cmd_train(TrainOptions o) {
  auto& cfg = o.run;
  cfg.agent.algorithm = parse_enum<agents::Algorithm>(o.algorithm, agents::parse_algorithm, "algorithm");
  cfg.scale = parse_enum<alliance::Scale>(o.scale, alliance::parse_scale, "scale");
  cfg.action_kind = parse_enum<topics::ActionKind>(o.action_space, topics::parse_action_kind, "action space");
  cfg.agent.hidden = parse_hidden(o.hidden);
  if (!o.condition.empty() && o.condition != "all")
    cfg.condition = parse_enum<corpus::Condition>(o.condition, corpus::parse_condition, "condition");
  const auto sessions = pipeline::stage("load", [&] { return corpus::load_corpus(o.corpus, parse_format(o.format)); });
  auto inventory = pipeline::stage("inventory", [&] { return inventory_or_default(o.inventory); });
  auto result = pipeline::run_train(sessions, std::move(inventory), cfg);
  if (!o.checkpoint.empty()) pipeline::save_checkpoint(o.checkpoint, result.model);
  if (!o.trace.empty()) {
    std::ofstream out(o.trace, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + o.trace + "'");
    for (std::size_t e = 0; e < result.report.trace.size(); ++e) {
      const auto& l = result.report.trace[e];
      nlohmann::ordered_json j;
      j["epoch"] = e + 1;
      j["critic"] = pipeline::optional_number(l.critic);
      j["critic2"] = pipeline::optional_number(l.critic2);
      j["actor"] = pipeline::optional_number(l.actor);
      j["vae"] = pipeline::optional_number(l.vae);
      out << j.dump() << '\n';
    }
  }
  std::cout << pipeline::metrics_line(result.report) << std::endl;
  return 0;
}

int cmd_eval(const EvalOptions& o) {
  const auto model = pipeline::stage("checkpoint", [&] { return pipeline::load_checkpoint(o.checkpoint); });
  const auto sessions = pipeline::stage("load", [&] { return corpus::load_corpus(o.corpus, parse_format(o.format)); });
  pipeline::EvalOptions opts;
  opts.replay_ground_truth = o.replay;
  opts.expected_topics = o.topics;
  if (!o.inventory.empty()) opts.expected_inventory_items = alliance::load_inventory(o.inventory).size();
  const auto report = pipeline::run_eval(model, sessions, o.seed.value_or(model.config.seed), opts);
  std::cout << pipeline::metrics_line(report) << std::endl;
  return 0;
}

service::WireServer* g_wire = nullptr;
service::HealthServer* g_health = nullptr;

extern "C" void on_signal(int) {
  if (g_wire) g_wire->stop();
  if (g_health) g_health->stop();
}

int cmd_serve(const ServeOptions& o) {
  auto model = std::make_shared<const pipeline::Model>(
      pipeline::stage("checkpoint", [&] { return pipeline::load_checkpoint(o.checkpoint); }));
  service::EngineConfig ec;
  ec.top_n = o.top_n;
  if (!o.log_dir.empty()) ec.log_dir = o.log_dir;
  service::Engine engine(model, ec);
  for (const auto& spec : o.inventories) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw ArgumentError("--inventory expects name=path, got '" + spec + "'");
    engine.register_inventory(spec.substr(0, eq), alliance::load_inventory(spec.substr(eq + 1)));
  }
  service::WireServer wire(engine);
  service::HealthServer health(engine);
  const int port = wire.bind(o.port, o.host);
  const int hport = health.bind(o.health_port >= 0 ? o.health_port : (o.port == 0 ? 0 : o.port + 1), o.host);
  g_wire = &wire;
  g_health = &health;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "listening on " << o.host << ':' << port << " (health on " << hport << ")" << std::endl;
  std::thread health_thread([&] { health.run(); });
  wire.run();
  health.stop();
  health_thread.join();
  return 0;
}

int cmd_simulate(const SimulateOptions& o) {
  auto model = std::make_shared<const pipeline::Model>(
      pipeline::stage("checkpoint", [&] { return pipeline::load_checkpoint(o.checkpoint); }));
  const auto sessions = pipeline::stage("load", [&] { return corpus::load_corpus(o.corpus, parse_format(o.format)); });
  const corpus::Session* session = nullptr;
  for (const auto& s : sessions)
    if (s.session_id == o.session_id) session = &s;
  if (!session) throw DataError("session '" + o.session_id + "' not found in " + o.corpus);
  service::EngineConfig ec;
  ec.top_n = o.top_n;
  if (!o.log_dir.empty()) ec.log_dir = o.log_dir;
  service::Engine engine(model, ec, service::counting_clock());
  const auto transcript = service::simulate(engine, *session, o.select_top);
  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out, std::ios::binary | std::ios::trunc);
    if (!file) throw DataError("cannot write '" + o.out + "'");
  }
  std::ostream& out = o.out.empty() ? std::cout : file;
  for (const auto& line : transcript) out << line << '\n';
  out.flush();
  return 0;
}

void add_agent_flags(CLI::App* cmd, TrainOptions& o) {
  auto& a = o.run.agent;
  cmd->add_option("--gamma", a.gamma, "discount factor")->capture_default_str();
  cmd->add_option("--tau", a.tau, "target soft-update rate")->capture_default_str();
  cmd->add_option("--batch", a.batch_size, "minibatch size")->capture_default_str();
  cmd->add_option("--hidden", o.hidden, "hidden layer widths, comma separated")->capture_default_str();
  cmd->add_option("--actor-lr", a.actor_lr, "actor learning rate")->capture_default_str();
  cmd->add_option("--critic-lr", a.critic_lr, "critic (and VAE) learning rate")->capture_default_str();
  cmd->add_option("--policy-delay", a.policy_delay, "TD3 actor update period")->capture_default_str();
  cmd->add_option("--target-noise", a.target_noise, "TD3 smoothing noise sd")->capture_default_str();
  cmd->add_option("--noise-clip", a.noise_clip, "TD3 smoothing noise clip")->capture_default_str();
  cmd->add_option("--phi", a.perturbation_limit, "BCQ perturbation limit")->capture_default_str();
  cmd->add_option("--candidates", a.candidates, "BCQ candidates per state")->capture_default_str();
  cmd->add_option("--lambda", a.lambda, "BCQ clipped double-Q weight")->capture_default_str();
  cmd->add_option("--latent", a.latent_dim, "BCQ latent size (0 = twice the action size)")->capture_default_str();
  cmd->add_option("--kl-weight", a.kl_weight, "BCQ KL weight")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Therapy-topic recommender: synthetic data, offline RL training, evaluation, live serving"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file with option defaults; flags take precedence");

  SynthOptions synth;
  auto* s = app.add_subcommand("synth", "write a synthetic corpus with a planted best-topic rule");
  s->add_option("--out", synth.out, "corpus file to write")->required();
  s->add_option("--planted", synth.planted, "also write the planted topic sequences");
  s->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
  s->add_option("--sessions", synth.gen.sessions)->capture_default_str();
  s->add_option("--turns", synth.gen.turns_per_session, "turns per session")->capture_default_str();
  s->add_option("--topics", synth.gen.topics, "K")->capture_default_str();
  s->add_option("--best-prob", synth.gen.behavior_best_prob, "logged therapist's chance of the best topic")
      ->capture_default_str();
  s->add_option("--aligned-step", synth.gen.aligned_step)->capture_default_str();
  s->add_option("--misaligned-step", synth.gen.misaligned_step)->capture_default_str();
  s->add_option("--therapist-words", synth.gen.therapist_words)->capture_default_str();

  TrainOptions train;
  auto* t = app.add_subcommand("train", "fit embedder, topics, and an agent; print one metrics line");
  t->add_option("--corpus", train.corpus)->required();
  t->add_option("--format", train.format, "jsonl or tsv")->capture_default_str();
  t->add_option("--inventory", train.inventory, "inventory file (default: built-in 36 items)");
  t->add_option("--checkpoint", train.checkpoint, "checkpoint file to write");
  t->add_option("--trace", train.trace, "per-epoch loss trace file");
  t->add_option("--algorithm", train.algorithm, "ddpg, td3 or bcq")->capture_default_str();
  t->add_option("--scale", train.scale, "task, bond or goal")->capture_default_str();
  t->add_option("--action-space", train.action_space, "doc300, pca36 or pca2")->capture_default_str();
  t->add_option("--condition", train.condition, "train on one condition subset");
  t->add_option("--topics", train.run.topics, "K")->capture_default_str();
  t->add_option("--epochs", train.run.epochs)->capture_default_str();
  t->add_option("--seed", train.run.seed)->capture_default_str();
  t->add_option("--test-fraction", train.run.test_fraction)->capture_default_str();
  t->add_option("--embed-dim", train.run.embed_dimension)->capture_default_str();
  add_agent_flags(t, train);

  EvalOptions eval;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a corpus split; print one metrics line");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--corpus", eval.corpus)->required();
  e->add_option("--format", eval.format)->capture_default_str();
  e->add_option("--seed", eval.seed, "split seed (default: the training seed)");
  e->add_option("--topics", eval.topics, "expected K");
  e->add_option("--inventory", eval.inventory, "inventory whose item count must match the checkpoint");
  e->add_flag("--replay-ground-truth", eval.replay, "score logged actions against themselves");

  ServeOptions serve;
  auto* v = app.add_subcommand("serve", "run the live-session engine");
  v->add_option("--checkpoint", serve.checkpoint)->required();
  v->add_option("--host", serve.host)->capture_default_str();
  v->add_option("--port", serve.port, "wire protocol port (0 = any)")->capture_default_str();
  v->add_option("--health-port", serve.health_port, "HTTP health port (default: port + 1)");
  v->add_option("--top-n", serve.top_n)->capture_default_str();
  v->add_option("--log-dir", serve.log_dir, "directory for per-session logs");
  v->add_option("--inventory", serve.inventories, "extra inventory as name=path (repeatable)");

  SimulateOptions sim;
  auto* m = app.add_subcommand("simulate", "replay a stored session through the engine");
  m->add_option("--checkpoint", sim.checkpoint)->required();
  m->add_option("--corpus", sim.corpus)->required();
  m->add_option("--session-id", sim.session_id)->required();
  m->add_option("--format", sim.format)->capture_default_str();
  m->add_option("--log-dir", sim.log_dir, "directory for the session log");
  m->add_option("--out", sim.out, "transcript file (default: stdout)");
  m->add_option("--top-n", sim.top_n)->capture_default_str();
  m->add_flag("--select-top", sim.select_top, "select the top-ranked topic each round");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::usage);
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*v) return cmd_serve(serve);
    if (*m) return cmd_simulate(sim);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(err.exit_code());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(ExitCode::data);
  }
  return static_cast<int>(ExitCode::usage);
}
