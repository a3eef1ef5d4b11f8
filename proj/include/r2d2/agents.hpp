#pragma once

// Offline actor-critic recommenders over a continuous action space:
// DDPG, TD3 (twin critics, delayed policy, smoothed targets) and BCQ
// (generative model of logged actions plus a bounded perturbation).

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "r2d2/error.hpp"
#include "r2d2/neural.hpp"
#include "r2d2/random.hpp"
#include "r2d2/serialize.hpp"

namespace r2d2::agents {

using nn::Matrix;
using nn::Vector;

enum class Algorithm : std::uint8_t { ddpg = 0, td3 = 1, bcq = 2 };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::ddpg: return "ddpg";
    case Algorithm::td3: return "td3";
    case Algorithm::bcq: return "bcq";
  }
  return "ddpg";
}

inline std::optional<Algorithm> parse_algorithm(std::string_view s) {
  for (auto a : {Algorithm::ddpg, Algorithm::td3, Algorithm::bcq})
    if (s == to_string(a)) return a;
  return std::nullopt;
}

struct Transition {
  Vector state;
  Vector action;
  double reward = 0.0;
  Vector next_state;
  bool terminal = false;
};

/// Column-stacked minibatch.
struct Batch {
  Matrix states;
  Matrix actions;
  Vector rewards;
  Matrix next_states;
  Vector not_done;

  Eigen::Index size() const { return states.cols(); }

  static Batch gather(std::span<const Transition> transitions, std::span<const std::size_t> indices) {
    if (indices.empty()) throw ArgumentError("cannot gather an empty batch");
    const auto& first = transitions[indices.front()];
    const auto n = static_cast<Eigen::Index>(indices.size());
    Batch b;
    b.states.resize(first.state.size(), n);
    b.actions.resize(first.action.size(), n);
    b.rewards.resize(n);
    b.next_states.resize(first.next_state.size(), n);
    b.not_done.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& t = transitions[indices[static_cast<std::size_t>(j)]];
      if (t.state.size() != b.states.rows() || t.action.size() != b.actions.rows() ||
          t.next_state.size() != b.states.rows())
        throw ArgumentError("transitions in a batch must share state and action dimensions");
      b.states.col(j) = t.state;
      b.actions.col(j) = t.action;
      b.rewards[j] = t.reward;
      b.next_states.col(j) = t.next_state;
      b.not_done[j] = t.terminal ? 0.0 : 1.0;
    }
    return b;
  }

  static Batch of(std::span<const Transition> transitions) {
    std::vector<std::size_t> idx(transitions.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return gather(transitions, idx);
  }
};

/// Fixed store of logged transitions, sampled uniformly with replacement.
class ReplayBuffer {
 public:
  ReplayBuffer(std::vector<Transition> transitions, std::uint64_t seed)
      : transitions_(std::move(transitions)), rng_(seed) {
    for (const auto& t : transitions_) {
      if (t.state.size() != t.next_state.size()) throw ArgumentError("transition state/next_state dimensions differ");
      if (!std::isfinite(t.reward)) throw NumericError("transition reward is not finite");
    }
  }

  std::size_t size() const { return transitions_.size(); }
  const std::vector<Transition>& transitions() const { return transitions_; }

  std::vector<std::size_t> sample_indices(std::size_t batch) {
    if (transitions_.empty()) throw DataError("cannot sample from an empty replay buffer");
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = rng_.index(transitions_.size());
    return idx;
  }

  Batch sample(std::size_t batch) {
    const auto idx = sample_indices(batch);
    return Batch::gather(transitions_, idx);
  }

 private:
  std::vector<Transition> transitions_;
  Rng rng_;
};

/// Axis-aligned bounds of valid actions. Policies emit center + half * u for
/// u in [-1, 1]^d.
struct ActionBox {
  Vector low;
  Vector high;

  /// Per-coordinate min/max of `actions`, each side widened by `margin` of the range.
  static ActionBox around(const std::vector<Vector>& actions, double margin = 0.1) {
    if (actions.empty()) throw ArgumentError("action box needs at least one action");
    ActionBox box{actions.front(), actions.front()};
    for (const auto& a : actions) {
      box.low = box.low.cwiseMin(a);
      box.high = box.high.cwiseMax(a);
    }
    const Vector pad = margin * (box.high - box.low);
    box.low -= pad;
    box.high += pad;
    return box;
  }

  Eigen::Index dimension() const { return low.size(); }
  Vector center() const { return 0.5 * (low + high); }
  Vector half_extent() const { return 0.5 * (high - low); }

  /// Maps unit-cube coordinates (columns) into the box.
  Matrix scale(const Matrix& unit) const {
    return (unit.array().colwise() * half_extent().array()).colwise() + center().array();
  }

  Matrix clamp(const Matrix& a) const {
    return a.array().max(low.replicate(1, a.cols()).array()).min(high.replicate(1, a.cols()).array()).matrix();
  }

  bool contains(const Vector& a, double tol = 1e-12) const {
    return ((a.array() >= low.array() - tol) && (a.array() <= high.array() + tol)).all();
  }
};

struct AgentConfig {
  Algorithm algorithm = Algorithm::ddpg;
  double gamma = 0.99;
  double tau = 0.005;
  std::size_t batch_size = 32;
  std::vector<std::size_t> hidden = {64, 64};
  double actor_lr = 1e-4;
  double critic_lr = 1e-3;
  // TD3
  std::size_t policy_delay = 2;
  double target_noise = 0.2;
  double noise_clip = 0.5;
  // BCQ
  double perturbation_limit = 0.05;
  std::size_t candidates = 10;
  double lambda = 0.75;
  std::size_t latent_dim = 0;  // 0 selects twice the action dimension
  double kl_weight = 0.5;

  void validate() const {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ArgumentError("gamma must lie in [0, 1)");
    if (!(tau >= 0.0 && tau <= 1.0)) throw ArgumentError("tau must lie in [0, 1]");
    if (batch_size == 0) throw ArgumentError("batch size must be positive");
    if (policy_delay < 1) throw ArgumentError("policy delay must be at least 1");
    if (!(target_noise >= 0.0) || !(noise_clip >= 0.0)) throw ArgumentError("TD3 noise parameters must be non-negative");
    if (!(perturbation_limit >= 0.0)) throw ArgumentError("perturbation limit must be non-negative");
    if (candidates < 1) throw ArgumentError("BCQ candidate count must be at least 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ArgumentError("BCQ lambda must lie in [0, 1]");
    if (!(actor_lr > 0.0 && critic_lr > 0.0)) throw ArgumentError("learning rates must be positive");
  }

  bool operator==(const AgentConfig&) const = default;
};

struct Losses {
  double critic = std::numeric_limits<double>::quiet_NaN();
  double critic2 = std::numeric_limits<double>::quiet_NaN();
  /// NaN on TD3 calls that skip the delayed policy update.
  double actor = std::numeric_limits<double>::quiet_NaN();
  double vae = std::numeric_limits<double>::quiet_NaN();
  bool actor_updated = false;
};

inline Matrix stack_rows(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out << top, bottom;
  return out;
}

class Agent {
 public:
  Agent() = default;

  /// Networks are initialized in a fixed order (actor, critic 1, critic 2,
  /// encoder, decoder) from one generator seeded with `seed`.
  Agent(AgentConfig config, std::size_t state_dim, ActionBox box, std::uint64_t seed)
      : rng(seed), config_(std::move(config)), state_dim_(state_dim), box_(std::move(box)), seed_(seed) {
    config_.validate();
    if (state_dim == 0 || box_.dimension() == 0) throw ArgumentError("state and action dimensions must be positive");
    const std::size_t a = action_dim();
    auto sizes = [&](std::size_t in, std::size_t out) {
      std::vector<std::size_t> s{in};
      s.insert(s.end(), config_.hidden.begin(), config_.hidden.end());
      s.push_back(out);
      return s;
    };
    const bool bcq = config_.algorithm == Algorithm::bcq;
    actor = nn::Mlp::xavier(sizes(bcq ? state_dim + a : state_dim, a), nn::Activation::relu, nn::Activation::tanh, rng);
    critic1 = nn::Mlp::xavier(sizes(state_dim + a, 1), nn::Activation::relu, nn::Activation::identity, rng);
    if (config_.algorithm != Algorithm::ddpg)
      critic2 = nn::Mlp::xavier(sizes(state_dim + a, 1), nn::Activation::relu, nn::Activation::identity, rng);
    if (bcq) {
      const std::size_t latent = latent_dim();
      encoder = nn::Mlp::xavier(sizes(state_dim + a, 2 * latent), nn::Activation::relu, nn::Activation::identity, rng);
      decoder = nn::Mlp::xavier(sizes(state_dim + latent, a), nn::Activation::relu, nn::Activation::tanh, rng);
      encoder_opt = nn::AdamState::for_net(encoder, config_.critic_lr);
      decoder_opt = nn::AdamState::for_net(decoder, config_.critic_lr);
    }
    actor_target = actor;
    critic1_target = critic1;
    critic2_target = critic2;
    actor_opt = nn::AdamState::for_net(actor, config_.actor_lr);
    critic1_opt = nn::AdamState::for_net(critic1, config_.critic_lr);
    if (config_.algorithm != Algorithm::ddpg) critic2_opt = nn::AdamState::for_net(critic2, config_.critic_lr);
  }

  const AgentConfig& config() const { return config_; }
  Algorithm algorithm() const { return config_.algorithm; }
  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return static_cast<std::size_t>(box_.dimension()); }
  std::size_t latent_dim() const { return config_.latent_dim ? config_.latent_dim : 2 * action_dim(); }
  const ActionBox& box() const { return box_; }
  std::uint64_t seed() const { return seed_; }

  bool all_finite() const {
    for (const auto* net : {&actor, &actor_target, &critic1, &critic1_target, &critic2, &critic2_target, &encoder, &decoder})
      if (!net->all_finite()) return false;
    return true;
  }

  nn::Mlp actor, actor_target;
  nn::Mlp critic1, critic1_target;
  nn::Mlp critic2, critic2_target;
  nn::Mlp encoder, decoder;
  nn::AdamState actor_opt, critic1_opt, critic2_opt, encoder_opt, decoder_opt;
  Rng rng;
  std::uint64_t updates = 0;

 private:
  AgentConfig config_;
  std::size_t state_dim_ = 0;
  ActionBox box_;
  std::uint64_t seed_ = 0;
};

namespace detail {

inline void check_batch(const Agent& agent, const Batch& batch) {
  if (static_cast<std::size_t>(batch.states.rows()) != agent.state_dim() ||
      static_cast<std::size_t>(batch.actions.rows()) != agent.action_dim())
    throw ArgumentError("batch dimensions do not match the agent");
}

inline void check_finite(double loss, const char* what, const Batch& batch) {
  if (std::isfinite(loss)) return;
  std::ostringstream msg;
  msg << what << " loss is not finite (batch size " << batch.size() << ", reward range [" << batch.rewards.minCoeff()
      << ", " << batch.rewards.maxCoeff() << "], states finite: " << (batch.states.allFinite() ? "yes" : "no") << ')';
  throw NumericError(msg.str());
}

/// Mean-squared regression of `critic` onto `targets`; returns the loss.
inline double regress_critic(nn::Mlp& critic, nn::AdamState& opt, const Matrix& inputs, const Vector& targets,
                             const Batch& batch, const char* name) {
  nn::ForwardCache cache;
  const Matrix q = nn::forward(critic, inputs, &cache);
  const Eigen::RowVectorXd err = q.row(0) - targets.transpose();
  const double loss = err.squaredNorm() / static_cast<double>(err.size());
  check_finite(loss, name, batch);
  const Matrix dq = (2.0 / static_cast<double>(err.size())) * err;
  nn::adam_step(critic, nn::backward(critic, cache, dq), opt);
  return loss;
}

/// One ascent step of the deterministic policy gradient: raises
/// mean Q(s, box.scale(actor(s))) through the critic's input gradient.
inline double policy_step(Agent& agent, const Batch& batch) {
  nn::ForwardCache actor_cache, critic_cache;
  const Matrix unit = nn::forward(agent.actor, batch.states, &actor_cache);
  const Matrix actions = agent.box().scale(unit);
  const Matrix q = nn::forward(agent.critic1, stack_rows(batch.states, actions), &critic_cache);
  const double loss = -q.mean();
  check_finite(loss, "actor", batch);
  const Matrix dq = Matrix::Constant(1, q.cols(), -1.0 / static_cast<double>(q.cols()));
  const auto critic_grads = nn::backward(agent.critic1, critic_cache, dq);
  const auto a = static_cast<Eigen::Index>(agent.action_dim());
  const Matrix d_action = critic_grads.input.bottomRows(a);
  const Matrix d_unit = d_action.array().colwise() * agent.box().half_extent().array();
  nn::adam_step(agent.actor, nn::backward(agent.actor, actor_cache, d_unit), agent.actor_opt);
  return loss;
}

inline Matrix clipped_latent(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix z(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) z(r, c) = std::clamp(rng.normal(), -0.5, 0.5);
  return z;
}

}  // namespace detail

inline Losses ddpg_update(Agent& agent, const Batch& batch) {
  detail::check_batch(agent, batch);
  const auto& cfg = agent.config();
  const Matrix next_actions = agent.box().scale(nn::forward(agent.actor_target, batch.next_states));
  const Matrix next_q = nn::forward(agent.critic1_target, stack_rows(batch.next_states, next_actions));
  const Vector y = batch.rewards + cfg.gamma * batch.not_done.cwiseProduct(next_q.row(0).transpose());

  Losses losses;
  losses.critic = detail::regress_critic(agent.critic1, agent.critic1_opt, stack_rows(batch.states, batch.actions), y,
                                         batch, "critic");
  losses.actor = detail::policy_step(agent, batch);
  losses.actor_updated = true;
  nn::soft_update(agent.critic1_target, agent.critic1, cfg.tau);
  nn::soft_update(agent.actor_target, agent.actor, cfg.tau);
  ++agent.updates;
  return losses;
}

struct TwinTarget {
  Vector q1;
  Vector q2;
  Vector min_q;
  Vector y;
};

/// TD3 regression target with clipped Gaussian smoothing noise, drawn in
/// unit-cube coordinates from `rng`.
inline TwinTarget td3_target(const Agent& agent, const Batch& batch, Rng& rng) {
  const auto& cfg = agent.config();
  Matrix unit = nn::forward(agent.actor_target, batch.next_states);
  for (Eigen::Index c = 0; c < unit.cols(); ++c)
    for (Eigen::Index r = 0; r < unit.rows(); ++r) {
      const double noise = std::clamp(cfg.target_noise * rng.normal(), -cfg.noise_clip, cfg.noise_clip);
      unit(r, c) = std::clamp(unit(r, c) + noise, -1.0, 1.0);
    }
  const Matrix inputs = stack_rows(batch.next_states, agent.box().scale(unit));
  TwinTarget t;
  t.q1 = nn::forward(agent.critic1_target, inputs).row(0).transpose();
  t.q2 = nn::forward(agent.critic2_target, inputs).row(0).transpose();
  t.min_q = t.q1.cwiseMin(t.q2);
  t.y = batch.rewards + cfg.gamma * batch.not_done.cwiseProduct(t.min_q);
  return t;
}

inline Losses td3_update(Agent& agent, const Batch& batch) {
  detail::check_batch(agent, batch);
  const auto& cfg = agent.config();
  const auto target = td3_target(agent, batch, agent.rng);
  const Matrix inputs = stack_rows(batch.states, batch.actions);
  Losses losses;
  losses.critic = detail::regress_critic(agent.critic1, agent.critic1_opt, inputs, target.y, batch, "critic1");
  losses.critic2 = detail::regress_critic(agent.critic2, agent.critic2_opt, inputs, target.y, batch, "critic2");
  ++agent.updates;
  if (agent.updates % cfg.policy_delay == 0) {
    losses.actor = detail::policy_step(agent, batch);
    losses.actor_updated = true;
    nn::soft_update(agent.critic1_target, agent.critic1, cfg.tau);
    nn::soft_update(agent.critic2_target, agent.critic2, cfg.tau);
    nn::soft_update(agent.actor_target, agent.actor, cfg.tau);
  }
  return losses;
}

struct Candidates {
  Matrix decoded;    // action_dim x n
  Matrix perturbed;  // action_dim x n
  Vector q1;         // Q1(s, perturbed) per candidate
};

/// Decodes `latents` for the states in `states` (both column-aligned).
inline Matrix bcq_decode(const Agent& agent, const Matrix& states, const Matrix& latents) {
  return agent.box().scale(nn::forward(agent.decoder, stack_rows(states, latents)));
}

/// Adds the perturbation net's output, bounded by the limit per coordinate,
/// and clamps into the action box.
inline Matrix bcq_perturb(const Agent& agent, const nn::Mlp& perturbation, const Matrix& states, const Matrix& actions) {
  const Matrix xi = agent.config().perturbation_limit * nn::forward(perturbation, stack_rows(states, actions));
  return agent.box().clamp(actions + xi);
}

/// `n` decoder candidates for one state, each perturbed by the online
/// perturbation net and scored by the online first critic.
inline Candidates bcq_candidates(const Agent& agent, const Vector& state, std::size_t n, Rng& rng) {
  const auto cols = static_cast<Eigen::Index>(n);
  const Matrix states = state.replicate(1, cols);
  Candidates c;
  c.decoded = bcq_decode(agent, states, detail::clipped_latent(rng, static_cast<Eigen::Index>(agent.latent_dim()), cols));
  c.perturbed = bcq_perturb(agent, agent.actor, states, c.decoded);
  c.q1 = nn::forward(agent.critic1, stack_rows(states, c.perturbed)).row(0).transpose();
  return c;
}

/// Critic target: for each next state, the best of `n` perturbed decoder
/// candidates under lambda * min + (1 - lambda) * max of the target twins.
inline Vector bcq_target(const Agent& agent, const Batch& batch, Rng& rng) {
  const auto& cfg = agent.config();
  const auto n = static_cast<Eigen::Index>(cfg.candidates);
  const Eigen::Index b = batch.size();
  Matrix states(batch.next_states.rows(), b * n);
  for (Eigen::Index j = 0; j < b; ++j) states.middleCols(j * n, n) = batch.next_states.col(j).replicate(1, n);
  const Matrix decoded =
      bcq_decode(agent, states, detail::clipped_latent(rng, static_cast<Eigen::Index>(agent.latent_dim()), b * n));
  const Matrix perturbed = bcq_perturb(agent, agent.actor_target, states, decoded);
  const Matrix inputs = stack_rows(states, perturbed);
  const Eigen::RowVectorXd q1 = nn::forward(agent.critic1_target, inputs).row(0);
  const Eigen::RowVectorXd q2 = nn::forward(agent.critic2_target, inputs).row(0);
  const Eigen::RowVectorXd mixed = cfg.lambda * q1.cwiseMin(q2) + (1.0 - cfg.lambda) * q1.cwiseMax(q2);
  Vector best(b);
  for (Eigen::Index j = 0; j < b; ++j) best[j] = mixed.segment(j * n, n).maxCoeff();
  return batch.rewards + cfg.gamma * batch.not_done.cwiseProduct(best);
}

/// One VAE step on (state, action) reconstruction with KL regularization.
inline double vae_step(Agent& agent, const Batch& batch) {
  const auto latent = static_cast<Eigen::Index>(agent.latent_dim());
  const Eigen::Index b = batch.size();
  const auto a_dim = static_cast<Eigen::Index>(agent.action_dim());
  nn::ForwardCache enc_cache, dec_cache;
  const Matrix stats = nn::forward(agent.encoder, stack_rows(batch.states, batch.actions), &enc_cache);
  const Matrix mean = stats.topRows(latent);
  const Matrix raw_log_std = stats.bottomRows(latent);
  const Matrix log_std = raw_log_std.cwiseMax(-4.0).cwiseMin(15.0);
  const Matrix std_dev = log_std.array().exp().matrix();
  Matrix eps(latent, b);
  for (Eigen::Index c = 0; c < b; ++c)
    for (Eigen::Index r = 0; r < latent; ++r) eps(r, c) = agent.rng.normal();
  const Matrix z = mean + std_dev.cwiseProduct(eps);
  const Matrix unit = nn::forward(agent.decoder, stack_rows(batch.states, z), &dec_cache);
  const Matrix recon = agent.box().scale(unit);

  const double recon_count = static_cast<double>(a_dim * b);
  const double latent_count = static_cast<double>(latent * b);
  const Matrix diff = recon - batch.actions;
  const double recon_loss = diff.squaredNorm() / recon_count;
  const double kl = -0.5 * (1.0 + 2.0 * log_std.array() - mean.array().square() - std_dev.array().square()).sum() /
                    latent_count;
  const double loss = recon_loss + agent.config().kl_weight * kl;
  detail::check_finite(loss, "vae", batch);

  const Matrix d_recon = (2.0 / recon_count) * diff;
  const Matrix d_unit = d_recon.array().colwise() * agent.box().half_extent().array();
  const auto dec_grads = nn::backward(agent.decoder, dec_cache, d_unit);
  const Matrix dz = dec_grads.input.bottomRows(latent);
  const double w = agent.config().kl_weight / latent_count;
  Matrix d_stats(2 * latent, b);
  d_stats.topRows(latent) = dz + w * mean;
  const Matrix d_log_std = dz.cwiseProduct(std_dev).cwiseProduct(eps) + w * (std_dev.array().square() - 1.0).matrix();
  d_stats.bottomRows(latent) =
      ((raw_log_std.array() >= -4.0) && (raw_log_std.array() <= 15.0)).select(d_log_std, 0.0);
  const auto enc_grads = nn::backward(agent.encoder, enc_cache, d_stats);
  nn::adam_step(agent.decoder, dec_grads, agent.decoder_opt);
  nn::adam_step(agent.encoder, enc_grads, agent.encoder_opt);
  return loss;
}

inline Losses bcq_update(Agent& agent, const Batch& batch) {
  detail::check_batch(agent, batch);
  const auto& cfg = agent.config();
  Losses losses;
  losses.vae = vae_step(agent, batch);

  const Vector y = bcq_target(agent, batch, agent.rng);
  const Matrix inputs = stack_rows(batch.states, batch.actions);
  losses.critic = detail::regress_critic(agent.critic1, agent.critic1_opt, inputs, y, batch, "critic1");
  losses.critic2 = detail::regress_critic(agent.critic2, agent.critic2_opt, inputs, y, batch, "critic2");

  // Perturbation step: ascend Q1 on decoded-then-perturbed actions; the
  // decoder is held fixed and clamped coordinates pass no gradient.
  const Matrix decoded =
      bcq_decode(agent, batch.states, detail::clipped_latent(agent.rng, static_cast<Eigen::Index>(agent.latent_dim()), batch.size()));
  nn::ForwardCache xi_cache, critic_cache;
  const Matrix xi_unit = nn::forward(agent.actor, stack_rows(batch.states, decoded), &xi_cache);
  const Matrix raw = decoded + cfg.perturbation_limit * xi_unit;
  const Matrix perturbed = agent.box().clamp(raw);
  const Matrix q = nn::forward(agent.critic1, stack_rows(batch.states, perturbed), &critic_cache);
  losses.actor = -q.mean();
  detail::check_finite(losses.actor, "perturbation", batch);
  const Matrix dq = Matrix::Constant(1, q.cols(), -1.0 / static_cast<double>(q.cols()));
  const Matrix d_action = nn::backward(agent.critic1, critic_cache, dq).input.bottomRows(decoded.rows());
  const Matrix passed = (raw.array() == perturbed.array()).select(d_action, 0.0);
  nn::adam_step(agent.actor, nn::backward(agent.actor, xi_cache, cfg.perturbation_limit * passed), agent.actor_opt);
  losses.actor_updated = true;

  nn::soft_update(agent.critic1_target, agent.critic1, cfg.tau);
  nn::soft_update(agent.critic2_target, agent.critic2, cfg.tau);
  nn::soft_update(agent.actor_target, agent.actor, cfg.tau);
  ++agent.updates;
  return losses;
}

inline Losses update(Agent& agent, const Batch& batch) {
  Losses losses;
  switch (agent.algorithm()) {
    case Algorithm::ddpg: losses = ddpg_update(agent, batch); break;
    case Algorithm::td3: losses = td3_update(agent, batch); break;
    case Algorithm::bcq: losses = bcq_update(agent, batch); break;
  }
  if (!agent.all_finite()) throw NumericError("update produced non-finite parameters");
  return losses;
}

/// Generator for BCQ action selection, derived from the agent seed and the
/// state's bits so repeated queries agree without mutating the agent.
inline Rng selection_rng(const Agent& agent, const Vector& state) {
  std::uint64_t h = hash_combine(agent.seed(), 0x5e1ec7ULL);
  for (Eigen::Index i = 0; i < state.size(); ++i) h = hash_combine(h, std::bit_cast<std::uint64_t>(state[i]));
  return Rng(h);
}

inline Vector select_action(const Agent& agent, const Vector& state) {
  if (static_cast<std::size_t>(state.size()) != agent.state_dim())
    throw ArgumentError("select_action: state has dimension " + std::to_string(state.size()) + ", agent expects " +
                        std::to_string(agent.state_dim()));
  if (agent.algorithm() != Algorithm::bcq) return agent.box().scale(nn::forward(agent.actor, Matrix(state))).col(0);
  Rng rng = selection_rng(agent, state);
  const auto c = bcq_candidates(agent, state, agent.config().candidates, rng);
  Eigen::Index best = 0;
  c.q1.maxCoeff(&best);
  return c.perturbed.col(best);
}

inline void write(io::Writer& w, const AgentConfig& c) {
  w.tag("ACFG");
  w.u8(static_cast<std::uint8_t>(c.algorithm));
  w.f64(c.gamma);
  w.f64(c.tau);
  w.u64(c.batch_size);
  w.u64(c.hidden.size());
  for (auto h : c.hidden) w.u64(h);
  w.f64(c.actor_lr);
  w.f64(c.critic_lr);
  w.u64(c.policy_delay);
  w.f64(c.target_noise);
  w.f64(c.noise_clip);
  w.f64(c.perturbation_limit);
  w.u64(c.candidates);
  w.f64(c.lambda);
  w.u64(c.latent_dim);
  w.f64(c.kl_weight);
}

inline AgentConfig read_agent_config(io::Reader& r) {
  r.expect_tag("ACFG");
  AgentConfig c;
  const auto algo = r.u8();
  if (algo > 2) throw DataError("checkpoint: unknown algorithm code");
  c.algorithm = static_cast<Algorithm>(algo);
  c.gamma = r.f64();
  c.tau = r.f64();
  c.batch_size = r.u64();
  const auto layers = r.u64();
  if (layers > 64) throw DataError("checkpoint: bad hidden layer count");
  c.hidden.clear();
  for (std::uint64_t i = 0; i < layers; ++i) c.hidden.push_back(r.u64());
  c.actor_lr = r.f64();
  c.critic_lr = r.f64();
  c.policy_delay = r.u64();
  c.target_noise = r.f64();
  c.noise_clip = r.f64();
  c.perturbation_limit = r.f64();
  c.candidates = r.u64();
  c.lambda = r.f64();
  c.latent_dim = r.u64();
  c.kl_weight = r.f64();
  c.validate();
  return c;
}

inline void write(io::Writer& w, const Agent& agent) {
  w.tag("AGNT");
  write(w, agent.config());
  w.u64(agent.state_dim());
  w.vec(agent.box().low);
  w.vec(agent.box().high);
  w.u64(agent.seed());
  w.u64(agent.updates);
  w.str(agent.rng.state());
  for (const auto* net : {&agent.actor, &agent.actor_target, &agent.critic1, &agent.critic1_target})
    nn::write(w, *net);
  nn::write(w, agent.actor_opt);
  nn::write(w, agent.critic1_opt);
  if (agent.algorithm() != Algorithm::ddpg) {
    nn::write(w, agent.critic2);
    nn::write(w, agent.critic2_target);
    nn::write(w, agent.critic2_opt);
  }
  if (agent.algorithm() == Algorithm::bcq) {
    nn::write(w, agent.encoder);
    nn::write(w, agent.decoder);
    nn::write(w, agent.encoder_opt);
    nn::write(w, agent.decoder_opt);
  }
}

inline Agent read_agent(io::Reader& r) {
  r.expect_tag("AGNT");
  auto config = read_agent_config(r);
  const auto state_dim = r.u64();
  ActionBox box;
  box.low = r.vec();
  box.high = r.vec();
  if (box.low.size() != box.high.size()) throw DataError("checkpoint: action box bounds differ in size");
  const auto seed = r.u64();
  Agent agent(config, state_dim, box, seed);
  agent.updates = r.u64();
  agent.rng.set_state(r.str());
  auto load = [&](nn::Mlp& net) {
    nn::Mlp loaded = nn::read_mlp(r);
    if (!loaded.same_architecture(net)) throw DataError("checkpoint: network architecture does not match its config");
    net = std::move(loaded);
  };
  load(agent.actor);
  load(agent.actor_target);
  load(agent.critic1);
  load(agent.critic1_target);
  agent.actor_opt = nn::read_adam(r);
  agent.critic1_opt = nn::read_adam(r);
  if (agent.algorithm() != Algorithm::ddpg) {
    load(agent.critic2);
    load(agent.critic2_target);
    agent.critic2_opt = nn::read_adam(r);
  }
  if (agent.algorithm() == Algorithm::bcq) {
    load(agent.encoder);
    load(agent.decoder);
    agent.encoder_opt = nn::read_adam(r);
    agent.decoder_opt = nn::read_adam(r);
  }
  return agent;
}

}  // namespace r2d2::agents
