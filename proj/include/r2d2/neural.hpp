#pragma once

// Feedforward networks with hand-written reverse mode. Batches are column
// matrices: a (features x batch) input produces an (outputs x batch) result.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "r2d2/error.hpp"
#include "r2d2/random.hpp"
#include "r2d2/serialize.hpp"

namespace r2d2::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation : std::uint8_t { identity = 0, relu = 1, tanh = 2 };

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

class Mlp {
 public:
  Mlp() = default;

  /// Zero-initialized network with the given layer sizes (input first).
  Mlp(std::vector<std::size_t> sizes, Activation hidden, Activation output)
      : sizes_(std::move(sizes)), hidden_(hidden), output_(output) {
    if (sizes_.size() < 2) throw ArgumentError("an MLP needs at least an input and an output size");
    for (auto s : sizes_)
      if (s == 0) throw ArgumentError("MLP layer sizes must be positive");
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l)
      layers.push_back(Layer{Matrix::Zero(static_cast<Eigen::Index>(sizes_[l + 1]), static_cast<Eigen::Index>(sizes_[l])),
                             Vector::Zero(static_cast<Eigen::Index>(sizes_[l + 1]))});
  }

  /// Xavier-uniform weights, zero biases.
  static Mlp xavier(std::vector<std::size_t> sizes, Activation hidden, Activation output, Rng& rng) {
    Mlp net(std::move(sizes), hidden, output);
    for (auto& layer : net.layers) {
      const double limit = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = rng.uniform(-limit, limit);
    }
    return net;
  }

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  std::size_t input_size() const { return sizes_.front(); }
  std::size_t output_size() const { return sizes_.back(); }
  Activation hidden_activation() const { return hidden_; }
  Activation output_activation() const { return output_; }
  Activation activation_of(std::size_t layer) const { return layer + 1 == layers.size() ? output_ : hidden_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  bool same_architecture(const Mlp& other) const {
    return sizes_ == other.sizes_ && hidden_ == other.hidden_ && output_ == other.output_;
  }

  bool all_finite() const {
    for (const auto& l : layers)
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return true;
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    if (!a.same_architecture(b)) return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
      if (a.layers[l].weight != b.layers[l].weight || a.layers[l].bias != b.layers[l].bias) return false;
    return true;
  }

  std::vector<Layer> layers;

 private:
  std::vector<std::size_t> sizes_;
  Activation hidden_ = Activation::relu;
  Activation output_ = Activation::identity;
};

struct ForwardCache {
  std::vector<Matrix> inputs;           // input to each layer
  std::vector<Matrix> pre_activations;  // affine output of each layer
  Matrix output;
};

namespace detail {

inline Matrix activate(Activation a, const Matrix& z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::tanh: return z.array().tanh().matrix();
  }
  return z;
}

/// Multiplies `upstream` by the activation derivative; relu's derivative at
/// exactly zero is taken as zero.
inline Matrix activation_backward(Activation a, const Matrix& z, const Matrix& activated, const Matrix& upstream) {
  switch (a) {
    case Activation::identity: return upstream;
    case Activation::relu: return (z.array() > 0.0).select(upstream, 0.0);
    case Activation::tanh: return (upstream.array() * (1.0 - activated.array().square())).matrix();
  }
  return upstream;
}

}  // namespace detail

inline Matrix forward(const Mlp& net, const Matrix& x, ForwardCache* cache = nullptr) {
  if (static_cast<std::size_t>(x.rows()) != net.input_size())
    throw ArgumentError("forward: input has " + std::to_string(x.rows()) + " rows, network expects " +
                        std::to_string(net.input_size()));
  if (!x.allFinite()) throw NumericError("forward: non-finite input");
  if (cache) {
    cache->inputs.clear();
    cache->pre_activations.clear();
  }
  Matrix a = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    Matrix z = layer.weight * a;
    z.colwise() += layer.bias;
    Matrix next = detail::activate(net.activation_of(l), z);
    if (cache) {
      cache->inputs.push_back(std::move(a));
      cache->pre_activations.push_back(std::move(z));
    }
    a = std::move(next);
  }
  if (cache) cache->output = a;
  return a;
}

inline Vector forward(const Mlp& net, const Vector& x) {
  return forward(net, Matrix(x)).col(0);
}

struct Gradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
  Matrix input;  // d objective / d input, same shape as the forward input

  static Gradients zeros_like(const Mlp& net) {
    Gradients g;
    for (const auto& l : net.layers) {
      g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      g.bias.push_back(Vector::Zero(l.bias.size()));
    }
    return g;
  }

  bool all_finite() const {
    for (std::size_t l = 0; l < weight.size(); ++l)
      if (!weight[l].allFinite() || !bias[l].allFinite()) return false;
    return true;
  }

  Gradients& operator+=(const Gradients& o) {
    for (std::size_t l = 0; l < weight.size(); ++l) {
      weight[l] += o.weight[l];
      bias[l] += o.bias[l];
    }
    return *this;
  }
};

/// Reverse pass for the objective whose gradient w.r.t. the network output
/// is `output_grad` (outputs x batch). Parameter gradients sum over the batch.
inline Gradients backward(const Mlp& net, const ForwardCache& cache, const Matrix& output_grad) {
  if (cache.inputs.size() != net.layers.size() || cache.output.rows() != output_grad.rows() ||
      cache.output.cols() != output_grad.cols())
    throw ContractError("backward: cache does not match this network or output gradient shape");
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    if (cache.inputs[l].rows() != net.layers[l].weight.cols() ||
        cache.pre_activations[l].rows() != net.layers[l].weight.rows())
      throw ContractError("backward: stale cache (layer " + std::to_string(l) + " shape mismatch)");

  Gradients g;
  g.weight.resize(net.layers.size());
  g.bias.resize(net.layers.size());
  Matrix upstream = output_grad;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const Matrix& activated = i + 1 == net.layers.size() ? cache.output : cache.inputs[i + 1];
    const Matrix dz = detail::activation_backward(net.activation_of(i), cache.pre_activations[i], activated, upstream);
    g.weight[i] = dz * cache.inputs[i].transpose();
    g.bias[i] = dz.rowwise().sum();
    upstream = net.layers[i].weight.transpose() * dz;
  }
  g.input = std::move(upstream);
  return g;
}

struct AdamState {
  std::vector<Matrix> m_weight, v_weight;
  std::vector<Vector> m_bias, v_bias;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_net(const Mlp& net, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                           double epsilon = 1e-8) {
    AdamState s;
    s.learning_rate = learning_rate;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.epsilon = epsilon;
    for (const auto& l : net.layers) {
      s.m_weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      s.v_weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      s.m_bias.push_back(Vector::Zero(l.bias.size()));
      s.v_bias.push_back(Vector::Zero(l.bias.size()));
    }
    return s;
  }

  friend bool operator==(const AdamState& a, const AdamState& b) {
    auto same = [](const auto& x, const auto& y) {
      if (x.size() != y.size()) return false;
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i].rows() != y[i].rows() || x[i].cols() != y[i].cols() || !(x[i].array() == y[i].array()).all())
          return false;
      return true;
    };
    return a.step == b.step && a.learning_rate == b.learning_rate && a.beta1 == b.beta1 && a.beta2 == b.beta2 &&
           a.epsilon == b.epsilon && same(a.m_weight, b.m_weight) && same(a.v_weight, b.v_weight) &&
           same(a.m_bias, b.m_bias) && same(a.v_bias, b.v_bias);
  }
};

/// Bias-corrected Adam. A non-finite gradient leaves net and state untouched.
inline void adam_step(Mlp& net, const Gradients& grads, AdamState& st) {
  if (grads.weight.size() != net.layers.size() || st.m_weight.size() != net.layers.size())
    throw ContractError("adam_step: gradient/state layer count does not match the network");
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    if (grads.weight[l].rows() != net.layers[l].weight.rows() || grads.weight[l].cols() != net.layers[l].weight.cols() ||
        grads.bias[l].size() != net.layers[l].bias.size())
      throw ContractError("adam_step: gradient shape mismatch at layer " + std::to_string(l));
  if (!grads.all_finite()) throw NumericError("adam_step: non-finite gradient; parameters left unchanged");

  ++st.step;
  const double t = static_cast<double>(st.step);
  const double c1 = 1.0 - std::pow(st.beta1, t);
  const double c2 = 1.0 - std::pow(st.beta2, t);
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = st.beta1 * m + (1.0 - st.beta1) * g;
    v = st.beta2 * v + (1.0 - st.beta2) * g.cwiseProduct(g);
    param.array() -= st.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + st.epsilon);
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    update(net.layers[l].weight, grads.weight[l], st.m_weight[l], st.v_weight[l]);
    update(net.layers[l].bias, grads.bias[l], st.m_bias[l], st.v_bias[l]);
  }
}

/// target <- tau * online + (1 - tau) * target
inline void soft_update(Mlp& target, const Mlp& online, double tau) {
  if (!target.same_architecture(online)) throw ContractError("soft_update: architectures differ");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ArgumentError("soft_update: tau must lie in [0, 1]");
  for (std::size_t l = 0; l < target.layers.size(); ++l) {
    target.layers[l].weight = tau * online.layers[l].weight + (1.0 - tau) * target.layers[l].weight;
    target.layers[l].bias = tau * online.layers[l].bias + (1.0 - tau) * target.layers[l].bias;
  }
}

/// Scalar objective of the network output; writes d objective / d output.
using Objective = std::function<double(const Matrix& output, Matrix& output_grad)>;

struct GradientReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  /// Parameters whose finite-difference stencil crosses a relu kink.
  std::size_t excluded = 0;
  bool passed = false;
};

/// Compares `backward` with central differences on every parameter.
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradientReport gradient_check(const Mlp& net, const Matrix& input, const Objective& objective,
                                     double tolerance, double h = 1e-5, double floor = 1e-6) {
  ForwardCache cache;
  Matrix out = forward(net, input, &cache);
  Matrix dout;
  objective(out, dout);
  const Gradients analytic = backward(net, cache, dout);

  auto gate_pattern = [&](const ForwardCache& c) {
    std::vector<bool> gates;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      if (net.activation_of(l) != Activation::relu) continue;
      const Matrix& z = c.pre_activations[l];
      for (Eigen::Index i = 0; i < z.size(); ++i) gates.push_back(z.data()[i] > 0.0);
    }
    return gates;
  };
  const auto base_gates = gate_pattern(cache);

  Mlp probe = net;
  GradientReport report;
  auto evaluate = [&](bool& crossed) {
    ForwardCache c;
    Matrix o = forward(probe, input, &c);
    Matrix unused;
    if (gate_pattern(c) != base_gates) crossed = true;
    return objective(o, unused);
  };
  auto check = [&](double& param, double grad) {
    const double saved = param;
    bool crossed = false;
    param = saved + h;
    const double plus = evaluate(crossed);
    param = saved - h;
    const double minus = evaluate(crossed);
    param = saved;
    if (crossed) {
      ++report.excluded;
      return;
    }
    const double numeric = (plus - minus) / (2.0 * h);
    const double denom = std::max({std::abs(grad), std::abs(numeric), floor});
    report.max_relative_error = std::max(report.max_relative_error, std::abs(grad - numeric) / denom);
    ++report.checked;
  };
  for (std::size_t l = 0; l < probe.layers.size(); ++l) {
    auto& layer = probe.layers[l];
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) check(layer.weight(r, c), analytic.weight[l](r, c));
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) check(layer.bias[r], analytic.bias[l][r]);
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

inline void write(io::Writer& w, const Mlp& net) {
  w.tag("MLP ");
  w.u64(net.sizes().size());
  for (auto s : net.sizes()) w.u64(s);
  w.u8(static_cast<std::uint8_t>(net.hidden_activation()));
  w.u8(static_cast<std::uint8_t>(net.output_activation()));
  for (const auto& l : net.layers) {
    w.mat(l.weight);
    w.vec(l.bias);
  }
}

inline Mlp read_mlp(io::Reader& r) {
  r.expect_tag("MLP ");
  const auto n = r.u64();
  if (n < 2 || n > 64) throw DataError("checkpoint MLP: bad layer count");
  std::vector<std::size_t> sizes;
  for (std::uint64_t i = 0; i < n; ++i) sizes.push_back(r.u64());
  const auto hidden = r.u8();
  const auto output = r.u8();
  if (hidden > 2 || output > 2) throw DataError("checkpoint MLP: bad activation code");
  Mlp net(sizes, static_cast<Activation>(hidden), static_cast<Activation>(output));
  for (auto& l : net.layers) {
    Matrix wgt = r.mat();
    Vector b = r.vec();
    if (wgt.rows() != l.weight.rows() || wgt.cols() != l.weight.cols() || b.size() != l.bias.size())
      throw DataError("checkpoint MLP: layer shape does not match its size prefix");
    l.weight = std::move(wgt);
    l.bias = std::move(b);
  }
  return net;
}

inline void write(io::Writer& w, const AdamState& st) {
  w.tag("ADAM");
  w.u64(st.step);
  w.f64(st.learning_rate);
  w.f64(st.beta1);
  w.f64(st.beta2);
  w.f64(st.epsilon);
  w.u64(st.m_weight.size());
  for (std::size_t l = 0; l < st.m_weight.size(); ++l) {
    w.mat(st.m_weight[l]);
    w.mat(st.v_weight[l]);
    w.vec(st.m_bias[l]);
    w.vec(st.v_bias[l]);
  }
}

inline AdamState read_adam(io::Reader& r) {
  r.expect_tag("ADAM");
  AdamState st;
  st.step = r.u64();
  st.learning_rate = r.f64();
  st.beta1 = r.f64();
  st.beta2 = r.f64();
  st.epsilon = r.f64();
  const auto n = r.u64();
  if (n > 64) throw DataError("checkpoint Adam state: bad layer count");
  for (std::uint64_t l = 0; l < n; ++l) {
    st.m_weight.push_back(r.mat());
    st.v_weight.push_back(r.mat());
    st.m_bias.push_back(r.vec());
    st.v_bias.push_back(r.vec());
  }
  return st;
}

}  // namespace r2d2::nn
