#pragma once

// Fully connected networks on the tape: architecture descriptions, named
// parameter sets, forward evaluation and differentiable input gradients.

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "phc/autodiff.hpp"

namespace phc::ad {

enum class Activation { kLinear, kTanh, kSoftplus };

inline std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::kLinear:
      return "linear";
    case Activation::kTanh:
      return "tanh";
    case Activation::kSoftplus:
      return "softplus";
  }
  return "linear";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "softplus") return Activation::kSoftplus;
  if (s == "linear" || s.empty()) return Activation::kLinear;
  throw ShapeError("unknown activation '" + std::string(s) + "'");
}

struct Layer {
  int width = 0;
  Activation activation = Activation::kLinear;
  bool operator==(const Layer&) const = default;
};

/// `d_in - n1 act1 - ... - d_out [act]`, e.g. "2-50 tanh-50 tanh-1" or
/// "3-64 softplus-64 softplus-1 softplus". The last layer is the output.
struct Architecture {
  int input = 0;
  std::vector<Layer> layers;

  int output() const { return layers.empty() ? input : layers.back().width; }

  static Architecture parse(std::string_view spec) {
    Architecture arch;
    std::vector<std::string> parts;
    std::string cur;
    for (char c : spec) {
      if (c == '-') {
        parts.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    parts.push_back(cur);
    if (parts.size() < 2) throw ShapeError("architecture needs at least input and output");

    auto parse_part = [](const std::string& p) {
      std::istringstream in(p);
      int width = 0;
      std::string act;
      if (!(in >> width) || width <= 0) throw ShapeError("bad layer '" + p + "'");
      in >> act;
      return Layer{width, parse_activation(act)};
    };
    const Layer first = parse_part(parts.front());
    if (first.activation != Activation::kLinear) throw ShapeError("input has no activation");
    arch.input = first.width;
    for (std::size_t i = 1; i < parts.size(); ++i) arch.layers.push_back(parse_part(parts[i]));
    return arch;
  }

  std::string to_string() const {
    std::string s = std::to_string(input);
    for (const Layer& l : layers) {
      s += "-" + std::to_string(l.width);
      if (l.activation != Activation::kLinear) {
        s += " ";
        s += activation_name(l.activation);
      }
    }
    return s;
  }

  bool operator==(const Architecture&) const = default;
};

/// Ordered collection of named real arrays.
class ParamSet {
 public:
  void add(std::string name, Matrix value) {
    if (contains(name)) throw ContractError("duplicate parameter '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(std::string_view name) const {
    for (const auto& e : entries_) {
      if (e.first == name) return true;
    }
    return false;
  }

  Matrix& operator[](std::string_view name) {
    for (auto& e : entries_) {
      if (e.first == name) return e.second;
    }
    throw ContractError("no parameter '" + std::string(name) + "'");
  }

  const Matrix& operator[](std::string_view name) const {
    for (const auto& e : entries_) {
      if (e.first == name) return e.second;
    }
    throw ContractError("no parameter '" + std::string(name) + "'");
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  const std::pair<std::string, Matrix>& entry(std::size_t i) const { return entries_.at(i); }
  std::pair<std::string, Matrix>& entry(std::size_t i) { return entries_.at(i); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.second.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& e : entries_) {
      if (!e.second.allFinite()) return false;
    }
    return true;
  }

  /// Same names and shapes, all entries zero.
  ParamSet zeros_like() const {
    ParamSet z;
    for (const auto& e : entries_) z.add(e.first, Matrix::Zero(e.second.rows(), e.second.cols()));
    return z;
  }

  bool same_layout(const ParamSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.first != b.first || a.second.rows() != b.second.rows() ||
          a.second.cols() != b.second.cols()) {
        return false;
      }
    }
    return true;
  }

  bool operator==(const ParamSet& other) const {
    if (!same_layout(other)) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (entries_[i].second != other.entries_[i].second) return false;
    }
    return true;
  }

 private:
  std::vector<std::pair<std::string, Matrix>> entries_;
};

/// A ParamSet resolved onto a tape: leaves when trainable, constants
/// otherwise, detached values when no tape is given.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(const ParamSet& params, Tape* tape, bool trainable) : trainable_(trainable) {
    for (const auto& [name, value] : params) {
      names_.push_back(name);
      if (tape == nullptr) {
        vars_.emplace_back(value);
      } else if (trainable) {
        vars_.push_back(tape->leaf(value));
      } else {
        vars_.push_back(tape->constant(value));
      }
    }
  }

  const Var& at(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return vars_[i];
    }
    throw ContractError("no bound parameter '" + std::string(name) + "'");
  }

  bool trainable() const { return trainable_; }
  const std::vector<Var>& vars() const { return vars_; }
  const std::vector<std::string>& names() const { return names_; }

  /// Adjoints after a reverse sweep, laid out like the source ParamSet.
  ParamSet gradient() const {
    ParamSet g;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      const Var& v = vars_[i];
      g.add(names_[i], v.tape() != nullptr ? v.tape()->adjoint(v)
                                          : Matrix::Zero(v.rows(), v.cols()));
    }
    return g;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var> vars_;
  bool trainable_ = false;
};

inline std::string weight_name(const std::string& prefix, std::size_t layer) {
  return prefix + ".W" + std::to_string(layer);
}
inline std::string bias_name(const std::string& prefix, std::size_t layer) {
  return prefix + ".b" + std::to_string(layer);
}

/// Adds `<prefix>.W<i>` / `<prefix>.b<i>` with weights ~ U(-1/sqrt(fan_in),
/// 1/sqrt(fan_in)) and zero biases.
inline void init_mlp(ParamSet& params, const std::string& prefix, const Architecture& arch,
                     std::mt19937_64& rng) {
  int fan_in = arch.input;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const int width = arch.layers[i].width;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w(width, fan_in);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = dist(rng);
    }
    params.add(weight_name(prefix, i), std::move(w));
    params.add(bias_name(prefix, i), Matrix::Zero(width, 1));
    fan_in = width;
  }
}

struct BoundMlp {
  Architecture arch;
  std::vector<Var> weights;
  std::vector<Var> biases;
};

inline BoundMlp bind_mlp(const BoundParams& params, const std::string& prefix,
                         const Architecture& arch) {
  BoundMlp m{arch, {}, {}};
  int fan_in = arch.input;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const Var& w = params.at(weight_name(prefix, i));
    const Var& b = params.at(bias_name(prefix, i));
    if (w.rows() != arch.layers[i].width || w.cols() != fan_in || b.rows() != w.rows() ||
        b.cols() != 1) {
      throw ShapeError("parameter shapes of '" + prefix + "' do not match " + arch.to_string());
    }
    m.weights.push_back(w);
    m.biases.push_back(b);
    fan_in = arch.layers[i].width;
  }
  return m;
}

/// Forward pass with the intermediate values kept for input gradients.
struct MlpTrace {
  const BoundMlp* net = nullptr;
  std::vector<Var> pre;   // pre-activation of each layer
  std::vector<Var> post;  // activation output of each layer
  Var output() const { return post.back(); }
};

inline Var activate(const Var& x, Activation a) {
  switch (a) {
    case Activation::kTanh:
      return tanh(x);
    case Activation::kSoftplus:
      return softplus(x);
    case Activation::kLinear:
      return x;
  }
  return x;
}

inline MlpTrace mlp_trace(const BoundMlp& net, const Var& x) {
  if (x.rows() != net.arch.input) {
    throw ShapeError("mlp input has " + std::to_string(x.rows()) + " rows, architecture " +
                     net.arch.to_string() + " expects " + std::to_string(net.arch.input));
  }
  if (!x.value().allFinite()) throw NumericError("non-finite network input");
  MlpTrace tr;
  tr.net = &net;
  Var h = x;
  for (std::size_t i = 0; i < net.arch.layers.size(); ++i) {
    Var pre = matmul(net.weights[i], h) + net.biases[i];
    h = activate(pre, net.arch.layers[i].activation);
    tr.pre.push_back(pre);
    tr.post.push_back(h);
  }
  return tr;
}

/// Batched forward pass; columns of `x` are independent samples.
inline Var mlp_forward(const BoundMlp& net, const Var& x) { return mlp_trace(net, x).output(); }

/// Vector-Jacobian product c^T (d net / d x), assembled from ordinary graph
/// operations so it can be differentiated again with respect to parameters.
inline Var mlp_vjp(const MlpTrace& tr, const Var& cotangent) {
  const BoundMlp& net = *tr.net;
  if (cotangent.rows() != net.arch.output()) throw ShapeError("cotangent has wrong row count");
  Var delta = cotangent;
  for (std::size_t k = net.arch.layers.size(); k-- > 0;) {
    switch (net.arch.layers[k].activation) {
      case Activation::kTanh:
        delta = delta * (1.0 - square(tr.post[k]));
        break;
      case Activation::kSoftplus:
        delta = delta * sigmoid(tr.pre[k]);
        break;
      case Activation::kLinear:
        break;
    }
    delta = matmul(transpose(net.weights[k]), delta);
  }
  return delta;
}

/// Gradient of a scalar-output network with respect to its input, one
/// column per sample, differentiable with respect to the parameters.
inline Var input_gradient_differentiable(const BoundMlp& net, const Var& x) {
  if (net.arch.output() != 1) throw ContractError("input gradient needs a scalar-output network");
  const MlpTrace tr = mlp_trace(net, x);
  return mlp_vjp(tr, constant_like(x, Matrix::Ones(1, x.cols())));
}

/// Plain evaluation of a single sample.
inline Eigen::VectorXd mlp_forward(const ParamSet& params, const std::string& prefix,
                                   const Architecture& arch, const Eigen::VectorXd& x) {
  const BoundParams bound(params, nullptr, false);
  const BoundMlp net = bind_mlp(bound, prefix, arch);
  return mlp_forward(net, Var(Matrix(x))).value();
}

}  // namespace phc::ad
