#pragma once

// Port-Hamiltonian systems on the tape, the structured neural model and the
// energy-shaping policy networks.
//
// States are stored column-wise: a batch of B phase states is a 2n x B block
// with generalized coordinates in rows [0, n) and momenta in rows [n, 2n).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "phc/autodiff.hpp"
#include "phc/mlp.hpp"

namespace phc {

using ad::Matrix;
using ad::Var;

/// One phase state z = (q, p).
struct PhaseState {
  Eigen::VectorXd q;
  Eigen::VectorXd p;

  int dof() const { return static_cast<int>(q.size()); }

  Eigen::VectorXd stacked() const {
    Eigen::VectorXd z(q.size() + p.size());
    z << q, p;
    return z;
  }

  static PhaseState from_stacked(const Eigen::VectorXd& z) {
    if (z.size() % 2 != 0) throw ad::ShapeError("phase state needs an even length");
    const Eigen::Index n = z.size() / 2;
    return {z.head(n), z.tail(n)};
  }

  bool valid() const { return q.size() == p.size() && q.allFinite() && p.allFinite(); }
};

inline Var positions(const Var& z) { return ad::slice_rows(z, 0, z.rows() / 2); }
inline Var momenta(const Var& z) { return ad::slice_rows(z, z.rows() / 2, z.rows() / 2); }

inline int tri_count(int n) { return n * (n + 1) / 2; }
inline int tri_index(int i, int j) { return i * (i + 1) / 2 + j; }  // j <= i

/// Small per-sample matrix; every entry is a 1 x B row (or a 1 x 1 value
/// shared by the whole batch).
class BatchMatrix {
 public:
  BatchMatrix(int rows, int cols)
      : rows_(rows), cols_(cols), entries_(static_cast<std::size_t>(rows * cols), Var(0.0)) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  Var& operator()(int i, int j) { return entries_[static_cast<std::size_t>(i * cols_ + j)]; }
  const Var& operator()(int i, int j) const {
    return entries_[static_cast<std::size_t>(i * cols_ + j)];
  }

  /// Dense value of one sample of the batch.
  Eigen::MatrixXd sample(Eigen::Index column) const {
    Eigen::MatrixXd m(rows_, cols_);
    for (int i = 0; i < rows_; ++i) {
      for (int j = 0; j < cols_; ++j) {
        const Matrix& v = (*this)(i, j).value();
        m(i, j) = v.cols() == 1 ? v(0, 0) : v(0, column);
      }
    }
    return m;
  }

 private:
  int rows_;
  int cols_;
  std::vector<Var> entries_;
};

/// A v, with v given as cols x B.
inline Var apply(const BatchMatrix& a, const Var& v) {
  if (v.rows() != a.cols()) throw ad::ShapeError("apply: dimension mismatch");
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(a.rows()));
  for (int i = 0; i < a.rows(); ++i) {
    Var acc = a(i, 0) * ad::row(v, 0);
    for (int j = 1; j < a.cols(); ++j) acc = acc + a(i, j) * ad::row(v, j);
    out.push_back(acc);
  }
  return ad::concat_rows(out);
}

/// A^T v, with v given as rows x B.
inline Var apply_transpose(const BatchMatrix& a, const Var& v) {
  if (v.rows() != a.rows()) throw ad::ShapeError("apply_transpose: dimension mismatch");
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(a.cols()));
  for (int j = 0; j < a.cols(); ++j) {
    Var acc = a(0, j) * ad::row(v, 0);
    for (int i = 1; i < a.rows(); ++i) acc = acc + a(i, j) * ad::row(v, i);
    out.push_back(acc);
  }
  return ad::concat_rows(out);
}

struct StateGradient {
  Var dq;  // n x B
  Var dp;  // n x B
};

/// A port-Hamiltonian system
///   q' = dH/dp,  p' = -dH/dq - D(q) dH/dp + g(q) u
/// with H = 1/2 p^T M^{-1}(q) p + V(q), evaluated on a tape.
class BoundSystem {
 public:
  virtual ~BoundSystem() = default;

  virtual int dof() const = 0;
  virtual int inputs() const = 0;

  virtual BatchMatrix mass_inverse(const Var& q) const = 0;
  virtual Var potential(const Var& q) const = 0;
  virtual BatchMatrix input_matrix(const Var& q) const = 0;
  virtual BatchMatrix dissipation(const Var& q) const = 0;
  virtual StateGradient grad_hamiltonian(const Var& z) const = 0;

  virtual Var hamiltonian(const Var& z) const {
    const Var q = positions(z);
    const Var p = momenta(z);
    const Var kinetic = ad::sum_rows(p * apply(mass_inverse(q), p));
    return 0.5 * kinetic + potential(q);
  }

  /// Trainable parameters, if any.
  virtual const ad::BoundParams* params() const { return nullptr; }
};

/// Value-level description of a port-Hamiltonian system.
class PortHamiltonianSystem {
 public:
  virtual ~PortHamiltonianSystem() = default;
  virtual int dof() const = 0;
  virtual int inputs() const = 0;
  virtual std::unique_ptr<BoundSystem> bind(ad::Tape* tape, bool trainable = false) const = 0;
  virtual std::unique_ptr<PortHamiltonianSystem> clone() const = 0;
  virtual ad::ParamSet* mutable_parameters() { return nullptr; }
  virtual const ad::ParamSet* parameters() const { return nullptr; }
};

/// f(z, u) = [dH/dp ; -dH/dq - D dH/dp + g u].
inline Var vector_field(const BoundSystem& sys, const Var& z, const Var& u) {
  if (z.rows() != 2 * sys.dof()) throw ad::ShapeError("vector_field: state dimension mismatch");
  if (u.rows() != sys.inputs()) throw ad::ShapeError("vector_field: input dimension mismatch");
  const StateGradient g = sys.grad_hamiltonian(z);
  const Var q = positions(z);
  const Var pdot = -g.dq - apply(sys.dissipation(q), g.dp) + apply(sys.input_matrix(q), u);
  return ad::concat_rows({g.dp, pdot});
}

// --- single-sample helpers -------------------------------------------------

inline Eigen::MatrixXd mass_inverse(const PortHamiltonianSystem& sys, const Eigen::VectorXd& q) {
  return sys.bind(nullptr)->mass_inverse(Var(Matrix(q))).sample(0);
}

inline double potential(const PortHamiltonianSystem& sys, const Eigen::VectorXd& q) {
  return sys.bind(nullptr)->potential(Var(Matrix(q))).value()(0, 0);
}

inline Eigen::MatrixXd input_matrix(const PortHamiltonianSystem& sys, const Eigen::VectorXd& q) {
  return sys.bind(nullptr)->input_matrix(Var(Matrix(q))).sample(0);
}

inline Eigen::MatrixXd dissipation(const PortHamiltonianSystem& sys, const Eigen::VectorXd& q) {
  return sys.bind(nullptr)->dissipation(Var(Matrix(q))).sample(0);
}

inline double hamiltonian(const PortHamiltonianSystem& sys, const Eigen::VectorXd& z) {
  return sys.bind(nullptr)->hamiltonian(Var(Matrix(z))).value()(0, 0);
}

inline Eigen::VectorXd grad_hamiltonian(const PortHamiltonianSystem& sys,
                                        const Eigen::VectorXd& z) {
  const StateGradient g = sys.bind(nullptr)->grad_hamiltonian(Var(Matrix(z)));
  Eigen::VectorXd out(z.size());
  out << g.dq.value().col(0), g.dp.value().col(0);
  return out;
}

inline Eigen::VectorXd vector_field(const PortHamiltonianSystem& sys, const Eigen::VectorXd& z,
                                    const Eigen::VectorXd& u) {
  return vector_field(*sys.bind(nullptr), Var(Matrix(z)), Var(Matrix(u))).value().col(0);
}

/// F(q) = [[0, I], [-I, -D(q)]].
inline Eigen::MatrixXd structure_matrix(const PortHamiltonianSystem& sys,
                                        const Eigen::VectorXd& q) {
  const Eigen::Index n = q.size();
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  f.topRightCorner(n, n).setIdentity();
  f.bottomLeftCorner(n, n) = -Eigen::MatrixXd::Identity(n, n);
  f.bottomRightCorner(n, n) = -dissipation(sys, q);
  return f;
}

/// G(q) = [0; g(q)].
inline Eigen::MatrixXd full_input_matrix(const PortHamiltonianSystem& sys,
                                         const Eigen::VectorXd& q) {
  const Eigen::Index n = q.size();
  const Eigen::MatrixXd g = input_matrix(sys, q);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(2 * n, g.cols());
  out.bottomRows(n) = g;
  return out;
}

// --- structured neural model -------------------------------------------------

struct ModelConfig {
  int dof = 1;
  int inputs = 1;
  bool angle_features = false;  // feed (cos q, sin q) instead of q
  bool learn_damping = true;
  double mass_floor = 1e-6;
  double damping_floor = 0.0;
  ad::Architecture mass_net;
  ad::Architecture potential_net;
  ad::Architecture input_net;
  ad::Architecture damping_net;

  int feature_dim() const { return angle_features ? 2 * dof : dof; }

  void validate() const {
    const int f = feature_dim();
    auto check = [f](const ad::Architecture& a, int out, const char* what) {
      if (a.input != f || a.output() != out) {
        throw ad::ShapeError(std::string(what) + " network " + a.to_string() + " must map " +
                             std::to_string(f) + " -> " + std::to_string(out));
      }
    };
    check(mass_net, tri_count(dof), "mass");
    check(potential_net, 1, "potential");
    check(input_net, dof * inputs, "input");
    if (learn_damping) check(damping_net, tri_count(dof), "damping");
  }

  /// Reduced widths for desk-scale runs.
  static ModelConfig desk(int dof, int inputs, bool angle_features = false) {
    ModelConfig c;
    c.dof = dof;
    c.inputs = inputs;
    c.angle_features = angle_features;
    const std::string f = std::to_string(c.feature_dim());
    const std::string tri = std::to_string(tri_count(dof));
    c.mass_net = ad::Architecture::parse(f + "-32 tanh-32 tanh-" + tri);
    c.potential_net = ad::Architecture::parse(f + "-50 tanh-50 tanh-1");
    c.input_net = ad::Architecture::parse(f + "-16 tanh-" + std::to_string(dof * inputs));
    c.damping_net = ad::Architecture::parse(f + "-16 tanh-" + tri);
    return c;
  }

  /// Published widths.
  static ModelConfig paper(int dof, int inputs, bool angle_features = false) {
    ModelConfig c;
    c.dof = dof;
    c.inputs = inputs;
    c.angle_features = angle_features;
    const std::string f = std::to_string(c.feature_dim());
    const std::string tri = std::to_string(tri_count(dof));
    c.mass_net = ad::Architecture::parse(f + "-300 tanh-300 tanh-300 tanh-" + tri);
    c.potential_net = ad::Architecture::parse(f + "-50 tanh-50 tanh-1");
    c.input_net =
        ad::Architecture::parse(f + "-400 tanh-400 tanh-" + std::to_string(dof * inputs));
    c.damping_net = ad::Architecture::parse(f + "-50 tanh-50 tanh-" + tri);
    return c;
  }
};

class BoundStructuredModel final : public BoundSystem {
 public:
  BoundStructuredModel(const ModelConfig& cfg, double anchor, const ad::ParamSet& params,
                       ad::Tape* tape, bool trainable)
      : cfg_(cfg), anchor_(anchor), params_(params, tape, trainable) {
    mass_ = ad::bind_mlp(params_, "mass", cfg_.mass_net);
    potential_ = ad::bind_mlp(params_, "potential", cfg_.potential_net);
    input_ = ad::bind_mlp(params_, "input", cfg_.input_net);
    if (cfg_.learn_damping) damping_ = ad::bind_mlp(params_, "damping", cfg_.damping_net);
  }

  int dof() const override { return cfg_.dof; }
  int inputs() const override { return cfg_.inputs; }
  const ad::BoundParams* params() const override { return &params_; }

  BatchMatrix mass_inverse(const Var& q) const override {
    return gram(ad::mlp_forward(mass_, features(q)), cfg_.mass_floor);
  }

  Var potential(const Var& q) const override {
    const Var v = ad::mlp_forward(potential_, features(q));
    return anchor_ == 0.0 ? v : v - anchor_;
  }

  BatchMatrix input_matrix(const Var& q) const override {
    const Var out = ad::mlp_forward(input_, features(q));
    BatchMatrix g(cfg_.dof, cfg_.inputs);
    for (int i = 0; i < cfg_.dof; ++i) {
      for (int j = 0; j < cfg_.inputs; ++j) g(i, j) = ad::row(out, i * cfg_.inputs + j);
    }
    return g;
  }

  BatchMatrix dissipation(const Var& q) const override {
    if (!cfg_.learn_damping) {
      BatchMatrix d(cfg_.dof, cfg_.dof);
      for (int i = 0; i < cfg_.dof; ++i) d(i, i) = Var(cfg_.damping_floor);
      return d;
    }
    return gram(ad::mlp_forward(damping_, features(q)), cfg_.damping_floor);
  }

  Var hamiltonian(const Var& z) const override {
    const Var q = positions(z);
    const Var p = momenta(z);
    const Var l = ad::mlp_forward(mass_, features(q));
    Var kinetic = ad::sum_rows(ad::square(times_factor(l, p)));
    if (cfg_.mass_floor != 0.0) kinetic = kinetic + cfg_.mass_floor * ad::sum_rows(ad::square(p));
    return 0.5 * kinetic + potential(q);
  }

  StateGradient grad_hamiltonian(const Var& z) const override {
    const int n = cfg_.dof;
    const Var q = positions(z);
    const Var p = momenta(z);
    const Var x = features(q);
    const ad::MlpTrace mass = ad::mlp_trace(mass_, x);
    const Var l = mass.output();
    const Var w = times_factor(l, p);  // L p

    // dH/dp = L^T L p + floor p
    std::vector<Var> dp_rows;
    for (int j = 0; j < n; ++j) {
      Var acc = ad::row(l, tri_index(j, j)) * ad::row(w, j);
      for (int i = j + 1; i < n; ++i) acc = acc + ad::row(l, tri_index(i, j)) * ad::row(w, i);
      if (cfg_.mass_floor != 0.0) acc = acc + cfg_.mass_floor * ad::row(p, j);
      dp_rows.push_back(acc);
    }

    // d(1/2 |L p|^2)/dL_ij = (Lp)_i p_j, pulled back through the mass network.
    std::vector<Var> cot(static_cast<std::size_t>(tri_count(n)));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j <= i; ++j) {
        cot[static_cast<std::size_t>(tri_index(i, j))] = ad::row(w, i) * ad::row(p, j);
      }
    }
    const Var gx = ad::mlp_vjp(mass, ad::concat_rows(cot)) +
                   ad::input_gradient_differentiable(potential_, x);
    return {features_vjp(q, gx), ad::concat_rows(dp_rows)};
  }

 private:
  Var features(const Var& q) const {
    if (!cfg_.angle_features) return q;
    return ad::concat_rows({ad::cos(q), ad::sin(q)});
  }

  Var features_vjp(const Var& q, const Var& gx) const {
    if (!cfg_.angle_features) return gx;
    const int n = cfg_.dof;
    return -ad::sin(q) * ad::slice_rows(gx, 0, n) + ad::cos(q) * ad::slice_rows(gx, n, n);
  }

  // (L p)_i = sum_{j <= i} L_ij p_j with L lower triangular, row-major packed.
  Var times_factor(const Var& l, const Var& p) const {
    const int n = cfg_.dof;
    std::vector<Var> rows;
    for (int i = 0; i < n; ++i) {
      Var acc = ad::row(l, tri_index(i, 0)) * ad::row(p, 0);
      for (int j = 1; j <= i; ++j) acc = acc + ad::row(l, tri_index(i, j)) * ad::row(p, j);
      rows.push_back(acc);
    }
    return ad::concat_rows(rows);
  }

  // L^T L + floor I from packed lower-triangular rows.
  BatchMatrix gram(const Var& l, double floor) const {
    const int n = cfg_.dof;
    BatchMatrix m(n, n);
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b <= a; ++b) {
        Var acc = ad::row(l, tri_index(a, a)) * ad::row(l, tri_index(a, b));
        for (int i = a + 1; i < n; ++i) {
          acc = acc + ad::row(l, tri_index(i, a)) * ad::row(l, tri_index(i, b));
        }
        if (a == b && floor != 0.0) acc = acc + floor;
        m(a, b) = acc;
        m(b, a) = acc;
      }
    }
    return m;
  }

  ModelConfig cfg_;
  double anchor_;
  ad::BoundParams params_;
  ad::BoundMlp mass_, potential_, input_, damping_;
};

/// Learned port-Hamiltonian model: mass-inverse Cholesky factor, potential,
/// input map and dissipation, each a fully connected network of q.
class StructuredPHModel final : public PortHamiltonianSystem {
 public:
  StructuredPHModel() = default;
  StructuredPHModel(ModelConfig cfg, std::uint64_t seed) : config(std::move(cfg)), seed(seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    ad::init_mlp(params, "mass", config.mass_net, rng);
    ad::init_mlp(params, "potential", config.potential_net, rng);
    ad::init_mlp(params, "input", config.input_net, rng);
    if (config.learn_damping) ad::init_mlp(params, "damping", config.damping_net, rng);
  }

  int dof() const override { return config.dof; }
  int inputs() const override { return config.inputs; }

  std::unique_ptr<BoundSystem> bind(ad::Tape* tape, bool trainable = false) const override {
    return std::make_unique<BoundStructuredModel>(config, anchor, params, tape, trainable);
  }

  std::unique_ptr<PortHamiltonianSystem> clone() const override {
    return std::make_unique<StructuredPHModel>(*this);
  }

  ad::ParamSet* mutable_parameters() override { return &params; }
  const ad::ParamSet* parameters() const override { return &params; }

  /// Shifts the potential so that potential(0) equals `reference`.
  void anchor_potential(double reference) {
    anchor = 0.0;
    const double raw = phc::potential(*this, Eigen::VectorXd::Zero(config.dof));
    anchor = raw - reference;
  }

  ModelConfig config;
  ad::ParamSet params;
  double anchor = 0.0;
  std::uint64_t seed = 0;
};

// --- energy-shaping policy ---------------------------------------------------

struct PolicyConfig {
  int dof = 1;
  int inputs = 1;
  ad::Architecture potential_net;  // q -> V*(q)
  ad::Architecture damping_net;    // (t, q, p) -> diagonal of K*
  double kappa = 1e-4;
  Eigen::VectorXd target;  // z_d

  void validate() const {
    if (potential_net.input != dof || potential_net.output() != 1) {
      throw ad::ShapeError("added-potential network must map " + std::to_string(dof) + " -> 1");
    }
    if (damping_net.input != 1 + 2 * dof || damping_net.output() != inputs) {
      throw ad::ShapeError("damping network must map " + std::to_string(1 + 2 * dof) + " -> " +
                           std::to_string(inputs));
    }
    if (kappa < 0.0) throw ad::ShapeError("kappa must be non-negative");
    if (target.size() != 2 * dof) throw ad::ShapeError("target must have 2n entries");
  }

  static PolicyConfig desk(int dof, int inputs, Eigen::VectorXd target) {
    PolicyConfig c;
    c.dof = dof;
    c.inputs = inputs;
    c.target = std::move(target);
    const std::string n = std::to_string(dof);
    c.potential_net = ad::Architecture::parse(n + "-32 softplus-32 softplus-32 tanh-1");
    c.damping_net = ad::Architecture::parse(std::to_string(1 + 2 * dof) +
                                            "-32 softplus-32 softplus-" + std::to_string(inputs) +
                                            " softplus");
    return c;
  }

  static PolicyConfig paper(int dof, int inputs, Eigen::VectorXd target) {
    PolicyConfig c = desk(dof, inputs, std::move(target));
    const std::string n = std::to_string(dof);
    c.potential_net = ad::Architecture::parse(n + "-64 softplus-64 softplus-64 tanh-1");
    c.damping_net = ad::Architecture::parse(std::to_string(1 + 2 * dof) +
                                            "-64 softplus-64 softplus-" + std::to_string(inputs) +
                                            " softplus");
    return c;
  }
};

class BoundPolicy {
 public:
  BoundPolicy(const PolicyConfig& cfg, const ad::ParamSet& params, ad::Tape* tape, bool trainable)
      : cfg_(cfg), params_(params, tape, trainable) {
    potential_ = ad::bind_mlp(params_, "shaping", cfg_.potential_net);
    damping_ = ad::bind_mlp(params_, "injection", cfg_.damping_net);
  }

  int dof() const { return cfg_.dof; }
  int inputs() const { return cfg_.inputs; }
  const PolicyConfig& config() const { return cfg_; }
  const ad::BoundParams& params() const { return params_; }

  Var added_potential(const Var& q) const { return ad::mlp_forward(potential_, q); }

  Var grad_added_potential(const Var& q) const {
    return ad::input_gradient_differentiable(potential_, q);
  }

  /// Diagonal of K*(t, z) as an m x B block: softplus outputs plus kappa.
  Var damping_gain(double t, const Var& z) const {
    const Var time = ad::constant_like(z, Matrix::Constant(1, z.cols(), t));
    Var out = ad::mlp_forward(damping_, ad::concat_rows({time, z}));
    if (cfg_.damping_net.layers.back().activation != ad::Activation::kSoftplus) {
      out = ad::softplus(out);
    }
    return cfg_.kappa == 0.0 ? out : out + cfg_.kappa;
  }

 private:
  PolicyConfig cfg_;
  ad::BoundParams params_;
  ad::BoundMlp potential_;
  ad::BoundMlp damping_;
};

/// Added potential V*(q) and damping injection K*(t, z) with K* >= kappa I.
class EnergyShapingPolicy {
 public:
  EnergyShapingPolicy() = default;
  EnergyShapingPolicy(PolicyConfig cfg, std::uint64_t seed) : config(std::move(cfg)), seed(seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    ad::init_mlp(params, "shaping", config.potential_net, rng);
    ad::init_mlp(params, "injection", config.damping_net, rng);
  }

  BoundPolicy bind(ad::Tape* tape, bool trainable = false) const {
    return BoundPolicy(config, params, tape, trainable);
  }

  double added_potential(const Eigen::VectorXd& q) const {
    return bind(nullptr).added_potential(Var(Matrix(q))).value()(0, 0);
  }

  Eigen::MatrixXd damping_gain(double t, const Eigen::VectorXd& z) const {
    return bind(nullptr).damping_gain(t, Var(Matrix(z))).value().col(0).asDiagonal();
  }

  PolicyConfig config;
  ad::ParamSet params;
  std::uint64_t seed = 0;
};

}  // namespace phc
