#pragma once

// Reverse-mode automatic differentiation over batched dense blocks.
//
// Every node holds a rows x cols block. Neural-network code uses the column
// axis as the batch axis, so a single tape records a whole batch of samples
// with one matrix product per layer. Nodes are appended in creation order,
// which is a topological order, and the reverse sweep walks them backwards.
//
// Second-order quantities (e.g. the gradient of a loss that itself contains
// an input gradient) are obtained by building the inner gradient explicitly
// out of ordinary graph operations (see mlp.hpp) and sweeping once.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace phc::ad {

using Matrix = Eigen::MatrixXd;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,
  kMatMul,
  kTranspose,
  kTanh,
  kSigmoid,
  kSoftplus,
  kRelu,
  kLog,
  kExp,
  kSin,
  kCos,
  kReciprocal,
  kPower,
  kSquare,
  kSqrt,
  kAbs,
  kWrapAngle,
  kSum,
  kSumRows,
  kSumCols,
  kSliceRows,
  kConcatRows,
};

struct Node {
  Matrix value;
  Matrix adjoint;  // empty until reached by a reverse sweep
  std::vector<int> parents;
  Op op = Op::kConstant;
  double scalar = 0.0;  // scale factor or exponent
  int offset = 0;       // first row of a slice
  bool requires_grad = false;
};

class Tape;

/// Handle to a value. Either a node on a tape, or a detached value when no
/// tape is in use (pure evaluation, nothing recorded).
class Var {
 public:
  Var() = default;
  explicit Var(Matrix value) : detached_(std::make_shared<const Matrix>(std::move(value))) {}
  explicit Var(double value) : Var(Matrix::Constant(1, 1, value)) {}

  bool valid() const { return tape_ != nullptr || detached_ != nullptr; }

  /// True when both handles refer to the same recorded node or detached value.
  bool same(const Var& other) const {
    if (tape_ != nullptr) return tape_ == other.tape_ && index_ == other.index_;
    return other.tape_ == nullptr && detached_ != nullptr && detached_ == other.detached_;
  }
  Tape* tape() const { return tape_; }
  int index() const { return index_; }

  inline const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

  double scalar() const {
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) {
      throw ShapeError("scalar(): value is " + std::to_string(v.rows()) + "x" +
                       std::to_string(v.cols()));
    }
    return v(0, 0);
  }

 private:
  friend class Tape;
  Var(Tape* tape, int index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  int index_ = -1;
  std::shared_ptr<const Matrix> detached_;
};

namespace detail {

inline Eigen::Index broadcast_dim(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw ShapeError(std::string("incompatible shapes in ") + what + ": " + std::to_string(a) +
                   " vs " + std::to_string(b));
}

inline Matrix broadcast(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.rows() == 1 && m.cols() == 1) return Matrix::Constant(rows, cols, m(0, 0));
  if (m.rows() == 1 && m.cols() == cols) return m.replicate(rows, 1);
  if (m.cols() == 1 && m.rows() == rows) return m.replicate(1, cols);
  throw ShapeError("cannot broadcast " + std::to_string(m.rows()) + "x" +
                   std::to_string(m.cols()) + " to " + std::to_string(rows) + "x" +
                   std::to_string(cols));
}

// Sum a gradient over the axes along which `rows x cols` was broadcast.
inline Matrix reduce_to(const Matrix& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1 && cols == g.cols()) return g.colwise().sum();
  if (cols == 1 && rows == g.rows()) return g.rowwise().sum();
  throw ShapeError("cannot reduce gradient to parent shape");
}

inline double softplus(double x) {
  if (x > 20.0) return x;
  if (x < -20.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double wrap_angle(double x) { return std::atan2(std::sin(x), std::cos(x)); }

}  // namespace detail

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value) {
    Node n;
    n.value = std::move(value);
    n.op = Op::kLeaf;
    n.requires_grad = true;
    return push(std::move(n));
  }

  Var constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    n.op = Op::kConstant;
    return push(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
  const Matrix& value(int i) const { return nodes_[static_cast<std::size_t>(i)].value; }

  /// Places `v` on this tape, recording detached values as constants.
  Var lift(const Var& v) {
    if (!v.valid()) throw ContractError("use of an empty Var");
    if (v.tape_ == this) return v;
    if (v.tape_ != nullptr) throw ContractError("Var belongs to a different tape");
    return constant(*v.detached_);
  }

  Var record(Op op, Matrix value, std::vector<int> parents, double scalar = 0.0, int offset = 0) {
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.scalar = scalar;
    n.offset = offset;
    for (int p : parents) {
      if (nodes_[static_cast<std::size_t>(p)].requires_grad) n.requires_grad = true;
    }
    n.parents = std::move(parents);
    return push(std::move(n));
  }

  void zero_adjoints() {
    for (auto& n : nodes_) n.adjoint.resize(0, 0);
  }

  /// Reverse sweep from a scalar root; the root's adjoint is set to 1.
  void backward(const Var& root) {
    if (root.tape() != this) throw ContractError("backward(): root is not on this tape");
    if (root.rows() != 1 || root.cols() != 1) {
      throw ContractError("backward(): root must be a scalar (1x1) node");
    }
    zero_adjoints();
    nodes_[static_cast<std::size_t>(root.index())].adjoint = Matrix::Ones(1, 1);
    sweep(root.index());
  }

  /// Reverse sweep from several seeded nodes (vector-Jacobian product).
  void backward(std::span<const std::pair<Var, Matrix>> seeds) {
    zero_adjoints();
    int start = -1;
    for (const auto& [v, seed] : seeds) {
      if (v.tape() != this) throw ContractError("backward(): seed is not on this tape");
      Node& n = nodes_[static_cast<std::size_t>(v.index())];
      if (seed.rows() != n.value.rows() || seed.cols() != n.value.cols()) {
        throw ShapeError("backward(): seed shape does not match node");
      }
      if (!n.requires_grad) continue;
      if (n.adjoint.size() == 0) {
        n.adjoint = seed;
      } else {
        n.adjoint += seed;
      }
      start = std::max(start, v.index());
    }
    if (start >= 0) sweep(start);
  }

  /// Adjoint of `v` after a sweep; zero when the node was not reached.
  Matrix adjoint(const Var& v) const {
    if (v.tape() != this) throw ContractError("adjoint(): Var is not on this tape");
    const Node& n = nodes_[static_cast<std::size_t>(v.index())];
    if (n.adjoint.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.adjoint;
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  bool wants(int idx) const { return nodes_[static_cast<std::size_t>(idx)].requires_grad; }

  void accumulate(int idx, const Matrix& g) {
    Node& p = nodes_[static_cast<std::size_t>(idx)];
    if (!p.requires_grad) return;
    if (p.adjoint.size() == 0) {
      p.adjoint = detail::reduce_to(g, p.value.rows(), p.value.cols());
    } else if (g.rows() == p.value.rows() && g.cols() == p.value.cols()) {
      p.adjoint += g;
    } else {
      p.adjoint += detail::reduce_to(g, p.value.rows(), p.value.cols());
    }
  }

  void sweep(int start);

  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const {
  if (tape_ != nullptr) return tape_->value(index_);
  if (!detached_) throw ContractError("value() of an empty Var");
  return *detached_;
}

inline void Tape::sweep(int start) {
  for (int i = start; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.adjoint.size() == 0 || n.parents.empty()) continue;
    const Matrix& g = n.adjoint;
    const int a = n.parents[0];
    const int b = n.parents.size() > 1 ? n.parents[1] : -1;
    const Matrix& va = nodes_[static_cast<std::size_t>(a)].value;
    auto arr = [](const Matrix& m) { return m.array(); };
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd:
        accumulate(a, g);
        accumulate(b, g);
        break;
      case Op::kSub:
        accumulate(a, g);
        if (wants(b)) accumulate(b, -g);
        break;
      case Op::kMul: {
        const Matrix& vb = nodes_[static_cast<std::size_t>(b)].value;
        if (wants(a)) {
          accumulate(a, (arr(g) * arr(detail::broadcast(vb, g.rows(), g.cols()))).matrix());
        }
        if (wants(b)) {
          accumulate(b, (arr(g) * arr(detail::broadcast(va, g.rows(), g.cols()))).matrix());
        }
        break;
      }
      case Op::kDiv: {
        const Matrix vb = detail::broadcast(nodes_[static_cast<std::size_t>(b)].value, g.rows(),
                                            g.cols());
        if (wants(a)) accumulate(a, (arr(g) / arr(vb)).matrix());
        if (wants(b)) accumulate(b, (-arr(g) * arr(n.value) / arr(vb)).matrix());
        break;
      }
      case Op::kNeg:
        accumulate(a, -g);
        break;
      case Op::kScale:
        accumulate(a, n.scalar * g);
        break;
      case Op::kMatMul: {
        const Matrix& vb = nodes_[static_cast<std::size_t>(b)].value;
        if (wants(a)) accumulate(a, g * vb.transpose());
        if (wants(b)) accumulate(b, va.transpose() * g);
        break;
      }
      case Op::kTranspose:
        accumulate(a, g.transpose());
        break;
      case Op::kTanh:
        accumulate(a, (arr(g) * (1.0 - arr(n.value).square())).matrix());
        break;
      case Op::kSigmoid:
        accumulate(a, (arr(g) * arr(n.value) * (1.0 - arr(n.value))).matrix());
        break;
      case Op::kSoftplus:
        accumulate(a, (arr(g) * va.unaryExpr([](double x) { return detail::sigmoid(x); }).array())
                          .matrix());
        break;
      case Op::kRelu:
        accumulate(a, (arr(g) * (arr(va) > 0.0).cast<double>()).matrix());
        break;
      case Op::kLog:
        accumulate(a, (arr(g) / arr(va)).matrix());
        break;
      case Op::kExp:
        accumulate(a, (arr(g) * arr(n.value)).matrix());
        break;
      case Op::kSin:
        accumulate(a, (arr(g) * arr(va).cos()).matrix());
        break;
      case Op::kCos:
        accumulate(a, (-arr(g) * arr(va).sin()).matrix());
        break;
      case Op::kReciprocal:
        accumulate(a, (-arr(g) * arr(n.value).square()).matrix());
        break;
      case Op::kPower:
        accumulate(a, (arr(g) * n.scalar * arr(va).pow(n.scalar - 1.0)).matrix());
        break;
      case Op::kSquare:
        accumulate(a, (2.0 * arr(g) * arr(va)).matrix());
        break;
      case Op::kSqrt:
        accumulate(a, (arr(g) / (2.0 * arr(n.value))).matrix());
        break;
      case Op::kAbs:
        accumulate(a, (arr(g) * arr(va).sign()).matrix());
        break;
      case Op::kWrapAngle:
        accumulate(a, g);
        break;
      case Op::kSum:
        accumulate(a, Matrix::Constant(va.rows(), va.cols(), g(0, 0)));
        break;
      case Op::kSumRows:
        accumulate(a, g.replicate(va.rows(), 1));
        break;
      case Op::kSumCols:
        accumulate(a, g.replicate(1, va.cols()));
        break;
      case Op::kSliceRows: {
        Node& p = nodes_[static_cast<std::size_t>(a)];
        if (!p.requires_grad) break;
        if (p.adjoint.size() == 0) p.adjoint = Matrix::Zero(p.value.rows(), p.value.cols());
        p.adjoint.middleRows(n.offset, g.rows()) += g;
        break;
      }
      case Op::kConcatRows: {
        Eigen::Index row = 0;
        for (int p : n.parents) {
          const Eigen::Index r = nodes_[static_cast<std::size_t>(p)].value.rows();
          if (wants(p)) accumulate(p, g.middleRows(row, r));
          row += r;
        }
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Operations. Binary elementwise operations broadcast 1x1, 1xC and Rx1
// operands. `*` and `/` are elementwise; use matmul() for matrix products.

namespace detail {

inline Tape* common_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) throw ContractError("use of an empty Var");
  Tape* ta = a.tape();
  Tape* tb = b.tape();
  if (ta != nullptr && tb != nullptr && ta != tb) {
    throw ContractError("operands belong to different tapes");
  }
  return ta != nullptr ? ta : tb;
}

template <class F>
Var unary(const Var& a, Op op, F&& f, double scalar = 0.0) {
  if (!a.valid()) throw ContractError("use of an empty Var");
  Matrix out = f(a.value());
  Tape* t = a.tape();
  if (t == nullptr) return Var(std::move(out));
  return t->record(op, std::move(out), {a.index()}, scalar);
}

template <class F>
Var binary(const Var& a, const Var& b, Op op, const char* what, F&& f) {
  Tape* t = common_tape(a, b);
  const Matrix& va = a.value();
  const Matrix& vb = b.value();
  const Eigen::Index r = broadcast_dim(va.rows(), vb.rows(), what);
  const Eigen::Index c = broadcast_dim(va.cols(), vb.cols(), what);
  Matrix out;
  if (va.rows() == r && va.cols() == c && vb.rows() == r && vb.cols() == c) {
    out = f(va.array(), vb.array());
  } else {
    out = f(broadcast(va, r, c).array(), broadcast(vb, r, c).array());
  }
  if (t == nullptr) return Var(std::move(out));
  const Var la = t->lift(a);
  const Var lb = t->lift(b);
  return t->record(op, std::move(out), {la.index(), lb.index()});
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::binary(a, b, Op::kAdd, "add",
                        [](const auto& x, const auto& y) -> Matrix { return (x + y).matrix(); });
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::binary(a, b, Op::kSub, "sub",
                        [](const auto& x, const auto& y) -> Matrix { return (x - y).matrix(); });
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary(a, b, Op::kMul, "mul",
                        [](const auto& x, const auto& y) -> Matrix { return (x * y).matrix(); });
}
inline Var operator/(const Var& a, const Var& b) {
  return detail::binary(a, b, Op::kDiv, "div",
                        [](const auto& x, const auto& y) -> Matrix { return (x / y).matrix(); });
}

inline Var operator-(const Var& a) {
  return detail::unary(a, Op::kNeg, [](const Matrix& x) -> Matrix { return -x; });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(a, Op::kScale, [s](const Matrix& x) -> Matrix { return s * x; }, s);
}

inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator/(const Var& a, double s) { return scale(a, 1.0 / s); }
inline Var operator+(const Var& a, double s) { return a + Var(s); }
inline Var operator+(double s, const Var& a) { return Var(s) + a; }
inline Var operator-(const Var& a, double s) { return a - Var(s); }
inline Var operator-(double s, const Var& a) { return Var(s) - a; }

inline Var matmul(const Var& a, const Var& b) {
  Tape* t = detail::common_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out = a.value() * b.value();
  if (t == nullptr) return Var(std::move(out));
  const Var la = t->lift(a);
  const Var lb = t->lift(b);
  return t->record(Op::kMatMul, std::move(out), {la.index(), lb.index()});
}

inline Var transpose(const Var& a) {
  return detail::unary(a, Op::kTranspose, [](const Matrix& x) -> Matrix { return x.transpose(); });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, Op::kTanh, [](const Matrix& x) -> Matrix { return x.array().tanh(); });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, Op::kSigmoid, [](const Matrix& x) -> Matrix {
    return x.unaryExpr([](double v) { return detail::sigmoid(v); });
  });
}

/// log(1 + exp(x)), evaluated in the overflow-safe branch form for |x| > 20.
inline Var softplus(const Var& a) {
  return detail::unary(a, Op::kSoftplus, [](const Matrix& x) -> Matrix {
    return x.unaryExpr([](double v) { return detail::softplus(v); });
  });
}

inline Var relu(const Var& a) {
  return detail::unary(a, Op::kRelu,
                       [](const Matrix& x) -> Matrix { return x.array().max(0.0).matrix(); });
}

inline Var log(const Var& a) {
  return detail::unary(a, Op::kLog, [](const Matrix& x) -> Matrix { return x.array().log(); });
}

inline Var exp(const Var& a) {
  return detail::unary(a, Op::kExp, [](const Matrix& x) -> Matrix { return x.array().exp(); });
}

inline Var sin(const Var& a) {
  return detail::unary(a, Op::kSin, [](const Matrix& x) -> Matrix { return x.array().sin(); });
}

inline Var cos(const Var& a) {
  return detail::unary(a, Op::kCos, [](const Matrix& x) -> Matrix { return x.array().cos(); });
}

inline Var reciprocal(const Var& a) {
  return detail::unary(a, Op::kReciprocal,
                       [](const Matrix& x) -> Matrix { return x.array().inverse(); });
}

inline Var pow(const Var& a, double p) {
  return detail::unary(
      a, Op::kPower, [p](const Matrix& x) -> Matrix { return x.array().pow(p); }, p);
}

inline Var square(const Var& a) {
  return detail::unary(a, Op::kSquare, [](const Matrix& x) -> Matrix { return x.array().square(); });
}

inline Var sqrt(const Var& a) {
  return detail::unary(a, Op::kSqrt, [](const Matrix& x) -> Matrix { return x.array().sqrt(); });
}

/// |x| with subgradient 0 at the origin.
inline Var abs(const Var& a) {
  return detail::unary(a, Op::kAbs, [](const Matrix& x) -> Matrix { return x.array().abs(); });
}

/// Maps an angle to (-pi, pi]; derivative 1 away from the branch cut.
inline Var wrap_angle(const Var& a) {
  return detail::unary(a, Op::kWrapAngle, [](const Matrix& x) -> Matrix {
    return x.unaryExpr([](double v) { return detail::wrap_angle(v); });
  });
}

/// Sum of all entries (1x1).
inline Var sum(const Var& a) {
  return detail::unary(a, Op::kSum,
                       [](const Matrix& x) -> Matrix { return Matrix::Constant(1, 1, x.sum()); });
}

/// Column sums: R x C -> 1 x C.
inline Var sum_rows(const Var& a) {
  return detail::unary(a, Op::kSumRows,
                       [](const Matrix& x) -> Matrix { return x.colwise().sum(); });
}

/// Row sums: R x C -> R x 1.
inline Var sum_cols(const Var& a) {
  return detail::unary(a, Op::kSumCols,
                       [](const Matrix& x) -> Matrix { return x.rowwise().sum(); });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (!a.valid()) throw ContractError("use of an empty Var");
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows out of range");
  }
  Matrix out = a.value().middleRows(start, count);
  Tape* t = a.tape();
  if (t == nullptr) return Var(std::move(out));
  return t->record(Op::kSliceRows, std::move(out), {a.index()}, 0.0, static_cast<int>(start));
}

inline Var row(const Var& a, Eigen::Index i) { return slice_rows(a, i, 1); }

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Tape* t = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = -1;
  for (const Var& p : parts) {
    if (!p.valid()) throw ContractError("use of an empty Var");
    if (p.tape() != nullptr) {
      if (t != nullptr && t != p.tape()) throw ContractError("operands on different tapes");
      t = p.tape();
    }
    if (cols < 0) cols = p.cols();
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  if (t == nullptr) return Var(std::move(out));
  std::vector<int> parents;
  parents.reserve(parts.size());
  for (const Var& p : parts) parents.push_back(t->lift(p).index());
  return t->record(Op::kConcatRows, std::move(out), std::move(parents));
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

/// Constant of the given shape on the same tape as `like` (or detached).
inline Var constant_like(const Var& like, Matrix value) {
  if (like.tape() != nullptr) return like.tape()->constant(std::move(value));
  return Var(std::move(value));
}

/// Gradients of a scalar node with respect to each leaf, via one reverse sweep.
inline std::vector<Matrix> grad(const Var& f, std::span<const Var> leaves) {
  if (f.tape() == nullptr) throw ContractError("grad(): function was not traced");
  if (f.rows() != 1 || f.cols() != 1) throw ContractError("grad(): root is not a scalar");
  Tape& t = *f.tape();
  t.backward(f);
  std::vector<Matrix> out;
  out.reserve(leaves.size());
  for (const Var& l : leaves) out.push_back(t.adjoint(l));
  return out;
}

inline std::vector<Matrix> grad(const Var& f, std::initializer_list<Var> leaves) {
  return grad(f, std::span<const Var>(leaves.begin(), leaves.size()));
}

}  // namespace phc::ad
