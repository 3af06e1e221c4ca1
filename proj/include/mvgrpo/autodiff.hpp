#pragma once

// Reverse-mode differentiation over vector-valued nodes.
//
// A Tape records nodes in creation order; each node owns its value and a
// backward closure that scatters its adjoint into its inputs. Since inputs
// always precede outputs, a reverse sweep over creation order is a valid
// topological order. Heavy primitives (the velocity network, the transition
// mean) register fused nodes with hand-written vector-Jacobian products.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvgrpo/error.hpp"

namespace mvgrpo::ad {

using Vec = std::vector<double>;

class Tape;

class Var {
 public:
  Var() = default;

  std::span<const double> value() const;
  double scalar() const;
  std::size_t size() const { return value().size(); }
  std::size_t index() const { return index_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Tape {
 public:
  // Receives the output adjoint and scatters into input adjoints via Tape::accumulate.
  using Backward = std::function<void(Tape&, std::span<const double> adjoint)>;

  Var constant(Vec value) { return push(std::move(value), nullptr, "constant"); }
  Var constant(double value) { return constant(Vec{value}); }

  // A differentiable leaf. Gradients are read back with gradient().
  Var leaf(Vec value) { return push(std::move(value), nullptr, "leaf"); }

  // Registers a node; throws NumericFailure naming `op` on a non-finite value.
  Var push(Vec value, Backward backward, const char* op) {
    for (double v : value)
      if (!std::isfinite(v)) throw NumericFailure(std::string("non-finite value in ") + op);
    nodes_.push_back(Node{std::move(value), {}, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  std::span<const double> value(const Var& v) const { return nodes_.at(v.index_).value; }

  void accumulate(const Var& v, std::span<const double> delta) {
    Node& n = nodes_.at(v.index_);
    if (n.adjoint.empty()) n.adjoint.assign(n.value.size(), 0.0);
    for (std::size_t i = 0; i < delta.size(); ++i) n.adjoint[i] += delta[i];
  }

  void accumulate(const Var& v, std::size_t i, double delta) {
    Node& n = nodes_.at(v.index_);
    if (n.adjoint.empty()) n.adjoint.assign(n.value.size(), 0.0);
    n.adjoint[i] += delta;
  }

  // Runs the reverse sweep from a scalar output. Adjoints are reset first.
  void backward(const Var& output) {
    if (output.size() != 1) throw InvalidInput("backward requires a scalar output");
    for (Node& n : nodes_) n.adjoint.clear();
    accumulate(output, 0, 1.0);
    for (std::size_t k = output.index_ + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (n.adjoint.empty() || !n.backward) continue;
      // Copy: the closure may append to other nodes' adjoints but never grows nodes_.
      const Vec adjoint = n.adjoint;
      n.backward(*this, adjoint);
    }
    for (const Node& n : nodes_)
      for (double g : n.adjoint)
        if (!std::isfinite(g)) throw NumericFailure("non-finite gradient in backward pass");
  }

  Vec gradient(const Var& v) const {
    const Node& n = nodes_.at(v.index_);
    if (n.adjoint.empty()) return Vec(n.value.size(), 0.0);
    return n.adjoint;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Vec value;
    Vec adjoint;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

inline std::span<const double> Var::value() const { return tape_->value(*this); }
inline double Var::scalar() const {
  auto v = value();
  if (v.size() != 1) throw InvalidInput("scalar() on a non-scalar node");
  return v[0];
}

namespace detail {
inline void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw InvalidInput("nodes from different tapes");
}
inline void require_same_size(const Var& a, const Var& b, const char* op) {
  if (a.size() != b.size()) throw InvalidInput(std::string("size mismatch in ") + op);
}
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  detail::require_same_size(a, b, "add");
  Vec out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return a.tape()->push(std::move(out), [a, b](Tape& t, std::span<const double> g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  }, "add");
}

inline Var operator-(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  detail::require_same_size(a, b, "sub");
  Vec out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return a.tape()->push(std::move(out), [a, b](Tape& t, std::span<const double> g) {
    t.accumulate(a, g);
    Vec neg(g.begin(), g.end());
    for (double& x : neg) x = -x;
    t.accumulate(b, neg);
  }, "sub");
}

inline Var operator*(double s, const Var& a) {
  Vec out(a.value().begin(), a.value().end());
  for (double& x : out) x *= s;
  return a.tape()->push(std::move(out), [a, s](Tape& t, std::span<const double> g) {
    Vec d(g.begin(), g.end());
    for (double& x : d) x *= s;
    t.accumulate(a, d);
  }, "scale");
}

inline Var operator+(const Var& a, double s) {
  Vec out(a.value().begin(), a.value().end());
  for (double& x : out) x += s;
  return a.tape()->push(std::move(out), [a](Tape& t, std::span<const double> g) { t.accumulate(a, g); },
                        "add_scalar");
}

inline Var operator-(const Var& a, double s) { return a + (-s); }

inline Var exp(const Var& a) {
  Vec out(a.value().begin(), a.value().end());
  for (double& x : out) x = std::exp(x);
  Vec saved = out;
  return a.tape()->push(std::move(out), [a, saved](Tape& t, std::span<const double> g) {
    Vec d(g.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * saved[i];
    t.accumulate(a, d);
  }, "exp");
}

inline Var log(const Var& a) {
  Vec out(a.value().begin(), a.value().end());
  for (double& x : out) x = std::log(x);
  Vec in(a.value().begin(), a.value().end());
  return a.tape()->push(std::move(out), [a, in](Tape& t, std::span<const double> g) {
    Vec d(g.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] / in[i];
    t.accumulate(a, d);
  }, "log");
}

// Elementwise clamp. Inside [lo, hi] (inclusive) the gradient passes through; outside it is zero.
inline Var clamp(const Var& a, double lo, double hi) {
  Vec out(a.value().begin(), a.value().end());
  std::vector<char> pass(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    pass[i] = out[i] >= lo && out[i] <= hi;
    out[i] = std::clamp(out[i], lo, hi);
  }
  return a.tape()->push(std::move(out), [a, pass](Tape& t, std::span<const double> g) {
    Vec d(g.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = pass[i] ? g[i] : 0.0;
    t.accumulate(a, d);
  }, "clamp");
}

// Elementwise minimum. Ties select `a`, so gradients follow the first branch.
inline Var minimum(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  detail::require_same_size(a, b, "minimum");
  Vec out(a.size());
  std::vector<char> take_a(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    take_a[i] = a.value()[i] <= b.value()[i];
    out[i] = take_a[i] ? a.value()[i] : b.value()[i];
  }
  return a.tape()->push(std::move(out), [a, b, take_a](Tape& t, std::span<const double> g) {
    Vec da(g.size(), 0.0), db(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) (take_a[i] ? da[i] : db[i]) = g[i];
    t.accumulate(a, da);
    t.accumulate(b, db);
  }, "minimum");
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value()) s += x;
  const std::size_t n = a.size();
  return a.tape()->push(Vec{s}, [a, n](Tape& t, std::span<const double> g) {
    t.accumulate(a, Vec(n, g[0]));
  }, "sum");
}

inline Var dot(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  detail::require_same_size(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.value()[i] * b.value()[i];
  Vec av(a.value().begin(), a.value().end()), bv(b.value().begin(), b.value().end());
  return a.tape()->push(Vec{s}, [a, b, av, bv](Tape& t, std::span<const double> g) {
    Vec da(bv), db(av);
    for (double& x : da) x *= g[0];
    for (double& x : db) x *= g[0];
    t.accumulate(a, da);
    t.accumulate(b, db);
  }, "dot");
}

// Sum of scalar nodes, accumulated left to right.
inline Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw InvalidInput("add_n over zero terms");
  double s = 0.0;
  for (const Var& v : terms) s += v.scalar();
  std::vector<Var> saved(terms.begin(), terms.end());
  return terms.front().tape()->push(Vec{s}, [saved](Tape& t, std::span<const double> g) {
    for (const Var& v : saved) t.accumulate(v, 0, g[0]);
  }, "add_n");
}

// Sum of squared differences to a constant vector.
inline Var squared_distance(const Var& a, std::span<const double> target) {
  if (a.size() != target.size()) throw InvalidInput("size mismatch in squared_distance");
  double s = 0.0;
  Vec diff(a.size());
  for (std::size_t i = 0; i < diff.size(); ++i) {
    diff[i] = a.value()[i] - target[i];
    s += diff[i] * diff[i];
  }
  return a.tape()->push(Vec{s}, [a, diff](Tape& t, std::span<const double> g) {
    Vec d(diff);
    for (double& x : d) x *= 2.0 * g[0];
    t.accumulate(a, d);
  }, "squared_distance");
}

struct ValueAndGrad {
  double value = 0.0;
  Vec grad;
};

// Evaluates `objective(tape, params)` and its gradient with respect to params.
// The objective must return a scalar node recorded on the given tape.
template <class Objective>
ValueAndGrad value_and_grad(std::span<const double> params, Objective&& objective) {
  Tape tape;
  Var p = tape.leaf(Vec(params.begin(), params.end()));
  Var out = objective(tape, p);
  if (!out.valid() || out.tape() != &tape) throw InvalidInput("objective returned a foreign node");
  tape.backward(out);
  return {out.scalar(), tape.gradient(p)};
}

}  // namespace mvgrpo::ad
