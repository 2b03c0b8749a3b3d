#pragma once

// Minimal tape-based reverse-mode differentiation over small dense vectors.
//
// Every value on the tape is a flat vector (scalars have length 1). Matrix
// parameters never enter the tape as values; ops such as affine() read them
// directly and accumulate into Parameter::grad during backward().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lqa::ad {

using Vec = std::vector<double>;

enum class ParamKind { manifold_point, euclidean };

struct Parameter {
  std::string id;
  ParamKind kind = ParamKind::euclidean;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vec value;
  Vec grad;
  bool trainable = true;

  std::span<double> row(std::size_t r) { return {value.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {value.data() + r * cols, cols}; }
  std::span<double> grad_row(std::size_t r) { return {grad.data() + r * cols, cols}; }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// Owns parameters with stable addresses, in insertion order.
class ParamStore {
 public:
  Parameter& add(std::string id, ParamKind kind, std::size_t rows, std::size_t cols);
  Parameter& get(const std::string& id);
  const Parameter& get(const std::string& id) const;
  bool contains(const std::string& id) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  /// Parameters whose id starts with prefix.
  std::vector<Parameter*> with_prefix(const std::string& prefix);

  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

struct Var {
  std::uint32_t id = 0;
};

class Tape;
using Backward = std::function<void(Tape&, std::uint32_t self)>;

class Tape {
 public:
  Var constant(Vec value);
  Var scalar(double v) { return constant(Vec{v}); }
  /// Leaf reading row r of p; gradients flow into p.grad when p is trainable.
  Var row(Parameter& p, std::size_t r);

  const Vec& value(Var v) const { return nodes_[v.id].value; }
  double item(Var v) const { return nodes_[v.id].value.at(0); }
  std::size_t size_of(Var v) const { return nodes_[v.id].value.size(); }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer of a node, allocated on first use.
  Vec& grad(Var v) { return grad(v.id); }
  Vec& grad(std::uint32_t id);
  const Vec& grad_if_any(Var v) const { return nodes_[v.id].grad; }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward in reverse.
  void backward(Var loss);

  /// Appends a node; backward is kept only when some input needs a gradient.
  Var push(Vec value, bool requires_grad, Backward back);
  bool any_requires_grad(std::initializer_list<Var> vars) const;
  bool any_requires_grad(std::span<const Var> vars) const;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Vec value;
    Vec grad;
    bool requires_grad = false;
    Backward back;
  };
  std::vector<Node> nodes_;
};

// Elementwise and structural ops.
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);
/// a * s where s is a length-1 node.
Var scale_by(Tape& t, Var a, Var s);
Var add_const(Tape& t, Var a, double c);
Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);
Var dot(Tape& t, Var a, Var b);
Var concat(Tape& t, std::span<const Var> parts);
Var slice(Tape& t, Var a, std::size_t offset, std::size_t len);
Var at(Tape& t, Var a, std::size_t i);
/// out_k = a[idx_k]
Var gather(Tape& t, Var a, std::span<const std::size_t> idx);
/// sum_i parts_i (same length).
Var add_n(Tape& t, std::span<const Var> parts);

Var exp(Tape& t, Var a);
Var log(Tape& t, Var a);
Var relu(Tape& t, Var a);
Var softplus(Tape& t, Var a);
Var gelu(Tape& t, Var a);

/// W x (+ b). W has rows x cols with cols == len(x); b is a 1 x rows parameter.
Var affine(Tape& t, Parameter& w, Var x, Parameter* b = nullptr);

/// Softmax over entries where mask is nonzero; masked entries are exactly 0.
Var softmax(Tape& t, Var a, std::span<const char> mask = {});
/// sum_i w_i x_i, with w a node of length n.
Var weighted_sum(Tape& t, Var w, std::span<const Var> xs);
/// gain * a / sqrt(mean(a^2) + eps)
Var rms_norm(Tape& t, Var a, Var gain, double eps = 1e-8);
/// Inverted dropout with a mask drawn from rng; identity when rate == 0.
Var dropout(Tape& t, Var a, double rate, std::mt19937_64& rng);

// Losses (scalar outputs).
/// Mean binary cross-entropy with logits against targets in [0,1].
Var bce_with_logits(Tape& t, Var logits, std::span<const double> targets);
/// -log softmax(logits)[target]
Var cross_entropy(Tape& t, Var logits, std::size_t target);
/// -log sum_{j in positives} softmax(logits)_j
Var multi_positive_nll(Tape& t, Var logits, std::span<const std::size_t> positives);

/// Pure-double softmax helper.
Vec softmax_values(std::span<const double> a, std::span<const char> mask = {});

}  // namespace lqa::ad
