#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records every operation in creation order, so reverse
// iteration is a valid topological order for backpropagation.

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace camrw {
class Rng;
}

namespace camrw::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
};

// Shape and initializer of one named parameter.
struct ParamSpec {
  enum class Init { zeros, ones, normal, xavier, small_normal };
  std::string name;
  int rows = 0;
  int cols = 0;
  Init init = Init::zeros;
};

// Owns named parameters at stable addresses.
class ParameterStore {
 public:
  Parameter& add(std::string name, Matrix init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

 private:
  std::deque<Parameter> params_;
};

// Draws initial values; every value is representable in 32 bits.
Matrix materialize(const ParamSpec& spec, camrw::Rng& rng);

class GradientBuffer {
 public:
  void accumulate(const Parameter* p, const Matrix& g);
  // Zero-sized matrix if the parameter never received gradient.
  const Matrix& get(const Parameter* p) const;
  bool has(const Parameter* p) const { return grads_.count(p) != 0; }
  void clear() { grads_.clear(); }
  void merge(const GradientBuffer& other);
  double squared_norm() const;
  void scale(double s);

 private:
  std::unordered_map<const Parameter*, Matrix> grads_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Tape {
 public:
  // A tape without a gradient sink records no backward closures.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var param(const Parameter& p);

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to parameters.
  void backward(Var out, GradientBuffer& grads);

  const Matrix& value(std::int32_t id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ref != nullptr ? *n.ref : n.value;
  }
  bool needs_grad(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  using Backward = std::function<void(Tape&, const Matrix&)>;
  Var push(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var push(Matrix value, std::span<const Var> parents, Backward backward);
  void accumulate(std::int32_t id, const Matrix& g);
  Matrix& grad_slot(std::int32_t id, Eigen::Index rows, Eigen::Index cols);

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    const Parameter* param = nullptr;
    Matrix grad;
    bool needs_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool record_;
};

// y = a * b
Var matmul(Var a, Var b);
// y = a * b^T
Var matmul_bt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
// Adds the 1xN row to every row of a.
Var add_row(Var a, Var row);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
// Multiplies row i of a (MxN) by col(i) (Mx1).
Var scale_rows(Var a, Var col);
Var add_constant(Var a, const Matrix& c);
Var relu(Var a);
Var sigmoid(Var a);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gather_rows(Var table, std::span<const int> ids);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
// Column-wise sum, 1xN.
Var sum_rows(Var a);
Var sum_all(Var a);
// Sum over rows with label >= 0 of -log softmax(logits_row)[label]; 1x1.
Var cross_entropy_sum(Var logits, std::span<const int> labels);
// Inverted dropout; keep mask drawn from the supplied uniforms in [0,1).
Var dropout(Var a, double rate, const Matrix& uniforms);

inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

}  // namespace camrw::ad
