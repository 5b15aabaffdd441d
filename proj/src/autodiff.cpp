#include "camrw/autodiff.hpp"

#include "camrw/errors.hpp"
#include "camrw/rng.hpp"

#include <cmath>
#include <sstream>

namespace camrw::ad {

namespace {

std::string shape_of(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + shape_of(a) + " vs " + shape_of(b));
  }
}

}  // namespace

Matrix materialize(const ParamSpec& spec, Rng& rng) {
  Matrix m(spec.rows, spec.cols);
  switch (spec.init) {
    case ParamSpec::Init::zeros: m.setZero(); break;
    case ParamSpec::Init::ones: m.setOnes(); break;
    case ParamSpec::Init::normal:
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
      break;
    case ParamSpec::Init::small_normal:
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.02 * rng.normal();
      break;
    case ParamSpec::Init::xavier: {
      const double limit = std::sqrt(6.0 / static_cast<double>(spec.rows + spec.cols));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-limit, limit);
      break;
    }
  }
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  return m;
}

Parameter& ParameterStore::add(std::string name, Matrix init) {
  if (find(name) != nullptr) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  params_.push_back(Parameter{std::move(name), std::move(init)});
  return params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void GradientBuffer::accumulate(const Parameter* p, const Matrix& g) {
  auto it = grads_.find(p);
  if (it == grads_.end()) {
    grads_.emplace(p, g);
  } else {
    it->second += g;
  }
}

const Matrix& GradientBuffer::get(const Parameter* p) const {
  static const Matrix empty;
  auto it = grads_.find(p);
  return it == grads_.end() ? empty : it->second;
}

void GradientBuffer::merge(const GradientBuffer& other) {
  for (const auto& [p, g] : other.grads_) accumulate(p, g);
}

double GradientBuffer::squared_norm() const {
  double total = 0.0;
  for (const auto& [p, g] : grads_) total += g.squaredNorm();
  return total;
}

void GradientBuffer::scale(double s) {
  for (auto& [p, g] : grads_) g *= s;
}

const Matrix& Var::value() const { return tape->value(id); }

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::param(const Parameter& p) {
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::push(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
              std::move(backward));
}

Var Tape::push(Matrix value, std::span<const Var> parents, Backward backward) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& v : parents) {
      if (needs_grad(v.id)) {
        n.needs_grad = true;
        break;
      }
    }
    if (n.needs_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Matrix& Tape::grad_slot(std::int32_t id, Eigen::Index rows, Eigen::Index cols) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(rows, cols);
  return n.grad;
}

void Tape::accumulate(std::int32_t id, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var out, GradientBuffer& grads) {
  if (out.value().size() != 1) throw ShapeError("backward: output must be 1x1");
  if (!record_) throw std::logic_error("backward on a non-recording tape");
  nodes_[static_cast<std::size_t>(out.id)].grad = Matrix::Ones(1, 1);
  for (std::int32_t i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      grads.accumulate(n.param, n.grad);
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
  }
}

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) throw ShapeError("matmul: " + shape_of(av) + " * " + shape_of(bv));
  Matrix out = av * bv;
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, g * b.value().transpose());
    if (t.needs_grad(b.id)) t.accumulate(b.id, a.value().transpose() * g);
  });
}

Var matmul_bt(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) throw ShapeError("matmul_bt: " + shape_of(av) + " * " + shape_of(bv) + "^T");
  Matrix out = av * bv.transpose();
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, g * b.value());
    if (t.needs_grad(b.id)) t.accumulate(b.id, g.transpose() * a.value());
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value() + b.value();
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value() - b.value();
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    if (t.needs_grad(b.id)) t.accumulate(b.id, -g);
  });
}

Var add_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row: " + shape_of(av) + " + " + shape_of(rv));
  }
  Matrix out = av.rowwise() + rv.row(0);
  return a.tape->push(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    if (t.needs_grad(row.id)) t.accumulate(row.id, g.colwise().sum());
  });
}

Var hadamard(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, g.cwiseProduct(b.value()));
    if (t.needs_grad(b.id)) t.accumulate(b.id, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  return a.tape->push(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a.id, g * s); });
}

Var scale_rows(Var a, Var col) {
  const Matrix& av = a.value();
  const Matrix& cv = col.value();
  if (cv.cols() != 1 || cv.rows() != av.rows()) {
    throw ShapeError("scale_rows: " + shape_of(av) + " by " + shape_of(cv));
  }
  Matrix out = cv.col(0).asDiagonal() * av;
  return a.tape->push(std::move(out), {a, col}, [a, col](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, col.value().col(0).asDiagonal() * g);
    if (t.needs_grad(col.id)) {
      t.accumulate(col.id, g.cwiseProduct(a.value()).rowwise().sum());
    }
  });
}

Var add_constant(Var a, const Matrix& c) {
  require_same_shape(a.value(), c, "add_constant");
  Matrix out = a.value() + c;
  return a.tape->push(std::move(out), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a.id, g); });
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape->push(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a.id, (a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(g));
  });
}

Var sigmoid(Var a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Matrix kept = out;
  return a.tape->push(std::move(out), {a}, [a, kept = std::move(kept)](Tape& t, const Matrix& g) {
    t.accumulate(a.id, (g.array() * kept.array() * (1.0 - kept.array())).matrix());
  });
}

Var softmax_rows(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const double m = av.row(r).maxCoeff();
    out.row(r) = (av.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  Matrix kept = out;
  return a.tape->push(std::move(out), {a}, [a, kept = std::move(kept)](Tape& t, const Matrix& g) {
    const Eigen::VectorXd dot = g.cwiseProduct(kept).rowwise().sum();
    Matrix ga = kept.cwiseProduct(g.colwise() - dot);
    t.accumulate(a.id, ga);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (gain.value().rows() != 1 || gain.value().cols() != n || bias.value().cols() != n) {
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(n));
  }
  const Eigen::VectorXd mean = xv.rowwise().mean();
  Matrix centered = xv.colwise() - mean;
  const Eigen::VectorXd var = centered.array().square().rowwise().mean();
  const Eigen::VectorXd inv = (var.array() + eps).rsqrt();
  Matrix xhat = inv.asDiagonal() * centered;
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape->push(std::move(out), {x, gain, bias},
                      [x, gain, bias, xhat = std::move(xhat), inv](Tape& t, const Matrix& g) {
                        if (t.needs_grad(gain.id)) t.accumulate(gain.id, g.cwiseProduct(xhat).colwise().sum());
                        if (t.needs_grad(bias.id)) t.accumulate(bias.id, g.colwise().sum());
                        if (t.needs_grad(x.id)) {
                          const double n = static_cast<double>(xhat.cols());
                          Matrix gh = (g.array().rowwise() * gain.value().row(0).array()).matrix();
                          const Eigen::VectorXd mean_gh = gh.rowwise().mean();
                          const Eigen::VectorXd mean_ghx = gh.cwiseProduct(xhat).rowwise().sum() / n;
                          Matrix gx = gh.colwise() - mean_gh;
                          gx -= mean_ghx.asDiagonal() * xhat;
                          gx = inv.asDiagonal() * gx;
                          t.accumulate(x.id, gx);
                        }
                      });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw std::invalid_argument("gather_rows: id " + std::to_string(ids[i]) + " outside [0, " +
                                  std::to_string(tv.rows()) + ")");
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape->push(std::move(out), {table}, [table, idv = std::move(idv)](Tape& t, const Matrix& g) {
    const Matrix& tv = table.value();
    Matrix& slot = t.grad_slot(table.id, tv.rows(), tv.cols());
    for (std::size_t i = 0; i < idv.size(); ++i) slot.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix& av = a.value();
  if (start < 0 || count < 0 || start + count > av.rows()) {
    throw ShapeError("slice_rows out of range on " + shape_of(av));
  }
  Matrix out = av.middleRows(start, count);
  return a.tape->push(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix& slot = t.grad_slot(a.id, a.value().rows(), a.value().cols());
    slot.middleRows(start, count) += g;
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix& av = a.value();
  if (start < 0 || count < 0 || start + count > av.cols()) {
    throw ShapeError("slice_cols out of range on " + shape_of(av));
  }
  Matrix out = av.middleCols(start, count);
  return a.tape->push(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix& slot = t.grad_slot(a.id, a.value().rows(), a.value().cols());
    slot.middleCols(start, count) += g;
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> pv(parts.begin(), parts.end());
  return parts[0].tape->push(std::move(out), parts, [pv](Tape& t, const Matrix& g) {
    Eigen::Index at = 0;
    for (const Var& p : pv) {
      const Eigen::Index r = p.rows();
      if (t.needs_grad(p.id)) t.accumulate(p.id, g.middleRows(at, r));
      at += r;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> pv(parts.begin(), parts.end());
  return parts[0].tape->push(std::move(out), parts, [pv](Tape& t, const Matrix& g) {
    Eigen::Index at = 0;
    for (const Var& p : pv) {
      const Eigen::Index c = p.cols();
      if (t.needs_grad(p.id)) t.accumulate(p.id, g.middleCols(at, c));
      at += c;
    }
  });
}

Var sum_rows(Var a) {
  Matrix out = a.value().colwise().sum();
  return a.tape->push(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    Matrix ga = g.replicate(a.value().rows(), 1);
    t.accumulate(a.id, ga);
  });
}

Var sum_all(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a.id, Matrix::Constant(a.value().rows(), a.value().cols(), g(0, 0)));
  });
}

Var cross_entropy_sum(Var logits, std::span<const int> labels) {
  const Matrix& lv = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != lv.rows()) {
    throw ShapeError("cross_entropy_sum: " + std::to_string(labels.size()) + " labels for " + shape_of(lv));
  }
  Matrix probs(lv.rows(), lv.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const double m = lv.row(r).maxCoeff();
    probs.row(r) = (lv.row(r).array() - m).exp().matrix();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    const int y = labels[static_cast<std::size_t>(r)];
    if (y >= 0) {
      if (y >= lv.cols()) throw std::invalid_argument("cross_entropy_sum: label outside vocabulary");
      loss -= lv(r, y) - m - std::log(z);
    }
  }
  Matrix out(1, 1);
  out(0, 0) = loss;
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape->push(std::move(out), {logits},
                           [logits, probs = std::move(probs), lab = std::move(lab)](Tape& t, const Matrix& g) {
                             Matrix gl = probs;
                             for (Eigen::Index r = 0; r < gl.rows(); ++r) {
                               const int y = lab[static_cast<std::size_t>(r)];
                               if (y < 0) {
                                 gl.row(r).setZero();
                               } else {
                                 gl(r, y) -= 1.0;
                               }
                             }
                             t.accumulate(logits.id, gl * g(0, 0));
                           });
}

Var dropout(Var a, double rate, const Matrix& uniforms) {
  if (rate <= 0.0) return a;
  require_same_shape(a.value(), uniforms, "dropout");
  Matrix keep = ((uniforms.array() >= rate).cast<double>() / (1.0 - rate)).matrix();
  Matrix out = a.value().cwiseProduct(keep);
  return a.tape->push(std::move(out), {a}, [a, keep = std::move(keep)](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g.cwiseProduct(keep));
  });
}

}  // namespace camrw::ad
