#include "skiplight/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "skiplight/error.hpp"

namespace skiplight::ad {

const Matrix& Var::value() const { return tape_->value(*this); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw UsageError("scalar() on a non-1x1 node");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::variable(Matrix value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(const std::string& name, const Matrix& value, bool trainable) {
  Node node;
  node.external = &value;
  node.requires_grad = grad_enabled_ && trainable;
  const bool tracked = node.requires_grad;
  nodes_.push_back(std::move(node));
  const int id = static_cast<int>(nodes_.size()) - 1;
  if (tracked) params_.emplace_back(name, id);
  return Var(this, id);
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.value_ref().rows(), n.value_ref().cols());
  return n.grad;
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  Node node;
  node.value = std::move(value);
  if (grad_enabled_) {
    for (Var in : inputs) node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value_ref().rows(), n.value_ref().cols());
  return n.grad;
}

void Tape::accumulate(Var v, const Matrix& delta) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

void Tape::backward(Var loss) {
  if (!grad_enabled_) throw UsageError("backward() on a tape without gradients");
  Node& root = nodes_[loss.id()];
  if (root.value_ref().size() != 1) throw UsageError("backward() needs a scalar loss");
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) n.backward(n.grad);
  }
}

std::map<std::string, Matrix> Tape::param_grads() const {
  std::map<std::string, Matrix> out;
  for (const auto& [name, id] : params_) {
    Matrix g = grad(Var(const_cast<Tape*>(this), id));
    auto it = out.find(name);
    if (it == out.end()) {
      out.emplace(name, std::move(g));
    } else {
      it->second += g;
    }
  }
  return out;
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw UsageError(std::string(op) + ": shape mismatch");
}

}  // namespace

Var add(Var a, Var b) {
  Tape* t = a.tape();
  check_same_shape(a.value(), b.value(), "add");
  return t->record(a.value() + b.value(), {a, b}, [t, a, b](const Matrix& g) {
    t->accumulate(a, g);
    t->accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape* t = a.tape();
  check_same_shape(a.value(), b.value(), "sub");
  return t->record(a.value() - b.value(), {a, b}, [t, a, b](const Matrix& g) {
    t->accumulate(a, g);
    t->accumulate(b, -g);
  });
}

Var scale(Var a, double s) {
  Tape* t = a.tape();
  return t->record(a.value() * s, {a}, [t, a, s](const Matrix& g) { t->accumulate(a, g * s); });
}

Var mul(Var a, Var b) {
  Tape* t = a.tape();
  check_same_shape(a.value(), b.value(), "mul");
  return t->record(a.value().cwiseProduct(b.value()), {a, b}, [t, a, b](const Matrix& g) {
    if (t->requires_grad(a)) t->accumulate(a, g.cwiseProduct(b.value()));
    if (t->requires_grad(b)) t->accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var matmul(Var a, Var b) {
  Tape* t = a.tape();
  if (a.cols() != b.rows()) throw UsageError("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return t->record(std::move(out), {a, b}, [t, a, b](const Matrix& g) {
    if (t->requires_grad(a)) t->accumulate(a, g * b.value().transpose());
    if (t->requires_grad(b)) t->accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape* t = a.tape();
  if (a.cols() != b.cols()) throw UsageError("matmul_nt: inner dimension mismatch");
  Matrix out = a.value() * b.value().transpose();
  return t->record(std::move(out), {a, b}, [t, a, b](const Matrix& g) {
    if (t->requires_grad(a)) t->accumulate(a, g * b.value());
    if (t->requires_grad(b)) t->accumulate(b, g.transpose() * a.value());
  });
}

Var linear(Var x, Var weight, Var bias) {
  Tape* t = x.tape();
  const Matrix& w = weight.value();
  if (x.cols() != w.cols()) throw UsageError("linear: input width does not match weight");
  if (bias.rows() != 1 || bias.cols() != w.rows()) throw UsageError("linear: bias shape mismatch");
  Matrix out(x.rows(), w.rows());
  out.noalias() = x.value() * w.transpose();
  out.rowwise() += bias.value().row(0);
  return t->record(std::move(out), {x, weight, bias}, [t, x, weight, bias](const Matrix& g) {
    if (t->requires_grad(x)) {
      Matrix dx(g.rows(), weight.cols());
      dx.noalias() = g * weight.value();
      t->accumulate(x, dx);
    }
    if (t->requires_grad(weight)) {
      Matrix& gw = t->grad_buffer(weight);
      gw.noalias() += g.transpose() * x.value();
    }
    if (t->requires_grad(bias)) t->grad_buffer(bias) += g.colwise().sum();
  });
}

Var add_row(Var x, Var row) {
  Tape* t = x.tape();
  if (row.rows() != 1 || row.cols() != x.cols()) throw UsageError("add_row: shape mismatch");
  Matrix out = x.value();
  out.rowwise() += row.value().row(0);
  return t->record(std::move(out), {x, row}, [t, x, row](const Matrix& g) {
    t->accumulate(x, g);
    if (t->requires_grad(row)) t->grad_buffer(row) += g.colwise().sum();
  });
}

Var gelu(Var x) {
  Tape* t = x.tape();
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Matrix out = x.value().unaryExpr([inv_sqrt2](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
  return t->record(std::move(out), {x}, [t, x, inv_sqrt2](const Matrix& g) {
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Matrix d = x.value().unaryExpr([&](double v) {
      return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
    });
    t->accumulate(x, g.cwiseProduct(d));
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape* t = x.tape();
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  if (gain.cols() != d || bias.cols() != d) throw UsageError("layer_norm: parameter width mismatch");
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return t->record(std::move(out), {x, gain, bias},
                   [t, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix& g) {
                     if (t->requires_grad(gain))
                       t->grad_buffer(gain) += g.cwiseProduct(xhat).colwise().sum();
                     if (t->requires_grad(bias)) t->grad_buffer(bias) += g.colwise().sum();
                     if (!t->requires_grad(x)) return;
                     Matrix dxhat = g.array().rowwise() * gain.value().row(0).array();
                     Matrix dx(g.rows(), g.cols());
                     for (Eigen::Index r = 0; r < g.rows(); ++r) {
                       const double m1 = dxhat.row(r).mean();
                       const double m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(g.cols());
                       dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                     }
                     t->accumulate(x, dx);
                   });
}

Var gather_rows(Var table, std::span<const int> ids) {
  Tape* t = table.tape();
  const Matrix& tab = table.value();
  std::vector<int> idx(ids.begin(), ids.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), tab.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= tab.rows()) throw UsageError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tab.row(idx[i]);
  }
  return t->record(std::move(out), {table}, [t, table, idx = std::move(idx)](const Matrix& g) {
    Matrix& gt = t->grad_buffer(table);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var shift_rows(Var x, int k) {
  Tape* t = x.tape();
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.rows();
  Matrix out = Matrix::Zero(n, xv.cols());
  if (k < n) out.bottomRows(n - k) = xv.topRows(n - k);
  return t->record(std::move(out), {x}, [t, x, k, n](const Matrix& g) {
    Matrix d = Matrix::Zero(g.rows(), g.cols());
    if (k < n) d.topRows(n - k) = g.bottomRows(n - k);
    t->accumulate(x, d);
  });
}

Var mean_rows(Var x) {
  Tape* t = x.tape();
  const Eigen::Index n = x.rows();
  Matrix out = x.value().colwise().mean();
  return t->record(std::move(out), {x}, [t, x, n](const Matrix& g) {
    Matrix d = g.replicate(n, 1) / static_cast<double>(n);
    t->accumulate(x, d);
  });
}

Var dropout(Var x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw UsageError("dropout rate must be < 1");
  Tape* t = x.tape();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = u(rng) >= p ? keep_scale : 0.0;
  Matrix out = x.value().cwiseProduct(mask);
  return t->record(std::move(out), {x}, [t, x, mask = std::move(mask)](const Matrix& g) {
    t->accumulate(x, g.cwiseProduct(mask));
  });
}

namespace {

// Softmax of scaled scores for one head; masked entries are exactly zero.
void head_probabilities(const Matrix& q, const Matrix& k, Eigen::Index offset, Eigen::Index dh, bool causal,
                        Matrix& probs) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  probs.resize(q.rows(), k.rows());
  probs.noalias() = q.middleCols(offset, dh) * k.middleCols(offset, dh).transpose();
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const Eigen::Index visible = causal ? std::min<Eigen::Index>(r + 1, probs.cols()) : probs.cols();
    auto row = probs.row(r);
    const double mx = row.head(visible).maxCoeff() * inv;
    double sum = 0.0;
    for (Eigen::Index c = 0; c < visible; ++c) {
      row(c) = std::exp(row(c) * inv - mx);
      sum += row(c);
    }
    row.head(visible) /= sum;
    if (visible < probs.cols()) row.tail(probs.cols() - visible).setZero();
  }
}

}  // namespace

Matrix attention_weights(const Matrix& q, const Matrix& k, int heads, int head, bool causal) {
  const Eigen::Index dh = q.cols() / heads;
  Matrix probs;
  head_probabilities(q, k, head * dh, dh, causal, probs);
  return probs;
}

Var attention(Var q, Var k, Var v, int heads, bool causal) {
  Tape* t = q.tape();
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  if (heads < 1 || qv.cols() % heads != 0) throw UsageError("attention: width not divisible by heads");
  if (kv.cols() != qv.cols() || vv.cols() != qv.cols() || kv.rows() != vv.rows())
    throw UsageError("attention: shape mismatch");
  const Eigen::Index dh = qv.cols() / heads;
  std::vector<Matrix> probs(heads);
  Matrix out(qv.rows(), qv.cols());
  for (int h = 0; h < heads; ++h) {
    head_probabilities(qv, kv, h * dh, dh, causal, probs[h]);
    out.middleCols(h * dh, dh).noalias() = probs[h] * vv.middleCols(h * dh, dh);
  }
  return t->record(std::move(out), {q, k, v}, [t, q, k, v, heads, dh, probs = std::move(probs)](const Matrix& g) {
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
    Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
    Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
    Matrix dp, ds;
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = probs[h];
      const auto go = g.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh).noalias() = p.transpose() * go;
      dp.noalias() = go * vv.middleCols(h * dh, dh).transpose();
      const Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
      ds = p.cwiseProduct(dp.colwise() - rowdot) * inv;
      dq.middleCols(h * dh, dh).noalias() = ds * kv.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qv.middleCols(h * dh, dh);
    }
    t->accumulate(q, dq);
    t->accumulate(k, dk);
    t->accumulate(v, dv);
  });
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape* t = logits.tape();
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != z.rows()) throw UsageError("cross_entropy: target count mismatch");
  std::vector<int> tgt(targets.begin(), targets.end());
  Matrix probs = softmax_rows(z);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int c = tgt[static_cast<std::size_t>(r)];
    if (c < 0 || c >= z.cols()) throw UsageError("cross_entropy: target out of range");
    const double mx = z.row(r).maxCoeff();
    loss -= z(r, c) - mx - std::log((z.row(r).array() - mx).exp().sum());
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  return t->record(std::move(out), {logits}, [t, logits, tgt = std::move(tgt), probs = std::move(probs), n](const Matrix& g) {
    Matrix d = probs;
    for (std::size_t r = 0; r < tgt.size(); ++r) d(static_cast<Eigen::Index>(r), tgt[r]) -= 1.0;
    d *= g(0, 0) / n;
    t->accumulate(logits, d);
  });
}

Var mse(Var pred, const Matrix& target, std::span<const int> rows) {
  Tape* t = pred.tape();
  check_same_shape(pred.value(), target, "mse");
  Matrix diff = pred.value() - target;
  if (!rows.empty()) {
    Matrix masked = Matrix::Zero(diff.rows(), diff.cols());
    for (int r : rows) masked.row(r) = diff.row(r);
    diff = std::move(masked);
  }
  const double count = static_cast<double>(rows.empty() ? diff.rows() : rows.size()) * diff.cols();
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / count;
  return t->record(std::move(out), {pred}, [t, pred, diff = std::move(diff), count](const Matrix& g) {
    t->accumulate(pred, diff * (2.0 * g(0, 0) / count));
  });
}

}  // namespace skiplight::ad
