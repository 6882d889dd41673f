#include "trafficfuse/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace trafficfuse::ad {

const Matrix& Var::value() const { return tape_->node(id_).value; }
const Matrix& Var::grad() const { return tape_->node(id_).grad; }

Var Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents,
                 std::function<void(const Matrix&)> backward) {
  Node n;
  n.value = std::move(value);
  for (const auto& p : parents) n.needs_grad = n.needs_grad || node(p.id()).needs_grad;
  const int id = static_cast<int>(nodes_.size());
  if (n.needs_grad) {
    n.backward = [this, id, bw = std::move(backward)]() { bw(node(id).grad); };
  }
  nodes_.push_back(std::move(n));
  return Var(this, id);
}

void Tape::accumulate(Var v, const Matrix& g) {
  auto& n = node(v.id());
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var out) {
  auto& o = node(out.id());
  if (o.value.size() != 1) throw std::invalid_argument("backward() needs a scalar output");
  o.grad = Matrix::Ones(1, 1);
  for (int id = out.id(); id >= 0; --id) {
    auto& n = node(id);
    if (n.backward && n.grad.size() != 0) n.backward();
  }
}

Var matmul(Var a, Var b) {
  Tape& t = *a.tape();
  Matrix v = a.value() * b.value();
  return t.record(std::move(v), {a, b}, [&t, a, b](const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var add(Var a, Var b) {
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), {a, b}, [&t, a, b](const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add3(Var a, Var b, Var c) {
  Tape& t = *a.tape();
  return t.record(a.value() + b.value() + c.value(), {a, b, c}, [&t, a, b, c](const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
    t.accumulate(c, g);
  });
}

Var add_row(Var a, Var row) {
  Tape& t = *a.tape();
  Matrix v = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(v), {a, row}, [&t, a, row](const Matrix& g) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var graph_mix(const SparseRowMatrix& op, Var x, int blocks) {
  Tape& t = *x.tape();
  const auto n = op.rows();
  const Matrix& xv = x.value();
  Matrix v(xv.rows(), xv.cols());
  for (int b = 0; b < blocks; ++b) {
    v.middleRows(b * n, n).noalias() = op * xv.middleRows(b * n, n);
  }
  return t.record(std::move(v), {x}, [&t, &op, x, blocks, n](const Matrix& g) {
    Matrix gx(g.rows(), g.cols());
    for (int b = 0; b < blocks; ++b) {
      gx.middleRows(b * n, n).noalias() = op.transpose() * g.middleRows(b * n, n);
    }
    t.accumulate(x, gx);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = *x.tape();
  const Matrix& xv = x.value();
  const auto rows = xv.rows();
  const auto cols = xv.cols();
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std[r];
  }
  Matrix v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
             beta.value().row(0).array();
  return t.record(std::move(v), {x, gamma, beta},
                  [&t, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix& g) {
                    if (t.needs_grad(gamma)) {
                      t.accumulate(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
                    }
                    if (t.needs_grad(beta)) t.accumulate(beta, g.colwise().sum());
                    if (!t.needs_grad(x)) return;
                    const Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
                    Matrix dx(g.rows(), g.cols());
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      const double m1 = dxhat.row(r).mean();
                      const double m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
                      dx.row(r) = inv_std[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                    t.accumulate(x, dx);
                  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Var gelu(Var x) {
  Tape& t = *x.tape();
  Matrix v = x.value().unaryExpr([](double z) { return gelu_value(z); });
  return t.record(std::move(v), {x}, [&t, x](const Matrix& g) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Matrix d = x.value().unaryExpr([inv_sqrt_2pi](double z) {
      const double cdf = 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2));
      return cdf + z * inv_sqrt_2pi * std::exp(-0.5 * z * z);
    });
    t.accumulate(x, g.cwiseProduct(d));
  });
}

Var permute_rows(Var x, std::vector<int> perm) {
  Tape& t = *x.tape();
  const Matrix& xv = x.value();
  Matrix v(static_cast<Eigen::Index>(perm.size()), xv.cols());
  for (std::size_t r = 0; r < perm.size(); ++r) v.row(static_cast<Eigen::Index>(r)) = xv.row(perm[r]);
  return t.record(std::move(v), {x}, [&t, x, perm = std::move(perm)](const Matrix& g) {
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t r = 0; r < perm.size(); ++r) gx.row(perm[r]) += g.row(static_cast<Eigen::Index>(r));
    t.accumulate(x, gx);
  });
}

Var flatten_groups(Var x, int groups) {
  Tape& t = *x.tape();
  const Matrix& xv = x.value();
  const auto cols = xv.size() / groups;
  // Row-major storage makes each group's rows contiguous.
  Matrix v = Eigen::Map<const Matrix>(xv.data(), groups, cols);
  return t.record(std::move(v), {x}, [&t, x](const Matrix& g) {
    t.accumulate(x, Eigen::Map<const Matrix>(g.data(), x.rows(), x.cols()));
  });
}

Var grouped_attention(Var q, Var k, Var v, int groups, int len, int heads,
                      std::vector<Matrix>* weights_out) {
  Tape& t = *q.tape();
  const auto d = q.value().cols();
  const auto dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Matrix> probs(static_cast<std::size_t>(groups * heads));
  Matrix out(q.rows(), d);
  for (int g = 0; g < groups; ++g) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = q.value().block(g * len, h * dh, len, dh);
      const auto kb = k.value().block(g * len, h * dh, len, dh);
      const auto vb = v.value().block(g * len, h * dh, len, dh);
      Matrix s = (qb * kb.transpose()) * scale;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(g * len, h * dh, len, dh).noalias() = s * vb;
      probs[static_cast<std::size_t>(g * heads + h)] = std::move(s);
    }
  }
  if (weights_out) *weights_out = probs;
  return t.record(std::move(out), {q, k, v},
                  [&t, q, k, v, groups, len, heads, dh, scale, probs = std::move(probs)](const Matrix& go) {
                    Matrix gq = Matrix::Zero(q.rows(), q.cols());
                    Matrix gk = Matrix::Zero(k.rows(), k.cols());
                    Matrix gv = Matrix::Zero(v.rows(), v.cols());
                    for (int g = 0; g < groups; ++g) {
                      for (int h = 0; h < heads; ++h) {
                        const Matrix& p = probs[static_cast<std::size_t>(g * heads + h)];
                        const auto qb = q.value().block(g * len, h * dh, len, dh);
                        const auto kb = k.value().block(g * len, h * dh, len, dh);
                        const auto vb = v.value().block(g * len, h * dh, len, dh);
                        const auto gob = go.block(g * len, h * dh, len, dh);
                        gv.block(g * len, h * dh, len, dh).noalias() = p.transpose() * gob;
                        const Matrix dp = gob * vb.transpose();
                        Matrix ds = p.array() * (dp.array().colwise() -
                                                 (dp.array() * p.array()).rowwise().sum());
                        ds *= scale;
                        gq.block(g * len, h * dh, len, dh).noalias() = ds * kb;
                        gk.block(g * len, h * dh, len, dh).noalias() = ds.transpose() * qb;
                      }
                    }
                    t.accumulate(q, gq);
                    t.accumulate(k, gk);
                    t.accumulate(v, gv);
                  });
}

}  // namespace trafficfuse::ad
