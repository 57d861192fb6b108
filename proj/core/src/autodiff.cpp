#include "nnscene/autodiff.hpp"

#include <cmath>
#include <string>

#include "nnscene/errors.hpp"

namespace nnscene::ad {
namespace {

void same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw Error("operands live on different tapes");
  return *a.tape;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

const Mat& Var::value() const { return tape->value(*this); }
const Mat& Var::grad() const { return tape->grad(*this); }

Var Tape::variable(Mat value) {
  nodes_.push_back({std::move(value), Mat(), true, nullptr});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Mat value) {
  nodes_.push_back({std::move(value), Mat(), false, nullptr});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw Error("operand lives on a different tape");
    needs = needs || nodes_[v.id].needs_grad;
  }
  nodes_.push_back({std::move(value), Mat(), needs, needs ? std::move(backward) : nullptr});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(Var v, const Mat& g) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  n.grad += g;
}

void Tape::backward(Var out) {
  if (out.tape != this) throw Error("backward on a variable from another tape");
  if (value(out).size() != 1) throw ShapeError("backward needs a scalar output");
  for (auto& n : nodes_) {
    if (n.needs_grad) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }
  if (!nodes_[out.id].needs_grad) return;
  nodes_[out.id].grad(0, 0) = 1.0;
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward) n.backward(n.grad);
  }
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  return t.record(a.value() * b.value(), {a, b}, [a, b, &t](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  same_shape(a.value(), b.value(), "add");
  return t.record(a.value() + b.value(), {a, b}, [a, b, &t](const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  same_shape(a.value(), b.value(), "sub");
  return t.record(a.value() - b.value(), {a, b}, [a, b, &t](const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  Tape& t = tape_of(a, b);
  same_shape(a.value(), b.value(), "hadamard");
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b, &t](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.record(a.value() * s, {a}, [a, s, &t](const Mat& g) { t.accumulate(a, g * s); });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  Mat out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row, &t](const Mat& g) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.record(a.value().transpose(), {a}, [a, &t](const Mat& g) { t.accumulate(a, g.transpose()); });
}

Var silu(Var a) {
  Tape& t = *a.tape;
  Mat out = a.value().unaryExpr([](double x) { return x * sigmoid(x); });
  return t.record(std::move(out), {a}, [a, &t](const Mat& g) {
    Mat d = a.value().unaryExpr([](double x) {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var relu(Var a) {
  Tape& t = *a.tape;
  return t.record(a.value().cwiseMax(0.0), {a}, [a, &t](const Mat& g) {
    Mat d = a.value().unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var log_eps(Var a, double eps) {
  Tape& t = *a.tape;
  Mat out = a.value().unaryExpr([eps](double x) { return std::log(x + eps); });
  return t.record(std::move(out), {a}, [a, eps, &t](const Mat& g) {
    t.accumulate(a, g.cwiseQuotient((a.value().array() + eps).matrix()));
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a, &t](const Mat& g) {
    t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var normalize_rows(Var a, double target) {
  Tape& t = *a.tape;
  const Mat& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > 0.0)) throw NumericError("cannot rescale a zero vector (row " + std::to_string(i) + ")");
  }
  Mat out = norms.cwiseInverse().asDiagonal() * x * target;
  return t.record(std::move(out), {a}, [a, norms, target, &t](const Mat& g) {
    const Mat& x = a.value();
    Mat unit = norms.cwiseInverse().asDiagonal() * x;
    Eigen::VectorXd proj = unit.cwiseProduct(g).rowwise().sum();
    Mat d = g - proj.asDiagonal() * unit;
    t.accumulate(a, (target * norms.cwiseInverse()).asDiagonal() * d);
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  const Mat& x = a.value();
  Mat y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  return t.record(y, {a}, [a, y, &t](const Mat& g) {
    Eigen::VectorXd dots = y.cwiseProduct(g).rowwise().sum();
    t.accumulate(a, y.cwiseProduct(g - dots.replicate(1, g.cols())));
  });
}

Var logsumexp_rows(Var a) {
  Tape& t = *a.tape;
  const Mat& x = a.value();
  Mat out(x.rows(), 1);
  Mat p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    p.row(i) = (x.row(i).array() - m).exp();
    const double z = p.row(i).sum();
    out(i, 0) = m + std::log(z);
    p.row(i) /= z;
  }
  return t.record(std::move(out), {a}, [a, p, &t](const Mat& g) {
    t.accumulate(a, g.col(0).asDiagonal() * p);
  });
}

Var pick(Var a, std::span<const int> index) {
  Tape& t = *a.tape;
  const Mat& x = a.value();
  if (static_cast<Eigen::Index>(index.size()) != x.rows()) throw ShapeError("pick: one index per row required");
  std::vector<int> idx(index.begin(), index.end());
  Mat out(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.cols()) throw ShapeError("pick: index out of range in row " + std::to_string(i));
    out(i, 0) = x(i, idx[i]);
  }
  return t.record(std::move(out), {a}, [a, idx, &t](const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, idx[i]) = g(i, 0);
    t.accumulate(a, d);
  });
}

Var fold_rows(Var a, Eigen::Index width) {
  Tape& t = *a.tape;
  const Mat& x = a.value();
  if (x.cols() != 1 || width <= 0 || x.rows() % width != 0) throw ShapeError("fold_rows: bad column vector length");
  const Eigen::Index n = x.rows() / width;
  Mat out(n, width);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index j = 0; j < width; ++j) out(r, j) = x(r * width + j, 0);
  }
  return t.record(std::move(out), {a}, [a, n, width, &t](const Mat& g) {
    Mat d(n * width, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index j = 0; j < width; ++j) d(r * width + j, 0) = g(r, j);
    }
    t.accumulate(a, d);
  });
}

Var segment_weighted_sum(Var m, Var x) {
  Tape& t = tape_of(m, x);
  const Eigen::Index b = m.rows(), p = m.cols();
  if (x.rows() != b * p) throw ShapeError("segment_weighted_sum: x must have rows = m.rows * m.cols");
  Mat out = Mat::Zero(b, x.cols());
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) out.row(i) += m.value()(i, j) * x.value().row(i * p + j);
  }
  return t.record(std::move(out), {m, x}, [m, x, b, p, &t](const Mat& g) {
    if (t.needs_grad(m)) {
      Mat dm(b, p);
      for (Eigen::Index i = 0; i < b; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) dm(i, j) = g.row(i).dot(x.value().row(i * p + j));
      }
      t.accumulate(m, dm);
    }
    if (t.needs_grad(x)) {
      Mat dx(b * p, x.cols());
      for (Eigen::Index i = 0; i < b; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) dx.row(i * p + j) = m.value()(i, j) * g.row(i);
      }
      t.accumulate(x, dx);
    }
  });
}

Var batch_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  tape_of(x, beta);
  const Mat& v = x.value();
  const Eigen::Index n = v.rows(), c = v.cols();
  if (n == 0) throw ShapeError("batch_norm over zero rows");
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    throw ShapeError("batch_norm: gamma and beta must be 1 x cols");
  }
  const Eigen::RowVectorXd mu = v.colwise().mean();
  const Mat centered = v.rowwise() - mu;
  const Eigen::RowVectorXd inv_std =
      (centered.array().square().colwise().sum() / double(n) + eps).sqrt().inverse().matrix();
  Mat xhat = centered * inv_std.asDiagonal();
  Mat out = (xhat * gamma.value().row(0).asDiagonal()).rowwise() + beta.value().row(0);
  return t.record(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, n, &t](const Mat& g) {
    if (t.needs_grad(gamma)) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
    if (t.needs_grad(beta)) t.accumulate(beta, g.colwise().sum());
    if (t.needs_grad(x)) {
      const Mat gx = g * gamma.value().row(0).asDiagonal();
      const Eigen::RowVectorXd sum_g = gx.colwise().sum();
      const Eigen::RowVectorXd sum_gx = gx.cwiseProduct(xhat).colwise().sum();
      Mat d = (gx * double(n)).rowwise() - sum_g;
      d -= xhat * sum_gx.asDiagonal();
      t.accumulate(x, d * (inv_std / double(n)).asDiagonal());
    }
  });
}

}  // namespace nnscene::ad
