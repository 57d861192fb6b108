#pragma once

// Minimal reverse-mode differentiation over dense double matrices. A Tape
// records every operation in creation order; backward() walks it in reverse.

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace nnscene::ad {

using Mat = Eigen::MatrixXd;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(const Mat& grad_out)>;

  /// Leaf whose gradient is accumulated by backward().
  Var variable(Mat value);
  /// Leaf treated as a constant.
  Var constant(Mat value);

  /// Records the result of an operation. `backward` receives the gradient of
  /// the output and calls accumulate() on its inputs. It is dropped when none
  /// of `inputs` needs a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward);

  void accumulate(Var v, const Mat& g);
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Seeds d out / d out = 1 for a 1 x 1 output and propagates.
  void backward(Var out);

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(Var a, Var row);
Var transpose(Var a);
Var silu(Var a);
Var relu(Var a);
/// Elementwise log(a + eps).
Var log_eps(Var a, double eps);
Var sum(Var a);
Var mean(Var a);

/// Every row rescaled to L2 norm `target`. Throws NumericError on a zero row.
Var normalize_rows(Var a, double target = 1.0);
/// Row-wise softmax, max-subtracted.
Var softmax_rows(Var a);
/// Row-wise log-sum-exp, n x 1.
Var logsumexp_rows(Var a);
/// a(i, index[i]) for every row, n x 1.
Var pick(Var a, std::span<const int> index);
/// Column vector of length n * width folded into n rows of `width`
/// (out(r, j) = a(r * width + j)).
Var fold_rows(Var a, Eigen::Index width);
/// out(b) = sum_j m(b, j) * x(b * P + j) with P = m.cols(); x has B * P rows.
Var segment_weighted_sum(Var m, Var x);
/// Training-mode batch normalization over rows (biased variance), followed
/// by the per-column affine gamma, beta (1 x m each).
Var batch_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

}  // namespace nnscene::ad
