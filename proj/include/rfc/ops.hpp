#pragma once

#include <vector>

#include "rfc/autodiff.hpp"

namespace rfc {

// Differentiable kernels. Every function builds one graph node whose
// backward rule is written by hand; unit tests hold each rule to central
// finite differences. Shapes are validated up front (DimensionError).

// C = A * B for rank-2 operands with agreeing inner extents.
Var matmul(const Var& a, const Var& b);

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

// Row-broadcast: v has size cols(m); applied to every row.
Var add_rowvec(const Var& m, const Var& v);
Var mul_rowvec(const Var& m, const Var& v);

Var scale(const Var& x, double c);

// Elementwise x / s where s is a size-1 graph value.
Var div_scalar(const Var& x, const Var& s);

Var relu(const Var& x);
Var sigmoid(const Var& x);
Var abs(const Var& x);   // subgradient 0 at 0
Var sqrt(const Var& x);  // subgradient 0 at 0

// Reductions to a size-1 tensor.
Var sum(const Var& x);
Var dot(const Var& a, const Var& b);

// Sum of same-shaped values as a single node (keeps graphs shallow and the
// reduction order fixed).
Var sum_vars(const std::vector<Var>& xs);
Var mean_vars(const std::vector<Var>& xs);

// Row-wise softmax over a rank-2 input; rows sum to one exactly up to
// rounding. NaN input is a NumericError.
Var softmax_rows(const Var& x);

// Divide each column by its sum; a column summing below 1e-12 is degenerate.
Var l1_normalize_columns(const Var& x);

// Mean over one axis; output drops that axis.
Var mean_over_axis(const Var& x, std::size_t axis);

// Same flat data, new extents (product must match).
Var reshape(const Var& x, Shape shape);

// Rank-2 transpose.
Var transpose(const Var& x);

// Row i of a rank-2 input, kept as 1 x cols.
Var row(const Var& x, std::size_t i);

// Index t of axis 0 of a rank-4 input -> rank-3.
Var slice_frame(const Var& x, std::size_t t);

// Stack rank-2 pieces with equal column counts along axis 0.
Var concat_rows(const std::vector<Var>& pieces);

// Gather size-1 values into a single 1 x n row.
Var stack_scalars(const std::vector<Var>& scalars);

// Cosine similarity of two equal-sized values (flattened); defined as 0 when
// either norm is exactly zero, with zero gradient there.
Var cosine(const Var& a, const Var& b);

// Mean over rows of -log softmax(logits)[label]; labels index columns.
Var cross_entropy_mean(const Var& logits, const std::vector<int>& labels);

// -log p[idx] of a probability row (post-softmax input).
Var neg_log_pick(const Var& probs, std::size_t idx);

// Binary cross entropy summed over all elements, probabilities clamped to
// [1e-9, 1 - 1e-9] inside the loss only; labels are a constant tensor.
Var bce_sum(const Var& probs, const Tensor& labels);

// 2x2 mean pooling over the two inner spatial axes of a (T,H,W,C) input;
// edge windows shrink instead of padding.
Var mean_pool2x2(const Var& x);

// Batch statistics of a normalization pass, for running-average updates.
struct BatchStats {
  Tensor mean;  // {D}
  Tensor var;   // {D}, biased
};

// Train-mode batch norm over rows of a P x D input: per-column statistics,
// then y = gamma * xhat + beta. Stats of this batch are written to `out`.
Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta,
                     double eps, BatchStats* out);

// Inference-mode batch norm using stored statistics (per-column affine).
Var batch_norm_infer(const Var& x, const Var& gamma, const Var& beta,
                     const Tensor& mean, const Tensor& var, double eps);

// Foreground-weighted region pooling: masks is a constant N x P 0/1 matrix,
// fg a size-P probability map, frame a P x D feature matrix. Row i of the
// result is sum_p w_ip frame_p with w_i = (mask_i * fg) / sum(mask_i * fg).
// An all-zero mask row yields a zero feature row; a nonzero mask whose
// weight sum underflows below 1e-300 is a NumericError.
Var region_pool(const Var& frame, const Var& fg, const Tensor& masks);

}  // namespace rfc
