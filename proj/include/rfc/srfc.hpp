#pragma once

#include "rfc/ops.hpp"
#include "rfc/partition.hpp"

namespace rfc {

// Spatial completion weights for one insertion stage: appearance and
// position cluster-assignment heads plus the two channel transformers
// (plain affine D -> D maps) on the encode and decode sides.
struct SrfcParams {
  Var appearance;  // D x K
  Var pos_hidden;  // 4 x D
  Var pos_out;     // D x K
  Var enc_w;       // D x D
  Var enc_b;       // D
  Var dec_w;       // D x D
  Var dec_b;       // D
};

// Soft assignments and clusters of one frame's completion pass.
struct AssignmentVars {
  Var appearance;  // N x K, rows sum to 1
  Var position;    // N x K, rows sum to 1
  Var combined;    // N x K, arithmetic mean of the two
  Var encoding;    // N x K, columns sum to 1
  Var decoding;    // K x N, exact transpose of `combined`
  Var clusters;    // K x D, post-transform
};

struct SrfcOut {
  Var o;  // N x D completed region features (residual on the input)
  AssignmentVars assign;
};

// Raw-pixel position descriptor per region: rows are (y, x, h, w) of the
// mask bounding box; absent regions stay zero. Constant w.r.t. the graph.
Tensor position_encoding(const RegionGeometry& geo);

// ps(i,j) = 1 - 2*sqrt(((yi-yj)/H)^2 + ((xi-xj)/W)^2), unclamped.
Tensor position_similarity(const RegionGeometry& geo);

// Full spatial completion for one frame: cluster assignment from appearance
// and position, column-normalized encode to K clusters, channel transformer,
// decode back to N regions, channel transformer, residual add.
SrfcOut srfc_forward(const Var& f, const RegionGeometry& geo,
                     const SrfcParams& p);

// Unnormalized double sums over all region pairs (i = j included).
Var appearance_regularizer(const Var& sa, const Var& f);
Var position_regularizer(const Var& sp, const Tensor& ps);

}  // namespace rfc
