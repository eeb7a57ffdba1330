#pragma once

#include <vector>

#include "rfc/ops.hpp"
#include "rfc/partition.hpp"

namespace rfc {

// Per-pixel foreground head: 1x1 projection to a single logit, sigmoid.
struct ForegroundParams {
  Var weight;  // D x 1
  Var bias;    // 1
};

// Probability map over the frame, H x W.
Var foreground_map(const Var& frame, const ForegroundParams& p);

// Foreground-weighted region pooling: row i is the convex combination of
// frame pixels under mask i with weights mask*foreground, l1-normalized.
// Empty regions contribute a zero row.
Var extract_region_features(const Var& frame, const RegionMasks& masks,
                            const Var& fg);

// Binary cross entropy against 0/1 labels, averaged over every pixel of the
// sequence; probabilities are clamped inside the loss only.
Var foreground_loss(const std::vector<Var>& fg_frames,
                    const std::vector<Tensor>& labels);

}  // namespace rfc
