#pragma once

#include <vector>

#include "rfc/ops.hpp"

namespace rfc {

// Temporal completion gate for one insertion stage. The gate weight is kept
// positive by a ReLU applied inside every forward, so the raw parameter may
// drift negative while the effective weight never does. One gate is shared
// by all regions and frames.
struct TrfcParams {
  Var gate_w_raw;  // D x D
  Var gate_b;      // D
};

struct TrfcOut {
  std::vector<Var> e;  // per frame, N x D

  // Attention diagnostics. alpha[t][i] is 1 x (T-1) over memory frames in
  // ascending order with the query frame skipped; gates and contexts are
  // N x D per frame.
  std::vector<std::vector<Var>> alpha;
  std::vector<Var> gates;
  std::vector<Var> contexts;
};

// Query-memory completion across frames, per region index: attention over
// the other frames' features of the same region (unscaled dot products),
// then a sigmoid gate blends the query with the attended context:
// e = g * o + (1 - g) * v. T = 1 is an unsupported sequence; image-mode
// callers bypass this module entirely.
TrfcOut trfc_forward(const std::vector<Var>& o_frames, const TrfcParams& p);

}  // namespace rfc
