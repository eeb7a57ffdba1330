#pragma once

#include <string>
#include <vector>

#include "rfc/ops.hpp"

namespace rfc {

// Objective weights: the three auxiliary-term multipliers and the triplet
// hinge margin.
struct LossWeights {
  double lambda1 = 0.1;   // key-point supervision
  double lambda2 = 0.5;   // foreground supervision
  double lambda3 = 0.05;  // assignment regularizers
  double margin = 0.3;    // triplet hinge
};

// Mean over the batch of -log softmax(logits)[label].
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

// Batch-hard triplet on euclidean distances: per anchor, the farthest
// same-label and nearest different-label sample, hinged at the margin and
// averaged over anchors. Ties resolve to the lowest index. A batch where
// some identity has a single instance (or only one identity exists) is a
// mining error naming the identity.
Var batch_hard_triplet(const Var& features, const std::vector<int>& labels,
                       double margin);

// The six scalar terms of the objective, as graph values.
struct LossParts {
  Var ce;
  Var triplet;
  Var keypoints;       // L_k
  Var foreground;      // L_f
  Var appearance_reg;  // L_a
  Var position_reg;    // L_p
};

struct LossReport {
  LossParts parts;
  Var total;  // (ce + triplet) + l1*L_k + l2*L_f + l3*(L_a + L_p)

  // One comma-separated log line: step, ce, triplet, lk, lf, la, lp, total.
  std::string csv_line(std::size_t step) const;
  static const char* csv_header();
};

// Literal weighted sum; every part must be a finite scalar (a non-finite
// part is a numeric error naming it).
LossReport total_loss(const LossParts& parts, const LossWeights& weights);

}  // namespace rfc
