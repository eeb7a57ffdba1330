#include "rfc/losses.hpp"

#include <cmath>
#include <cstdio>

#include "rfc/errors.hpp"

namespace rfc {

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  return cross_entropy_mean(logits, labels);
}

Var batch_hard_triplet(const Var& features, const std::vector<int>& labels,
                       double margin) {
  check_dim(features.value().rank() == 2, "batch_hard_triplet: features must "
                                          "be B x D");
  const std::size_t b = features.value().dim(0);
  check_valid(labels.size() == b, "batch_hard_triplet: label count mismatch");
  check_valid(margin >= 0.0, "batch_hard_triplet: negative margin");
  check_valid(b >= 2, "batch_hard_triplet: batch too small to mine");

  std::vector<Var> rows;
  rows.reserve(b);
  for (std::size_t i = 0; i < b; ++i) rows.push_back(row(features, i));

  // Pairwise euclidean distances, built once and shared by every anchor.
  std::vector<std::vector<Var>> dist(b, std::vector<Var>(b));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j) {
      Var diff = sub(rows[i], rows[j]);
      Var d = sqrt(sum(mul(diff, diff)));
      dist[i][j] = d;
      dist[j][i] = d;
    }

  Var margin_c = constant(Tensor::scalar(margin));
  std::vector<Var> hinges;
  hinges.reserve(b);
  for (std::size_t a = 0; a < b; ++a) {
    bool has_pos = false, has_neg = false;
    std::size_t hp = 0, hn = 0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (!has_pos || dist[a][j].value()[0] > dist[a][hp].value()[0]) hp = j;
        has_pos = true;
      } else {
        if (!has_neg || dist[a][j].value()[0] < dist[a][hn].value()[0]) hn = j;
        has_neg = true;
      }
    }
    check_valid(has_pos, "batch_hard_triplet: identity " +
                             std::to_string(labels[a]) +
                             " has a single instance in the batch");
    check_valid(has_neg, "batch_hard_triplet: identity " +
                             std::to_string(labels[a]) +
                             " has no negative in the batch");
    hinges.push_back(
        relu(add(sub(dist[a][hp], dist[a][hn]), margin_c)));
  }
  return mean_vars(hinges);
}

namespace {

double scalar_of(const Var& v, const char* part) {
  check_dim(v.defined() && v.value().size() == 1,
            std::string("total_loss: part '") + part + "' is not a scalar");
  const double x = v.value()[0];
  check_numeric(std::isfinite(x),
                std::string("total_loss: non-finite part '") + part + "'");
  return x;
}

}  // namespace

LossReport total_loss(const LossParts& parts, const LossWeights& weights) {
  scalar_of(parts.ce, "ce");
  scalar_of(parts.triplet, "triplet");
  scalar_of(parts.keypoints, "keypoints");
  scalar_of(parts.foreground, "foreground");
  scalar_of(parts.appearance_reg, "appearance_reg");
  scalar_of(parts.position_reg, "position_reg");
  check_valid(weights.lambda1 >= 0.0 && weights.lambda2 >= 0.0 &&
                  weights.lambda3 >= 0.0,
              "total_loss: negative weight");

  LossReport report;
  report.parts = parts;
  Var total = add(parts.ce, parts.triplet);
  total = add(total, scale(parts.keypoints, weights.lambda1));
  total = add(total, scale(parts.foreground, weights.lambda2));
  total = add(total,
              scale(add(parts.appearance_reg, parts.position_reg),
                    weights.lambda3));
  report.total = total;
  return report;
}

const char* LossReport::csv_header() {
  return "step,ce,triplet,lk,lf,la,lp,total";
}

std::string LossReport::csv_line(std::size_t step) const {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step,
                parts.ce.value()[0], parts.triplet.value()[0],
                parts.keypoints.value()[0], parts.foreground.value()[0],
                parts.appearance_reg.value()[0], parts.position_reg.value()[0],
                total.value()[0]);
  return buf;
}

}  // namespace rfc
