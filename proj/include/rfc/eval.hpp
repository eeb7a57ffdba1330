#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "rfc/tensor.hpp"

namespace rfc {

struct GallerySet {
  Tensor features;              // G x D
  std::vector<int> identities;  // G
  std::vector<int> cameras;     // G
};

struct EvalResult {
  double mAP = 0.0;
  std::vector<double> cmc;  // cmc[k-1] = fraction of queries matched by rank k
};

// 1 - cosine similarity of the flattened inputs; a zero-norm operand makes
// the similarity 0 (distance 1).
double cosine_distance(const Tensor& a, const Tensor& b);

// Test-time descriptor of a long sequence: split into consecutive clips of
// `clip_len` frames (a shorter trailing remainder is kept as its own clip),
// run the model on each clip, arithmetic mean over the clip features.
Tensor clip_split_average(const Tensor& sequence, std::size_t clip_len,
                          const std::function<Tensor(const Tensor&)>& model);

struct QueryScore {
  double ap = 0.0;
  std::size_t first_match_rank = 0;  // 1-based
};

// Single-query retrieval: rank the gallery by ascending cosine distance
// (ties break by gallery index), excluding entries that share BOTH identity
// and camera with the query. AP is the mean over matches of
// (matches at rank <= r) / r. No remaining match: the query is skipped
// (empty optional), to be excluded from aggregate means.
std::optional<QueryScore> rank_and_score(const Tensor& query, int qid, int qcam,
                                         const GallerySet& gallery);

// mAP and CMC over all non-skipped queries; every query skipped is an error.
EvalResult evaluate(const Tensor& queries, const std::vector<int>& qids,
                    const std::vector<int>& qcams, const GallerySet& gallery,
                    std::size_t k_max);

}  // namespace rfc
