#include "rfc/eval.hpp"

#include <algorithm>
#include <cmath>

#include "rfc/errors.hpp"

namespace rfc {

double cosine_distance(const Tensor& a, const Tensor& b) {
  check_dim(a.size() == b.size(), "cosine_distance: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

Tensor clip_split_average(const Tensor& sequence, std::size_t clip_len,
                          const std::function<Tensor(const Tensor&)>& model) {
  check_valid(clip_len >= 1, "clip_split_average: clip length must be >= 1");
  check_dim(sequence.rank() >= 1, "clip_split_average: sequence has no frames");
  const std::size_t t_len = sequence.dim(0);
  check_valid(t_len >= 1, "clip_split_average: sequence has no frames");

  std::size_t frame_size = 1;
  for (std::size_t i = 1; i < sequence.rank(); ++i)
    frame_size *= sequence.dim(i);

  Tensor mean;
  std::size_t clips = 0;
  for (std::size_t start = 0; start < t_len; start += clip_len) {
    const std::size_t len = std::min(clip_len, t_len - start);
    Shape clip_shape = sequence.shape();
    clip_shape[0] = len;
    Tensor clip(clip_shape);
    for (std::size_t q = 0; q < len * frame_size; ++q)
      clip[q] = sequence[start * frame_size + q];
    Tensor feature = model(clip);
    if (clips == 0) {
      mean = feature;
    } else {
      check_dim(feature.size() == mean.size(),
                "clip_split_average: model output size changed across clips");
      for (std::size_t q = 0; q < mean.size(); ++q) mean[q] += feature[q];
    }
    ++clips;
  }
  for (std::size_t q = 0; q < mean.size(); ++q)
    mean[q] /= static_cast<double>(clips);
  return mean;
}

std::optional<QueryScore> rank_and_score(const Tensor& query, int qid, int qcam,
                                         const GallerySet& gallery) {
  check_dim(gallery.features.rank() == 2,
            "rank_and_score: gallery features must be G x D");
  const std::size_t g = gallery.features.dim(0), d = gallery.features.dim(1);
  check_dim(gallery.identities.size() == g && gallery.cameras.size() == g,
            "rank_and_score: gallery label lengths mismatch");
  check_dim(query.size() == d, "rank_and_score: query feature size mismatch");

  // Keep the admissible entries with their distances; order by (distance,
  // gallery index), which makes ties deterministic.
  std::vector<std::pair<double, std::size_t>> ranked;
  ranked.reserve(g);
  Tensor row({d});
  for (std::size_t i = 0; i < g; ++i) {
    if (gallery.identities[i] == qid && gallery.cameras[i] == qcam) continue;
    for (std::size_t c = 0; c < d; ++c) row[c] = gallery.features.at(i, c);
    ranked.emplace_back(cosine_distance(query, row), i);
  }
  std::sort(ranked.begin(), ranked.end());

  QueryScore score;
  std::size_t matches = 0;
  double ap = 0.0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    if (gallery.identities[ranked[r].second] != qid) continue;
    ++matches;
    if (matches == 1) score.first_match_rank = r + 1;
    ap += static_cast<double>(matches) / static_cast<double>(r + 1);
  }
  if (matches == 0) return std::nullopt;
  score.ap = ap / static_cast<double>(matches);
  return score;
}

EvalResult evaluate(const Tensor& queries, const std::vector<int>& qids,
                    const std::vector<int>& qcams, const GallerySet& gallery,
                    std::size_t k_max) {
  check_dim(queries.rank() == 2, "evaluate: queries must be Q x D");
  const std::size_t q_count = queries.dim(0), d = queries.dim(1);
  check_valid(q_count >= 1, "evaluate: no queries");
  check_dim(qids.size() == q_count && qcams.size() == q_count,
            "evaluate: query label lengths mismatch");
  check_valid(k_max >= 1, "evaluate: k_max must be >= 1");

  EvalResult result;
  result.cmc.assign(k_max, 0.0);
  std::size_t scored = 0;
  double ap_sum = 0.0;
  Tensor query({d});
  for (std::size_t i = 0; i < q_count; ++i) {
    for (std::size_t c = 0; c < d; ++c) query[c] = queries.at(i, c);
    std::optional<QueryScore> s =
        rank_and_score(query, qids[i], qcams[i], gallery);
    if (!s) continue;
    ++scored;
    ap_sum += s->ap;
    for (std::size_t k = s->first_match_rank; k <= k_max; ++k)
      result.cmc[k - 1] += 1.0;
  }
  check_valid(scored >= 1, "evaluate: every query was skipped (no valid "
                           "gallery match)");
  result.mAP = ap_sum / static_cast<double>(scored);
  for (double& v : result.cmc) v /= static_cast<double>(scored);
  return result;
}

}  // namespace rfc
