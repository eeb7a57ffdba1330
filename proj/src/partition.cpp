#include "rfc/partition.hpp"

#include "rfc/errors.hpp"

namespace rfc {

namespace {

std::size_t argmax_first(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i)
    if (t[i] > t[best]) best = i;
  return best;
}

}  // namespace

Tensor RegionMasks::flat() const {
  Tensor out({count(), grid_h() * grid_w()});
  out.array() = masks.array();
  return out;
}

KeypointEstimate locate_keypoints(const Var& frame, const LocatorParams& p) {
  check_dim(frame.value().rank() == 3, "locate_keypoints: frame must be H x W x D");
  const std::size_t h = frame.value().dim(0), w = frame.value().dim(1),
                    d = frame.value().dim(2);
  check_dim(p.reduce.value().rank() == 2 && p.reduce.value().dim(0) == d,
            "locate_keypoints: channel projection shape mismatch");
  const std::size_t dr = p.reduce.value().dim(1);

  Var reduced =
      reshape(matmul(reshape(frame, {h * w, d}), p.reduce), {h, w, dr});
  // Row heads see the width-pooled descriptor, the column head the
  // height-pooled one; both flattened to a single linear layer input.
  Var row_desc = reshape(mean_over_axis(reduced, 1), {1, h * dr});
  Var col_desc = reshape(mean_over_axis(reduced, 0), {1, w * dr});

  KeypointEstimate est;
  for (std::size_t k = 0; k < 3; ++k) {
    check_dim(p.row_w[k].value().dim(0) == h * dr &&
                  p.row_w[k].value().dim(1) == h,
              "locate_keypoints: row head shape mismatch");
    est.probs[k] =
        softmax_rows(add_rowvec(matmul(row_desc, p.row_w[k]), p.row_b[k]));
  }
  check_dim(p.col_w.value().dim(0) == w * dr && p.col_w.value().dim(1) == w,
            "locate_keypoints: column head shape mismatch");
  est.probs[3] = softmax_rows(add_rowvec(matmul(col_desc, p.col_w), p.col_b));
  for (std::size_t k = 0; k < 4; ++k)
    est.coords[k] = argmax_first(est.probs[k].value());
  return est;
}

RegionMasks adaptive_masks(const std::array<std::size_t, 4>& coords,
                           std::size_t grid_h, std::size_t grid_w) {
  check_valid(grid_h >= 1 && grid_w >= 1, "adaptive_masks: empty grid");
  check_valid(coords[0] < grid_h && coords[1] < grid_h && coords[2] < grid_h &&
                  coords[3] < grid_w,
              "adaptive_masks: coordinate outside grid");
  RegionMasks rm{Tensor({6, grid_h, grid_w})};
  const std::size_t a1 = coords[0], a2 = coords[1], a3 = coords[2],
                    a4 = coords[3];
  for (std::size_t h = 0; h < grid_h; ++h)
    for (std::size_t w = 0; w < grid_w; ++w) {
      std::size_t r;
      if (h <= a1)
        r = 0;
      else if (h <= a2)
        r = 1;
      else if (h <= a3)
        r = (w <= a4) ? 2 : 3;
      else
        r = (w <= a4) ? 4 : 5;
      rm.masks.at(r, h, w) = 1.0;
    }
  return rm;
}

RegionMasks fixed_masks(std::size_t parts, std::size_t grid_h,
                        std::size_t grid_w) {
  check_valid(parts >= 2 && parts <= 8, "fixed_masks: parts must be in [2, 8]");
  check_valid(grid_h >= 1 && grid_w >= 1, "fixed_masks: empty grid");
  RegionMasks rm{Tensor({parts, grid_h, grid_w})};
  for (std::size_t i = 0; i < parts; ++i) {
    const std::size_t lo = i * grid_h / parts, hi = (i + 1) * grid_h / parts;
    for (std::size_t h = lo; h < hi; ++h)
      for (std::size_t w = 0; w < grid_w; ++w) rm.masks.at(i, h, w) = 1.0;
  }
  return rm;
}

RegionMasks region_masks(const PartitionSpec& spec,
                         const std::array<std::size_t, 4>& coords,
                         std::size_t grid_h, std::size_t grid_w) {
  if (spec.mode == PartitionMode::Adaptive)
    return adaptive_masks(coords, grid_h, grid_w);
  return fixed_masks(spec.parts, grid_h, grid_w);
}

RegionGeometry region_geometry(const RegionMasks& rm) {
  RegionGeometry geo;
  geo.grid_h = rm.grid_h();
  geo.grid_w = rm.grid_w();
  geo.boxes.resize(rm.count());
  for (std::size_t i = 0; i < rm.count(); ++i) {
    std::size_t rmin = geo.grid_h, rmax = 0, cmin = geo.grid_w, cmax = 0;
    bool any = false;
    for (std::size_t h = 0; h < geo.grid_h; ++h)
      for (std::size_t w = 0; w < geo.grid_w; ++w)
        if (rm.masks.at(i, h, w) != 0.0) {
          any = true;
          rmin = std::min(rmin, h);
          rmax = std::max(rmax, h);
          cmin = std::min(cmin, w);
          cmax = std::max(cmax, w);
        }
    if (!any) continue;  // empty region keeps the zero box
    RegionBox& b = geo.boxes[i];
    b.present = true;
    b.y = (static_cast<double>(rmin) + static_cast<double>(rmax)) / 2.0;
    b.x = (static_cast<double>(cmin) + static_cast<double>(cmax)) / 2.0;
    b.h = static_cast<double>(rmax - rmin + 1);
    b.w = static_cast<double>(cmax - cmin + 1);
  }
  return geo;
}

Var keypoints_loss(const std::vector<KeypointEstimate>& frames,
                   const std::vector<std::array<std::size_t, 4>>& labels) {
  check_valid(!frames.empty(), "keypoints_loss: no frames");
  check_valid(frames.size() == labels.size(),
              "keypoints_loss: label count mismatch");
  std::vector<Var> terms;
  terms.reserve(frames.size() * 4);
  for (std::size_t t = 0; t < frames.size(); ++t)
    for (std::size_t k = 0; k < 4; ++k)
      terms.push_back(neg_log_pick(frames[t].probs[k], labels[t][k]));
  return mean_vars(terms);
}

}  // namespace rfc
