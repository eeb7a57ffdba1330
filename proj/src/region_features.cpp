#include "rfc/region_features.hpp"

#include "rfc/errors.hpp"

namespace rfc {

Var foreground_map(const Var& frame, const ForegroundParams& p) {
  check_dim(frame.value().rank() == 3, "foreground_map: frame must be H x W x D");
  const std::size_t h = frame.value().dim(0), w = frame.value().dim(1),
                    d = frame.value().dim(2);
  check_dim(p.weight.value().rank() == 2 && p.weight.value().dim(0) == d &&
                p.weight.value().dim(1) == 1,
            "foreground_map: weight must be D x 1");
  check_dim(p.bias.value().size() == 1, "foreground_map: bias must be size 1");
  Var logits = add_rowvec(matmul(reshape(frame, {h * w, d}), p.weight), p.bias);
  return reshape(sigmoid(logits), {h, w});
}

Var extract_region_features(const Var& frame, const RegionMasks& masks,
                            const Var& fg) {
  check_dim(frame.value().rank() == 3, "extract_region_features: frame rank");
  const std::size_t h = frame.value().dim(0), w = frame.value().dim(1),
                    d = frame.value().dim(2);
  check_dim(masks.grid_h() == h && masks.grid_w() == w,
            "extract_region_features: mask grid mismatch");
  check_dim(fg.value().size() == h * w,
            "extract_region_features: foreground size mismatch");
  return region_pool(reshape(frame, {h * w, d}), reshape(fg, {h * w}),
                     masks.flat());
}

Var foreground_loss(const std::vector<Var>& fg_frames,
                    const std::vector<Tensor>& labels) {
  check_valid(!fg_frames.empty(), "foreground_loss: no frames");
  check_valid(fg_frames.size() == labels.size(),
              "foreground_loss: label count mismatch");
  std::vector<Var> sums;
  sums.reserve(fg_frames.size());
  std::size_t pixels = 0;
  for (std::size_t t = 0; t < fg_frames.size(); ++t) {
    check_dim(fg_frames[t].value().size() == labels[t].size(),
              "foreground_loss: frame/label size mismatch");
    const std::size_t n = fg_frames[t].value().size();
    sums.push_back(
        bce_sum(reshape(fg_frames[t], {n}), labels[t]));
    pixels += n;
  }
  return scale(sum_vars(sums), 1.0 / static_cast<double>(pixels));
}

}  // namespace rfc
