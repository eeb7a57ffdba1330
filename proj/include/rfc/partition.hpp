#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "rfc/autodiff.hpp"
#include "rfc/ops.hpp"

namespace rfc {

// Key-point locator weights for one insertion stage. Three row heads predict
// the shoulder / waist / knee boundary rows, one column head predicts the
// left/right split column.
struct LocatorParams {
  Var reduce;                // D x Dr channel projection (no bias)
  std::array<Var, 3> row_w;  // (H*Dr) x H
  std::array<Var, 3> row_b;  // H
  Var col_w;                 // (W*Dr) x W
  Var col_b;                 // W
};

// Locator output for one frame: per-head boundary distributions plus their
// argmax coordinates. Ties resolve to the first index. The coordinates are
// deliberately not part of the graph: masks built from them are constants,
// and the locator trains only through the key-point loss.
struct KeypointEstimate {
  std::array<Var, 4> probs;            // [0..2] over H rows, [3] over W cols
  std::array<std::size_t, 4> coords;
};

KeypointEstimate locate_keypoints(const Var& frame, const LocatorParams& p);

enum class PartitionMode { Adaptive, Fixed };

struct PartitionSpec {
  PartitionMode mode = PartitionMode::Adaptive;
  std::size_t parts = 6;  // fixed mode only; 2..8 horizontal bands
};

// Binary region masks over an H x W grid. Rows of `masks` always partition
// the grid: every pixel belongs to exactly one region; regions may be empty.
struct RegionMasks {
  Tensor masks;  // N x H x W, entries 0/1
  std::size_t count() const { return masks.dim(0); }
  std::size_t grid_h() const { return masks.dim(1); }
  std::size_t grid_w() const { return masks.dim(2); }
  // N x (H*W) copy for pooling/projection matmuls.
  Tensor flat() const;
};

struct RegionBox {
  double y = 0.0, x = 0.0;  // bounding-box center, pixel units
  double h = 0.0, w = 0.0;  // bounding-box extents, pixel units
  bool present = false;
};

struct RegionGeometry {
  std::vector<RegionBox> boxes;
  std::size_t grid_h = 0, grid_w = 0;
};

// Adaptive six-way split from four coordinates (a1..a3 boundary rows, a4
// split column): head rows <= a1; torso rows in (a1, a2]; upper-leg rows in
// (a2, a3] split left/right at a4; lower rows split left/right at a4.
// Branches evaluate in that order, so degenerate coordinates (a1 >= a2 and
// the like) still produce an exact partition with some regions empty.
RegionMasks adaptive_masks(const std::array<std::size_t, 4>& coords,
                           std::size_t grid_h, std::size_t grid_w);

// Fixed mode: `parts` near-equal horizontal bands, full width.
RegionMasks fixed_masks(std::size_t parts, std::size_t grid_h, std::size_t grid_w);

RegionMasks region_masks(const PartitionSpec& spec,
                         const std::array<std::size_t, 4>& coords,
                         std::size_t grid_h, std::size_t grid_w);

RegionGeometry region_geometry(const RegionMasks& masks);

// Mean over 4T head cross entropies: the locator distributions are already
// probabilities, so each term is -log p[label].
Var keypoints_loss(const std::vector<KeypointEstimate>& frames,
                   const std::vector<std::array<std::size_t, 4>>& labels);

}  // namespace rfc
