#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rfc/partition.hpp"
#include "rfc/region_features.hpp"
#include "rfc/srfc.hpp"
#include "rfc/trfc.hpp"

namespace rfc {

// How the spatial and temporal completions combine inside one block.
enum class Arrangement {
  SpatialThenTemporal,  // "st": o = spatial(f), e = temporal(o)
  TemporalThenSpatial,  // "ts": e' = temporal(f), out = spatial(e')
  Parallel,             // "s+t": mean of spatial(f) and temporal(f)
  SpatialOnly,          // "s": spatial(f); works on single frames
  TemporalOnly,         // "t": temporal(f)
};

// Accepted names: st, ts, s+t, s, t. Anything else is a ValidationError.
Arrangement parse_arrangement(const std::string& name);
const char* arrangement_name(Arrangement a);
bool uses_spatial(Arrangement a);
bool uses_temporal(Arrangement a);

// One completion block's static configuration. For adaptive partitioning the
// region count is fixed at six; for fixed banding it equals the band count.
struct BlockConfig {
  Arrangement arrangement = Arrangement::SpatialThenTemporal;
  std::size_t regions = 6;
  std::size_t clusters = 3;
  PartitionSpec partition{};
  std::vector<std::size_t> stages{2, 3};  // 1-based backbone stages to follow
};

std::size_t region_count(const BlockConfig& config);

// Scale and shift of the residual fusion's batch norm. Scale starts at zero
// so a freshly built block is an exact identity map.
struct ProjectionParams {
  Var bn_scale;  // D
  Var bn_shift;  // D
};

// Non-trainable normalization state: running statistics consumed in
// inference mode and updated (momentum 0.9) by training-mode forwards that
// ask for it.
struct BnState {
  Tensor running_mean;  // D
  Tensor running_var;   // D
  double eps = 1e-5;
  double momentum = 0.9;
};

// Scatter each frame's region rows back to their pixels (every pixel of
// region i receives row i), batch-normalize per channel over all T*H*W
// positions, and add the original features: E_t = BN(F'_t) + F_t.
// Training mode normalizes with this batch's statistics; inference mode
// uses the running statistics in `bn`.
std::vector<Var> reverse_projection(const std::vector<Var>& region_rows,
                                    const std::vector<RegionMasks>& masks,
                                    const std::vector<Var>& features,
                                    const ProjectionParams& p, BnState& bn,
                                    bool training, bool update_stats);

// All learned pieces of one block. The optional members exist only when the
// configuration needs them: a locator only for adaptive partitioning, the
// spatial head unless the arrangement is temporal-only, the temporal head
// unless it is spatial-only.
struct RfcBlockParams {
  std::optional<LocatorParams> locator;
  ForegroundParams foreground;
  std::optional<SrfcParams> srfc;
  std::optional<TrfcParams> trfc;
  ProjectionParams projection;
};

// Per-frame inspection bundle. Everything here is an output-only view;
// nothing feeds back into the computation.
struct FrameDiagnostics {
  std::optional<KeypointEstimate> keypoints;  // adaptive mode only
  Var foreground;                             // H x W probabilities
  RegionMasks masks;
  RegionGeometry geometry;
  Tensor position_sim;               // N x N pairwise position similarity
  Var f;                             // N x D extracted region features
  Var completed;                     // N x D after the arrangement
  Var srfc_input;                    // what the spatial head saw (if any)
  std::optional<AssignmentVars> assign;
};

struct BlockOut {
  std::vector<Var> e_frames;  // per frame, H x W x D fused output
  std::vector<FrameDiagnostics> frames;
  // Temporal diagnostics; empty when the arrangement has no temporal branch.
  std::vector<std::vector<Var>> alpha;  // [t][i], 1 x (T-1)
  std::vector<Var> gates;               // per frame, N x D
  std::vector<Var> contexts;            // per frame, N x D
};

// Full block: per frame locate -> masks -> foreground -> extract, then the
// configured arrangement over region features, then reverse projection.
// Sequences of one frame are rejected unless the arrangement is
// spatial-only.
BlockOut rfc_block_forward(const std::vector<Var>& features,
                           const BlockConfig& config,
                           const RfcBlockParams& params, BnState& bn,
                           bool training, bool update_stats);

// One toy-backbone stage: 1x1 channel map + bias, relu, 2x2 mean-pool.
struct StageParams {
  Var weight;  // C_in x C_out
  Var bias;    // C_out
};

// A completion block bound to the backbone position it follows.
struct InsertedBlock {
  std::size_t stage = 0;  // 1-based; applied after this stage's pooling
  RfcBlockParams params;
  BnState* bn = nullptr;
};

struct BackboneOut {
  Var final_map;         // T x H x W x C
  Var sequence_feature;  // 1 x C: spatial mean per frame, then temporal mean
  std::vector<Var> stage_maps;   // T x H x W x C after each stage (pre-block)
  std::vector<BlockOut> blocks;  // aligned with the `blocks` argument
};

// Stage stack over a T x H0 x W0 x C image tensor with completion blocks
// applied after the configured stages. `blocks` must be sorted by stage,
// each stage index in [1, stages.size()] and distinct.
BackboneOut toy_backbone_forward(const Var& images,
                                 const std::vector<StageParams>& stages,
                                 const BlockConfig& config,
                                 const std::vector<InsertedBlock>& blocks,
                                 bool training, bool update_stats);

// Ground truth accompanying one image sequence, at image resolution. The
// model rescales rows and downsamples masks to each insertion stage's grid.
struct SequenceLabels {
  std::vector<std::array<std::size_t, 4>> keypoints;  // per frame
  std::vector<Tensor> foreground;                     // per frame, H0 x W0 0/1
};

// Row index rescale from image rows to a coarser grid: floor(a * to / from).
std::size_t rescale_coord(std::size_t a, std::size_t from, std::size_t to);

// Majority downsample of a 0/1 mask onto an exactly dividing coarser grid:
// a cell is 1 when its block mean is >= 0.5.
Tensor downsample_mask(const Tensor& mask, std::size_t grid_h,
                       std::size_t grid_w);

// One training/inference pass over a sequence. The auxiliary terms are
// averaged per the objective's conventions (over frames, then over
// insertion stages); structural zeros stand in when a term does not apply
// (fixed partitioning has no key-point loss, spatial-only no gate terms).
struct SequenceForward {
  Var sequence_feature;  // 1 x D
  Var logits;            // 1 x num_identities
  Var keypoint_loss;     // L_k contribution of this sequence
  Var foreground_loss;   // L_f
  Var appearance_reg;    // L_a
  Var position_reg;      // L_p
  BackboneOut backbone;
};

struct ModelConfig {
  BlockConfig block{};
  std::size_t image_h = 32, image_w = 16, image_c = 3;
  std::vector<std::size_t> stage_channels{8, 16, 16};
  std::size_t num_identities = 10;
  std::uint64_t seed = 1;
};

// The trainable toy network: backbone stages, completion blocks at the
// configured insertion stages, and an identity classifier on the sequence
// feature. Owns every Parameter (stable addresses, deterministic
// registration order) and the blocks' normalization state.
class RfcModel {
 public:
  explicit RfcModel(const ModelConfig& config);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter*> parameters();
  Parameter* find(const std::string& name);  // null when absent
  void zero_grads();

  // Labels may be null (no auxiliary supervision; L_k/L_f become zeros).
  SequenceForward forward_sequence(const Tensor& images,
                                   const SequenceLabels* labels, bool training,
                                   bool update_stats);

  // Grid extents after stage s (1-based).
  std::pair<std::size_t, std::size_t> stage_grid(std::size_t stage) const;

  std::size_t block_count() const { return slots_.size(); }
  BnState& block_bn(std::size_t i) { return slots_[i].bn; }
  std::size_t block_stage(std::size_t i) const { return slots_[i].stage; }

  // Checkpoints: a `manifest.txt` of `name rank d1 d2 ...` lines plus one
  // tensor file per entry (parameters and running statistics).
  void save_checkpoint(const std::string& dir) const;
  void load_checkpoint(const std::string& dir);

 private:
  struct BlockSlot {
    std::size_t stage = 0;
    std::size_t grid_h = 0, grid_w = 0, channels = 0;
    BnState bn;
  };

  Parameter* add_param(const std::string& name, Shape shape);
  RfcBlockParams bind_block(std::size_t slot) ;
  std::vector<std::pair<std::string, Tensor*>> checkpoint_entries();
  std::vector<std::pair<std::string, const Tensor*>> checkpoint_entries() const;

  ModelConfig cfg_;
  std::vector<std::unique_ptr<Parameter>> params_;
  std::vector<BlockSlot> slots_;
  std::vector<std::pair<std::size_t, std::size_t>> grids_;  // after each stage
};

}  // namespace rfc
