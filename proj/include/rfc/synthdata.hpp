#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rfc/block.hpp"
#include "rfc/tensor.hpp"

namespace rfc {

// Deterministic synthetic occluded-sequence generator. Each identity is a
// fixed template of six colored body bands (head, torso, and four leg
// quadrants) on a plain background; tracklets add per-frame jitter and,
// with the configured probability, overwrite a block of rows with an
// obstacle texture drawn from a small bank shared across identities.
struct SynthConfig {
  std::size_t num_identities = 10;
  std::size_t frames_per_tracklet = 32;
  std::size_t image_h = 32;
  std::size_t image_w = 16;
  std::size_t channels = 3;
  // Per-frame chance that a block of rows is occluded, and the row-fraction
  // range the block size is drawn from.
  double occlusion_probability = 0.5;
  double occlusion_lo = 0.25;
  double occlusion_hi = 0.6;
  // Occlusion blocks hug the bottom edge by default (obstacles mostly hide
  // legs); uniform placement exists for robustness experiments.
  bool bottom_anchored = true;
  std::uint64_t seed = 1;
};

void validate(const SynthConfig& cfg);

// Band geometry for an H x W image. Boundaries are exclusive row/column
// indices; the matching key-point labels are the last row (or column) of
// the region above (or left of) each boundary, so they plug directly into
// the partition predicate.
struct BandLayout {
  std::size_t head_end = 0;    // head rows [0, head_end)
  std::size_t torso_end = 0;   // torso rows [head_end, torso_end)
  std::size_t legs_split = 0;  // upper legs [torso_end, legs_split), lower below
  std::size_t col_split = 0;   // left columns [0, col_split)
  std::size_t body_lo = 0;     // body occupies columns [body_lo, body_hi)
  std::size_t body_hi = 0;
  std::array<std::size_t, 4> keypoints() const {
    return {head_end - 1, torso_end - 1, legs_split - 1, col_split - 1};
  }
};

BandLayout band_layout(std::size_t h, std::size_t w);

struct IdentityTemplate {
  Tensor image;      // H x W x C
  Tensor body_mask;  // H x W, 1 on body columns
  BandLayout layout;
};

// Deterministic per-(seed, id) template: six bands each filled with an
// identity-specific color plus a little per-pixel texture noise.
IdentityTemplate generate_identity(const SynthConfig& cfg, int id);

// One of the four obstacle textures: a two-color checkerboard whose colors
// come from the same palette as clothing bands, so occluders carry no
// identity information.
Tensor obstacle_texture(const SynthConfig& cfg, std::size_t index);

struct FrameOcclusion {
  bool occluded = false;
  double fraction = 0.0;        // of image rows, as drawn
  std::size_t row_begin = 0;    // occluded rows [row_begin, row_end)
  std::size_t row_end = 0;
  std::size_t obstacle = 0;     // bank index
};

struct SynthSample {
  Tensor images;  // T x H x W x C
  int identity = 0;
  SequenceLabels labels;                  // key points + foreground per frame
  std::vector<FrameOcclusion> occlusion;  // per frame
};

// All randomness is keyed by (seed, id, tracklet, frame), and every frame
// draws its decision variables unconditionally in a fixed order. Two
// consequences worth relying on: regenerating a tracklet is bit-identical,
// and changing only the occlusion probability leaves every frame that stays
// unoccluded bit-identical too.
SynthSample generate_tracklet(const SynthConfig& cfg, int id, int tracklet);

struct TrackletRecord {
  int tracklet_id = 0;
  int identity = 0;
  int camera = 0;
  std::size_t frames = 0;
  std::string file;  // resolved path, ready for load_tensor
};

// Dataset export: camera = tracklet index mod `cameras`. Camera 0 plays the
// query role and uses the configured occlusion probability; the other
// cameras use `gallery_occlusion_probability`.
struct ExportConfig {
  SynthConfig synth;
  std::size_t tracklets_per_identity = 4;
  std::size_t cameras = 4;
  double gallery_occlusion_probability = 0.0;
  // Generation uses tracklet indices offset + k. An offset past the
  // training range yields fresh jitter/occlusion draws for the same
  // identities, keeping evaluation tracklets distinct from training ones.
  std::size_t tracklet_offset = 0;
};

// Writes one image tensor per tracklet plus manifest.csv
// (tracklet_id,identity,camera,frame_count,file) into `dir`.
std::vector<TrackletRecord> export_dataset(const ExportConfig& cfg,
                                           const std::string& dir);

// Parses a manifest written by export_dataset. File paths in the result are
// resolved against the manifest's directory.
std::vector<TrackletRecord> read_manifest(const std::string& path);

}  // namespace rfc
