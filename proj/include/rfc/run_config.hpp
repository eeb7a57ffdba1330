#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rfc/block.hpp"
#include "rfc/synthdata.hpp"
#include "rfc/train.hpp"

namespace rfc {

// Everything the command-line tool can set, with desk-scale defaults.
// Values compose in three layers: these defaults, then config-file entries,
// then flags (flags win).
struct RunConfig {
  std::uint64_t seed = 1;

  // Completion block.
  std::string arrangement = "st";
  std::size_t regions = 6;
  std::size_t clusters = 3;
  std::string partition = "adaptive";  // "adaptive" or "fixed:P"
  std::vector<std::size_t> stages = {2, 3};
  std::vector<std::size_t> stage_channels = {8, 16, 16};

  // Objective.
  double lambda1 = 0.1;
  double lambda2 = 0.5;
  double lambda3 = 0.05;
  double margin = 0.3;

  // Synthetic data.
  std::size_t identities = 10;
  std::size_t tracklets = 4;
  std::size_t frames = 32;
  std::size_t image_h = 32, image_w = 16, channels = 3;
  double occlusion = 0.5;
  double occlusion_lo = 0.25, occlusion_hi = 0.6;
  double gallery_occlusion = 0.0;
  std::size_t cameras = 4;
  std::size_t tracklet_offset = 0;

  // Optimizer and batching.
  double lr = 0.05;
  double decay = 0.1;
  std::size_t epochs = 2;
  std::size_t batch_p = 4, batch_k = 2;
  std::size_t clip_len = 4, clip_stride = 8;

  // Evaluation and I/O.
  std::size_t eval_clip = 64;
  std::string out = "out";
  std::string checkpoint;
  std::string dataset;

  // Test hook: corrupt one reverse-mode gradient before comparison so the
  // gradient check's failure path can be exercised.
  bool corrupt_backward = false;
};

// Applies one `key = value` setting; keys use underscores (`batch_p`).
// Unknown keys and unparseable values are validation errors naming the key.
void apply_key_value(RunConfig& rc, const std::string& key,
                     const std::string& value);

// Config file: one `key = value` per line, `#` starts a comment, blank
// lines ignored.
void apply_config_file(RunConfig& rc, const std::string& path);

// "2,3" -> {2,3}; "none" or "" -> {}.
std::vector<std::size_t> parse_stage_list(const std::string& text);

// "adaptive" -> adaptive six-way; "fixed:P" -> P horizontal bands.
PartitionSpec parse_partition(const std::string& text);

// Typed assemblies. Cross-field consistency (adaptive mode needs six
// regions, and so on) is enforced by the model constructor.
ModelConfig model_config(const RunConfig& rc);
TrainConfig train_config(const RunConfig& rc);
ExportConfig export_config(const RunConfig& rc);

}  // namespace rfc
