#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "rfc/block.hpp"
#include "rfc/eval.hpp"
#include "rfc/losses.hpp"
#include "rfc/synthdata.hpp"

namespace rfc {

// Plain-gradient-descent training over synthetic tracklets. Batches take
// `batch_p` identities with `batch_k` tracklets each; every tracklet
// contributes one clip of `clip_len` frames sampled `clip_stride` apart
// (the stride shrinks to floor((T-1)/(clip_len-1)) when a tracklet is too
// short for the full span). The step size drops once, by `decay`, at
// max(1, 2*epochs/3) epochs.
struct TrainConfig {
  SynthConfig synth;  // training tracklets; occlusion applies to all of them
  std::size_t tracklets_per_identity = 4;
  std::size_t epochs = 2;
  std::size_t batch_p = 4;
  std::size_t batch_k = 2;
  std::size_t clip_len = 4;
  std::size_t clip_stride = 8;
  double lr = 0.05;
  double decay = 0.1;
  LossWeights weights;
  std::uint64_t seed = 1;  // batch/clip sampling stream, independent of init
};

struct TrainResult {
  std::size_t steps = 0;
  std::vector<std::string> log_lines;  // csv header + one line per step
  std::vector<double> totals;          // total objective per step
};

// Steps per epoch: one pass worth of batches, num_tracklets / (p*k) rounded
// up. Mutates the model's parameters and batch-norm running statistics;
// `echo`, when given, receives each log line as it is produced.
TrainResult train(RfcModel& model, const TrainConfig& cfg,
                  std::ostream* echo = nullptr);

// Clip frame indices for a tracklet of length `frames`: `clip_len` indices
// starting at `start`, `clip_stride` apart, with the documented fallback
// stride. Exposed for tests.
std::vector<std::size_t> clip_indices(std::size_t frames, std::size_t clip_len,
                                      std::size_t clip_stride,
                                      std::size_t start);

// Largest valid `start` for the given tracklet length (the sampling range
// is [0, max_clip_start]).
std::size_t max_clip_start(std::size_t frames, std::size_t clip_len,
                           std::size_t clip_stride);

struct DatasetEval {
  std::size_t queries = 0;
  std::size_t gallery = 0;
  EvalResult result;
};

// Retrieval evaluation over exported tracklets: each tracklet's descriptor is
// the clip-split average of inference-mode sequence features, camera 0 is the
// query side, every other camera is gallery. CMC is reported up to rank
// min(10, gallery size).
DatasetEval evaluate_records(RfcModel& model,
                             const std::vector<TrackletRecord>& records,
                             std::size_t clip_len);

// Manifest records for `dataset`: either a manifest .csv path or a directory
// containing manifest.csv.
std::vector<TrackletRecord> records_from(const std::string& dataset);

}  // namespace rfc
