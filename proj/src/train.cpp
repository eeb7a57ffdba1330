#include "rfc/train.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "rfc/errors.hpp"
#include "rfc/rng.hpp"

namespace rfc {
namespace {

// Sampling stream tag; sits above the synthetic generator's tags so the two
// families of streams never collide even though they share the seed space.
constexpr std::uint64_t kSampleStream = (1ull << 40) + 4;

std::size_t effective_stride(std::size_t frames, std::size_t clip_len,
                             std::size_t clip_stride) {
  if (clip_len <= 1) return 0;
  const std::size_t span = (clip_len - 1) * clip_stride + 1;
  if (frames >= span) return clip_stride;
  return std::max<std::size_t>(1, (frames - 1) / (clip_len - 1));
}

// Partial Fisher-Yates draw of `take` distinct values from [0, n).
std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n,
                                                    std::size_t take) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t j = 0; j < take; ++j) {
    const auto r = static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(j), static_cast<int>(n - 1)));
    std::swap(pool[j], pool[r]);
  }
  pool.resize(take);
  return pool;
}

void validate_train(const RfcModel& model, const TrainConfig& cfg) {
  validate(cfg.synth);
  if (model.config().num_identities != cfg.synth.num_identities)
    throw ValidationError(
        "train: model classifier width must match the identity count");
  if (cfg.tracklets_per_identity == 0)
    throw ValidationError("train: tracklets_per_identity must be positive");
  if (cfg.batch_p < 2 || cfg.batch_k < 2)
    throw ValidationError(
        "train: triplet mining needs at least 2 identities and 2 tracklets "
        "each per batch");
  if (cfg.batch_p > cfg.synth.num_identities)
    throw ValidationError("train: batch_p exceeds the identity count");
  if (cfg.batch_k > cfg.tracklets_per_identity)
    throw ValidationError("train: batch_k exceeds tracklets per identity");
  if (cfg.clip_len == 0)
    throw ValidationError("train: clip_len must be positive");
  if (cfg.clip_len > cfg.synth.frames_per_tracklet)
    throw ValidationError("train: clip_len exceeds the tracklet length");
  if (cfg.clip_len > 1 && cfg.clip_stride == 0)
    throw ValidationError("train: clip_stride must be positive");
  if (!(cfg.lr > 0.0) || !(cfg.decay > 0.0))
    throw ValidationError("train: step size and decay must be positive");
}

}  // namespace

std::size_t max_clip_start(std::size_t frames, std::size_t clip_len,
                           std::size_t clip_stride) {
  if (clip_len == 0 || clip_len > frames)
    throw ValidationError("max_clip_start: clip does not fit the tracklet");
  const std::size_t eff = effective_stride(frames, clip_len, clip_stride);
  return frames - ((clip_len - 1) * eff + 1);
}

std::vector<std::size_t> clip_indices(std::size_t frames, std::size_t clip_len,
                                      std::size_t clip_stride,
                                      std::size_t start) {
  if (start > max_clip_start(frames, clip_len, clip_stride))
    throw ValidationError("clip_indices: start leaves the tracklet");
  const std::size_t eff = effective_stride(frames, clip_len, clip_stride);
  std::vector<std::size_t> idx(clip_len);
  for (std::size_t j = 0; j < clip_len; ++j) idx[j] = start + j * eff;
  return idx;
}

TrainResult train(RfcModel& model, const TrainConfig& cfg, std::ostream* echo) {
  validate_train(model, cfg);
  const std::size_t total_tracklets =
      cfg.synth.num_identities * cfg.tracklets_per_identity;
  const std::size_t per_batch = cfg.batch_p * cfg.batch_k;
  const std::size_t steps_per_epoch = (total_tracklets + per_batch - 1) / per_batch;
  const std::size_t decay_epoch = std::max<std::size_t>(1, 2 * cfg.epochs / 3);
  const std::size_t h = cfg.synth.image_h, w = cfg.synth.image_w,
                    c = cfg.synth.channels;

  TrainResult result;
  result.log_lines.push_back(LossReport::csv_header());
  if (echo) *echo << LossReport::csv_header() << '\n';

  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr_now = epoch >= decay_epoch ? cfg.lr * cfg.decay : cfg.lr;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      Rng rng = Rng::keyed(cfg.seed, kSampleStream, epoch, step);

      // P identities, K tracklets each, one clip per tracklet.
      std::vector<Var> logits, features, lks, lfs, las, lps;
      std::vector<int> labels;
      const auto ids =
          sample_without_replacement(rng, cfg.synth.num_identities, cfg.batch_p);
      for (const std::size_t id : ids) {
        const auto tracklets = sample_without_replacement(
            rng, cfg.tracklets_per_identity, cfg.batch_k);
        for (const std::size_t k : tracklets) {
          const SynthSample sample = generate_tracklet(
              cfg.synth, static_cast<int>(id), static_cast<int>(k));
          const std::size_t start = static_cast<std::size_t>(rng.uniform_int(
              0, static_cast<int>(max_clip_start(cfg.synth.frames_per_tracklet,
                                                 cfg.clip_len, cfg.clip_stride))));
          const auto idx = clip_indices(cfg.synth.frames_per_tracklet,
                                        cfg.clip_len, cfg.clip_stride, start);

          Tensor clip = Tensor::zeros({cfg.clip_len, h, w, c});
          SequenceLabels clip_labels;
          for (std::size_t j = 0; j < cfg.clip_len; ++j) {
            const std::size_t t = idx[j];
            std::copy_n(sample.images.data() + t * h * w * c, h * w * c,
                        clip.data() + j * h * w * c);
            clip_labels.keypoints.push_back(sample.labels.keypoints[t]);
            clip_labels.foreground.push_back(sample.labels.foreground[t]);
          }

          SequenceForward f =
              model.forward_sequence(clip, &clip_labels, true, true);
          logits.push_back(f.logits);
          features.push_back(f.sequence_feature);
          lks.push_back(f.keypoint_loss);
          lfs.push_back(f.foreground_loss);
          las.push_back(f.appearance_reg);
          lps.push_back(f.position_reg);
          labels.push_back(static_cast<int>(id));
        }
      }

      LossParts parts;
      parts.ce = cross_entropy(concat_rows(logits), labels);
      parts.triplet =
          batch_hard_triplet(concat_rows(features), labels, cfg.weights.margin);
      parts.keypoints = mean_vars(lks);
      parts.foreground = mean_vars(lfs);
      parts.appearance_reg = mean_vars(las);
      parts.position_reg = mean_vars(lps);
      const LossReport report = total_loss(parts, cfg.weights);

      model.zero_grads();
      backward(report.total);
      for (Parameter* p : model.parameters())
        for (std::size_t i = 0; i < p->value.size(); ++i)
          p->value.data()[i] -= lr_now * p->grad.data()[i];

      const std::string line = report.csv_line(global_step);
      result.log_lines.push_back(line);
      if (echo) *echo << line << '\n';
      result.totals.push_back(report.total.value().data()[0]);
      ++global_step;
    }
  }
  result.steps = global_step;
  return result;
}

DatasetEval evaluate_records(RfcModel& model,
                             const std::vector<TrackletRecord>& records,
                             std::size_t clip_len) {
  if (records.empty())
    throw ValidationError("eval: the manifest lists no tracklets");
  const std::size_t d = model.config().stage_channels.back();

  std::vector<Tensor> feats;
  feats.reserve(records.size());
  for (const TrackletRecord& r : records) {
    const Tensor images = load_tensor(r.file);
    const Tensor f =
        clip_split_average(images, clip_len, [&](const Tensor& clip) {
          return model.forward_sequence(clip, nullptr, false, false)
              .sequence_feature.value();
        });
    if (f.size() != d)
      throw DimensionError("eval: feature width mismatch for " + r.file);
    feats.push_back(f);
  }

  DatasetEval out;
  std::vector<std::size_t> qidx, gidx;
  for (std::size_t i = 0; i < records.size(); ++i)
    (records[i].camera == 0 ? qidx : gidx).push_back(i);
  if (qidx.empty())
    throw ValidationError("eval: no camera-0 query tracklets in the manifest");
  if (gidx.empty())
    throw ValidationError("eval: no gallery tracklets in the manifest");

  Tensor queries = Tensor::zeros({qidx.size(), d});
  std::vector<int> qids, qcams;
  for (std::size_t qi = 0; qi < qidx.size(); ++qi) {
    std::copy_n(feats[qidx[qi]].data(), d, queries.data() + qi * d);
    qids.push_back(records[qidx[qi]].identity);
    qcams.push_back(records[qidx[qi]].camera);
  }
  GallerySet gallery;
  gallery.features = Tensor::zeros({gidx.size(), d});
  for (std::size_t gi = 0; gi < gidx.size(); ++gi) {
    std::copy_n(feats[gidx[gi]].data(), d, gallery.features.data() + gi * d);
    gallery.identities.push_back(records[gidx[gi]].identity);
    gallery.cameras.push_back(records[gidx[gi]].camera);
  }

  out.queries = qidx.size();
  out.gallery = gidx.size();
  out.result = evaluate(queries, qids, qcams, gallery,
                        std::min<std::size_t>(10, gidx.size()));
  return out;
}

std::vector<TrackletRecord> records_from(const std::string& dataset) {
  const std::filesystem::path p(dataset);
  const bool direct = p.extension() == ".csv";
  return read_manifest(direct ? dataset : (p / "manifest.csv").string());
}

}  // namespace rfc
