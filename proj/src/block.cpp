#include "rfc/block.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "rfc/errors.hpp"
#include "rfc/rng.hpp"

namespace rfc {

Arrangement parse_arrangement(const std::string& name) {
  if (name == "st") return Arrangement::SpatialThenTemporal;
  if (name == "ts") return Arrangement::TemporalThenSpatial;
  if (name == "s+t") return Arrangement::Parallel;
  if (name == "s") return Arrangement::SpatialOnly;
  if (name == "t") return Arrangement::TemporalOnly;
  throw ValidationError("unknown arrangement '" + name +
                        "' (expected st, ts, s+t, s, or t)");
}

const char* arrangement_name(Arrangement a) {
  switch (a) {
    case Arrangement::SpatialThenTemporal: return "st";
    case Arrangement::TemporalThenSpatial: return "ts";
    case Arrangement::Parallel: return "s+t";
    case Arrangement::SpatialOnly: return "s";
    case Arrangement::TemporalOnly: return "t";
  }
  return "st";
}

bool uses_spatial(Arrangement a) { return a != Arrangement::TemporalOnly; }

bool uses_temporal(Arrangement a) { return a != Arrangement::SpatialOnly; }

std::size_t region_count(const BlockConfig& config) {
  return config.partition.mode == PartitionMode::Adaptive
             ? std::size_t{6}
             : config.partition.parts;
}

namespace {

// HW x N scatter matrix: the transpose of the flattened masks, so matmul
// with the N x D region rows lands each row on its pixels.
Tensor scatter_matrix(const RegionMasks& masks) {
  const Tensor flat = masks.flat();  // N x HW
  const std::size_t n = flat.dim(0), p = flat.dim(1);
  Tensor out({p, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t q = 0; q < p; ++q) out.at(q, i) = flat.at(i, q);
  return out;
}

Var scalar_zero() { return constant(Tensor::scalar(0.0)); }

}  // namespace

std::vector<Var> reverse_projection(const std::vector<Var>& region_rows,
                                    const std::vector<RegionMasks>& masks,
                                    const std::vector<Var>& features,
                                    const ProjectionParams& p, BnState& bn,
                                    bool training, bool update_stats) {
  const std::size_t t_len = features.size();
  check_dim(t_len >= 1 && region_rows.size() == t_len && masks.size() == t_len,
            "reverse_projection: frame count mismatch");
  const std::size_t h = features[0].value().dim(0),
                    w = features[0].value().dim(1),
                    d = features[0].value().dim(2);
  for (std::size_t t = 0; t < t_len; ++t) {
    check_dim(features[t].value().rank() == 3 &&
                  features[t].value().dim(0) == h &&
                  features[t].value().dim(1) == w &&
                  features[t].value().dim(2) == d,
              "reverse_projection: feature frame shape mismatch");
    check_dim(region_rows[t].value().rank() == 2 &&
                  region_rows[t].value().dim(0) == masks[t].count() &&
                  region_rows[t].value().dim(1) == d,
              "reverse_projection: region rows shape mismatch");
    check_dim(masks[t].grid_h() == h && masks[t].grid_w() == w,
              "reverse_projection: mask grid mismatch");
  }
  check_dim(p.bn_scale.value().size() == d && p.bn_shift.value().size() == d &&
                bn.running_mean.size() == d && bn.running_var.size() == d,
            "reverse_projection: normalization size mismatch");

  std::vector<Var> scattered;
  scattered.reserve(t_len);
  for (std::size_t t = 0; t < t_len; ++t)
    scattered.push_back(
        matmul(constant(scatter_matrix(masks[t])), region_rows[t]));
  Var all = concat_rows(scattered);  // (T*H*W) x D

  Var normed;
  if (training) {
    BatchStats stats;
    normed = batch_norm_train(all, p.bn_scale, p.bn_shift, bn.eps, &stats);
    if (update_stats) {
      for (std::size_t c = 0; c < d; ++c) {
        bn.running_mean[c] = bn.momentum * bn.running_mean[c] +
                             (1.0 - bn.momentum) * stats.mean[c];
        bn.running_var[c] = bn.momentum * bn.running_var[c] +
                            (1.0 - bn.momentum) * stats.var[c];
      }
    }
  } else {
    normed = batch_norm_infer(all, p.bn_scale, p.bn_shift, bn.running_mean,
                              bn.running_var, bn.eps);
  }

  Var stacked = reshape(normed, {t_len, h, w, d});
  std::vector<Var> out;
  out.reserve(t_len);
  for (std::size_t t = 0; t < t_len; ++t)
    out.push_back(add(slice_frame(stacked, t), features[t]));
  return out;
}

BlockOut rfc_block_forward(const std::vector<Var>& features,
                           const BlockConfig& config,
                           const RfcBlockParams& params, BnState& bn,
                           bool training, bool update_stats) {
  const std::size_t t_len = features.size();
  check_valid(t_len >= 1, "rfc_block_forward: empty sequence");
  if (uses_temporal(config.arrangement))
    check_valid(t_len >= 2,
                "rfc_block_forward: unsupported sequence, temporal completion "
                "needs at least 2 frames");
  const std::size_t n = region_count(config);
  check_valid(config.regions == n,
              "rfc_block_forward: configured region count does not match the "
              "partition");
  const bool adaptive = config.partition.mode == PartitionMode::Adaptive;
  check_valid(!adaptive || params.locator.has_value(),
              "rfc_block_forward: adaptive partitioning needs locator weights");
  check_valid(!uses_spatial(config.arrangement) || params.srfc.has_value(),
              "rfc_block_forward: arrangement needs spatial-completion weights");
  check_valid(!uses_temporal(config.arrangement) || params.trfc.has_value(),
              "rfc_block_forward: arrangement needs temporal-completion weights");
  check_dim(features[0].value().rank() == 3,
            "rfc_block_forward: frames must be H x W x D");
  const std::size_t h = features[0].value().dim(0),
                    w = features[0].value().dim(1);

  BlockOut out;
  out.frames.resize(t_len);
  std::vector<Var> f_frames;
  std::vector<RegionMasks> mask_frames;
  f_frames.reserve(t_len);
  mask_frames.reserve(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    FrameDiagnostics& d = out.frames[t];
    std::array<std::size_t, 4> coords{0, 0, 0, 0};
    if (adaptive) {
      KeypointEstimate ke = locate_keypoints(features[t], *params.locator);
      coords = ke.coords;
      d.keypoints = std::move(ke);
    }
    RegionMasks masks = region_masks(config.partition, coords, h, w);
    d.foreground = foreground_map(features[t], params.foreground);
    d.f = extract_region_features(features[t], masks, d.foreground);
    d.geometry = region_geometry(masks);
    d.position_sim = position_similarity(d.geometry);
    f_frames.push_back(d.f);
    mask_frames.push_back(masks);
    d.masks = std::move(masks);
  }

  auto spatial = [&](std::size_t t, const Var& input) {
    FrameDiagnostics& d = out.frames[t];
    SrfcOut s = srfc_forward(input, d.geometry, *params.srfc);
    d.srfc_input = input;
    d.assign = std::move(s.assign);
    return s.o;
  };
  auto temporal = [&](const std::vector<Var>& inputs) {
    TrfcOut tr = trfc_forward(inputs, *params.trfc);
    out.alpha = std::move(tr.alpha);
    out.gates = std::move(tr.gates);
    out.contexts = std::move(tr.contexts);
    return tr.e;
  };

  std::vector<Var> completed(t_len);
  switch (config.arrangement) {
    case Arrangement::SpatialOnly: {
      for (std::size_t t = 0; t < t_len; ++t)
        completed[t] = spatial(t, f_frames[t]);
      break;
    }
    case Arrangement::TemporalOnly: {
      completed = temporal(f_frames);
      break;
    }
    case Arrangement::SpatialThenTemporal: {
      std::vector<Var> o_frames(t_len);
      for (std::size_t t = 0; t < t_len; ++t)
        o_frames[t] = spatial(t, f_frames[t]);
      completed = temporal(o_frames);
      break;
    }
    case Arrangement::TemporalThenSpatial: {
      std::vector<Var> e_frames = temporal(f_frames);
      for (std::size_t t = 0; t < t_len; ++t)
        completed[t] = spatial(t, e_frames[t]);
      break;
    }
    case Arrangement::Parallel: {
      std::vector<Var> t_out = temporal(f_frames);
      for (std::size_t t = 0; t < t_len; ++t)
        completed[t] = scale(add(spatial(t, f_frames[t]), t_out[t]), 0.5);
      break;
    }
  }
  for (std::size_t t = 0; t < t_len; ++t) out.frames[t].completed = completed[t];

  out.e_frames = reverse_projection(completed, mask_frames, features,
                                    params.projection, bn, training,
                                    update_stats);
  return out;
}

namespace {

// T rank-3 frames back into one T x H x W x C value.
Var stack_frames(const std::vector<Var>& frames) {
  const std::size_t h = frames[0].value().dim(0),
                    w = frames[0].value().dim(1),
                    c = frames[0].value().dim(2);
  std::vector<Var> rows;
  rows.reserve(frames.size());
  for (const Var& f : frames) rows.push_back(reshape(f, {1, h * w * c}));
  return reshape(concat_rows(rows), {frames.size(), h, w, c});
}

}  // namespace

BackboneOut toy_backbone_forward(const Var& images,
                                 const std::vector<StageParams>& stages,
                                 const BlockConfig& config,
                                 const std::vector<InsertedBlock>& blocks,
                                 bool training, bool update_stats) {
  check_dim(images.value().rank() == 4,
            "toy_backbone_forward: images must be T x H x W x C");
  check_valid(!stages.empty(), "toy_backbone_forward: no stages");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    check_valid(blocks[i].stage >= 1 && blocks[i].stage <= stages.size(),
                "toy_backbone_forward: insertion stage out of range");
    check_valid(i == 0 || blocks[i - 1].stage < blocks[i].stage,
                "toy_backbone_forward: insertion stages must be ascending and "
                "distinct");
    check_valid(blocks[i].bn != nullptr,
                "toy_backbone_forward: missing normalization state");
  }

  const std::size_t t_len = images.value().dim(0);
  std::size_t h = images.value().dim(1), w = images.value().dim(2),
              c = images.value().dim(3);
  Var x = images;
  BackboneOut out;
  std::size_t next = 0;
  for (std::size_t s = 1; s <= stages.size(); ++s) {
    const StageParams& sp = stages[s - 1];
    check_dim(sp.weight.value().rank() == 2 && sp.weight.value().dim(0) == c,
              "toy_backbone_forward: stage weight shape breaks the chain");
    const std::size_t c_out = sp.weight.value().dim(1);
    check_dim(sp.bias.value().size() == c_out,
              "toy_backbone_forward: stage bias size mismatch");
    x = reshape(relu(add_rowvec(matmul(reshape(x, {t_len * h * w, c}),
                                       sp.weight),
                                sp.bias)),
                {t_len, h, w, c_out});
    x = mean_pool2x2(x);
    h = (h + 1) / 2;
    w = (w + 1) / 2;
    c = c_out;
    out.stage_maps.push_back(x);
    if (next < blocks.size() && blocks[next].stage == s) {
      std::vector<Var> frames;
      frames.reserve(t_len);
      for (std::size_t t = 0; t < t_len; ++t)
        frames.push_back(slice_frame(x, t));
      out.blocks.push_back(rfc_block_forward(frames, config,
                                             blocks[next].params,
                                             *blocks[next].bn, training,
                                             update_stats));
      x = stack_frames(out.blocks.back().e_frames);
      ++next;
    }
  }
  out.final_map = x;
  // Spatial global mean per frame, then the temporal mean over frames.
  Var per_frame = mean_over_axis(mean_over_axis(x, 1), 1);  // T x C
  out.sequence_feature = reshape(mean_over_axis(per_frame, 0), {1, c});
  return out;
}

std::size_t rescale_coord(std::size_t a, std::size_t from, std::size_t to) {
  check_valid(from > 0 && to > 0 && a < from,
              "rescale_coord: coordinate out of range");
  return a * to / from;
}

Tensor downsample_mask(const Tensor& mask, std::size_t grid_h,
                       std::size_t grid_w) {
  check_dim(mask.rank() == 2, "downsample_mask: mask must be H x W");
  const std::size_t h0 = mask.dim(0), w0 = mask.dim(1);
  check_dim(grid_h >= 1 && grid_w >= 1 && h0 % grid_h == 0 && w0 % grid_w == 0,
            "downsample_mask: grid must divide the mask extents");
  const std::size_t bh = h0 / grid_h, bw = w0 / grid_w;
  Tensor out({grid_h, grid_w});
  for (std::size_t i = 0; i < grid_h; ++i)
    for (std::size_t j = 0; j < grid_w; ++j) {
      double s = 0.0;
      for (std::size_t y = 0; y < bh; ++y)
        for (std::size_t x = 0; x < bw; ++x)
          s += mask.at(i * bh + y, j * bw + x);
      out.at(i, j) = s / static_cast<double>(bh * bw) >= 0.5 ? 1.0 : 0.0;
    }
  return out;
}

namespace {

void fill_uniform(Tensor& t, Rng rng, double lo, double hi) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
}

// Fan-in-scaled init for a weight whose first extent is the input width.
// He-uniform bound: keeps activation variance roughly constant through a
// relu stage, so features neither explode nor shrink toward zero as depth
// grows (a 1/sqrt(fan_in) bound loses ~2.4x scale per stage, which leaves
// logits and pairwise feature distances too small to train from).
void fill_fan_in(Tensor& t, Rng rng) {
  const double r = std::sqrt(6.0 / static_cast<double>(t.dim(0)));
  fill_uniform(t, rng, -r, r);
}

std::size_t locator_reduced(std::size_t channels) {
  return std::max<std::size_t>(channels / 8, 4);
}

}  // namespace

RfcModel::RfcModel(const ModelConfig& config) : cfg_(config) {
  check_valid(!cfg_.stage_channels.empty() && cfg_.stage_channels.size() <= 8,
              "model: between 1 and 8 stages");
  check_valid(cfg_.num_identities >= 1, "model: needs at least one identity");
  check_valid(cfg_.image_h >= 2 && cfg_.image_w >= 1 && cfg_.image_c >= 1,
              "model: degenerate image extents");

  std::size_t h = cfg_.image_h, w = cfg_.image_w;
  for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
    grids_.emplace_back(h, w);
  }

  BlockConfig& bc = cfg_.block;
  const std::size_t n = region_count(bc);
  check_valid(bc.regions == n,
              "model: configured region count does not match the partition");
  if (bc.partition.mode == PartitionMode::Fixed)
    check_valid(n >= 2 && n <= 8, "model: fixed partition takes 2..8 bands");
  if (uses_spatial(bc.arrangement))
    check_valid(bc.clusters >= 1 && bc.clusters < n,
                "model: cluster count must be in [1, regions)");

  std::vector<std::size_t> stages = bc.stages;
  std::sort(stages.begin(), stages.end());
  stages.erase(std::unique(stages.begin(), stages.end()), stages.end());
  for (std::size_t s : stages)
    check_valid(s >= 1 && s <= cfg_.stage_channels.size(),
                "model: insertion stage out of range");
  bc.stages = stages;

  std::uint64_t key = 0;
  // Explicitly sequenced creation + fill keeps the (parameter, rng-key)
  // pairing independent of argument evaluation order.
  auto add_fan_in = [&](const std::string& name, Shape shape) {
    Parameter* p = add_param(name, std::move(shape));
    fill_fan_in(p->value, Rng::keyed(cfg_.seed, 1000 + key++));
    return p;
  };
  auto add_range = [&](const std::string& name, Shape shape, double lo,
                       double hi) {
    Parameter* p = add_param(name, std::move(shape));
    fill_uniform(p->value, Rng::keyed(cfg_.seed, 1000 + key++), lo, hi);
    return p;
  };

  std::size_t c = cfg_.image_c;
  for (std::size_t s = 1; s <= cfg_.stage_channels.size(); ++s) {
    const std::size_t c_out = cfg_.stage_channels[s - 1];
    const std::string prefix = "stage" + std::to_string(s) + ".";
    add_fan_in(prefix + "weight", {c, c_out});
    add_param(prefix + "bias", {c_out});
    c = c_out;
  }

  for (std::size_t s : stages) {
    BlockSlot slot;
    slot.stage = s;
    slot.grid_h = grids_[s - 1].first;
    slot.grid_w = grids_[s - 1].second;
    slot.channels = cfg_.stage_channels[s - 1];
    const std::size_t d = slot.channels, gh = slot.grid_h, gw = slot.grid_w;
    check_valid(gh >= 1 && gw >= 1,
                "model: insertion stage grid collapsed to nothing");
    const std::string prefix = "block" + std::to_string(s) + ".";

    if (bc.partition.mode == PartitionMode::Adaptive) {
      const std::size_t dr = locator_reduced(d);
      add_fan_in(prefix + "locator.reduce", {d, dr});
      for (int i = 0; i < 3; ++i) {
        add_fan_in(prefix + "locator.row_w" + std::to_string(i), {gh * dr, gh});
        add_param(prefix + "locator.row_b" + std::to_string(i), {gh});
      }
      add_fan_in(prefix + "locator.col_w", {gw * dr, gw});
      add_param(prefix + "locator.col_b", {gw});
    }

    add_fan_in(prefix + "foreground.weight", {d, 1});
    add_param(prefix + "foreground.bias", {1});

    if (uses_spatial(bc.arrangement)) {
      const std::size_t k = bc.clusters;
      add_fan_in(prefix + "srfc.appearance", {d, k});
      add_fan_in(prefix + "srfc.pos_hidden", {4, d});
      add_fan_in(prefix + "srfc.pos_out", {d, k});
      add_fan_in(prefix + "srfc.enc_w", {d, d});
      add_param(prefix + "srfc.enc_b", {d});
      add_fan_in(prefix + "srfc.dec_w", {d, d});
      add_param(prefix + "srfc.dec_b", {d});
    }

    if (uses_temporal(bc.arrangement)) {
      // Raw gate weight starts small and positive so the rectified gate
      // input is nonzero from the first step.
      add_range(prefix + "trfc.gate_w", {d, d}, 1e-3, 0.1);
      add_param(prefix + "trfc.gate_b", {d});
    }

    add_param(prefix + "bn.scale", {d});  // zero: block starts as identity
    add_param(prefix + "bn.shift", {d});
    slot.bn.running_mean = Tensor({d});
    slot.bn.running_var = Tensor::full({d}, 1.0);
    slots_.push_back(std::move(slot));
  }

  const std::size_t d_final = cfg_.stage_channels.back();
  add_fan_in("classifier.weight", {d_final, cfg_.num_identities});
  add_param("classifier.bias", {cfg_.num_identities});
}

Parameter* RfcModel::add_param(const std::string& name, Shape shape) {
  params_.push_back(std::make_unique<Parameter>(name, Tensor(std::move(shape))));
  return params_.back().get();
}

std::vector<Parameter*> RfcModel::parameters() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

Parameter* RfcModel::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

void RfcModel::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

std::pair<std::size_t, std::size_t> RfcModel::stage_grid(
    std::size_t stage) const {
  check_valid(stage >= 1 && stage <= grids_.size(),
              "stage_grid: stage out of range");
  return grids_[stage - 1];
}

RfcBlockParams RfcModel::bind_block(std::size_t slot_index) {
  const BlockSlot& slot = slots_[slot_index];
  const std::string prefix = "block" + std::to_string(slot.stage) + ".";
  auto bind = [&](const std::string& name) {
    Parameter* p = find(prefix + name);
    check_valid(p != nullptr, "model: missing parameter " + prefix + name);
    return param_var(*p);
  };

  RfcBlockParams out;
  if (cfg_.block.partition.mode == PartitionMode::Adaptive) {
    LocatorParams loc;
    loc.reduce = bind("locator.reduce");
    for (int i = 0; i < 3; ++i) {
      loc.row_w[i] = bind("locator.row_w" + std::to_string(i));
      loc.row_b[i] = bind("locator.row_b" + std::to_string(i));
    }
    loc.col_w = bind("locator.col_w");
    loc.col_b = bind("locator.col_b");
    out.locator = std::move(loc);
  }
  out.foreground.weight = bind("foreground.weight");
  out.foreground.bias = bind("foreground.bias");
  if (uses_spatial(cfg_.block.arrangement)) {
    SrfcParams s;
    s.appearance = bind("srfc.appearance");
    s.pos_hidden = bind("srfc.pos_hidden");
    s.pos_out = bind("srfc.pos_out");
    s.enc_w = bind("srfc.enc_w");
    s.enc_b = bind("srfc.enc_b");
    s.dec_w = bind("srfc.dec_w");
    s.dec_b = bind("srfc.dec_b");
    out.srfc = std::move(s);
  }
  if (uses_temporal(cfg_.block.arrangement)) {
    TrfcParams t;
    t.gate_w_raw = bind("trfc.gate_w");
    t.gate_b = bind("trfc.gate_b");
    out.trfc = std::move(t);
  }
  out.projection.bn_scale = bind("bn.scale");
  out.projection.bn_shift = bind("bn.shift");
  return out;
}

SequenceForward RfcModel::forward_sequence(const Tensor& images,
                                           const SequenceLabels* labels,
                                           bool training, bool update_stats) {
  check_dim(images.rank() == 4 && images.dim(1) == cfg_.image_h &&
                images.dim(2) == cfg_.image_w && images.dim(3) == cfg_.image_c,
            "forward_sequence: images must be T x H0 x W0 x C");
  const std::size_t t_len = images.dim(0);
  check_valid(t_len >= 1, "forward_sequence: empty sequence");
  if (labels != nullptr)
    check_valid(labels->keypoints.size() == t_len &&
                    labels->foreground.size() == t_len,
                "forward_sequence: label frame count mismatch");

  std::vector<StageParams> stage_vars;
  for (std::size_t s = 1; s <= cfg_.stage_channels.size(); ++s) {
    StageParams sp;
    sp.weight = param_var(*find("stage" + std::to_string(s) + ".weight"));
    sp.bias = param_var(*find("stage" + std::to_string(s) + ".bias"));
    stage_vars.push_back(std::move(sp));
  }
  std::vector<InsertedBlock> inserted;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    InsertedBlock b;
    b.stage = slots_[i].stage;
    b.params = bind_block(i);
    b.bn = &slots_[i].bn;
    inserted.push_back(std::move(b));
  }

  SequenceForward out;
  out.backbone = toy_backbone_forward(constant(images), stage_vars, cfg_.block,
                                      inserted, training, update_stats);
  out.sequence_feature = out.backbone.sequence_feature;
  out.logits = add_rowvec(matmul(out.sequence_feature,
                                 param_var(*find("classifier.weight"))),
                          param_var(*find("classifier.bias")));

  // Auxiliary supervision, averaged over frames inside each block and then
  // over insertion stages; zero when a term has nothing to supervise.
  std::vector<Var> lk_terms, lf_terms, la_terms, lp_terms;
  const bool adaptive = cfg_.block.partition.mode == PartitionMode::Adaptive;
  for (std::size_t i = 0; i < out.backbone.blocks.size(); ++i) {
    const BlockOut& bo = out.backbone.blocks[i];
    const BlockSlot& slot = slots_[i];
    if (labels != nullptr && adaptive) {
      std::vector<KeypointEstimate> estimates;
      std::vector<std::array<std::size_t, 4>> rescaled;
      for (std::size_t t = 0; t < t_len; ++t) {
        estimates.push_back(*bo.frames[t].keypoints);
        const auto& kp = labels->keypoints[t];
        rescaled.push_back(
            {rescale_coord(kp[0], cfg_.image_h, slot.grid_h),
             rescale_coord(kp[1], cfg_.image_h, slot.grid_h),
             rescale_coord(kp[2], cfg_.image_h, slot.grid_h),
             rescale_coord(kp[3], cfg_.image_w, slot.grid_w)});
      }
      lk_terms.push_back(keypoints_loss(estimates, rescaled));
    }
    if (labels != nullptr) {
      std::vector<Var> fg;
      std::vector<Tensor> fg_labels;
      for (std::size_t t = 0; t < t_len; ++t) {
        fg.push_back(bo.frames[t].foreground);
        fg_labels.push_back(downsample_mask(labels->foreground[t], slot.grid_h,
                                            slot.grid_w));
      }
      lf_terms.push_back(foreground_loss(fg, fg_labels));
    }
    if (uses_spatial(cfg_.block.arrangement)) {
      std::vector<Var> la_frames, lp_frames;
      for (std::size_t t = 0; t < t_len; ++t) {
        const FrameDiagnostics& d = bo.frames[t];
        la_frames.push_back(appearance_regularizer(d.assign->appearance,
                                                   d.srfc_input));
        lp_frames.push_back(position_regularizer(d.assign->position,
                                                 d.position_sim));
      }
      la_terms.push_back(mean_vars(la_frames));
      lp_terms.push_back(mean_vars(lp_frames));
    }
  }
  out.keypoint_loss = lk_terms.empty() ? scalar_zero() : mean_vars(lk_terms);
  out.foreground_loss = lf_terms.empty() ? scalar_zero() : mean_vars(lf_terms);
  out.appearance_reg = la_terms.empty() ? scalar_zero() : mean_vars(la_terms);
  out.position_reg = lp_terms.empty() ? scalar_zero() : mean_vars(lp_terms);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> RfcModel::checkpoint_entries() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& p : params_) out.emplace_back(p->name, &p->value);
  for (auto& slot : slots_) {
    const std::string prefix = "block" + std::to_string(slot.stage) + ".bn.";
    out.emplace_back(prefix + "running_mean", &slot.bn.running_mean);
    out.emplace_back(prefix + "running_var", &slot.bn.running_var);
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> RfcModel::checkpoint_entries()
    const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& p : params_) out.emplace_back(p->name, &p->value);
  for (const auto& slot : slots_) {
    const std::string prefix = "block" + std::to_string(slot.stage) + ".bn.";
    out.emplace_back(prefix + "running_mean", &slot.bn.running_mean);
    out.emplace_back(prefix + "running_var", &slot.bn.running_var);
  }
  return out;
}

void RfcModel::save_checkpoint(const std::string& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir);
  const std::string manifest_path = dir + "/manifest.txt";
  std::ofstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot write " + manifest_path);
  for (const auto& [name, tensor] : checkpoint_entries()) {
    manifest << name << ' ' << tensor->rank();
    for (std::size_t i = 0; i < tensor->rank(); ++i)
      manifest << ' ' << tensor->dim(i);
    manifest << '\n';
    save_tensor(*tensor, dir + "/" + name + ".rfct");
  }
  if (!manifest.good()) throw IoError("write failure on " + manifest_path);
}

void RfcModel::load_checkpoint(const std::string& dir) {
  const std::string manifest_path = dir + "/manifest.txt";
  std::ifstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot read " + manifest_path);

  std::unordered_map<std::string, Tensor*> slots;
  for (auto& [name, tensor] : checkpoint_entries()) slots[name] = tensor;
  std::unordered_map<std::string, bool> filled;

  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string name;
    std::size_t rank = 0;
    in >> name >> rank;
    if (!in || rank > 8)
      throw IoError("malformed manifest line in " + manifest_path);
    Shape shape;
    for (std::size_t i = 0; i < rank; ++i) {
      std::size_t d = 0;
      in >> d;
      if (!in) throw IoError("malformed manifest line in " + manifest_path);
      shape.push_back(d);
    }
    auto it = slots.find(name);
    check_valid(it != slots.end(),
                "checkpoint entry '" + name + "' does not belong to this model");
    Tensor loaded = load_tensor(dir + "/" + name + ".rfct");
    check_dim(loaded.shape() == shape && loaded.shape() == it->second->shape(),
              "checkpoint entry '" + name + "' has the wrong shape");
    *it->second = std::move(loaded);
    filled[name] = true;
  }
  for (const auto& [name, tensor] : slots) {
    (void)tensor;
    check_valid(filled.count(name) == 1,
                "checkpoint is missing entry '" + name + "'");
  }
}

}  // namespace rfc
