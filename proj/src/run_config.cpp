#include "rfc/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <sstream>

#include "rfc/errors.hpp"

namespace rfc {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

[[noreturn]] void bad_value(const std::string& key) {
  throw ValidationError("config: bad value for '" + key + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::uint64_t r = std::stoull(v, &used);
    if (used != v.size()) bad_value(key);
    return r;
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key);
  }
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double r = std::stod(v, &used);
    if (used != v.size()) bad_value(key);
    return r;
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key);
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key);
}

}  // namespace

std::vector<std::size_t> parse_stage_list(const std::string& text) {
  const std::string t = trim(text);
  std::vector<std::size_t> stages;
  if (t.empty() || t == "none") return stages;
  std::stringstream ss(t);
  std::string piece;
  while (std::getline(ss, piece, ',')) {
    piece = trim(piece);
    if (piece.empty()) throw ValidationError("config: bad value for 'stages'");
    stages.push_back(parse_size("stages", piece));
  }
  return stages;
}

PartitionSpec parse_partition(const std::string& text) {
  const std::string t = trim(text);
  if (t == "adaptive") return {PartitionMode::Adaptive, 6};
  if (t.rfind("fixed:", 0) == 0) {
    PartitionSpec spec;
    spec.mode = PartitionMode::Fixed;
    spec.parts = parse_size("partition", t.substr(6));
    return spec;
  }
  throw ValidationError(
      "config: partition must be 'adaptive' or 'fixed:P', got '" + t + "'");
}

void apply_key_value(RunConfig& rc, const std::string& key,
                     const std::string& value) {
  const std::string k = trim(key), v = trim(value);
  if (k == "seed") rc.seed = parse_u64(k, v);
  else if (k == "arrangement") { parse_arrangement(v); rc.arrangement = v; }
  else if (k == "regions") rc.regions = parse_size(k, v);
  else if (k == "clusters") rc.clusters = parse_size(k, v);
  else if (k == "partition") { parse_partition(v); rc.partition = v; }
  else if (k == "stages") rc.stages = parse_stage_list(v);
  else if (k == "stage_channels") {
    const auto list = parse_stage_list(v);
    if (list.empty()) bad_value(k);
    rc.stage_channels = list;
  }
  else if (k == "lambda1") rc.lambda1 = parse_double(k, v);
  else if (k == "lambda2") rc.lambda2 = parse_double(k, v);
  else if (k == "lambda3") rc.lambda3 = parse_double(k, v);
  else if (k == "margin") rc.margin = parse_double(k, v);
  else if (k == "identities") rc.identities = parse_size(k, v);
  else if (k == "tracklets") rc.tracklets = parse_size(k, v);
  else if (k == "frames") rc.frames = parse_size(k, v);
  else if (k == "image_h") rc.image_h = parse_size(k, v);
  else if (k == "image_w") rc.image_w = parse_size(k, v);
  else if (k == "channels") rc.channels = parse_size(k, v);
  else if (k == "occlusion") rc.occlusion = parse_double(k, v);
  else if (k == "occlusion_lo") rc.occlusion_lo = parse_double(k, v);
  else if (k == "occlusion_hi") rc.occlusion_hi = parse_double(k, v);
  else if (k == "gallery_occlusion") rc.gallery_occlusion = parse_double(k, v);
  else if (k == "cameras") rc.cameras = parse_size(k, v);
  else if (k == "tracklet_offset") rc.tracklet_offset = parse_size(k, v);
  else if (k == "lr") rc.lr = parse_double(k, v);
  else if (k == "decay") rc.decay = parse_double(k, v);
  else if (k == "epochs") rc.epochs = parse_size(k, v);
  else if (k == "batch_p") rc.batch_p = parse_size(k, v);
  else if (k == "batch_k") rc.batch_k = parse_size(k, v);
  else if (k == "clip_len") rc.clip_len = parse_size(k, v);
  else if (k == "clip_stride") rc.clip_stride = parse_size(k, v);
  else if (k == "eval_clip") rc.eval_clip = parse_size(k, v);
  else if (k == "out") rc.out = v;
  else if (k == "checkpoint") rc.checkpoint = v;
  else if (k == "dataset") rc.dataset = v;
  else if (k == "corrupt_backward") rc.corrupt_backward = parse_bool(k, v);
  else throw ValidationError("config: unknown key '" + k + "'");
}

void apply_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config: line " + std::to_string(lineno) + " of " +
                            path + " is not 'key = value'");
    apply_key_value(rc, line.substr(0, eq), line.substr(eq + 1));
  }
}

ModelConfig model_config(const RunConfig& rc) {
  ModelConfig mc;
  mc.block.arrangement = parse_arrangement(rc.arrangement);
  mc.block.regions = rc.regions;
  mc.block.clusters = rc.clusters;
  mc.block.partition = parse_partition(rc.partition);
  mc.block.stages = rc.stages;
  mc.stage_channels = rc.stage_channels;
  mc.image_h = rc.image_h;
  mc.image_w = rc.image_w;
  mc.image_c = rc.channels;
  mc.num_identities = rc.identities;
  mc.seed = rc.seed;
  return mc;
}

TrainConfig train_config(const RunConfig& rc) {
  TrainConfig tc;
  tc.synth.num_identities = rc.identities;
  tc.synth.frames_per_tracklet = rc.frames;
  tc.synth.image_h = rc.image_h;
  tc.synth.image_w = rc.image_w;
  tc.synth.channels = rc.channels;
  tc.synth.occlusion_probability = rc.occlusion;
  tc.synth.occlusion_lo = rc.occlusion_lo;
  tc.synth.occlusion_hi = rc.occlusion_hi;
  tc.synth.seed = rc.seed;
  tc.tracklets_per_identity = rc.tracklets;
  tc.epochs = rc.epochs;
  tc.batch_p = rc.batch_p;
  tc.batch_k = rc.batch_k;
  tc.clip_len = rc.clip_len;
  tc.clip_stride = rc.clip_stride;
  tc.lr = rc.lr;
  tc.decay = rc.decay;
  tc.weights = {rc.lambda1, rc.lambda2, rc.lambda3, rc.margin};
  tc.seed = rc.seed;
  return tc;
}

ExportConfig export_config(const RunConfig& rc) {
  ExportConfig ec;
  ec.synth = train_config(rc).synth;
  ec.tracklets_per_identity = rc.tracklets;
  ec.cameras = rc.cameras;
  ec.gallery_occlusion_probability = rc.gallery_occlusion;
  ec.tracklet_offset = rc.tracklet_offset;
  return ec;
}

}  // namespace rfc
