#include "rfc/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "rfc/errors.hpp"
#include "rfc/rng.hpp"

namespace rfc {
namespace {

constexpr double kBackground = 0.05;
constexpr double kPaletteLo = 0.15;
constexpr double kPaletteHi = 0.95;
// Head and torso colors draw from this narrow sub-range: tops look nearly
// alike across identities, so the discriminative evidence concentrates in
// the lower bands — the ones bottom-anchored occlusion hides. Retrieval on
// occluded tracklets then rewards recovering hidden lower-band content
// instead of memorizing upper-band colors.
constexpr double kUpperLo = 0.52;
constexpr double kUpperHi = 0.58;
constexpr double kTemplateNoise = 0.02;
constexpr double kJitter = 0.02;
constexpr std::size_t kObstacleBank = 4;
// Irrational Weyl strides (fractional parts of surds / the golden ratio),
// one per (leg band, channel); see the leg-band comment in generate_identity.
constexpr double kLegStride[4][3] = {
    {0.6180339887498949, 0.4142135623730951, 0.7320508075688772},
    {0.2360679774997897, 0.8541019662496845, 0.3819660112501051},
    {0.5857864376269049, 0.2679491924311228, 0.9442719099991588},
    {0.1458980337503155, 0.6972243622680054, 0.3027756377319946}};

// Stream tags for template/obstacle randomness. They occupy the tracklet /
// identity key slots, so they sit far above any plausible real index to
// keep the streams disjoint from per-frame ones.
constexpr std::uint64_t kTemplateColorStream = (1ull << 40) + 1;
constexpr std::uint64_t kTemplateNoiseStream = (1ull << 40) + 2;
constexpr std::uint64_t kObstacleStream = (1ull << 40) + 3;
constexpr std::uint64_t kTrackletObstacleStream = (1ull << 40) + 5;

std::size_t band_of(const BandLayout& l, std::size_t y, std::size_t x) {
  if (y < l.head_end) return 0;
  if (y < l.torso_end) return 1;
  if (y < l.legs_split) return x < l.col_split ? 2 : 3;
  return x < l.col_split ? 4 : 5;
}

}  // namespace

void validate(const SynthConfig& cfg) {
  if (cfg.num_identities == 0)
    throw ValidationError("synth config: num_identities must be positive");
  if (cfg.frames_per_tracklet == 0)
    throw ValidationError("synth config: frames_per_tracklet must be positive");
  if (cfg.image_h < 8 || cfg.image_w < 4)
    throw ValidationError("synth config: image extents must be at least 8x4");
  if (cfg.channels == 0)
    throw ValidationError("synth config: channels must be positive");
  if (!(cfg.occlusion_probability >= 0.0 && cfg.occlusion_probability <= 1.0))
    throw ValidationError("synth config: occlusion probability outside [0,1]");
  if (!(cfg.occlusion_lo >= 0.0 && cfg.occlusion_lo <= cfg.occlusion_hi &&
        cfg.occlusion_hi <= 1.0))
    throw ValidationError("synth config: occlusion fraction range invalid");
}

BandLayout band_layout(std::size_t h, std::size_t w) {
  if (h < 8 || w < 4)
    throw ValidationError("band_layout: image extents must be at least 8x4");
  BandLayout l;
  l.head_end = std::max<std::size_t>(1, 3 * h / 16);
  l.torso_end = h / 2;
  l.legs_split = 3 * h / 4;
  l.col_split = w / 2;
  l.body_lo = w / 8;
  l.body_hi = w - w / 8;
  return l;
}

IdentityTemplate generate_identity(const SynthConfig& cfg, int id) {
  validate(cfg);
  if (id < 0) throw ValidationError("generate_identity: id must be >= 0");
  const std::size_t h = cfg.image_h, w = cfg.image_w, c = cfg.channels;
  IdentityTemplate t;
  t.layout = band_layout(h, w);
  t.image = Tensor::zeros({h, w, c});
  t.body_mask = Tensor::zeros({h, w});

  std::vector<std::vector<double>> band_color(6, std::vector<double>(c));
  for (std::size_t b = 0; b < 6; ++b) {
    Rng rng = Rng::keyed(cfg.seed, static_cast<std::uint64_t>(id),
                         kTemplateColorStream, b);
    if (b < 2) {
      // Head and torso draw from the narrow shared sub-range.
      for (std::size_t ch = 0; ch < c; ++ch)
        band_color[b][ch] = rng.uniform(kUpperLo, kUpperHi);
    } else {
      // Leg bands take lattice colors: a distinct irrational stride per
      // (band, channel) spreads the identities over the palette so that
      // every pair differs markedly in several leg channels, instead of
      // leaving the separation to the luck of an independent draw.
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double stride = kLegStride[(b - 2) % 4][ch % 3];
        const double u = std::fmod((static_cast<double>(id) + 1.0) * stride, 1.0);
        band_color[b][ch] = kPaletteLo + (kPaletteHi - kPaletteLo) * u;
      }
    }
  }

  Rng noise = Rng::keyed(cfg.seed, static_cast<std::uint64_t>(id),
                         kTemplateNoiseStream, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const bool body = x >= t.layout.body_lo && x < t.layout.body_hi;
      if (body) t.body_mask.at(y, x) = 1.0;
      const std::size_t b = band_of(t.layout, y, x);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double base = body ? band_color[b][ch] : kBackground;
        const double n =
            body ? noise.uniform(-kTemplateNoise, kTemplateNoise) : 0.0;
        t.image.at(y, x, ch) = base + n;
      }
    }
  }
  return t;
}

Tensor obstacle_texture(const SynthConfig& cfg, std::size_t index) {
  validate(cfg);
  if (index >= kObstacleBank)
    throw ValidationError("obstacle_texture: bank has 4 entries");
  const std::size_t h = cfg.image_h, w = cfg.image_w, c = cfg.channels;
  Rng rng = Rng::keyed(cfg.seed, kObstacleStream, index, 0);
  std::vector<double> c0(c), c1(c);
  for (std::size_t ch = 0; ch < c; ++ch) c0[ch] = rng.uniform(kPaletteLo, kPaletteHi);
  for (std::size_t ch = 0; ch < c; ++ch) c1[ch] = rng.uniform(kPaletteLo, kPaletteHi);
  Tensor t = Tensor::zeros({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool even = ((y / 2 + x / 2) % 2) == 0;
      for (std::size_t ch = 0; ch < c; ++ch)
        t.at(y, x, ch) = even ? c0[ch] : c1[ch];
    }
  return t;
}

SynthSample generate_tracklet(const SynthConfig& cfg, int id, int tracklet) {
  validate(cfg);
  if (id < 0 || tracklet < 0)
    throw ValidationError("generate_tracklet: id and tracklet must be >= 0");
  const std::size_t tt = cfg.frames_per_tracklet;
  const std::size_t h = cfg.image_h, w = cfg.image_w, c = cfg.channels;

  const IdentityTemplate tmpl = generate_identity(cfg, id);
  std::vector<Tensor> obstacles;
  obstacles.reserve(kObstacleBank);
  for (std::size_t o = 0; o < kObstacleBank; ++o)
    obstacles.push_back(obstacle_texture(cfg, o));

  SynthSample s;
  s.identity = id;
  s.images = Tensor::zeros({tt, h, w, c});
  s.labels.keypoints.assign(tt, tmpl.layout.keypoints());
  s.labels.foreground.reserve(tt);
  s.occlusion.reserve(tt);

  // One obstacle per tracklet: an occluder persists across a camera pass,
  // so its pollution is a per-tracklet bias rather than per-frame noise
  // that would average out of the tracklet descriptor.
  const std::size_t tracklet_obstacle =
      static_cast<std::size_t>(Rng::keyed(cfg.seed, static_cast<std::uint64_t>(id),
                                          static_cast<std::uint64_t>(tracklet),
                                          kTrackletObstacleStream)
                                   .uniform_int(0, 3));

  for (std::size_t t = 0; t < tt; ++t) {
    Rng rng = Rng::keyed(cfg.seed, static_cast<std::uint64_t>(id),
                         static_cast<std::uint64_t>(tracklet), t);
    // Fixed draw order, every value drawn whether used or not, so frames
    // that stay unoccluded are identical across occlusion settings.
    const double u_occ = rng.uniform();
    const double fraction = rng.uniform(cfg.occlusion_lo, cfg.occlusion_hi);
    const double u_pos = rng.uniform();
    rng.uniform_int(0, 3);  // reserved slot keeps the frame stream aligned

    Tensor fg = tmpl.body_mask;
    FrameOcclusion occ;
    if (u_occ < cfg.occlusion_probability) {
      const auto rows = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(fraction * static_cast<double>(h))),
          1, h);
      const std::size_t begin =
          cfg.bottom_anchored
              ? h - rows
              : std::min<std::size_t>(
                    static_cast<std::size_t>(u_pos * static_cast<double>(h - rows + 1)),
                    h - rows);
      occ = {true, fraction, begin, begin + rows, tracklet_obstacle};
    }

    for (std::size_t y = 0; y < h; ++y) {
      const bool hidden = occ.occluded && y >= occ.row_begin && y < occ.row_end;
      for (std::size_t x = 0; x < w; ++x) {
        if (hidden) fg.at(y, x) = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double base = hidden ? obstacles[occ.obstacle].at(y, x, ch)
                                     : tmpl.image.at(y, x, ch);
          s.images.at(t, y, x, ch) = base + rng.uniform(-kJitter, kJitter);
        }
      }
    }
    s.labels.foreground.push_back(std::move(fg));
    s.occlusion.push_back(occ);
  }
  return s;
}

std::vector<TrackletRecord> export_dataset(const ExportConfig& cfg,
                                           const std::string& dir) {
  validate(cfg.synth);
  if (cfg.tracklets_per_identity == 0 || cfg.cameras == 0)
    throw ValidationError("export_dataset: tracklets and cameras must be positive");
  if (!(cfg.gallery_occlusion_probability >= 0.0 &&
        cfg.gallery_occlusion_probability <= 1.0))
    throw ValidationError("export_dataset: gallery occlusion probability outside [0,1]");

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("export_dataset: cannot create directory " + dir);

  const std::filesystem::path root(dir);
  std::ofstream manifest(root / "manifest.csv");
  if (!manifest) throw IoError("export_dataset: cannot write manifest in " + dir);
  manifest << "tracklet_id,identity,camera,frame_count,file\n";

  std::vector<TrackletRecord> records;
  for (std::size_t id = 0; id < cfg.synth.num_identities; ++id) {
    for (std::size_t k = 0; k < cfg.tracklets_per_identity; ++k) {
      const int camera = static_cast<int>(k % cfg.cameras);
      SynthConfig per = cfg.synth;
      if (camera != 0)
        per.occlusion_probability = cfg.gallery_occlusion_probability;
      const SynthSample sample = generate_tracklet(
          per, static_cast<int>(id), static_cast<int>(cfg.tracklet_offset + k));

      const int tid = static_cast<int>(id * cfg.tracklets_per_identity + k);
      char name[32];
      std::snprintf(name, sizeof(name), "track_%04d.rfct", tid);
      save_tensor(sample.images, root / name);
      manifest << tid << ',' << id << ',' << camera << ','
               << cfg.synth.frames_per_tracklet << ',' << name << '\n';
      records.push_back({tid, static_cast<int>(id), camera,
                         cfg.synth.frames_per_tracklet, (root / name).string()});
    }
  }
  if (!manifest.flush())
    throw IoError("export_dataset: failed writing manifest in " + dir);
  return records;
}

std::vector<TrackletRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_manifest: cannot open " + path);
  const std::filesystem::path root = std::filesystem::path(path).parent_path();

  std::string line;
  if (!std::getline(in, line) || line != "tracklet_id,identity,camera,frame_count,file")
    throw IoError("read_manifest: bad header in " + path);

  std::vector<TrackletRecord> records;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::array<std::string, 5> field;
    std::size_t start = 0, n = 0;
    for (; n < 5; ++n) {
      const std::size_t comma = line.find(',', start);
      const bool last = comma == std::string::npos;
      field[n] = line.substr(start, last ? std::string::npos : comma - start);
      if (last) {
        ++n;
        break;
      }
      start = comma + 1;
    }
    if (n != 5 || field[4].empty())
      throw IoError("read_manifest: malformed line " + std::to_string(lineno) +
                    " in " + path);
    TrackletRecord r;
    try {
      r.tracklet_id = std::stoi(field[0]);
      r.identity = std::stoi(field[1]);
      r.camera = std::stoi(field[2]);
      r.frames = static_cast<std::size_t>(std::stoul(field[3]));
    } catch (const std::exception&) {
      throw IoError("read_manifest: malformed line " + std::to_string(lineno) +
                    " in " + path);
    }
    r.file = (root / field[4]).string();
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace rfc
