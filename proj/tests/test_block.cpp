#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "rfc/block.hpp"
#include "rfc/gradcheck.hpp"
#include "rfc/rng.hpp"

using namespace rfc;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// ---- plain-tensor helpers for the straight-line oracle ----

Tensor mm(const Tensor& a, const Tensor& b) {
  Tensor out({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += a.at(i, k) * b.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

void rowsoftmax(Tensor& m) {
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    double mx = m.at(i, 0);
    for (std::size_t j = 1; j < m.dim(1); ++j) mx = std::max(mx, m.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < m.dim(1); ++j) {
      m.at(i, j) = std::exp(m.at(i, j) - mx);
      z += m.at(i, j);
    }
    for (std::size_t j = 0; j < m.dim(1); ++j) m.at(i, j) /= z;
  }
}

// Raw tensors for every learned piece of one block.
struct RawBlock {
  Tensor reduce;
  std::array<Tensor, 3> row_w, row_b;
  Tensor col_w, col_b;
  Tensor fg_w, fg_b;
  Tensor appearance, pos_hidden, pos_out, enc_w, enc_b, dec_w, dec_b;
  Tensor gate_w, gate_b;
  Tensor bn_scale, bn_shift;
};

RawBlock random_raw(std::size_t h, std::size_t w, std::size_t d, std::size_t k,
                    Rng& rng) {
  const std::size_t dr = std::max<std::size_t>(d / 8, 4);
  RawBlock p;
  p.reduce = random_tensor({d, dr}, rng, -0.5, 0.5);
  for (int i = 0; i < 3; ++i) {
    p.row_w[i] = random_tensor({h * dr, h}, rng, -0.5, 0.5);
    p.row_b[i] = random_tensor({h}, rng, -0.2, 0.2);
  }
  p.col_w = random_tensor({w * dr, w}, rng, -0.5, 0.5);
  p.col_b = random_tensor({w}, rng, -0.2, 0.2);
  p.fg_w = random_tensor({d, 1}, rng, -0.6, 0.6);
  p.fg_b = random_tensor({1}, rng, -0.2, 0.2);
  p.appearance = random_tensor({d, k}, rng, -0.7, 0.7);
  p.pos_hidden = random_tensor({4, d}, rng, -0.3, 0.3);
  p.pos_out = random_tensor({d, k}, rng, -0.7, 0.7);
  p.enc_w = random_tensor({d, d}, rng, -0.4, 0.4);
  p.enc_b = random_tensor({d}, rng, -0.2, 0.2);
  p.dec_w = random_tensor({d, d}, rng, -0.4, 0.4);
  p.dec_b = random_tensor({d}, rng, -0.2, 0.2);
  p.gate_w = random_tensor({d, d}, rng, -0.3, 0.3);
  p.gate_b = random_tensor({d}, rng, -0.3, 0.3);
  p.bn_scale = random_tensor({d}, rng, 0.5, 1.5);
  p.bn_shift = random_tensor({d}, rng, -0.3, 0.3);
  return p;
}

RfcBlockParams to_vars(const RawBlock& p, bool adaptive, bool spatial,
                       bool temporal) {
  RfcBlockParams out;
  if (adaptive) {
    LocatorParams loc;
    loc.reduce = constant(p.reduce);
    for (int i = 0; i < 3; ++i) {
      loc.row_w[i] = constant(p.row_w[i]);
      loc.row_b[i] = constant(p.row_b[i]);
    }
    loc.col_w = constant(p.col_w);
    loc.col_b = constant(p.col_b);
    out.locator = std::move(loc);
  }
  out.foreground.weight = constant(p.fg_w);
  out.foreground.bias = constant(p.fg_b);
  if (spatial) {
    SrfcParams s;
    s.appearance = constant(p.appearance);
    s.pos_hidden = constant(p.pos_hidden);
    s.pos_out = constant(p.pos_out);
    s.enc_w = constant(p.enc_w);
    s.enc_b = constant(p.enc_b);
    s.dec_w = constant(p.dec_w);
    s.dec_b = constant(p.dec_b);
    out.srfc = std::move(s);
  }
  if (temporal) {
    TrfcParams t;
    t.gate_w_raw = constant(p.gate_w);
    t.gate_b = constant(p.gate_b);
    out.trfc = std::move(t);
  }
  out.projection.bn_scale = constant(p.bn_scale);
  out.projection.bn_shift = constant(p.bn_shift);
  return out;
}

// Per-frame region extraction redone with loops: keypoints, masks,
// foreground weighting, pooled rows, boxes, similarity table.
struct OracleFrame {
  std::vector<std::size_t> region_of;  // per pixel, row-major
  std::size_t n = 0;
  Tensor f;    // n x d pooled rows
  Tensor enc;  // n x 4
  Tensor ps;   // n x n
};

OracleFrame oracle_extract(const Tensor& frame, const RawBlock& p,
                           const PartitionSpec& spec) {
  const std::size_t h = frame.dim(0), w = frame.dim(1), d = frame.dim(2);
  OracleFrame of;
  of.n = spec.mode == PartitionMode::Adaptive ? 6 : spec.parts;
  of.region_of.resize(h * w);

  if (spec.mode == PartitionMode::Adaptive) {
    const std::size_t dr = p.reduce.dim(1);
    Tensor reduced({h, w, dr});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t j = 0; j < dr; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < d; ++c)
            s += frame.at(y, x, c) * p.reduce.at(c, j);
          reduced.at(y, x, j) = s;
        }
    std::vector<double> rd(h * dr), cd(w * dr);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t j = 0; j < dr; ++j) {
        double s = 0.0;
        for (std::size_t x = 0; x < w; ++x) s += reduced.at(y, x, j);
        rd[y * dr + j] = s / static_cast<double>(w);
      }
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t j = 0; j < dr; ++j) {
        double s = 0.0;
        for (std::size_t y = 0; y < h; ++y) s += reduced.at(y, x, j);
        cd[x * dr + j] = s / static_cast<double>(h);
      }
    std::array<std::size_t, 4> coords{};
    for (int head = 0; head < 3; ++head) {
      std::size_t best = 0;
      double best_v = 0.0;
      for (std::size_t q = 0; q < h; ++q) {
        double v = p.row_b[head][q];
        for (std::size_t m = 0; m < h * dr; ++m)
          v += rd[m] * p.row_w[head].at(m, q);
        if (q == 0 || v > best_v) {
          best = q;
          best_v = v;
        }
      }
      coords[head] = best;
    }
    {
      std::size_t best = 0;
      double best_v = 0.0;
      for (std::size_t q = 0; q < w; ++q) {
        double v = p.col_b[q];
        for (std::size_t m = 0; m < w * dr; ++m) v += cd[m] * p.col_w.at(m, q);
        if (q == 0 || v > best_v) {
          best = q;
          best_v = v;
        }
      }
      coords[3] = best;
    }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t r;
        if (y <= coords[0])
          r = 0;
        else if (y <= coords[1])
          r = 1;
        else if (y <= coords[2])
          r = x <= coords[3] ? 2 : 3;
        else
          r = x <= coords[3] ? 4 : 5;
        of.region_of[y * w + x] = r;
      }
  } else {
    for (std::size_t y = 0; y < h; ++y) {
      std::size_t band = of.n - 1;
      for (std::size_t i = 0; i < of.n; ++i)
        if (y >= i * h / of.n && y < (i + 1) * h / of.n) band = i;
      for (std::size_t x = 0; x < w; ++x) of.region_of[y * w + x] = band;
    }
  }

  std::vector<double> fg(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double v = p.fg_b[0];
      for (std::size_t c = 0; c < d; ++c) v += frame.at(y, x, c) * p.fg_w[c];
      fg[y * w + x] = 1.0 / (1.0 + std::exp(-v));
    }

  of.f = Tensor({of.n, d});
  of.enc = Tensor({of.n, 4});
  std::vector<double> cy(of.n, 0.0), cx(of.n, 0.0);
  for (std::size_t i = 0; i < of.n; ++i) {
    double s = 0.0;
    std::size_t count = 0, rmin = h, rmax = 0, cmin = w, cmax = 0;
    for (std::size_t q = 0; q < h * w; ++q)
      if (of.region_of[q] == i) {
        ++count;
        s += fg[q];
        rmin = std::min(rmin, q / w);
        rmax = std::max(rmax, q / w);
        cmin = std::min(cmin, q % w);
        cmax = std::max(cmax, q % w);
      }
    if (count == 0) continue;
    for (std::size_t q = 0; q < h * w; ++q)
      if (of.region_of[q] == i)
        for (std::size_t c = 0; c < d; ++c)
          of.f.at(i, c) += fg[q] / s * frame.at(q / w, q % w, c);
    cy[i] = (rmin + rmax) / 2.0;
    cx[i] = (cmin + cmax) / 2.0;
    of.enc.at(i, 0) = cy[i];
    of.enc.at(i, 1) = cx[i];
    of.enc.at(i, 2) = static_cast<double>(rmax - rmin + 1);
    of.enc.at(i, 3) = static_cast<double>(cmax - cmin + 1);
  }
  of.ps = Tensor({of.n, of.n});
  for (std::size_t i = 0; i < of.n; ++i)
    for (std::size_t j = 0; j < of.n; ++j) {
      const double dy = (cy[i] - cy[j]) / static_cast<double>(h);
      const double dx = (cx[i] - cx[j]) / static_cast<double>(w);
      of.ps.at(i, j) = 1.0 - 2.0 * std::sqrt(dy * dy + dx * dx);
    }
  return of;
}

Tensor oracle_srfc(const Tensor& f, const Tensor& enc, const RawBlock& p) {
  const std::size_t n = f.dim(0), d = f.dim(1), k = p.appearance.dim(1);
  Tensor sa = mm(f, p.appearance);
  rowsoftmax(sa);
  Tensor hidden = mm(enc, p.pos_hidden);
  for (std::size_t q = 0; q < hidden.size(); ++q)
    hidden[q] = std::max(hidden[q], 0.0);
  Tensor sp = mm(hidden, p.pos_out);
  rowsoftmax(sp);
  Tensor s({n, k});
  for (std::size_t q = 0; q < s.size(); ++q) s[q] = 0.5 * (sa[q] + sp[q]);
  Tensor a = s;
  for (std::size_t j = 0; j < k; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < n; ++i) col += s.at(i, j);
    for (std::size_t i = 0; i < n; ++i) a.at(i, j) /= col;
  }
  Tensor clusters({k, d});
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < d; ++c) {
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += a.at(i, j) * f.at(i, c);
      clusters.at(j, c) = v;
    }
  Tensor clusters2 = mm(clusters, p.enc_w);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < d; ++c) clusters2.at(j, c) += p.enc_b[c];
  Tensor z = mm(s, clusters2);
  Tensor delta = mm(z, p.dec_w);
  Tensor out = f;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c)
      out.at(i, c) += delta.at(i, c) + p.dec_b[c];
  return out;
}

std::vector<Tensor> oracle_trfc(const std::vector<Tensor>& frames,
                                const RawBlock& p) {
  const std::size_t t_len = frames.size(), n = frames[0].dim(0),
                    d = frames[0].dim(1);
  std::vector<Tensor> out(t_len, Tensor({n, d}));
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> scores;
      std::vector<std::size_t> mem;
      for (std::size_t q = 0; q < t_len; ++q) {
        if (q == t) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c)
          s += frames[t].at(i, c) * frames[q].at(i, c);
        scores.push_back(s);
        mem.push_back(q);
      }
      double mx = scores[0];
      for (double v : scores) mx = std::max(mx, v);
      double z = 0.0;
      for (double& v : scores) {
        v = std::exp(v - mx);
        z += v;
      }
      for (double& v : scores) v /= z;
      for (std::size_t j = 0; j < d; ++j) {
        double v = 0.0;
        for (std::size_t q = 0; q < mem.size(); ++q)
          v += scores[q] * frames[mem[q]].at(i, j);
        double pre = p.gate_b[j];
        for (std::size_t c = 0; c < d; ++c)
          pre += frames[t].at(i, c) * std::max(p.gate_w.at(c, j), 0.0);
        const double g = 1.0 / (1.0 + std::exp(-pre));
        out[t].at(i, j) = g * frames[t].at(i, j) + (1.0 - g) * v;
      }
    }
  return out;
}

// Whole pipeline: extraction, arrangement, scatter, batch norm, residual.
std::vector<Tensor> oracle_block(const std::vector<Tensor>& frames,
                                 Arrangement arr, const RawBlock& p,
                                 const PartitionSpec& spec,
                                 const Tensor& run_mean, const Tensor& run_var,
                                 double eps, bool training) {
  const std::size_t t_len = frames.size(), h = frames[0].dim(0),
                    w = frames[0].dim(1), d = frames[0].dim(2);
  std::vector<OracleFrame> of;
  std::vector<Tensor> f_list;
  for (const Tensor& fr : frames) {
    of.push_back(oracle_extract(fr, p, spec));
    f_list.push_back(of.back().f);
  }

  std::vector<Tensor> completed(t_len);
  switch (arr) {
    case Arrangement::SpatialOnly:
      for (std::size_t t = 0; t < t_len; ++t)
        completed[t] = oracle_srfc(f_list[t], of[t].enc, p);
      break;
    case Arrangement::TemporalOnly:
      completed = oracle_trfc(f_list, p);
      break;
    case Arrangement::SpatialThenTemporal: {
      std::vector<Tensor> o(t_len);
      for (std::size_t t = 0; t < t_len; ++t)
        o[t] = oracle_srfc(f_list[t], of[t].enc, p);
      completed = oracle_trfc(o, p);
      break;
    }
    case Arrangement::TemporalThenSpatial: {
      std::vector<Tensor> e = oracle_trfc(f_list, p);
      for (std::size_t t = 0; t < t_len; ++t)
        completed[t] = oracle_srfc(e[t], of[t].enc, p);
      break;
    }
    case Arrangement::Parallel: {
      std::vector<Tensor> e = oracle_trfc(f_list, p);
      for (std::size_t t = 0; t < t_len; ++t) {
        Tensor s = oracle_srfc(f_list[t], of[t].enc, p);
        completed[t] = s;
        for (std::size_t q = 0; q < s.size(); ++q)
          completed[t][q] = 0.5 * (s[q] + e[t][q]);
      }
      break;
    }
  }

  // Scatter every region row onto its pixels.
  std::vector<Tensor> scattered(t_len, Tensor({h * w, d}));
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t q = 0; q < h * w; ++q)
      for (std::size_t c = 0; c < d; ++c)
        scattered[t].at(q, c) = completed[t].at(of[t].region_of[q], c);

  // Per-channel statistics over all T*H*W positions.
  Tensor mean({d}), var({d});
  if (training) {
    const double count = static_cast<double>(t_len * h * w);
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t q = 0; q < h * w; ++q) s += scattered[t].at(q, c);
      mean[c] = s / count;
      double v = 0.0;
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t q = 0; q < h * w; ++q) {
          const double dlt = scattered[t].at(q, c) - mean[c];
          v += dlt * dlt;
        }
      var[c] = v / count;
    }
  } else {
    mean = run_mean;
    var = run_var;
  }

  std::vector<Tensor> out(t_len, Tensor({h, w, d}));
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t q = 0; q < h * w; ++q)
      for (std::size_t c = 0; c < d; ++c) {
        const double xhat =
            (scattered[t].at(q, c) - mean[c]) / std::sqrt(var[c] + eps);
        out[t].at(q / w, q % w, c) =
            p.bn_scale[c] * xhat + p.bn_shift[c] + frames[t].at(q / w, q % w, c);
      }
  return out;
}

BlockConfig make_config(Arrangement arr, PartitionMode mode,
                        std::size_t parts = 6) {
  BlockConfig cfg;
  cfg.arrangement = arr;
  cfg.partition.mode = mode;
  cfg.partition.parts = parts;
  cfg.regions = mode == PartitionMode::Adaptive ? 6 : parts;
  cfg.clusters = 3;
  return cfg;
}

constexpr Arrangement kAllArrangements[] = {
    Arrangement::SpatialThenTemporal, Arrangement::TemporalThenSpatial,
    Arrangement::Parallel, Arrangement::SpatialOnly, Arrangement::TemporalOnly};

}  // namespace

TEST_CASE("reverse projection with zero scale is an identity") {
  Rng rng(501);
  const std::size_t h = 4, w = 3, d = 5, n = 4;
  std::vector<Var> rows, feats;
  std::vector<RegionMasks> masks;
  for (int t = 0; t < 2; ++t) {
    rows.push_back(constant(random_tensor({n, d}, rng)));
    feats.push_back(constant(random_tensor({h, w, d}, rng)));
    masks.push_back(fixed_masks(n, h, w));
  }
  ProjectionParams p{constant(Tensor::zeros({d})), constant(Tensor::zeros({d}))};
  BnState bn{Tensor({d}), Tensor::full({d}, 1.0)};
  for (bool training : {true, false}) {
    std::vector<Var> out =
        reverse_projection(rows, masks, feats, p, bn, training, false);
    for (int t = 0; t < 2; ++t)
      for (std::size_t q = 0; q < h * w * d; ++q)
        CHECK(out[t].value()[q] == feats[t].value()[q]);
  }
}

TEST_CASE("constant scatter batch-normalizes to the shift") {
  // One region covering everything, constant region row: batch statistics
  // are (c, 0), so the normalized value is 0 and E falls back to F.
  Rng rng(502);
  const std::size_t h = 3, w = 2, d = 4;
  Tensor c_row = random_tensor({1, d}, rng);
  std::vector<Var> rows = {constant(c_row)};
  std::vector<Var> feats = {constant(random_tensor({h, w, d}, rng))};
  RegionMasks all{Tensor::full({1, h, w}, 1.0)};
  ProjectionParams p{constant(Tensor::full({d}, 1.0)),
                     constant(Tensor::zeros({d}))};
  BnState bn{Tensor({d}), Tensor::full({d}, 1.0)};
  std::vector<Var> out =
      reverse_projection(rows, {all}, feats, p, bn, true, false);
  for (std::size_t q = 0; q < h * w * d; ++q)
    CHECK(std::abs(out[0].value()[q] - feats[0].value()[q]) <= 1e-12);
}

TEST_CASE("inference-mode projection matches the scatter-affine oracle") {
  Rng rng(503);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = 4, w = 4, d = 6, n = 4, t_len = 2;
    RawBlock p = random_raw(h, w, d, 3, rng);
    BnState bn{random_tensor({d}, rng, -0.5, 0.5),
               random_tensor({d}, rng, 0.3, 2.0)};
    Tensor run_mean = bn.running_mean, run_var = bn.running_var;
    std::vector<Var> rows, feats;
    std::vector<RegionMasks> masks;
    std::vector<Tensor> raw_rows, raw_feats;
    for (std::size_t t = 0; t < t_len; ++t) {
      raw_rows.push_back(random_tensor({n, d}, rng));
      raw_feats.push_back(random_tensor({h, w, d}, rng));
      rows.push_back(constant(raw_rows.back()));
      feats.push_back(constant(raw_feats.back()));
      masks.push_back(fixed_masks(n, h, w));
    }
    ProjectionParams pp{constant(p.bn_scale), constant(p.bn_shift)};
    std::vector<Var> out =
        reverse_projection(rows, masks, feats, pp, bn, false, false);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t region = y * n / h;  // fixed_masks band of row y
          for (std::size_t c = 0; c < d; ++c) {
            const double xhat = (raw_rows[t].at(region, c) - run_mean[c]) /
                                std::sqrt(run_var[c] + bn.eps);
            const double want = p.bn_scale[c] * xhat + p.bn_shift[c] +
                                raw_feats[t].at(y, x, c);
            CHECK(std::abs(out[t].value().at(y, x, c) - want) <= 1e-12);
          }
        }
  }
}

TEST_CASE("pixels of one region carry one vector before the residual") {
  Rng rng(504);
  const std::size_t h = 6, w = 4, d = 5, n = 3;
  std::vector<Var> rows = {constant(random_tensor({n, d}, rng)),
                           constant(random_tensor({n, d}, rng))};
  std::vector<Var> feats = {constant(random_tensor({h, w, d}, rng)),
                            constant(random_tensor({h, w, d}, rng))};
  std::vector<RegionMasks> masks = {fixed_masks(n, h, w), fixed_masks(n, h, w)};
  ProjectionParams p{constant(random_tensor({d}, rng, 0.5, 1.5)),
                     constant(random_tensor({d}, rng))};
  BnState bn{Tensor({d}), Tensor::full({d}, 1.0)};
  std::vector<Var> out =
      reverse_projection(rows, masks, feats, p, bn, true, false);
  for (std::size_t t = 0; t < 2; ++t) {
    // BN(F') = E - F; within a band every pixel must agree exactly.
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t y0 = i * h / n;
      for (std::size_t y = y0; y < (i + 1) * h / n; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t c = 0; c < d; ++c) {
            const double ref = out[t].value().at(y0, 0, c) -
                               feats[t].value().at(y0, 0, c);
            const double got =
                out[t].value().at(y, x, c) - feats[t].value().at(y, x, c);
            CHECK(std::abs(got - ref) <= 1e-12);
          }
    }
  }
}

TEST_CASE("running statistics blend with momentum 0.9") {
  Rng rng(505);
  const std::size_t h = 2, w = 2, d = 3, n = 2;
  std::vector<Var> rows = {constant(random_tensor({n, d}, rng)),
                           constant(random_tensor({n, d}, rng))};
  std::vector<Var> feats = {constant(random_tensor({h, w, d}, rng)),
                            constant(random_tensor({h, w, d}, rng))};
  std::vector<RegionMasks> masks = {fixed_masks(n, h, w), fixed_masks(n, h, w)};
  ProjectionParams p{constant(random_tensor({d}, rng)),
                     constant(random_tensor({d}, rng))};
  BnState bn{Tensor({d}), Tensor::full({d}, 1.0)};

  // Batch statistics by hand over the 2*4 scattered rows.
  Tensor batch_mean({d}), batch_var({d});
  for (std::size_t c = 0; c < d; ++c) {
    double s = 0.0;
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          s += rows[t].value().at(y * n / h, c);
    batch_mean[c] = s / 8.0;
    double v = 0.0;
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dlt = rows[t].value().at(y * n / h, c) - batch_mean[c];
          v += dlt * dlt;
        }
    batch_var[c] = v / 8.0;
  }

  reverse_projection(rows, masks, feats, p, bn, true, true);
  for (std::size_t c = 0; c < d; ++c) {
    CHECK(bn.running_mean[c] ==
          doctest::Approx(0.1 * batch_mean[c]).epsilon(1e-12));
    CHECK(bn.running_var[c] ==
          doctest::Approx(0.9 + 0.1 * batch_var[c]).epsilon(1e-12));
  }
  // Inference-only forwards leave the state untouched.
  Tensor frozen_mean = bn.running_mean, frozen_var = bn.running_var;
  reverse_projection(rows, masks, feats, p, bn, false, true);
  reverse_projection(rows, masks, feats, p, bn, true, false);
  CHECK(std::memcmp(bn.running_mean.data(), frozen_mean.data(),
                    d * sizeof(double)) == 0);
  CHECK(std::memcmp(bn.running_var.data(), frozen_var.data(),
                    d * sizeof(double)) == 0);
}

TEST_CASE("block with zero scale is an exact identity for every arrangement") {
  Rng rng(506);
  for (Arrangement arr : kAllArrangements) {
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t h = 8, w = 4, d = 8, t_len = 2;
      RawBlock p = random_raw(h, w, d, 3, rng);
      p.bn_scale = Tensor::zeros({d});
      p.bn_shift = Tensor::zeros({d});
      std::vector<Var> frames;
      for (std::size_t t = 0; t < t_len; ++t)
        frames.push_back(constant(random_tensor({h, w, d}, rng)));
      BlockConfig cfg = make_config(arr, PartitionMode::Adaptive);
      RfcBlockParams params = to_vars(p, true, uses_spatial(arr),
                                      uses_temporal(arr));
      BnState bn{Tensor({d}), Tensor::full({d}, 1.0)};
      for (bool training : {true, false}) {
        BlockOut out =
            rfc_block_forward(frames, cfg, params, bn, training, false);
        for (std::size_t t = 0; t < t_len; ++t)
          for (std::size_t q = 0; q < h * w * d; ++q) {
            CAPTURE(arrangement_name(arr));
            CHECK(std::abs(out.e_frames[t].value()[q] -
                           frames[t].value()[q]) <= 1e-15);
          }
      }
    }
  }
}

TEST_CASE("spatial-only accepts single frames, temporal arrangements do not") {
  Rng rng(507);
  const std::size_t h = 8, w = 4, d = 8;
  RawBlock p = random_raw(h, w, d, 3, rng);
  std::vector<Var> one = {constant(random_tensor({h, w, d}, rng))};
  BnState bn{Tensor({d}), Tensor::full({d}, 1.0)};

  BlockConfig s_cfg = make_config(Arrangement::SpatialOnly,
                                  PartitionMode::Adaptive);
  RfcBlockParams s_params = to_vars(p, true, true, false);
  BlockOut out = rfc_block_forward(one, s_cfg, s_params, bn, true, false);
  CHECK(out.e_frames.size() == 1);
  CHECK(out.alpha.empty());

  for (Arrangement arr :
       {Arrangement::SpatialThenTemporal, Arrangement::TemporalThenSpatial,
        Arrangement::Parallel, Arrangement::TemporalOnly}) {
    BlockConfig cfg = make_config(arr, PartitionMode::Adaptive);
    RfcBlockParams params = to_vars(p, true, true, true);
    CHECK_THROWS_AS(rfc_block_forward(one, cfg, params, bn, true, false),
                    ValidationError);
  }
}

TEST_CASE("full block matches the monolithic pipeline oracle") {
  Rng rng(508);
  for (Arrangement arr : kAllArrangements) {
    for (int trial = 0; trial < 6; ++trial) {
      const std::size_t h = 4, w = 4, d = 8, t_len = 2;
      RawBlock p = random_raw(h, w, d, 3, rng);
      std::vector<Tensor> raw_frames;
      std::vector<Var> frames;
      for (std::size_t t = 0; t < t_len; ++t) {
        raw_frames.push_back(random_tensor({h, w, d}, rng));
        frames.push_back(constant(raw_frames.back()));
      }
      BlockConfig cfg = make_config(arr, PartitionMode::Adaptive);
      RfcBlockParams params =
          to_vars(p, true, uses_spatial(arr), uses_temporal(arr));
      const bool training = trial % 2 == 0;
      BnState bn{random_tensor({d}, rng, -0.3, 0.3),
                 random_tensor({d}, rng, 0.5, 1.5)};
      std::vector<Tensor> want =
          oracle_block(raw_frames, arr, p, cfg.partition, bn.running_mean,
                       bn.running_var, bn.eps, training);
      BlockOut out =
          rfc_block_forward(frames, cfg, params, bn, training, false);
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t q = 0; q < h * w * d; ++q) {
          CAPTURE(arrangement_name(arr));
          CAPTURE(trial);
          CHECK(std::abs(out.e_frames[t].value()[q] - want[t][q]) <= 1e-10);
        }
    }
  }
}

TEST_CASE("fixed-band partition flows through the whole block") {
  Rng rng(509);
  const std::size_t h = 8, w = 4, d = 6, t_len = 3, parts = 4;
  RawBlock p = random_raw(h, w, d, 3, rng);
  std::vector<Tensor> raw_frames;
  std::vector<Var> frames;
  for (std::size_t t = 0; t < t_len; ++t) {
    raw_frames.push_back(random_tensor({h, w, d}, rng));
    frames.push_back(constant(raw_frames.back()));
  }
  BlockConfig cfg = make_config(Arrangement::SpatialThenTemporal,
                                PartitionMode::Fixed, parts);
  RfcBlockParams params = to_vars(p, false, true, true);
  BnState bn{Tensor({d}), Tensor::full({d}, 1.0)};
  std::vector<Tensor> want =
      oracle_block(raw_frames, cfg.arrangement, p, cfg.partition,
                   bn.running_mean, bn.running_var, bn.eps, true);
  BlockOut out = rfc_block_forward(frames, cfg, params, bn, true, false);
  for (std::size_t t = 0; t < t_len; ++t) {
    CHECK_FALSE(out.frames[t].keypoints.has_value());
    for (std::size_t q = 0; q < h * w * d; ++q)
      CHECK(std::abs(out.e_frames[t].value()[q] - want[t][q]) <= 1e-10);
  }
}

TEST_CASE("parallel arrangement averages the two region outputs") {
  Rng rng(510);
  const std::size_t h = 4, w = 4, d = 8, t_len = 2;
  RawBlock p = random_raw(h, w, d, 3, rng);
  std::vector<Var> frames;
  for (std::size_t t = 0; t < t_len; ++t)
    frames.push_back(constant(random_tensor({h, w, d}, rng)));
  BnState bn{Tensor({d}), Tensor::full({d}, 1.0)};

  auto run = [&](Arrangement arr) {
    BlockConfig cfg = make_config(arr, PartitionMode::Adaptive);
    RfcBlockParams params =
        to_vars(p, true, uses_spatial(arr), uses_temporal(arr));
    BnState local = bn;
    return rfc_block_forward(frames, cfg, params, local, true, false);
  };
  BlockOut both = run(Arrangement::Parallel);
  BlockOut s_only = run(Arrangement::SpatialOnly);
  BlockOut t_only = run(Arrangement::TemporalOnly);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t q = 0; q < both.frames[t].completed.value().size(); ++q) {
      const double want = 0.5 * (s_only.frames[t].completed.value()[q] +
                                 t_only.frames[t].completed.value()[q]);
      CHECK(std::abs(both.frames[t].completed.value()[q] - want) <= 1e-15);
    }
}

TEST_CASE("toy backbone zero weights give a zero sequence feature") {
  const std::size_t t_len = 2, h = 16, w = 8, c = 3;
  std::vector<StageParams> stages;
  stages.push_back({constant(Tensor::zeros({c, 4})),
                    constant(Tensor::zeros({4}))});
  stages.push_back({constant(Tensor::zeros({4, 6})),
                    constant(Tensor::zeros({6}))});
  Rng rng(511);
  Tensor images = random_tensor({t_len, h, w, c}, rng);
  BackboneOut out = toy_backbone_forward(constant(images), stages,
                                         make_config(Arrangement::SpatialOnly,
                                                     PartitionMode::Adaptive),
                                         {}, true, false);
  CHECK(out.sequence_feature.value().dim(1) == 6);
  for (std::size_t q = 0; q < 6; ++q)
    CHECK(out.sequence_feature.value()[q] == 0.0);
}

TEST_CASE("toy backbone matches a layer-by-layer oracle and handles T=1") {
  Rng rng(512);
  const std::size_t h0 = 16, w0 = 8, c0 = 3;
  for (std::size_t t_len : {std::size_t{1}, std::size_t{3}}) {
    Tensor images = random_tensor({t_len, h0, w0, c0}, rng);
    Tensor w1 = random_tensor({c0, 8}, rng, -0.5, 0.5);
    Tensor b1 = random_tensor({8}, rng, -0.2, 0.2);
    Tensor w2 = random_tensor({8, 16}, rng, -0.5, 0.5);
    Tensor b2 = random_tensor({16}, rng, -0.2, 0.2);
    std::vector<StageParams> stages = {{constant(w1), constant(b1)},
                                       {constant(w2), constant(b2)}};
    BackboneOut out = toy_backbone_forward(
        constant(images), stages,
        make_config(Arrangement::SpatialOnly, PartitionMode::Adaptive), {},
        true, false);

    // Stage 1 oracle: channel map + relu at 16x8, then pool to 8x4; stage 2
    // to 4x2; means over pixels then frames.
    auto stage = [&](const std::vector<Tensor>& in, const Tensor& sw,
                     const Tensor& sb) {
      std::vector<Tensor> outs;
      for (const Tensor& fr : in) {
        const std::size_t fh = fr.dim(0), fw = fr.dim(1), fc = fr.dim(2),
                          oc = sw.dim(1);
        Tensor mapped({fh, fw, oc});
        for (std::size_t y = 0; y < fh; ++y)
          for (std::size_t x = 0; x < fw; ++x)
            for (std::size_t j = 0; j < oc; ++j) {
              double v = sb[j];
              for (std::size_t cc = 0; cc < fc; ++cc)
                v += fr.at(y, x, cc) * sw.at(cc, j);
              mapped.at(y, x, j) = std::max(v, 0.0);
            }
        Tensor pooled({fh / 2, fw / 2, oc});
        for (std::size_t y = 0; y < fh / 2; ++y)
          for (std::size_t x = 0; x < fw / 2; ++x)
            for (std::size_t j = 0; j < oc; ++j)
              pooled.at(y, x, j) =
                  (mapped.at(2 * y, 2 * x, j) + mapped.at(2 * y, 2 * x + 1, j) +
                   mapped.at(2 * y + 1, 2 * x, j) +
                   mapped.at(2 * y + 1, 2 * x + 1, j)) /
                  4.0;
        outs.push_back(pooled);
      }
      return outs;
    };
    std::vector<Tensor> in_frames;
    for (std::size_t t = 0; t < t_len; ++t) {
      Tensor fr({h0, w0, c0});
      for (std::size_t y = 0; y < h0; ++y)
        for (std::size_t x = 0; x < w0; ++x)
          for (std::size_t cc = 0; cc < c0; ++cc)
            fr.at(y, x, cc) = images.at(t, y, x, cc);
      in_frames.push_back(fr);
    }
    std::vector<Tensor> s2 = stage(stage(in_frames, w1, b1), w2, b2);
    Tensor want_seq({16});
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t j = 0; j < 16; ++j) {
        double s = 0.0;
        for (std::size_t y = 0; y < 4; ++y)
          for (std::size_t x = 0; x < 2; ++x) s += s2[t].at(y, x, j);
        want_seq[j] += s / 8.0 / static_cast<double>(t_len);
      }
      for (std::size_t q = 0; q < s2[t].size(); ++q)
        CHECK(std::abs(out.final_map.value()[t * s2[t].size() + q] -
                       s2[t][q]) <= 1e-10);
    }
    for (std::size_t j = 0; j < 16; ++j)
      CHECK(std::abs(out.sequence_feature.value()[j] - want_seq[j]) <= 1e-10);
  }
}

TEST_CASE("coordinate rescale and mask downsample behave as documented") {
  CHECK(rescale_coord(0, 32, 8) == 0);
  CHECK(rescale_coord(31, 32, 8) == 7);
  CHECK(rescale_coord(15, 32, 8) == 3);
  CHECK(rescale_coord(16, 32, 8) == 4);
  CHECK_THROWS_AS(rescale_coord(32, 32, 8), ValidationError);

  Tensor mask({4, 4});
  // Top-left block three of four ones -> 1; top-right one of four -> 0;
  // bottom-left exactly half -> 1 (the >= 0.5 rule); bottom-right none -> 0.
  mask.at(0, 0) = mask.at(0, 1) = mask.at(1, 0) = 1.0;
  mask.at(0, 2) = 1.0;
  mask.at(2, 0) = mask.at(2, 1) = 1.0;
  Tensor down = downsample_mask(mask, 2, 2);
  CHECK(down.at(0, 0) == 1.0);
  CHECK(down.at(0, 1) == 0.0);
  CHECK(down.at(1, 0) == 1.0);
  CHECK(down.at(1, 1) == 0.0);
  CHECK_THROWS_AS(downsample_mask(mask, 3, 2), DimensionError);
}

TEST_CASE("model registers the expected parameters and starts as identity") {
  ModelConfig cfg;
  cfg.block = make_config(Arrangement::SpatialThenTemporal,
                          PartitionMode::Adaptive);
  cfg.block.stages = {2, 3};
  cfg.image_h = 32;
  cfg.image_w = 16;
  cfg.image_c = 3;
  cfg.stage_channels = {8, 16, 16};
  cfg.num_identities = 10;
  cfg.seed = 7;
  RfcModel model(cfg);

  CHECK(model.stage_grid(1) == std::make_pair<std::size_t, std::size_t>(16, 8));
  CHECK(model.stage_grid(2) == std::make_pair<std::size_t, std::size_t>(8, 4));
  CHECK(model.stage_grid(3) == std::make_pair<std::size_t, std::size_t>(4, 2));
  CHECK(model.block_count() == 2);
  CHECK(model.find("block2.srfc.appearance") != nullptr);
  CHECK(model.find("block3.trfc.gate_w") != nullptr);
  CHECK(model.find("block4.bn.scale") == nullptr);

  // Zero-scale start: the same images through a blockless twin of the model
  // (identical stage/classifier weights) give identical outputs.
  ModelConfig bare = cfg;
  bare.block.stages = {};
  RfcModel twin(bare);
  for (const char* name : {"stage1.weight", "stage1.bias", "stage2.weight",
                           "stage2.bias", "stage3.weight", "stage3.bias",
                           "classifier.weight", "classifier.bias"})
    twin.find(name)->value = model.find(name)->value;

  Rng rng(513);
  Tensor images = random_tensor({2, 32, 16, 3}, rng, 0.0, 1.0);
  SequenceForward with = model.forward_sequence(images, nullptr, true, false);
  SequenceForward without = twin.forward_sequence(images, nullptr, true, false);
  for (std::size_t q = 0; q < with.logits.value().size(); ++q)
    CHECK(std::abs(with.logits.value()[q] - without.logits.value()[q]) <=
          1e-15);
  for (std::size_t q = 0; q < with.sequence_feature.value().size(); ++q)
    CHECK(std::abs(with.sequence_feature.value()[q] -
                   without.sequence_feature.value()[q]) <= 1e-15);
}

namespace {

SequenceLabels make_labels(std::size_t t_len, std::size_t h0, std::size_t w0,
                           Rng& rng) {
  SequenceLabels labels;
  for (std::size_t t = 0; t < t_len; ++t) {
    const std::size_t a1 = 1 + rng.uniform_int(0, 4);
    const std::size_t a2 = a1 + 1 + rng.uniform_int(0, 4);
    const std::size_t a3 = a2 + 1 + rng.uniform_int(0, 4);
    labels.keypoints.push_back({a1, a2, a3, w0 / 2});
    Tensor fg({h0, w0});
    for (std::size_t q = 0; q < fg.size(); ++q)
      fg[q] = rng.uniform() < 0.7 ? 1.0 : 0.0;
    labels.foreground.push_back(fg);
  }
  return labels;
}

}  // namespace

TEST_CASE("model gradients match finite differences end to end") {
  ModelConfig cfg;
  cfg.block = make_config(Arrangement::SpatialThenTemporal,
                          PartitionMode::Adaptive);
  cfg.block.stages = {2};
  cfg.image_h = 16;
  cfg.image_w = 8;
  cfg.image_c = 2;
  cfg.stage_channels = {4, 8};
  cfg.num_identities = 3;
  cfg.seed = 11;
  RfcModel model(cfg);

  Rng rng(514);
  Tensor images = random_tensor({2, 16, 8, 2}, rng, 0.0, 1.0);
  SequenceLabels labels = make_labels(2, 16, 8, rng);

  auto objective = [&] {
    SequenceForward sf = model.forward_sequence(images, &labels, true, false);
    Var obj = sum(mul(sf.logits, sf.logits));
    obj = add(obj, sum(mul(sf.sequence_feature, sf.sequence_feature)));
    obj = add(obj, sf.keypoint_loss);
    obj = add(obj, sf.foreground_loss);
    obj = add(obj, scale(sf.appearance_reg, 0.05));
    obj = add(obj, scale(sf.position_reg, 0.05));
    return obj;
  };

  model.zero_grads();
  backward(objective());
  for (Parameter* p : model.parameters()) {
    Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
          const Tensor saved = p->value;
          p->value = probe;
          const double v = objective().value()[0];
          p->value = saved;
          return v;
        },
        p->value);
    CAPTURE(p->name);
    CHECK(max_rel_error(p->grad, fd) <= 1e-4);
  }
}

TEST_CASE("locator weights learn only through the key-point loss") {
  ModelConfig cfg;
  cfg.block = make_config(Arrangement::SpatialThenTemporal,
                          PartitionMode::Adaptive);
  cfg.block.stages = {1};
  cfg.image_h = 16;
  cfg.image_w = 8;
  cfg.image_c = 2;
  cfg.stage_channels = {6};
  cfg.num_identities = 3;
  cfg.seed = 17;
  RfcModel model(cfg);

  Rng rng(515);
  Tensor images = random_tensor({2, 16, 8, 2}, rng, 0.0, 1.0);
  SequenceLabels labels = make_labels(2, 16, 8, rng);

  model.zero_grads();
  SequenceForward sf = model.forward_sequence(images, &labels, true, false);
  // Everything except the key-point loss.
  Var obj = sum(mul(sf.logits, sf.logits));
  obj = add(obj, sf.foreground_loss);
  obj = add(obj, sf.appearance_reg);
  obj = add(obj, sf.position_reg);
  backward(obj);
  for (Parameter* p : model.parameters()) {
    if (p->name.find("locator") == std::string::npos) continue;
    for (std::size_t q = 0; q < p->grad.size(); ++q) {
      CAPTURE(p->name);
      CHECK(p->grad[q] == 0.0);
    }
  }

  // And with the key-point loss the locator does receive gradient.
  model.zero_grads();
  SequenceForward sf2 = model.forward_sequence(images, &labels, true, false);
  backward(sf2.keypoint_loss);
  double total = 0.0;
  for (Parameter* p : model.parameters())
    if (p->name.find("locator") != std::string::npos)
      for (std::size_t q = 0; q < p->grad.size(); ++q)
        total += std::abs(p->grad[q]);
  CHECK(total > 0.0);
}

TEST_CASE("checkpoints round-trip bit-exactly and reject corruption") {
  ModelConfig cfg;
  cfg.block = make_config(Arrangement::SpatialThenTemporal,
                          PartitionMode::Adaptive);
  cfg.block.stages = {2};
  cfg.image_h = 16;
  cfg.image_w = 8;
  cfg.image_c = 2;
  cfg.stage_channels = {4, 8};
  cfg.num_identities = 4;
  cfg.seed = 23;
  RfcModel model(cfg);

  // Nudge the normalization state so it is not at defaults.
  Rng rng(516);
  Tensor images = random_tensor({2, 16, 8, 2}, rng, 0.0, 1.0);
  model.forward_sequence(images, nullptr, true, true);

  const std::string dir = "/tmp/rfc_test_ckpt";
  std::filesystem::remove_all(dir);
  model.save_checkpoint(dir);

  RfcModel loaded(cfg);
  loaded.load_checkpoint(dir);
  for (Parameter* p : model.parameters()) {
    Parameter* q = loaded.find(p->name);
    REQUIRE(q != nullptr);
    CHECK(std::memcmp(p->value.data(), q->value.data(),
                      p->value.size() * sizeof(double)) == 0);
  }
  CHECK(std::memcmp(model.block_bn(0).running_mean.data(),
                    loaded.block_bn(0).running_mean.data(),
                    8 * sizeof(double)) == 0);
  CHECK(std::memcmp(model.block_bn(0).running_var.data(),
                    loaded.block_bn(0).running_var.data(),
                    8 * sizeof(double)) == 0);

  // Loaded model reproduces the original outputs bit-exactly.
  SequenceForward a = model.forward_sequence(images, nullptr, false, false);
  SequenceForward b = loaded.forward_sequence(images, nullptr, false, false);
  CHECK(std::memcmp(a.logits.value().data(), b.logits.value().data(),
                    a.logits.value().size() * sizeof(double)) == 0);

  // Corruption: a manifest naming an unknown entry.
  {
    std::ofstream m(dir + "/manifest.txt", std::ios::app);
    m << "stage9.weight 2 4 4\n";
  }
  RfcModel victim(cfg);
  CHECK_THROWS_AS(victim.load_checkpoint(dir), ValidationError);

  // Missing directory.
  RfcModel victim2(cfg);
  CHECK_THROWS_AS(victim2.load_checkpoint("/tmp/rfc_no_such_ckpt"), IoError);

  // Wrong shape: reuse the manifest but swap one tensor file.
  std::filesystem::remove_all(dir);
  model.save_checkpoint(dir);
  save_tensor(Tensor::zeros({3, 3}), dir + "/classifier.weight.rfct");
  RfcModel victim3(cfg);
  CHECK_THROWS_AS(victim3.load_checkpoint(dir), DimensionError);

  // A manifest that silently lost an entry.
  std::filesystem::remove_all(dir);
  model.save_checkpoint(dir);
  {
    std::ifstream in(dir + "/manifest.txt");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    in.close();
    std::ofstream out(dir + "/manifest.txt");
    for (std::size_t i = 0; i + 1 < lines.size(); ++i) out << lines[i] << '\n';
  }
  RfcModel victim4(cfg);
  CHECK_THROWS_AS(victim4.load_checkpoint(dir), ValidationError);
  std::filesystem::remove_all(dir);
}
