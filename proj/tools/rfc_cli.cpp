// Command-line front end: gradient checking, toy training, retrieval
// evaluation, ablation sweeps, tensor inspection dumps, and dataset export.
// Exit codes: 0 success, 1 validation error, 2 numeric/tolerance failure,
// 3 I/O error.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "rfc/block.hpp"
#include "rfc/errors.hpp"
#include "rfc/eval.hpp"
#include "rfc/gradcheck.hpp"
#include "rfc/losses.hpp"
#include "rfc/run_config.hpp"
#include "rfc/synthdata.hpp"
#include "rfc/tensor.hpp"
#include "rfc/train.hpp"

namespace {

using namespace rfc;

struct Overlay {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> kv;
};

// Every shared setting is a `--key value` flag named after its config-file
// key (underscores become hyphens). Values funnel through apply_key_value,
// so flags and file entries validate identically; flags are applied after
// the file and therefore win.
void add_shared_options(CLI::App* cmd, Overlay& ov) {
  cmd->add_option_function<std::string>(
      "--config", [&ov](const std::string& v) { ov.config_path = v; },
      "key = value config file ('#' comments)");
  static const char* const kKeys[] = {
      "seed",         "arrangement", "regions",        "clusters",
      "partition",    "stages",      "stage_channels", "lambda1",
      "lambda2",      "lambda3",     "margin",         "identities",
      "tracklets",    "frames",      "image_h",        "image_w",
      "channels",     "occlusion",   "occlusion_lo",   "occlusion_hi",
      "gallery_occlusion", "cameras", "tracklet_offset", "lr",
      "decay",        "epochs",      "batch_p",        "batch_k",
      "clip_len",     "clip_stride", "eval_clip",      "out",
      "checkpoint",   "dataset"};
  for (const char* key : kKeys) {
    std::string flag = "--" + std::string(key);
    std::replace(flag.begin(), flag.end(), '_', '-');
    cmd->add_option_function<std::string>(
           flag,
           [&ov, key](const std::string& v) { ov.kv.emplace_back(key, v); },
           "")
        ->take_last();
  }
  cmd->add_flag_function(
         "--corrupt-backward",
         [&ov](std::int64_t) { ov.kv.emplace_back("corrupt_backward", "true"); },
         "")
      ->group("");  // test hook, hidden from help
}

RunConfig assemble(const Overlay& ov, RunConfig base) {
  if (!ov.config_path.empty()) apply_config_file(base, ov.config_path);
  for (const auto& [k, v] : ov.kv) apply_key_value(base, k, v);
  return base;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir);
}

void print_eval(const DatasetEval& e, std::ostream& os) {
  os << "queries " << e.queries << " gallery " << e.gallery << '\n';
  os << "mAP " << fmt(e.result.mAP) << '\n';
  for (const std::size_t k : {std::size_t{1}, std::size_t{3}, std::size_t{5},
                              std::size_t{10}})
    if (k <= e.result.cmc.size())
      os << "top-" << k << ' ' << fmt(e.result.cmc[k - 1]) << '\n';
}

// ---------------------------------------------------------------------------
// gradcheck: reverse-mode vs central finite differences on every Parameter
// of a small seeded model, driven by the full objective on a fixed batch.

struct GradcheckBatch {
  std::vector<Tensor> clips;
  std::vector<SequenceLabels> labels;
  std::vector<int> ids;
};

GradcheckBatch gradcheck_batch(const RunConfig& rc) {
  const TrainConfig tc = train_config(rc);
  GradcheckBatch b;
  for (std::size_t id = 0; id < rc.batch_p; ++id)
    for (std::size_t k = 0; k < rc.batch_k; ++k) {
      const SynthSample s =
          generate_tracklet(tc.synth, static_cast<int>(id), static_cast<int>(k));
      const auto idx = clip_indices(rc.frames, rc.clip_len, rc.clip_stride, 0);
      const std::size_t fsize = rc.image_h * rc.image_w * rc.channels;
      Tensor clip = Tensor::zeros({rc.clip_len, rc.image_h, rc.image_w, rc.channels});
      SequenceLabels lab;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        std::copy_n(s.images.data() + idx[j] * fsize, fsize,
                    clip.data() + j * fsize);
        lab.keypoints.push_back(s.labels.keypoints[idx[j]]);
        lab.foreground.push_back(s.labels.foreground[idx[j]]);
      }
      b.clips.push_back(std::move(clip));
      b.labels.push_back(std::move(lab));
      b.ids.push_back(static_cast<int>(id));
    }
  return b;
}

LossReport gradcheck_objective(RfcModel& model, const GradcheckBatch& b,
                               const LossWeights& weights) {
  std::vector<Var> logits, features, lks, lfs, las, lps;
  for (std::size_t i = 0; i < b.clips.size(); ++i) {
    // update_stats stays off so repeated evaluations are pure.
    SequenceForward f =
        model.forward_sequence(b.clips[i], &b.labels[i], true, false);
    logits.push_back(f.logits);
    features.push_back(f.sequence_feature);
    lks.push_back(f.keypoint_loss);
    lfs.push_back(f.foreground_loss);
    las.push_back(f.appearance_reg);
    lps.push_back(f.position_reg);
  }
  LossParts parts;
  parts.ce = cross_entropy(concat_rows(logits), b.ids);
  parts.triplet =
      batch_hard_triplet(concat_rows(features), b.ids, weights.margin);
  parts.keypoints = mean_vars(lks);
  parts.foreground = mean_vars(lfs);
  parts.appearance_reg = mean_vars(las);
  parts.position_reg = mean_vars(lps);
  return total_loss(parts, weights);
}

// The objective is piecewise smooth: region masks come from hard argmax
// coordinates (constants by design, so a flip is a step the analytic
// gradient rightly ignores), and relu/min/max switches are kinks. A central
// difference whose interval brushes such a point disagrees with the correct
// one-sided analytic gradient, so an entry that fails at the base point is
// re-verified at two slightly shifted base points (+-5 eps): a genuine
// backward error keeps disagreeing there, while a local non-smoothness
// clears and the entry is excluded (reported as non-smooth). Differences
// below 1e-9 are under the finite-difference roundoff floor and ignored.
int cmd_gradcheck(const RunConfig& rc) {
  constexpr double kEps = 1e-5;
  constexpr double kTol = 1e-4;
  constexpr double kMagFloor = 1e-8;
  constexpr double kNoiseFloor = 1e-9;

  RfcModel model(model_config(rc));
  const GradcheckBatch batch = gradcheck_batch(rc);
  const LossWeights weights{rc.lambda1, rc.lambda2, rc.lambda3, rc.margin};

  auto objective = [&] {
    return gradcheck_objective(model, batch, weights).total.value().data()[0];
  };
  // Reverse-mode gradient of one entry at the current parameter values. The
  // corruption hook injects its offset here so the fault persists at the
  // shifted verification points exactly like a real backward bug would.
  auto reverse_grad = [&](std::size_t pi, Parameter* p, std::size_t idx) {
    model.zero_grads();
    backward(gradcheck_objective(model, batch, weights).total);
    double g = p->grad.data()[idx];
    if (rc.corrupt_backward && pi == 0 && idx == 0) g += 1e-2;
    return g;
  };

  const auto params = model.parameters();
  model.zero_grads();
  backward(gradcheck_objective(model, batch, weights).total);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);
  if (rc.corrupt_backward && !analytic.empty()) analytic[0].data()[0] += 1e-2;

  double worst = 0.0;
  std::string worst_name = "-";
  std::size_t total_kinks = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    const Tensor base = p->value;
    auto fd_entry = [&](std::size_t idx) {
      const double at = p->value.data()[idx];
      p->value.data()[idx] = at + kEps;
      const double fp = objective();
      p->value.data()[idx] = at - kEps;
      const double fm = objective();
      p->value.data()[idx] = at;
      return (fp - fm) / (2.0 * kEps);
    };
    auto rel_of = [&](double g, double f) {
      const double denom = std::max(std::abs(g), std::abs(f));
      if (denom <= kMagFloor || std::abs(g - f) <= kNoiseFloor) return 0.0;
      return std::abs(g - f) / denom;
    };

    const Tensor fd = finite_diff_grad(
        [&](const Tensor& x) {
          p->value = x;
          const double v = objective();
          p->value = base;
          return v;
        },
        base, kEps);
    p->value = base;

    double rel_max = 0.0;
    std::size_t kinks = 0;
    for (std::size_t i = 0; i < base.size(); ++i) {
      const double rel = rel_of(analytic[pi].data()[i], fd.data()[i]);
      if (rel <= kTol) {
        rel_max = std::max(rel_max, rel);
        continue;
      }
      bool clears = false;
      for (const double shift : {+5.0 * kEps, -5.0 * kEps}) {
        p->value.data()[i] = base.data()[i] + shift;
        const double g_s = reverse_grad(pi, p, i);
        const double f_s = fd_entry(i);
        p->value.data()[i] = base.data()[i];
        if (rel_of(g_s, f_s) <= kTol) {
          clears = true;
          break;
        }
      }
      if (clears) {
        ++kinks;  // agreement just off the base point: non-smoothness, excluded
        continue;
      }
      rel_max = std::max(rel_max, rel);
    }
    total_kinks += kinks;
    std::cout << "param " << p->name << " entries " << p->value.size()
              << " max_rel " << fmt(rel_max) << " nonsmooth " << kinks << '\n';
    if (rel_max > worst) {
      worst = rel_max;
      worst_name = p->name;
    }
  }
  std::cout << "worst " << worst_name << " max_rel " << fmt(worst)
            << " nonsmooth_total " << total_kinks << '\n';
  if (worst > kTol)
    throw NumericError("gradcheck: parameter '" + worst_name +
                       "' max relative error " + fmt(worst) + " exceeds 1e-4");
  std::cout << "gradcheck ok (" << params.size() << " parameters)\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& rc) {
  ensure_dir(rc.out);
  RfcModel model(model_config(rc));
  const TrainResult res = train(model, train_config(rc), &std::cout);

  const std::string log_path = rc.out + "/loss_log.csv";
  std::ofstream log(log_path);
  if (!log) throw IoError("train: cannot write " + log_path);
  for (const std::string& line : res.log_lines) log << line << '\n';
  if (!log.flush()) throw IoError("train: failed writing " + log_path);

  const std::string ckpt = rc.out + "/checkpoint";
  model.save_checkpoint(ckpt);
  std::cout << "steps " << res.steps << '\n'
            << "loss_log " << log_path << '\n'
            << "checkpoint " << ckpt << '\n';
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ValidationError("eval: --checkpoint is required");
  if (rc.dataset.empty()) throw ValidationError("eval: --dataset is required");
  RfcModel model(model_config(rc));
  model.load_checkpoint(rc.checkpoint);
  const DatasetEval e =
      evaluate_records(model, records_from(rc.dataset), rc.eval_clip);
  print_eval(e, std::cout);
  return 0;
}

int cmd_gen(const RunConfig& rc) {
  const auto records = export_dataset(export_config(rc), rc.out);
  std::cout << "wrote " << records.size() << " tracklets to " << rc.out
            << "/manifest.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// inspect: dump the block internals for one tracklet as tensor files.

Tensor stack_rows(const std::vector<Var>& frames) {
  const Shape inner = frames.front().value().shape();
  Shape shape{frames.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out = Tensor::zeros(shape);
  const std::size_t n = frames.front().value().size();
  for (std::size_t t = 0; t < frames.size(); ++t)
    std::copy_n(frames[t].value().data(), n, out.data() + t * n);
  return out;
}

int cmd_inspect(const RunConfig& rc) {
  if (rc.checkpoint.empty())
    throw ValidationError("inspect: --checkpoint is required");
  ensure_dir(rc.out);
  RfcModel model(model_config(rc));
  model.load_checkpoint(rc.checkpoint);

  Tensor images;
  if (!rc.dataset.empty()) {
    const auto records = records_from(rc.dataset);
    if (records.empty()) throw ValidationError("inspect: empty manifest");
    std::size_t pick = 0;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].camera == 0) {
        pick = i;
        break;
      }
    images = load_tensor(records[pick].file);
  } else {
    images = generate_tracklet(train_config(rc).synth, 0, 0).images;
  }
  const std::size_t t_use = std::min<std::size_t>(images.dim(0), 8);
  Tensor clip = Tensor::zeros({t_use, images.dim(1), images.dim(2), images.dim(3)});
  std::copy_n(images.data(), clip.size(), clip.data());

  const SequenceForward fwd = model.forward_sequence(clip, nullptr, false, false);

  std::vector<std::string> written;
  auto dump = [&](const std::string& name, const Tensor& t) {
    const std::string path = rc.out + "/" + name + ".rfct";
    save_tensor(t, path);
    written.push_back(path);
  };

  for (std::size_t bi = 0; bi < model.block_count(); ++bi) {
    const BlockOut& bo = fwd.backbone.blocks[bi];
    const std::string prefix = "stage" + std::to_string(model.block_stage(bi)) + "_";

    std::vector<Var> f, completed, fg;
    std::vector<Tensor> masks;
    for (const FrameDiagnostics& d : bo.frames) {
      f.push_back(d.f);
      completed.push_back(d.completed);
      fg.push_back(d.foreground);
      masks.push_back(d.masks.masks);
    }
    dump(prefix + "f", stack_rows(f));
    dump(prefix + "completed", stack_rows(completed));
    dump(prefix + "fused", stack_rows(bo.e_frames));
    dump(prefix + "foreground", stack_rows(fg));
    {
      const Shape inner = masks.front().shape();
      Tensor m = Tensor::zeros({masks.size(), inner[0], inner[1], inner[2]});
      for (std::size_t t = 0; t < masks.size(); ++t)
        std::copy_n(masks[t].data(), masks[t].size(), m.data() + t * masks[t].size());
      dump(prefix + "masks", m);
    }

    if (bo.frames.front().assign) {
      std::vector<Var> sa, sp, s, enc, dec, clu;
      for (const FrameDiagnostics& d : bo.frames) {
        sa.push_back(d.assign->appearance);
        sp.push_back(d.assign->position);
        s.push_back(d.assign->combined);
        enc.push_back(d.assign->encoding);
        dec.push_back(d.assign->decoding);
        clu.push_back(d.assign->clusters);
      }
      dump(prefix + "assign_appearance", stack_rows(sa));
      dump(prefix + "assign_position", stack_rows(sp));
      dump(prefix + "assign_combined", stack_rows(s));
      dump(prefix + "encoding", stack_rows(enc));
      dump(prefix + "decoding", stack_rows(dec));
      dump(prefix + "clusters", stack_rows(clu));
    }

    if (!bo.gates.empty()) {
      dump(prefix + "gate", stack_rows(bo.gates));
      dump(prefix + "context", stack_rows(bo.contexts));
      // alpha[t][i]: 1 x (T-1) each.
      const std::size_t n = bo.alpha.front().size();
      Tensor alpha = Tensor::zeros({bo.alpha.size(), n, t_use - 1});
      for (std::size_t t = 0; t < bo.alpha.size(); ++t)
        for (std::size_t i = 0; i < n; ++i)
          std::copy_n(bo.alpha[t][i].value().data(), t_use - 1,
                      alpha.data() + (t * n + i) * (t_use - 1));
      dump(prefix + "alpha", alpha);

      // Mechanism report: average gate activation per region.
      const std::size_t d = bo.gates.front().value().dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (const Var& g : bo.gates)
          for (std::size_t j = 0; j < d; ++j) acc += g.value().at(i, j);
        std::cout << prefix << "region " << i << " gate_mean "
                  << fmt(acc / (static_cast<double>(bo.gates.size() * d))) << '\n';
      }
    }
  }
  for (const std::string& p : written) std::cout << "wrote " << p << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// ablate: train + evaluate one model per cell over a shared dataset and
// shared seeds; each cell is a ';'-separated list of key=value overrides.

int cmd_ablate(const RunConfig& base, const std::vector<std::string>& cells) {
  ensure_dir(base.out);
  ExportConfig ecfg = export_config(base);
  const std::string data_dir = base.out + "/dataset";
  const auto records = export_dataset(ecfg, data_dir);

  std::vector<std::string> labels;
  std::vector<RunConfig> configs;
  if (cells.empty()) {
    labels.push_back("base");
    configs.push_back(base);
  }
  for (const std::string& cell : cells) {
    RunConfig rc = base;
    std::stringstream ss(cell);
    std::string pair;
    while (std::getline(ss, pair, ';')) {
      if (pair.empty()) continue;
      const std::size_t eq = pair.find('=');
      if (eq == std::string::npos)
        throw ValidationError("ablate: cell entry '" + pair +
                              "' is not key=value");
      apply_key_value(rc, pair.substr(0, eq), pair.substr(eq + 1));
    }
    labels.push_back(cell.empty() ? "base" : cell);
    configs.push_back(rc);
  }

  const std::string csv_path = base.out + "/ablate.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("ablate: cannot write " + csv_path);
  csv << "cell,mAP,top-1\n";
  std::cout << "cell,mAP,top-1\n";
  for (std::size_t i = 0; i < configs.size(); ++i) {
    RfcModel model(model_config(configs[i]));
    train(model, train_config(configs[i]), nullptr);
    const DatasetEval e = evaluate_records(model, records, configs[i].eval_clip);
    const std::string row = "\"" + labels[i] + "\"," + fmt(e.result.mAP) + "," +
                            fmt(e.result.cmc.empty() ? 0.0 : e.result.cmc[0]);
    csv << row << '\n';
    std::cout << row << '\n';
  }
  if (!csv.flush()) throw IoError("ablate: failed writing " + csv_path);
  return 0;
}

RunConfig gradcheck_base() {
  RunConfig rc;
  rc.identities = 3;
  rc.tracklets = 2;
  rc.frames = 8;
  rc.image_h = 16;
  rc.image_w = 8;
  rc.channels = 2;
  rc.stage_channels = {4, 8};
  rc.stages = {2};
  rc.batch_p = 2;
  rc.batch_k = 2;
  rc.clip_len = 2;
  rc.clip_stride = 2;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Occlusion-robust sequence retrieval toolkit: adaptive body-region "
      "partition, spatial/temporal feature completion, toy training and "
      "retrieval evaluation on a synthetic benchmark"};
  app.require_subcommand(1);

  Overlay ov;
  std::vector<std::string> cells;

  CLI::App* c_gradcheck = app.add_subcommand(
      "gradcheck", "compare reverse-mode gradients with finite differences");
  CLI::App* c_train = app.add_subcommand("train", "train the toy model");
  CLI::App* c_eval =
      app.add_subcommand("eval", "retrieval metrics for a checkpoint");
  CLI::App* c_inspect =
      app.add_subcommand("inspect", "dump block internals as tensor files");
  CLI::App* c_ablate =
      app.add_subcommand("ablate", "train/evaluate a grid of config cells");
  CLI::App* c_gen = app.add_subcommand("gen", "export a synthetic dataset");
  for (CLI::App* c :
       {c_gradcheck, c_train, c_eval, c_inspect, c_ablate, c_gen})
    add_shared_options(c, ov);
  c_ablate->add_option("--cell", cells,
                       "key=value overrides, ';'-separated; repeatable");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (c_gradcheck->parsed()) return cmd_gradcheck(assemble(ov, gradcheck_base()));
    if (c_train->parsed()) return cmd_train(assemble(ov, RunConfig{}));
    if (c_eval->parsed()) return cmd_eval(assemble(ov, RunConfig{}));
    if (c_inspect->parsed()) return cmd_inspect(assemble(ov, RunConfig{}));
    if (c_ablate->parsed()) return cmd_ablate(assemble(ov, RunConfig{}), cells);
    if (c_gen->parsed()) return cmd_gen(assemble(ov, RunConfig{}));
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
