// voxelrcnn: command-line front end.
//
//   gen-data       phantom dataset from a key=value spec
//   train          staged training on one fold of a dataset directory
//   infer          sliding-window detection + segmentation
//   eval           FROC/CPM and segmentation metrics
//   export-slices  PGM slice and PPM contour overlay
//
// Exit codes: 0 success, 2 usage/config, 3 data, 4 internal.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "voxelrcnn/checkpoint.hpp"
#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/eval.hpp"
#include "voxelrcnn/infer.hpp"
#include "voxelrcnn/phantom.hpp"
#include "voxelrcnn/pipeline.hpp"
#include "voxelrcnn/render.hpp"

namespace fs = std::filesystem;
using namespace voxelrcnn;

namespace {

constexpr int kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitInternal = 4;

void info(const std::string& msg) { std::cerr << msg << '\n'; }

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open " + p.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw IoError("cannot write " + p.string());
  for (const auto& l : lines) os << l << '\n';
}

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw ArgumentError(what + " directory not found: " + p.string());
}

// Full run configuration: model., train. and infer. keys.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  InferConfig infer;
};

RunConfig parse_run_config(const KeyValues& kv) {
  std::vector<std::string> known = ModelConfig::keys();
  for (auto& k : TrainConfig::keys()) known.push_back(k);
  for (auto& k : InferConfig::keys()) known.push_back(k);
  const auto unknown = kv.unknown_keys(known);
  if (!unknown.empty()) throw ConfigError("unknown config key: " + unknown.front());
  return {ModelConfig::from_keyvalues(kv), TrainConfig::from_keyvalues(kv), InferConfig::from_keyvalues(kv)};
}

KeyValues dump_run_config(const RunConfig& rc) {
  KeyValues kv;
  rc.model.to_keyvalues(kv);
  rc.train.to_keyvalues(kv);
  rc.infer.to_keyvalues(kv);
  return kv;
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  std::string spec, out;
};

int cmd_gen_data(const GenArgs& a) {
  KeyValues kv = KeyValues::read(a.spec);
  const auto unknown = kv.unknown_keys(PhantomSpec::keys());
  if (!unknown.empty()) throw ConfigError("unknown spec key: " + unknown.front());
  const PhantomSpec spec = PhantomSpec::from_keyvalues(kv);
  if (spec.n_volumes == 0) info("warning: n_volumes is 0; writing an empty dataset");
  const auto cases = generate(spec);
  write_dataset(cases, a.out);
  KeyValues dumped;
  spec.to_keyvalues(dumped);
  dumped.write(fs::path(a.out) / "spec.txt");
  std::size_t n = 0;
  for (const auto& c : cases) n += c.annotations.size();
  std::cout << "wrote " << cases.size() << " volumes, " << n << " nodules to " << a.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data, config, out, stage = "all";
  std::optional<int> fold;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  require_dir(a.data, "data");
  KeyValues kv;
  if (!a.config.empty()) kv = KeyValues::read(a.config);
  if (a.fold) kv.set("train.fold", *a.fold);
  if (a.seed) kv.set("train.seed", std::to_string(*a.seed));
  const RunConfig rc = parse_run_config(kv);
  if (a.stage != "1" && a.stage != "2" && a.stage != "all") throw ArgumentError("--stage must be 1, 2 or all");

  const fs::path out = a.out;
  fs::create_directories(out);
  dump_run_config(rc).write(out / "config.txt");

  const Dataset all = Dataset::load(a.data, rc.infer.spacing_mm);
  if (all.scans.empty()) throw DataError("dataset has no scans: " + a.data);
  const auto folds = kfold_split(all.ids(), rc.train.folds, rc.train.seed);
  const Fold& f = folds[static_cast<std::size_t>(rc.train.fold)];
  const auto [fit, val] = validation_split(f.train, rc.train.val_scans);
  write_lines(out / "train_ids.txt", fit);
  write_lines(out / "val_ids.txt", val);
  write_lines(out / "test_ids.txt", f.test);
  const Dataset tr = all.subset(fit), va = all.subset(val);
  info("fold " + std::to_string(rc.train.fold) + "/" + std::to_string(rc.train.folds) + ": " +
       std::to_string(fit.size()) + " train, " + std::to_string(val.size()) + " val, " +
       std::to_string(f.test.size()) + " test");

  VoxelRcnn model(rc.model);
  auto report = [](const char* name, const StageResult& r, double secs) {
    std::cout << name << ": " << r.log.size() << " epochs, best val " << format_double(r.best_val) << " at epoch "
              << r.best_epoch << " (" << static_cast<int>(secs) << " s)\n";
  };
  using clock = std::chrono::steady_clock;
  if (a.stage == "1" || a.stage == "all") {
    const auto t0 = clock::now();
    const StageResult r = train_stage1(model, tr, va, rc.train, out);
    report("stage1", r, std::chrono::duration<double>(clock::now() - t0).count());
    save_checkpoint(out / "model.ckpt", model.parameters());
  }
  if (a.stage == "2" || a.stage == "all") {
    const auto t0 = clock::now();
    const StageResult r = train_stage2(model, tr, va, rc.train, out / "stage1_best.ckpt", out);
    report("stage2", r, std::chrono::duration<double>(clock::now() - t0).count());
    if (rc.train.finetune_epochs > 0) {
      const auto t1 = clock::now();
      const StageResult e = train_finetune(model, tr, va, rc.train, out);
      report("finetune", e, std::chrono::duration<double>(clock::now() - t1).count());
    }
    save_checkpoint(out / "model.ckpt", model.parameters());
  }
  std::cout << "checkpoint " << (out / "model.ckpt").string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  std::string scan, data, ids, checkpoint, config, lung_mask, out;
  bool fp_reduce = false;
  std::optional<int> threads;
};

int cmd_infer(const InferArgs& a) {
  if (a.scan.empty() == a.data.empty()) throw ArgumentError("exactly one of --scan or --data is required");
  if (!a.data.empty()) require_dir(a.data, "data");
  if (!fs::exists(a.checkpoint)) throw ArgumentError("checkpoint not found: " + a.checkpoint);
  KeyValues kv;
  const fs::path cfg_path = !a.config.empty() ? fs::path(a.config) : fs::path(a.checkpoint).parent_path() / "config.txt";
  if (!a.config.empty() || fs::exists(cfg_path)) kv = KeyValues::read(cfg_path);
  if (a.threads) kv.set("infer.threads", *a.threads);
  const RunConfig rc = parse_run_config(kv);
  VoxelRcnn model(rc.model);
  load_checkpoint(a.checkpoint, model.parameters());

  // (scan id, scan path, lung mask path)
  std::vector<std::tuple<std::string, fs::path, fs::path>> jobs;
  if (!a.scan.empty()) {
    jobs.emplace_back(fs::path(a.scan).stem().string(), a.scan, a.lung_mask);
  } else {
    std::vector<std::string> ids;
    if (!a.ids.empty()) {
      ids = read_lines(a.ids);
    } else {
      for (const auto& e : fs::directory_iterator(fs::path(a.data) / "scans")) {
        if (e.path().extension() == ".mhd") ids.push_back(e.path().stem().string());
      }
      std::sort(ids.begin(), ids.end());
    }
    for (const auto& id : ids) {
      const fs::path lung = a.lung_mask.empty() ? fs::path{} : fs::path(a.lung_mask) / (id + ".mhd");
      jobs.emplace_back(id, fs::path(a.data) / "scans" / (id + ".mhd"), lung);
    }
  }

  const fs::path out = a.out;
  fs::create_directories(out / "labels");
  std::vector<Candidate> all;
  for (const auto& [id, scan_path, lung_path] : jobs) {
    const Volume raw = read_mhd(scan_path);
    const Vec3 target{rc.infer.spacing_mm, rc.infer.spacing_mm, rc.infer.spacing_mm};
    const Volume scan = raw.spacing() == target ? raw : resample(raw, target);
    std::optional<Volume> lung;
    if (!lung_path.empty()) lung = read_mhd(lung_path);
    std::vector<Candidate> c = infer_volume(scan, id, model, rc.infer, lung ? &*lung : nullptr);
    const std::size_t first = c.size();
    if (a.fp_reduce) c = fp_reduce(scan, c, model, rc.infer);
    write_mhd(stitch_masks(c, raw.dims(), raw.spacing(), raw.origin()), out / "labels" / (id + ".mhd"));
    info(id + ": " + std::to_string(c.size()) + " candidates" +
         (a.fp_reduce ? " (" + std::to_string(first) + " before second pass)" : ""));
    all.insert(all.end(), c.begin(), c.end());
  }
  write_candidates_csv(all, out / "candidates.csv");
  std::cout << "wrote " << all.size() << " candidates to " << (out / "candidates.csv").string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string candidates, annotations, gt_masks, labels, ids, out;
  bool hd95 = false;
};

// Candidate k of a scan (descending score, file order on ties) owns label
// k + 1 of that scan's label volume.
void attach_label_masks(std::vector<Candidate>& group, const Volume& labels) {
  std::vector<std::size_t> order(group.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return group[a].score > group[b].score; });
  const Index3& d = labels.dims();
  std::map<int, std::pair<Index3, Index3>> bounds;
  for (std::int64_t z = 0; z < d[0]; ++z)
    for (std::int64_t y = 0; y < d[1]; ++y)
      for (std::int64_t x = 0; x < d[2]; ++x) {
        const int l = static_cast<int>(labels.at(z, y, x));
        if (l == 0) continue;
        auto [it, fresh] = bounds.try_emplace(l, Index3{z, y, x}, Index3{z, y, x});
        const Index3 p{z, y, x};
        for (int a = 0; a < 3; ++a) {
          it->second.first[a] = std::min(it->second.first[a], p[a]);
          it->second.second[a] = std::max(it->second.second[a], p[a]);
        }
      }
  for (std::size_t r = 0; r < order.size(); ++r) {
    Candidate& c = group[order[r]];
    c.mask_spacing = labels.spacing();
    const auto it = bounds.find(static_cast<int>(r + 1));
    if (it == bounds.end()) continue;
    const auto& [lo, hi] = it->second;
    c.mask_dims = {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
    c.mask_origin = labels.index_to_world({static_cast<double>(lo[0]), static_cast<double>(lo[1]), static_cast<double>(lo[2])});
    c.mask.assign(static_cast<std::size_t>(c.mask_dims[0] * c.mask_dims[1] * c.mask_dims[2]), 0);
    std::size_t k = 0;
    for (std::int64_t z = lo[0]; z <= hi[0]; ++z)
      for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
        for (std::int64_t x = lo[2]; x <= hi[2]; ++x, ++k) {
          c.mask[k] = static_cast<int>(labels.at(z, y, x)) == static_cast<int>(r + 1);
        }
  }
}

int cmd_eval(const EvalArgs& a) {
  std::vector<Candidate> cands = read_candidates_csv(a.candidates);
  const std::vector<Annotation> gts = read_annotations(a.annotations);
  std::vector<std::string> ids;
  if (!a.ids.empty()) ids = read_lines(a.ids);
  const fs::path out = a.out;
  fs::create_directories(out);

  const bool with_masks = !a.gt_masks.empty();
  fs::path label_dir = a.labels;
  if (with_masks) {
    require_dir(a.gt_masks, "gt-masks");
    if (label_dir.empty()) label_dir = fs::path(a.candidates).parent_path() / "labels";
    require_dir(label_dir, "labels");
  }
  MatchResult m = match_all(cands, gts, ids);
  const FrocResult f = froc(m);
  std::string summary = froc_summary(f);

  {
    std::ofstream os(out / "froc.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (out / "froc.csv").string());
    os << "threshold,fps_per_scan,sensitivity\n";
    for (std::size_t i = 0; i < f.thresholds.size(); ++i) {
      os << format_double(f.thresholds[i]) << ',' << format_double(f.fps_per_scan[i]) << ','
         << format_double(f.sensitivity_curve[i]) << '\n';
    }
  }

  if (with_masks) {
    std::vector<Volume> masks;
    for (std::size_t i = 0; i < m.scans.size(); ++i) {
      const std::string& id = m.scans[i].scan_id;
      const fs::path gp = fs::path(a.gt_masks) / (id + ".mhd");
      masks.push_back(fs::exists(gp) ? read_mhd(gp) : Volume{});
      const fs::path lp = label_dir / (id + ".mhd");
      if (!m.candidates[i].empty()) {
        if (!fs::exists(lp)) throw IoError("label volume missing for " + id + ": " + lp.string());
        attach_label_masks(m.candidates[i], read_mhd(lp));
      }
    }
    const SegmentationReport s = segmentation_report(m, masks, a.hd95);
    summary += "\n" + s.summary();
    std::ofstream os(out / "segmentation.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (out / "segmentation.csv").string());
    os << "seriesuid,gt_index,probability,dsc,hd_mm,pred_volume_mm3,gt_volume_mm3\n";
    for (const auto& n : s.nodules) {
      os << n.scan_id << ',' << n.gt_index << ',' << format_double(n.score) << ',' << format_double(n.dsc) << ','
         << format_double(n.hd_mm) << ',' << format_double(n.pred_volume_mm3) << ','
         << format_double(n.gt_volume_mm3) << '\n';
    }
  } else {
    summary += "\nsegmentation skipped (detection-only report: no --gt-masks)\n";
  }
  std::ofstream os(out / "summary.txt", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (out / "summary.txt").string());
  os << summary;
  std::cout << summary;
  return kExitOk;
}

// ---------------------------------------------------------------- export-slices

struct SliceArgs {
  std::string scan, labels, axis = "z", out;
  std::optional<std::int64_t> index;
  double hu_min = -1000.0, hu_max = 400.0;
};

int cmd_export_slices(const SliceArgs& a) {
  const SliceAxis axis = parse_axis(a.axis);
  const Volume scan = read_mhd(a.scan);
  std::optional<Volume> labels;
  if (!a.labels.empty()) labels = read_mhd(a.labels);
  const std::int64_t idx = a.index ? *a.index : scan.dims()[static_cast<int>(axis)] / 2;
  const SliceImage img = render_slice(scan, labels ? &*labels : nullptr, axis, idx, a.hu_min, a.hu_max);
  const fs::path out = a.out;
  fs::create_directories(out);
  const std::string base = fs::path(a.scan).stem().string() + "_" + a.axis + std::to_string(idx);
  write_pgm(out / (base + ".pgm"), img);
  write_ppm(out / (base + "_overlay.ppm"), img);
  std::cout << "wrote " << (out / (base + ".pgm")).string() << " and " << base << "_overlay.ppm (" << img.overlay_pixels
            << " contour pixels)\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D two-stage nodule detector and segmenter"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write a synthetic phantom dataset");
  g->add_option("--spec", gen.spec, "Phantom spec (phantom.* keys)")->required();
  g->add_option("--out", gen.out, "Output dataset directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train stage 1, stage 2 or both on one fold");
  t->add_option("--data", tr.data, "Dataset directory (scans/, masks/, annotations.csv)")->required();
  t->add_option("--fold", tr.fold, "Held-out fold index");
  t->add_option("--stage", tr.stage, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
  t->add_option("--config", tr.config, "key=value config (model.*, train.*, infer.*)");
  t->add_option("--seed", tr.seed, "Overrides train.seed");
  t->add_option("--out", tr.out, "Run directory")->required();

  InferArgs in;
  auto* i = app.add_subcommand("infer", "Detect and segment nodules");
  i->add_option("--scan", in.scan, "Single scan (.mhd)");
  i->add_option("--data", in.data, "Dataset directory");
  i->add_option("--ids", in.ids, "With --data: file listing scan ids to process");
  i->add_option("--checkpoint", in.checkpoint, "Model checkpoint")->required();
  i->add_option("--config", in.config, "Config; default is config.txt next to the checkpoint");
  i->add_option("--lung-mask", in.lung_mask, "Lung mask (.mhd with --scan, directory with --data)");
  i->add_flag("--fp-reduce", in.fp_reduce, "Re-score candidates with a second centred pass");
  i->add_option("--threads", in.threads, "Worker threads (capped by VOXELRCNN_THREADS)");
  i->add_option("--out", in.out, "Output directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "FROC/CPM and segmentation metrics");
  e->add_option("--candidates", ev.candidates, "Candidates CSV")->required();
  e->add_option("--annotations", ev.annotations, "Annotations CSV")->required();
  e->add_option("--gt-masks", ev.gt_masks, "Directory of GT masks (<id>.mhd)");
  e->add_option("--labels", ev.labels, "Predicted label volumes; default labels/ next to the candidates");
  e->add_option("--ids", ev.ids, "File listing the evaluated scan ids");
  e->add_flag("--hd95", ev.hd95, "Report the 95th percentile Hausdorff distance");
  e->add_option("--out", ev.out, "Report directory")->required();

  SliceArgs sl;
  auto* s = app.add_subcommand("export-slices", "Render a slice with label contours");
  s->add_option("--scan", sl.scan, "Scan (.mhd)")->required();
  s->add_option("--labels", sl.labels, "Label volume (.mhd)");
  s->add_option("--axis", sl.axis, "z, y or x");
  s->add_option("--index", sl.index, "Slice index; default is the middle slice");
  s->add_option("--hu-min", sl.hu_min, "Window low (HU)");
  s->add_option("--hu-max", sl.hu_max, "Window high (HU)");
  s->add_option("--out", sl.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) return cmd_train(tr);
    if (i->parsed()) return cmd_infer(in);
    if (e->parsed()) return cmd_eval(ev);
    if (s->parsed()) return cmd_export_slices(sl);
  } catch (const ConfigError& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const ArgumentError& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const PlacementError& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const DataError& ex) {
    std::cerr << "data error: " << ex.what() << '\n';
    return kExitData;
  } catch (const std::exception& ex) {
    std::cerr << "internal error: " << ex.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}
