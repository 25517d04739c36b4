#include "sosd/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>
#include <utility>

#include "sosd/errors.hpp"
#include "sosd/image_io.hpp"

namespace sosd {

using nlohmann::json;

ExperimentSpec ExperimentSpec::from_json(const json& j) {
  ExperimentSpec spec;
  try {
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      if (d.contains("train")) spec.train_data = dataset_config_from_json(d.at("train"));
      if (d.contains("val")) spec.val_data = dataset_config_from_json(d.at("val"));
      spec.train_data_path = d.value("train_path", std::string{});
      spec.val_data_path = d.value("val_path", std::string{});
    }
    if (j.contains("net")) spec.net = net_config_from_json(j.at("net"));
    if (j.contains("train")) spec.train = train_config_from_json(j.at("train"));
    if (j.contains("ablation")) {
      const json& a = j.at("ablation");
      for (const json& r : a.value("rows", json::array())) {
        AblationRow row;
        row.name = r.at("name").get<std::string>();
        row.variant = variant_from_name(r.at("variant").get<std::string>());
        row.schedule = schedule_from_name(r.at("schedule").get<std::string>());
        spec.rows.push_back(std::move(row));
      }
      spec.seeds = a.value("seeds", std::vector<std::uint64_t>{});
    }
  } catch (const json::exception& e) {
    throw ValidationError("experiment spec: " + std::string(e.what()));
  }
  return spec;
}

ExperimentSpec ExperimentSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("experiment spec: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("experiment spec: malformed JSON in " + path.string() + ": " +
                          e.what());
  }
  return from_json(j);
}

json ExperimentSpec::to_json() const {
  json rows = json::array();
  for (const AblationRow& r : this->rows) {
    rows.push_back(json{{"name", r.name},
                        {"variant", variant_name(r.variant)},
                        {"schedule", schedule_name(r.schedule)}});
  }
  return json{{"dataset",
               json{{"train", dataset_config_to_json(train_data)},
                    {"val", dataset_config_to_json(val_data)},
                    {"train_path", train_data_path},
                    {"val_path", val_data_path}}},
              {"net", net_config_to_json(net)},
              {"train", train_config_to_json(train)},
              {"ablation", json{{"rows", rows}, {"seeds", seeds}}}};
}

namespace {

json depth_report_json(const DepthMetricReport& r) {
  return json{{"rel", r.rel},       {"rms", r.rms},       {"log10", r.log10},
              {"delta1", r.delta1}, {"delta2", r.delta2}, {"delta3", r.delta3},
              {"disparity_mae", r.disparity_mae}, {"valid_n", r.valid_n}};
}

json seg_report_json(const SegMetricReport& r) {
  return json{{"miou", r.miou},
              {"mean_accuracy", r.mean_accuracy},
              {"pixel_accuracy", r.pixel_accuracy},
              {"per_class_iou", r.per_class_iou},
              {"present_classes", r.present_classes},
              {"absent_classes", r.absent_classes},
              {"confusion", r.confusion},
              {"valid_n", r.valid_n}};
}

std::vector<int> scene_labels(const SyntheticScene& scene, int ignore_id) {
  const std::int64_t hw = scene.semantic.numel();
  std::vector<int> labels(static_cast<std::size_t>(hw));
  const double* s = scene.semantic.values().data();
  for (std::int64_t i = 0; i < hw; ++i) {
    labels[static_cast<std::size_t>(i)] =
        s[i] < 0.0 ? ignore_id : static_cast<int>(std::llround(s[i]));
  }
  return labels;
}

// Argmax over the channel axis of a 1xCxHxW logit map; ties resolve to the
// lowest class id.
std::vector<int> argmax_labels(const Tensor& logits) {
  const std::int64_t c = logits.shape()[1];
  const std::int64_t h = logits.shape()[2];
  const std::int64_t w = logits.shape()[3];
  std::vector<int> out(static_cast<std::size_t>(h * w), 0);
  const double* v = logits.values().data();
  for (std::int64_t px = 0; px < h * w; ++px) {
    int best = 0;
    double best_v = v[px];
    for (std::int64_t k = 1; k < c; ++k) {
      const double cand = v[k * h * w + px];
      if (cand > best_v) {
        best_v = cand;
        best = static_cast<int>(k);
      }
    }
    out[static_cast<std::size_t>(px)] = best;
  }
  return out;
}

std::vector<std::array<double, 3>> class_palette(int num_classes) {
  std::vector<std::array<double, 3>> palette;
  palette.reserve(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) palette.push_back(class_albedo(c));
  return palette;
}

void dump_scene(const std::filesystem::path& dir, const std::string& stem,
                const SyntheticScene& scene, const Tensor* pred_depth,
                const std::vector<int>* pred_labels, int num_classes) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("dump: cannot create " + dir.string());
  const auto palette = class_palette(num_classes);
  write_image_ppm(dir / (stem + ".image.ppm"), scene.image);
  write_grid_pgm(dir / (stem + ".gt_depth.pgm"), scene.depth);
  write_label_ppm(dir / (stem + ".gt_labels.ppm"), scene.semantic, palette);
  if (pred_depth != nullptr) {
    write_grid_pgm(dir / (stem + ".pred_depth.pgm"), *pred_depth);
  }
  if (pred_labels != nullptr) {
    std::vector<double> vals(pred_labels->begin(), pred_labels->end());
    write_label_ppm(dir / (stem + ".pred_labels.ppm"),
                    Tensor::from_values(scene.semantic.shape(), std::move(vals)), palette);
  }
}

json convention_flags() {
  return json{{"delta_comparison", "strict-less"},
              {"pooling", "global-valid-pixels"},
              {"absent_classes", "excluded-from-means"},
              {"disparity", "reciprocal-depth"},
              {"argmax_ties", "lowest-class-id"}};
}

}  // namespace

json EvalReport::to_json() const {
  return json{{"type", "sosd-eval-report"},
              {"dataset_id", dataset_id},
              {"checkpoint_id", checkpoint_id},
              {"depth", depth_report_json(depth)},
              {"segmentation", seg_report_json(seg)},
              {"conventions", convention_flags()}};
}

EvalReport evaluate_model(Model& model, const Dataset& data, const EvalOptions& opts) {
  const NetConfig& net = model.config();
  if (data.scenes.empty()) throw ValidationError("evaluate: empty dataset");
  if (net.variant != Variant::DepthOnly && data.config.num_classes != net.num_classes) {
    throw ValidationError("evaluate: dataset has " + std::to_string(data.config.num_classes) +
                          " classes but the model was built for " +
                          std::to_string(net.num_classes));
  }
  if (data.config.height != net.height || data.config.width != net.width) {
    throw ValidationError("evaluate: dataset resolution does not match the model config");
  }

  DepthAccumulator depth_acc;
  SegAccumulator seg_acc(static_cast<int>(net.num_classes), opts.ignore_id);
  ForwardOptions fwd;
  fwd.bn_mode = BatchNormMode::Eval;

  double total_ms = 0.0;
  for (std::size_t i = 0; i < data.scenes.size(); ++i) {
    const SyntheticScene& scene = data.scenes[i];
    Batch batch = make_batch({&scene}, opts.ignore_id);

    Graph g;
    const auto t0 = std::chrono::steady_clock::now();
    ModelOutput out = model.forward(g, batch.image, fwd);
    const auto t1 = std::chrono::steady_clock::now();
    total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();

    Tensor pred_depth;
    std::vector<int> pred_labels;
    if (out.depth.defined()) {
      pred_depth = Tensor::from_values(
          scene.depth.shape(),
          std::vector<double>(out.depth.values().begin(), out.depth.values().end()));
      depth_acc.add(pred_depth, scene.depth, scene.mask);
    }
    if (out.logits.defined()) {
      pred_labels = argmax_labels(out.logits);
      seg_acc.add(pred_labels, scene_labels(scene, opts.ignore_id));
    }
    if (static_cast<int>(i) < opts.dump_count) {
      char stem[32];
      std::snprintf(stem, sizeof(stem), "scene_%05zu", i);
      dump_scene(opts.dump_dir, stem, scene, out.depth.defined() ? &pred_depth : nullptr,
                 out.logits.defined() ? &pred_labels : nullptr,
                 static_cast<int>(net.num_classes));
    }
  }

  EvalReport report;
  if (model.config().variant != Variant::SemanticOnly) report.depth = depth_acc.report();
  if (model.config().variant != Variant::DepthOnly) report.seg = seg_acc.report();
  report.ms_per_image = total_ms / static_cast<double>(data.scenes.size());
  return report;
}

EvalReport evaluate_oracle(const Dataset& data, const EvalOptions& opts) {
  if (data.scenes.empty()) throw ValidationError("evaluate: empty dataset");
  DepthAccumulator depth_acc;
  SegAccumulator seg_acc(static_cast<int>(data.config.num_classes), opts.ignore_id);
  for (std::size_t i = 0; i < data.scenes.size(); ++i) {
    const SyntheticScene& scene = data.scenes[i];
    depth_acc.add(scene.depth, scene.depth, scene.mask);
    const std::vector<int> labels = scene_labels(scene, opts.ignore_id);
    seg_acc.add(labels, labels);
    if (static_cast<int>(i) < opts.dump_count) {
      char stem[32];
      std::snprintf(stem, sizeof(stem), "scene_%05zu", i);
      dump_scene(opts.dump_dir, stem, scene, nullptr, nullptr,
                 static_cast<int>(data.config.num_classes));
    }
  }
  EvalReport report;
  report.depth = depth_acc.report();
  report.seg = seg_acc.report();
  report.checkpoint_id = "oracle";
  return report;
}

Dataset materialize_dataset(const DatasetConfig& cfg, const std::filesystem::path& root) {
  if (!std::filesystem::exists(root / "manifest.json")) {
    generate_dataset(cfg, root);
  }
  return load_dataset(root);
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct RowStats {
  bool exists = false;
  bool failed = false;
  double miou = 0.0;
  double rel = 0.0;
};

json cell_json(const CellResult& c) {
  json j{{"seed", c.seed}, {"failed", c.failed}};
  if (c.failed) {
    j["error"] = c.error;
    return j;
  }
  j["depth"] = depth_report_json(c.depth);
  j["segmentation"] = seg_report_json(c.seg);
  j["param_count"] = c.param_count;
  j["eval_ms_per_image"] = c.eval_ms_per_image;
  j["train_wall_ms"] = c.train_wall_ms;
  j["checkpoint"] = c.checkpoint.string();
  return j;
}

std::string format_metric(double v, bool present) {
  char buf[32];
  if (!present) return "-";
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

AblationResult run_ablation(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                            int threads) {
  namespace fs = std::filesystem;
  if (spec.rows.empty()) throw ValidationError("ablation: spec lists no rows");
  if (spec.seeds.empty()) throw ValidationError("ablation: spec lists no seeds");
  if (threads < 1) threads = 1;

  std::error_code ec;
  fs::create_directories(out_dir / "cells", ec);
  if (ec) throw IoError("ablation: cannot create " + out_dir.string());

  // One shared dataset pair for every cell.
  const fs::path train_root = spec.train_data_path.empty() ? out_dir / "data" / "train"
                                                           : fs::path(spec.train_data_path);
  const fs::path val_root =
      spec.val_data_path.empty() ? out_dir / "data" / "val" : fs::path(spec.val_data_path);
  const Dataset train_set = materialize_dataset(spec.train_data, train_root);
  const Dataset val_set = materialize_dataset(spec.val_data, val_root);

  // One shared optimizer budget for every cell (the fairness contract).
  const std::int64_t spe =
      static_cast<std::int64_t>(train_set.scenes.size()) / spec.train.batch_size;
  if (spe < 1) throw ValidationError("ablation: train dataset smaller than one batch");
  const std::int64_t budget =
      spec.train.total_steps > 0 ? spec.train.total_steps : spec.train.epochs * spe;
  if (budget < 1) throw ValidationError("ablation: step budget is zero");

  struct Cell {
    std::size_t row_idx;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t r = 0; r < spec.rows.size(); ++r) {
    for (std::uint64_t seed : spec.seeds) cells.push_back(Cell{r, seed});
  }

  std::vector<CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&]() {
    for (;;) {
      const std::size_t idx = next.fetch_add(1);
      if (idx >= cells.size()) return;
      const Cell& cell = cells[idx];
      const AblationRow& row = spec.rows[cell.row_idx];
      CellResult& res = results[idx];
      res.row = row.name;
      res.seed = cell.seed;
      try {
        NetConfig net = spec.net;
        net.variant = row.variant;
        net.validate();
        TrainConfig train_cfg = spec.train;
        train_cfg.seed = cell.seed;
        train_cfg.schedule = row.schedule;
        train_cfg.total_steps = budget;

        Rng init = Rng::substream(cell.seed, rng_tag::kInit, 0);
        Model model = Model::build(net, init);
        res.param_count = model.parameter_count();

        const fs::path cell_dir =
            out_dir / "cells" / (row.name + "-seed" + std::to_string(cell.seed));
        const auto t0 = std::chrono::steady_clock::now();
        run_training(model, train_set, train_cfg, cell_dir);
        const auto t1 = std::chrono::steady_clock::now();
        res.train_wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        res.checkpoint = latest_checkpoint(cell_dir);

        EvalOptions eopts;
        eopts.ignore_id = static_cast<int>(train_cfg.ignore_id);
        EvalReport report = evaluate_model(model, val_set, eopts);
        res.depth = report.depth;
        res.seg = report.seg;
        res.eval_ms_per_image = report.ms_per_image;
      } catch (const std::exception& e) {
        res.failed = true;
        res.error = e.what();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  // Aggregate per row.
  AblationResult out;
  out.cells = results;
  out.all_cells_ok = std::none_of(results.begin(), results.end(),
                                  [](const CellResult& c) { return c.failed; });

  json rows_json = json::array();
  std::vector<RowStats> stats(spec.rows.size());
  std::string text;
  {
    char line[256];
    std::snprintf(line, sizeof(line), "%-16s %8s %8s %8s %8s %8s %8s %8s %8s %9s\n", "row",
                  "params", "mIoU", "mAcc", "pixAcc", "rel", "rms", "d1", "dispMAE", "ms/img");
    text += line;
  }
  for (std::size_t r = 0; r < spec.rows.size(); ++r) {
    const AblationRow& row = spec.rows[r];
    const bool has_depth = row.variant != Variant::SemanticOnly;
    const bool has_seg = row.variant != Variant::DepthOnly;

    json cells_json = json::array();
    std::vector<double> miou, macc, pacc, rel, rms, d1, disp, msimg;
    bool row_failed = false;
    std::int64_t params = 0;
    for (const CellResult& c : results) {
      if (c.row != row.name) continue;
      cells_json.push_back(cell_json(c));
      if (c.failed) {
        row_failed = true;
        continue;
      }
      params = c.param_count;
      miou.push_back(c.seg.miou);
      macc.push_back(c.seg.mean_accuracy);
      pacc.push_back(c.seg.pixel_accuracy);
      rel.push_back(c.depth.rel);
      rms.push_back(c.depth.rms);
      d1.push_back(c.depth.delta1);
      disp.push_back(c.depth.disparity_mae);
      msimg.push_back(c.eval_ms_per_image);
    }

    json med{{"miou", median(miou)},
             {"mean_accuracy", median(macc)},
             {"pixel_accuracy", median(pacc)},
             {"rel", median(rel)},
             {"rms", median(rms)},
             {"delta1", median(d1)},
             {"disparity_mae", median(disp)},
             {"eval_ms_per_image", median(msimg)}};
    rows_json.push_back(json{{"name", row.name},
                             {"variant", variant_name(row.variant)},
                             {"schedule", schedule_name(row.schedule)},
                             {"param_count", params},
                             {"failed", row_failed},
                             {"median", med},
                             {"cells", cells_json}});

    stats[r].exists = true;
    stats[r].failed = row_failed;
    stats[r].miou = median(miou);
    stats[r].rel = median(rel);

    char line[256];
    std::snprintf(line, sizeof(line), "%-16s %8lld %8s %8s %8s %8s %8s %8s %8s %9.2f%s\n",
                  row.name.c_str(), static_cast<long long>(params),
                  format_metric(median(miou), has_seg).c_str(),
                  format_metric(median(macc), has_seg).c_str(),
                  format_metric(median(pacc), has_seg).c_str(),
                  format_metric(median(rel), has_depth).c_str(),
                  format_metric(median(rms), has_depth).c_str(),
                  format_metric(median(d1), has_depth).c_str(),
                  format_metric(median(disp), has_depth).c_str(), median(msimg),
                  row_failed ? "  [FAILED]" : "");
    text += line;
  }

  // Median ordering checks over the canonical rows.
  const auto find_row = [&](Variant v, Schedule s) -> const RowStats* {
    for (std::size_t r = 0; r < spec.rows.size(); ++r) {
      if (spec.rows[r].variant == v && spec.rows[r].schedule == s && !stats[r].failed) {
        return &stats[r];
      }
    }
    return nullptr;
  };
  const RowStats* esosd = find_row(Variant::Sosd, Schedule::Em);
  const RowStats* sosd = find_row(Variant::Sosd, Schedule::Joint);
  const RowStats* mtl = find_row(Variant::Mtl, Schedule::Joint);
  const RowStats* sem = find_row(Variant::SemanticOnly, Schedule::Joint);

  json checks = json::object();
  bool a_eval = esosd && mtl, b_eval = sosd && mtl, c_eval = mtl && sem;
  bool a_pass = false, b_pass = false, c_pass = false;
  if (a_eval) {
    a_pass = esosd->miou >= mtl->miou && esosd->rel <= mtl->rel;
    checks["a_em_sosd_vs_mtl"] = json{{"evaluated", true},
                                      {"pass", a_pass},
                                      {"em_sosd_miou", esosd->miou},
                                      {"mtl_miou", mtl->miou},
                                      {"em_sosd_rel", esosd->rel},
                                      {"mtl_rel", mtl->rel}};
  } else {
    checks["a_em_sosd_vs_mtl"] = json{{"evaluated", false}};
  }
  if (b_eval) {
    b_pass = sosd->miou >= mtl->miou;
    checks["b_sosd_vs_mtl"] = json{{"evaluated", true},
                                   {"pass", b_pass},
                                   {"sosd_miou", sosd->miou},
                                   {"mtl_miou", mtl->miou}};
  } else {
    checks["b_sosd_vs_mtl"] = json{{"evaluated", false}};
  }
  if (c_eval) {
    c_pass = mtl->miou >= sem->miou;
    checks["c_mtl_vs_semantic_only"] = json{{"evaluated", true},
                                            {"pass", c_pass},
                                            {"mtl_miou", mtl->miou},
                                            {"semantic_only_miou", sem->miou}};
  } else {
    checks["c_mtl_vs_semantic_only"] = json{{"evaluated", false}};
  }

  const bool a_holds = a_eval && a_pass;
  const bool a_fails = a_eval && !a_pass;
  const bool bc_fail = (b_eval && !b_pass) || (c_eval && !c_pass);
  out.status = a_fails ? "fail" : (bc_fail ? (a_holds ? "warning" : "fail") : "pass");

  out.table = json{{"type", "sosd-ablation"},
                   {"budget_steps", budget},
                   {"seeds", spec.seeds},
                   {"rows", rows_json},
                   {"checks", checks},
                   {"status", out.status},
                   {"all_cells_ok", out.all_cells_ok},
                   {"conventions", convention_flags()}};

  {
    char line[256];
    std::snprintf(line, sizeof(line), "budget %lld steps, %zu seeds, status: %s\n",
                  static_cast<long long>(budget), spec.seeds.size(), out.status.c_str());
    text += line;
  }
  out.text_table = text;

  std::ofstream jf(out_dir / "ablation.json", std::ios::binary);
  if (!jf) throw IoError("ablation: cannot write ablation.json");
  jf << out.table.dump(2) << "\n";
  std::ofstream tf(out_dir / "ablation.txt", std::ios::binary);
  if (!tf) throw IoError("ablation: cannot write ablation.txt");
  tf << text;

  return out;
}

}  // namespace sosd
