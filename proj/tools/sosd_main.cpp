#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "sosd/checkpoint.hpp"
#include "sosd/errors.hpp"
#include "sosd/experiment.hpp"
#include "sosd/scene.hpp"
#include "sosd/trainer.hpp"

namespace {

using namespace sosd;
namespace fs = std::filesystem;
using nlohmann::json;

json load_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open spec " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

std::string dataset_id(const DatasetConfig& cfg) {
  return "seed" + std::to_string(cfg.seed) + "-n" + std::to_string(cfg.scene_count) + "-" +
         std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + "-C" +
         std::to_string(cfg.num_classes);
}

std::string checkpoint_id(const CheckpointMeta& meta) {
  return variant_name(meta.net.variant) + "-" + schedule_name(meta.train.schedule) + "-seed" +
         std::to_string(meta.seed) + "-step" + std::to_string(meta.step);
}

struct CommonArgs {
  std::string spec;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool deterministic = false;
};

int cmd_gen_data(const CommonArgs& args) {
  const json j = load_json(args.spec);
  if (j.contains("dataset")) {
    ExperimentSpec spec = ExperimentSpec::from_json(j);
    if (args.seed_set) {
      spec.train_data.seed = args.seed;
      spec.val_data.seed = args.seed + 1;
    }
    generate_dataset(spec.train_data, fs::path(args.out) / "train");
    generate_dataset(spec.val_data, fs::path(args.out) / "val");
    std::cout << "wrote " << spec.train_data.scene_count << " train / "
              << spec.val_data.scene_count << " val scenes under " << args.out << "\n";
  } else {
    DatasetConfig cfg = dataset_config_from_json(j);
    if (args.seed_set) cfg.seed = args.seed;
    generate_dataset(cfg, args.out);
    std::cout << "wrote " << cfg.scene_count << " scenes under " << args.out << "\n";
  }
  return 0;
}

int cmd_train(const CommonArgs& args) {
  ExperimentSpec spec = ExperimentSpec::load(args.spec);
  if (args.seed_set) spec.train.seed = args.seed;

  const fs::path out(args.out);
  const fs::path data_root =
      spec.train_data_path.empty() ? out / "train-data" : fs::path(spec.train_data_path);
  const Dataset data = materialize_dataset(spec.train_data, data_root);

  Rng init = Rng::substream(spec.train.seed, rng_tag::kInit, 0);
  Model model = Model::build(spec.net, init);
  const TrainResult result = run_training(model, data, spec.train, out);
  std::cout << "trained " << variant_name(spec.net.variant) << "/"
            << schedule_name(spec.train.schedule) << " to step " << result.final_step
            << "; final checkpoint: " << result.final_checkpoint.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  bool oracle = false;
  int dump = 0;
};

int cmd_eval(const EvalArgs& eargs) {
  const Dataset data = load_dataset(eargs.data);
  EvalOptions opts;
  opts.dump_count = eargs.dump;
  if (!eargs.out.empty()) opts.dump_dir = fs::path(eargs.out) / "dumps";

  EvalReport report;
  if (eargs.oracle) {
    report = evaluate_oracle(data, opts);
  } else {
    if (eargs.checkpoint.empty()) {
      throw ValidationError("eval: --checkpoint is required unless --oracle is given");
    }
    LoadedCheckpoint lc = load_checkpoint(eargs.checkpoint);
    opts.ignore_id = lc.meta.train.ignore_id;
    report = evaluate_model(lc.model, data, opts);
    report.checkpoint_id = checkpoint_id(lc.meta);
  }
  report.dataset_id = dataset_id(data.config);

  const std::string bytes = report.to_json().dump(2) + "\n";
  std::cout << bytes;
  if (!eargs.out.empty()) {
    fs::create_directories(eargs.out);
    std::ofstream f(fs::path(eargs.out) / "report.json", std::ios::binary);
    if (!f) throw IoError("eval: cannot write report.json under " + eargs.out);
    f << bytes;
  }
  return 0;
}

int cmd_ablate(const CommonArgs& args) {
  ExperimentSpec spec = ExperimentSpec::load(args.spec);
  int threads = 1;
  if (!args.deterministic) {
    if (const char* env = std::getenv("SOSD_THREADS")) {
      threads = std::max(1, std::atoi(env));
    }
  }
  const AblationResult result = run_ablation(spec, args.out, threads);
  std::cout << result.text_table;
  if (!result.all_cells_ok) {
    std::cerr << "ablation: one or more cells failed\n";
    return 3;
  }
  return 0;
}

struct DumpArgs {
  std::string data;
  std::string out;
  std::string checkpoint;
  int count = 4;
};

int cmd_dump(const DumpArgs& dargs) {
  const Dataset data = load_dataset(dargs.data);
  EvalOptions opts;
  opts.dump_count = dargs.count;
  opts.dump_dir = dargs.out;
  if (dargs.checkpoint.empty()) {
    evaluate_oracle(data, opts);
  } else {
    LoadedCheckpoint lc = load_checkpoint(dargs.checkpoint);
    opts.ignore_id = lc.meta.train.ignore_id;
    evaluate_model(lc.model, data, opts);
  }
  std::cout << "wrote visual dumps for " << std::min<std::int64_t>(dargs.count,
                   static_cast<std::int64_t>(data.scenes.size()))
            << " scenes under " << dargs.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semantic-objectness multi-task depth estimation and segmentation toolkit"};
  app.require_subcommand(1);

  CommonArgs gen, train, ablate;
  EvalArgs eval_args;
  DumpArgs dump_args;
  bool unused_flag = false;

  CLI::App* sub_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  sub_gen->add_option("--spec", gen.spec, "dataset or experiment spec JSON")->required();
  sub_gen->add_option("--out", gen.out, "output directory")->required();
  sub_gen->add_option("--seed", gen.seed, "seed override");
  sub_gen->add_flag("--deterministic", gen.deterministic, "single-threaded deterministic mode");

  CLI::App* sub_train = app.add_subcommand("train", "train one variant/schedule");
  sub_train->add_option("--spec", train.spec, "experiment spec JSON")->required();
  sub_train->add_option("--out", train.out, "output directory")->required();
  sub_train->add_option("--seed", train.seed, "training seed override");
  sub_train->add_flag("--deterministic", train.deterministic,
                      "single-threaded deterministic mode");

  CLI::App* sub_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  sub_eval->add_option("--checkpoint", eval_args.checkpoint, "checkpoint directory");
  sub_eval->add_option("--data", eval_args.data, "dataset root")->required();
  sub_eval->add_option("--out", eval_args.out, "report/dump output directory");
  sub_eval->add_flag("--oracle", eval_args.oracle, "score ground truth against itself");
  sub_eval->add_option("--dump", eval_args.dump, "dump visuals for the first N scenes");
  sub_eval->add_flag("--deterministic", unused_flag, "single-threaded deterministic mode");

  CLI::App* sub_ablate = app.add_subcommand("ablate", "run the variant ablation protocol");
  sub_ablate->add_option("--spec", ablate.spec, "experiment spec JSON")->required();
  sub_ablate->add_option("--out", ablate.out, "output directory")->required();
  sub_ablate->add_flag("--deterministic", ablate.deterministic,
                       "force one worker for reproducible scheduling");

  CLI::App* sub_dump = app.add_subcommand("dump", "write PGM/PPM visualizations");
  sub_dump->add_option("--data", dump_args.data, "dataset root")->required();
  sub_dump->add_option("--out", dump_args.out, "output directory")->required();
  sub_dump->add_option("--checkpoint", dump_args.checkpoint, "optional checkpoint for predictions");
  sub_dump->add_option("--count", dump_args.count, "number of scenes to dump");
  sub_dump->add_flag("--deterministic", unused_flag, "single-threaded deterministic mode");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sub_gen->parsed()) {
      gen.seed_set = sub_gen->count("--seed") > 0;
      return cmd_gen_data(gen);
    }
    if (sub_train->parsed()) {
      train.seed_set = sub_train->count("--seed") > 0;
      return cmd_train(train);
    }
    if (sub_eval->parsed()) return cmd_eval(eval_args);
    if (sub_ablate->parsed()) return cmd_ablate(ablate);
    if (sub_dump->parsed()) return cmd_dump(dump_args);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const RuntimeFault& e) {
    std::cerr << "runtime fault: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
