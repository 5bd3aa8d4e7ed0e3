// Command-line front end: train, eval, predict, gen-data, gradcheck.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "bicanet/log.hpp"
#include "bicanet/suite.hpp"
#include "bicanet/train.hpp"

namespace {

using namespace bicanet;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void print_rows(const std::vector<MetricsRow>& rows, int num_classes, std::ostream& out) {
  out << metrics_csv_header(num_classes) << "\n";
  for (const auto& r : rows) out << metrics_csv_line(r) << "\n";
}

int cmd_train(const std::string& config_path, const std::string& resume) {
  const TrainConfig config = load_train_config(config_path);
  Trainer trainer(config);
  if (!resume.empty()) {
    trainer.resume(resume);
    log::info("resumed at iteration " + std::to_string(trainer.iteration()));
  }
  const auto rows = trainer.run();
  if (!rows.empty()) print_rows({rows.back()}, config.num_classes, std::cout);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& split, const std::string& data_dir, const std::string& out) {
  LoadedModel loaded = load_model(ckpt);
  if (!data_dir.empty()) loaded.config.data_dir = data_dir;
  const auto samples = load_dataset_split(loaded.config, split);
  if (samples.empty()) throw DataError("split '" + split + "' is empty");

  std::size_t train_size = static_cast<std::size_t>(loaded.config.synthetic_train);
  if (!loaded.config.data_dir.empty()) {
    train_size = data::read_manifest(loaded.config.data_dir).split(loaded.config.train_split).size();
  }
  const std::uint64_t per_epoch = (train_size + loaded.config.batch - 1) / loaded.config.batch;
  const int epoch = per_epoch == 0 ? 0 : static_cast<int>((loaded.iteration + per_epoch - 1) / per_epoch);

  const MetricsRow row = summarize(evaluate(loaded.model, samples), epoch, split, loaded.config.absent_classes);
  print_rows({row}, loaded.config.num_classes, std::cout);
  if (!out.empty()) {
    std::ofstream file(out, std::ios::binary);
    if (!file) throw DataError("cannot write " + out);
    print_rows({row}, loaded.config.num_classes, file);
  }
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& image, const std::string& out_dir) {
  const LoadedModel loaded = load_model(ckpt);
  const PredictionFiles files = predict_file(loaded.model, image, out_dir);
  std::cout << files.color.string() << "\n" << files.labels.string() << "\n";
  return 0;
}

int cmd_gen_data(const std::string& spec_path, std::size_t count, std::size_t val, const std::string& out) {
  data::SyntheticSpec spec;
  if (!spec_path.empty()) spec = synthetic_spec_from_json(read_text(spec_path));
  const auto manifest = data::write_synthetic_dataset(out, spec, count, val);
  for (const auto& [name, indices] : manifest.splits) std::cout << name << ": " << indices.size() << " samples\n";
  return 0;
}

int cmd_gradcheck(const std::string& op) {
  bool ok = true;
  for (const auto& r : run_gradient_suite(op)) {
    std::printf("%-24s %s  rel_err=%.3e  checked=%zu  skipped=%zu\n", r.name.c_str(), r.passed ? "PASS" : "FAIL",
                r.relative_error, r.checked, r.skipped);
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BiCANet semantic segmentation: training, evaluation and inference"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only print warnings and errors");

  std::string config_path, resume;
  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", config_path, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  std::string ckpt, split = "val", data_dir, csv_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "Split name")->capture_default_str();
  eval->add_option("--data-dir", data_dir, "Override the dataset directory recorded in the checkpoint");
  eval->add_option("--out", csv_out, "Also write the metrics CSV here");

  std::string image, out_dir;
  auto* predict = app.add_subcommand("predict", "Write colour and raw label maps for one image");
  predict->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  predict->add_option("--image", image, "Input P6/P3 image")->required()->check(CLI::ExistingFile);
  predict->add_option("--out", out_dir, "Output directory")->required();

  std::string spec_path, data_out;
  std::size_t count = 0, val_count = 0;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset on disk");
  gen->add_option("--spec", spec_path, "Synthetic spec (JSON); defaults when omitted")->check(CLI::ExistingFile);
  gen->add_option("--count", count, "Total number of samples")->required()->check(CLI::PositiveNumber);
  gen->add_option("--val", val_count, "How many of them form the val split")->capture_default_str();
  gen->add_option("--out", data_out, "Dataset directory")->required();

  std::string op;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_option("--op", op, "Run only this check");
  bool list = false;
  grad->add_flag("--list", list, "List check names");

  CLI11_PARSE(app, argc, argv);
  if (quiet) log::set_level(log::Level::kWarn);

  try {
    if (*train) return cmd_train(config_path, resume);
    if (*eval) return cmd_eval(ckpt, split, data_dir, csv_out);
    if (*predict) return cmd_predict(ckpt, image, out_dir);
    if (*gen) {
      if (val_count >= count) throw ConfigError("--val must be smaller than --count");
      return cmd_gen_data(spec_path, count, val_count, data_out);
    }
    if (*grad) {
      if (list) {
        for (const auto& c : gradient_cases()) std::cout << c.name << "\n";
        return 0;
      }
      return cmd_gradcheck(op);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
