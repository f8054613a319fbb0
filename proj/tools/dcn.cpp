// Command line front end over the library: synthetic datasets, training,
// episodic evaluation and diagnostic reports. Exit codes: 0 on success, 2
// for usage or configuration problems, 3 when a run dies at runtime.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dcn/checkpoint.hpp"
#include "dcn/data_io.hpp"

namespace {

dcn::Split parse_split(const std::string& name) {
  if (name == "base") return dcn::Split::base;
  if (name == "val") return dcn::Split::val;
  if (name == "novel") return dcn::Split::novel;
  throw std::invalid_argument("unknown split '" + name + "'");
}

// A config file that fails to parse is a usage problem, same as a bad flag.
dcn::RunConfig load_run_config(const std::string& path) {
  try {
    return dcn::load_config(path);
  } catch (const std::runtime_error& e) {
    throw std::invalid_argument(e.what());
  }
}

int env_threads() {
  const char* s = std::getenv("DCN_THREADS");
  if (s == nullptr || *s == '\0') return 0;
  int v = 0;
  const char* last = s + std::strlen(s);
  auto [ptr, ec] = std::from_chars(s, last, v);
  if (ec != std::errc() || ptr != last || v < 1)
    throw std::invalid_argument("DCN_THREADS must be a positive integer, got '" +
                                std::string(s) + "'");
  return v;
}

void require_matching_images(const dcn::Dataset& ds, const dcn::ModelConfig& m) {
  if (ds.height == m.encoder.input_h && ds.width == m.encoder.input_w &&
      ds.channels == m.encoder.input_channels)
    return;
  std::ostringstream msg;
  msg << "dataset images are " << ds.height << "x" << ds.width << "x" << ds.channels
      << " but the model expects " << m.encoder.input_h << "x" << m.encoder.input_w << "x"
      << m.encoder.input_channels;
  throw std::invalid_argument(msg.str());
}

struct SynthArgs {
  std::string out;
  int classes = 20;
  int per_class = 40;
  std::optional<std::uint64_t> seed;
};

int run_synth(const dcn::RunConfig& cfg, const SynthArgs& a) {
  dcn::SynthConfig sc;
  sc.classes = a.classes;
  sc.per_class = a.per_class;
  sc.height = cfg.model.encoder.input_h;
  sc.width = cfg.model.encoder.input_w;
  sc.channels = cfg.model.encoder.input_channels;
  sc.seed = a.seed.value_or(cfg.train.seed);
  const dcn::Dataset ds = dcn::synth_dataset(sc);
  dcn::save_dataset(a.out, ds);
  std::cout << "wrote " << sc.classes << " classes of " << sc.per_class << " images ("
            << sc.height << "x" << sc.width << "x" << sc.channels << ") to " << a.out
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string metrics;  // empty derives <out>.metrics.tsv
  std::optional<int> epochs;
  std::optional<float> lr;
  std::optional<std::uint64_t> seed;
};

int run_train(dcn::RunConfig cfg, const TrainArgs& a) {
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.lr) cfg.train.lr = *a.lr;
  if (a.seed) cfg.train.seed = *a.seed;

  const dcn::Dataset ds = dcn::load_dataset(a.data);
  require_matching_images(ds, cfg.model);

  const auto base = ds.indices_of(dcn::Split::base);
  if (base.empty()) throw std::invalid_argument("dataset has no base classes to train on");
  if (cfg.base_classes == 0)
    cfg.base_classes = static_cast<int>(base.size());
  else if (cfg.base_classes != static_cast<int>(base.size()))
    throw std::invalid_argument("config expects " + std::to_string(cfg.base_classes) +
                                " base classes but the dataset holds " +
                                std::to_string(base.size()));
  cfg.model.classes = cfg.base_classes;

  std::vector<const dcn::TensorF*> images;
  std::vector<int> labels;
  for (std::size_t k = 0; k < base.size(); ++k)
    for (const auto& img : ds.classes[static_cast<std::size_t>(base[k])].images) {
      images.push_back(&img);
      labels.push_back(static_cast<int>(k));
    }

  auto model = dcn::DcnModel<float>::init(cfg.model, cfg.train.seed);

  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.tsv" : a.metrics;
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw std::runtime_error(metrics_path + ": cannot open for writing");

  const auto stats = dcn::run_training(model, images, labels, cfg.train, &metrics);
  metrics.close();
  dcn::save_checkpoint(a.out, model, cfg);

  std::cout << "trained " << stats.size() << " epochs on " << images.size() << " images\n";
  if (!stats.empty())
    std::cout << "final loss " << std::fixed << std::setprecision(6) << stats.back().mean.total
              << "\n";
  std::cout << "checkpoint " << a.out << "\n";
  std::cout << "metrics " << metrics_path << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "novel";
  std::optional<int> way, shot, query, tasks;
  std::optional<std::uint64_t> seed;
};

int run_eval(const EvalArgs& a) {
  auto loaded = dcn::load_checkpoint(a.checkpoint);
  const dcn::Dataset ds = dcn::load_dataset(a.data);
  require_matching_images(ds, loaded.config.model);

  dcn::EvalConfig ec = loaded.config.eval;
  ec.seed = loaded.config.train.seed;
  if (const int t = env_threads(); t > 0) ec.threads = t;
  if (a.way) ec.episode.way = *a.way;
  if (a.shot) ec.episode.shot = *a.shot;
  if (a.query) ec.episode.query = *a.query;
  if (a.tasks) ec.tasks = *a.tasks;
  if (a.seed) ec.seed = *a.seed;

  const auto report = dcn::evaluate(loaded.model, ds, parse_split(a.split), ec);
  dcn::write_eval_report(a.out, report);
  std::cout << std::fixed << std::setprecision(6) << "accuracy " << report.mean << " +/- "
            << report.ci95 << " over " << report.tasks << " tasks (" << report.episode.way
            << "-way " << report.episode.shot << "-shot)\n";
  std::cout << "report " << a.out << "\n";
  return 0;
}

struct ReportArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "novel";
  std::string mode = "variance";
  int count = 1;
};

int run_report(const ReportArgs& a) {
  auto loaded = dcn::load_checkpoint(a.checkpoint);
  const dcn::Dataset ds = dcn::load_dataset(a.data);
  require_matching_images(ds, loaded.config.model);
  const dcn::Split split = parse_split(a.split);
  std::filesystem::create_directories(a.out);

  if (a.mode == "maps") {
    const auto files = dcn::export_activation_maps(loaded.model, ds, split, a.out, a.count);
    std::cout << "wrote " << files.size() << " activation maps to " << a.out << "\n";
    return 0;
  }

  auto [ctx, det] = dcn::model_spread(loaded.model, ds, split);
  for (const auto& w : ctx.warnings) std::cerr << "warning: " << w << "\n";
  for (const auto& w : det.warnings) std::cerr << "warning: " << w << "\n";
  const auto dir = std::filesystem::path(a.out);
  dcn::write_spread_report(dir / "variance_context.tsv", ctx);
  dcn::write_spread_report(dir / "variance_detail.tsv", det);
  std::cout << std::fixed << std::setprecision(6) << "context intra " << ctx.intra << " inter "
            << ctx.inter << "\n";
  std::cout << std::fixed << std::setprecision(6) << "detail intra " << det.intra << " inter "
            << det.inter << "\n";
  std::cout << "reports " << (dir / "variance_context.tsv").string() << " "
            << (dir / "variance_detail.tsv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual contrastive network: synthetic data, training and episodic evaluation"};
  app.require_subcommand(0, 1);

  std::string config_path;
  bool print_config = false;
  app.add_option("--config", config_path, "run configuration file (flat `key = value` text)")
      ->check(CLI::ExistingFile);
  app.add_flag("--print-config", print_config,
               "print the effective configuration on stdout and exit");

  SynthArgs sa;
  auto* cmd_synth = app.add_subcommand("synth", "write a synthetic grating dataset");
  cmd_synth->add_option("--out", sa.out, "dataset directory to create")->required();
  cmd_synth->add_option("--classes", sa.classes, "number of classes (default 20)");
  cmd_synth->add_option("--per-class", sa.per_class, "images per class (default 40)");
  cmd_synth->add_option("--seed", sa.seed, "generator seed (default: config seed)");

  TrainArgs ta;
  auto* cmd_train = app.add_subcommand("train", "train on the base split of a dataset");
  cmd_train->add_option("--data", ta.data, "dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  cmd_train->add_option("--out", ta.out, "checkpoint file to write")->required();
  cmd_train->add_option("--metrics", ta.metrics,
                        "per epoch loss file (default: <out>.metrics.tsv)");
  cmd_train->add_option("--epochs", ta.epochs, "override training epochs");
  cmd_train->add_option("--lr", ta.lr, "override learning rate");
  cmd_train->add_option("--seed", ta.seed, "override training seed");

  EvalArgs ea;
  auto* cmd_eval = app.add_subcommand("eval", "score few shot episodes from a checkpoint");
  cmd_eval->add_option("--checkpoint", ea.checkpoint, "trained checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  cmd_eval->add_option("--data", ea.data, "dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  cmd_eval->add_option("--out", ea.out, "report file to write")->required();
  cmd_eval->add_option("--split", ea.split, "split to evaluate (default novel)")
      ->check(CLI::IsMember({"base", "val", "novel"}));
  cmd_eval->add_option("--way", ea.way, "override classes per task");
  cmd_eval->add_option("--shot", ea.shot, "override support images per class");
  cmd_eval->add_option("--query", ea.query, "override query images per class");
  cmd_eval->add_option("--tasks", ea.tasks, "override task count");
  cmd_eval->add_option("--seed", ea.seed, "override evaluation seed (default: training seed)");

  ReportArgs ra;
  auto* cmd_report = app.add_subcommand("report", "embedding spread or activation maps");
  cmd_report->add_option("--checkpoint", ra.checkpoint, "trained checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  cmd_report->add_option("--data", ra.data, "dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  cmd_report->add_option("--out", ra.out, "output directory")->required();
  cmd_report->add_option("--split", ra.split, "split to report on (default novel)")
      ->check(CLI::IsMember({"base", "val", "novel"}));
  cmd_report->add_option("--mode", ra.mode, "variance or maps (default variance)")
      ->check(CLI::IsMember({"variance", "maps"}));
  cmd_report->add_option("--count", ra.count, "images per split for maps mode (default 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    dcn::RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);

    if (print_config) {
      std::cout << dcn::dump_config(cfg);
      return 0;
    }
    if (app.got_subcommand(cmd_synth)) return run_synth(cfg, sa);
    if (app.got_subcommand(cmd_train)) return run_train(cfg, ta);
    if (app.got_subcommand(cmd_eval)) return run_eval(ea);
    if (app.got_subcommand(cmd_report)) return run_report(ra);
    std::cerr << app.help();
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "dcn: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "dcn: " << e.what() << "\n";
    return 3;
  }
}
