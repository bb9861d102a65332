// lcforge command-line interface: train, eval, fold, analyze, attack.
// Exit codes: 0 success, 2 input/validation error, 3 contract violation,
// 1 internal error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "lcforge/lcforge.hpp"

namespace fs = std::filesystem;
using namespace lcforge;

#ifndef LCFORGE_GIT_DESCRIBE
#define LCFORGE_GIT_DESCRIBE "unknown"
#endif

namespace {

using ModelT = float;  // training precision; the library is also built in 64-bit by the tests

struct LoadedData {
  Dataset train, test;
};

LoadedData load_dataset(const std::string& dataset, const std::string& data_dir) {
  if (data_dir.empty()) throw ValidationError("missing --data-dir (no dataset path given)");
  if (!fs::exists(data_dir)) throw ValidationError("dataset path does not exist: " + data_dir);
  LoadedData out;
  if (dataset == "cifar10") {
    auto [train, test] = load_cifar10(data_dir);
    out.train = std::move(train);
    out.test = std::move(test);
  } else {
    out.train = load_mnist_idx(data_dir + "/train-images-idx3-ubyte",
                               data_dir + "/train-labels-idx1-ubyte");
    out.test = load_mnist_idx(data_dir + "/t10k-images-idx3-ubyte",
                              data_dir + "/t10k-labels-idx1-ubyte");
    out.test.channel_mean = out.train.channel_mean;  // train-split statistics only
    out.test.channel_std = out.train.channel_std;
  }
  return out;
}

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out.flush()) throw Error("failed flushing " + path);
}

int cmd_train(const RunConfig& cfg) {
  cfg.validate();
  auto data = load_dataset(cfg.dataset, cfg.data_dir);

  RunConfig effective = cfg;
  effective.model.input_channels = data.train.channels;
  if (data.train.num_classes > effective.model.num_classes) {
    effective.model.num_classes = data.train.num_classes;
  }

  Dataset train_ds = std::move(data.train);
  if (effective.train.train_subset > 0) {
    train_ds = train_ds.head(effective.train.train_subset);
    compute_channel_stats(train_ds);  // stats follow the split actually trained on
    data.test.channel_mean = train_ds.channel_mean;
    data.test.channel_std = train_ds.channel_std;
  }

  fs::create_directories(effective.out_dir);
  const auto t0 = std::chrono::steady_clock::now();

  ResNetLC<ModelT> model(effective.model, effective.train.seed);
  SgdState<ModelT> opt;
  opt.init(model);
  History history = train_loop<ModelT>(
      model, opt, train_ds, data.test, effective.train, 0, {}, [&](const EpochRecord& r) {
        std::printf("epoch %3lld  loss %.6f  val_acc %.4f  lr %.6g\n",
                    static_cast<long long>(r.epoch), r.train_loss, r.val_acc, r.lr);
        std::fflush(stdout);
      });

  const double wall_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::string ckpt_path = effective.out_dir + "/checkpoint.bin";
  const std::string history_path = effective.out_dir + "/history.csv";
  save_checkpoint(ckpt_path, model, opt, effective.train, train_ds.channel_mean,
                  train_ds.channel_std, effective.train.epochs, history);
  write_history_csv(history_path, history);

  json manifest{{"command", "train"},
                {"seed", effective.train.seed},
                {"spec", to_json(effective.model)},
                {"config", to_json(effective.train)},
                {"dataset", effective.dataset},
                {"data_dir", effective.data_dir},
                {"git", LCFORGE_GIT_DESCRIBE},
                {"wall_time_s", wall_s},
                {"timestamp", iso_timestamp()},
                {"artifacts", json{{"checkpoint", ckpt_path}, {"history", history_path}}}};
  write_text(effective.out_dir + "/manifest.json", manifest.dump(2) + "\n");

  const double final_acc = history.empty() ? 0.0 : history.back().val_acc;
  std::printf("final val_acc %.4f  (%s)\n", final_acc, ckpt_path.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dataset,
             const std::string& data_dir, int64_t batch_size, const std::string& out_dir,
             const std::string& split) {
  auto loaded = load_checkpoint<ModelT>(ckpt_path);
  auto data = load_dataset(dataset, data_dir);
  Dataset& ds = (split == "train") ? data.train : data.test;
  ds.channel_mean = loaded.channel_mean;  // normalize as the run was trained
  ds.channel_std = loaded.channel_std;

  auto preds = predictions(loaded.model, ds, batch_size);
  int64_t correct = 0;
  for (int64_t i = 0; i < ds.count; ++i)
    correct += (preds[static_cast<size_t>(i)] == ds.labels[static_cast<size_t>(i)]);
  const double acc = static_cast<double>(correct) / static_cast<double>(ds.count);
  std::printf("accuracy %.6f  (%lld/%lld)\n", acc, static_cast<long long>(correct),
              static_cast<long long>(ds.count));

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ostringstream csv;
    csv << "index,prediction,label\n";
    for (int64_t i = 0; i < ds.count; ++i) {
      csv << i << ',' << preds[static_cast<size_t>(i)] << ','
          << ds.labels[static_cast<size_t>(i)] << '\n';
    }
    write_text(out_dir + "/predictions.csv", csv.str());
    json summary{{"command", "eval"}, {"checkpoint", ckpt_path}, {"split", split},
                 {"accuracy", acc}, {"count", ds.count}};
    write_text(out_dir + "/eval.json", summary.dump(2) + "\n");
  }
  return 0;
}

void write_raw_f32(const std::string& path, std::span<const float> values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!out.flush()) throw Error("failed flushing " + path);
}

int cmd_fold(const std::string& ckpt_path, const std::string& out_dir) {
  auto loaded = load_checkpoint<ModelT>(ckpt_path);
  if (!loaded.spec.use_lc) {
    std::printf("nothing to fold: checkpoint is a plain model without LC blocks\n");
    return 0;
  }
  // combined filters are only defined without an intermediate op; this
  // throws ContractError (exit 3) otherwise
  fs::create_directories(out_dir);
  json layers = json::array();
  for (auto* unit : loaded.model.conv_units()) {
    auto combined = unit->combined_weights();
    const std::string blob = out_dir + "/" + unit->name + ".bin";
    write_raw_f32(blob, combined.weights.values());
    const std::string pgm = out_dir + "/" + unit->name + ".pgm";
    export_filter_grid(make_kernel_stack(combined), pgm);
    layers.push_back(json{{"layer", unit->name},
                          {"shape", combined.weights.shape()},
                          {"blob", blob},
                          {"grid", pgm}});
  }

  auto folded = fold_model(loaded.model);
  SgdState<ModelT> folded_opt;
  folded_opt.init(folded);
  const std::string folded_ckpt = out_dir + "/folded_checkpoint.bin";
  save_checkpoint(folded_ckpt, folded, folded_opt, loaded.cfg, loaded.channel_mean,
                  loaded.channel_std, loaded.epoch, loaded.history);

  json manifest{{"command", "fold"},
                {"checkpoint", ckpt_path},
                {"git", LCFORGE_GIT_DESCRIBE},
                {"folded_checkpoint", folded_ckpt},
                {"layers", std::move(layers)}};
  write_text(out_dir + "/fold_manifest.json", manifest.dump(2) + "\n");
  std::printf("folded %zu LC layers -> %s\n", loaded.model.conv_units().size(),
              folded_ckpt.c_str());
  return 0;
}

int cmd_analyze(const std::string& ckpt_path, const std::string& out_dir) {
  auto loaded = load_checkpoint<ModelT>(ckpt_path);
  fs::create_directories(out_dir);

  auto units = loaded.model.conv_units();
  std::ostringstream entropy_csv;
  entropy_csv << "layer,metric,value\n";
  char line[256];
  for (auto* unit : units) {
    auto stack = make_kernel_stack(unit->combined_weights());
    const double raw = variance_entropy(stack);
    Rng mc_rng = Rng::derive(0xD1A6'0000ULL, {static_cast<uint64_t>(stack.count),
                                              static_cast<uint64_t>(stack.k)});
    const double threshold = randomness_threshold(stack.count, stack.k, 100, mc_rng);
    std::snprintf(line, sizeof(line), "%s,variance_entropy,%.10g\n", unit->name.c_str(), raw);
    entropy_csv << line;
    std::snprintf(line, sizeof(line), "%s,normalized_variance_entropy,%.10g\n",
                  unit->name.c_str(), raw / threshold);
    entropy_csv << line;
  }
  write_text(out_dir + "/entropy.csv", entropy_csv.str());

  for (auto [unit, tag] : {std::pair{units.front(), "first"}, {units.back(), "last"}}) {
    auto stack = make_kernel_stack(unit->combined_weights());
    auto heat = spatial_variance_heatmap(stack);
    std::ostringstream csv;
    csv << "layer,metric,value\n";
    for (int64_t r = 0; r < stack.k; ++r) {
      for (int64_t c = 0; c < stack.k; ++c) {
        std::snprintf(line, sizeof(line), "%s,var_r%lld_c%lld,%.10g\n", unit->name.c_str(),
                      static_cast<long long>(r), static_cast<long long>(c),
                      heat[static_cast<size_t>(r * stack.k + c)]);
        csv << line;
      }
    }
    write_text(out_dir + "/heatmap_" + tag + ".csv", csv.str());
    export_heatmap_pgm(heat, stack.k, out_dir + "/heatmap_" + std::string(tag) + ".pgm");
  }
  std::printf("analyzed %zu conv layers -> %s\n", units.size(), out_dir.c_str());
  return 0;
}

int cmd_attack(const std::string& ckpt_path, const std::string& dataset,
               const std::string& data_dir, std::vector<double> epsilons, int64_t batch_size,
               const std::string& out_dir) {
  auto loaded = load_checkpoint<ModelT>(ckpt_path);
  auto data = load_dataset(dataset, data_dir);
  data.test.channel_mean = loaded.channel_mean;
  data.test.channel_std = loaded.channel_std;

  std::sort(epsilons.begin(), epsilons.end());
  const double clean = evaluate(loaded.model, data.test, batch_size);
  std::ostringstream csv;
  csv << "epsilon,clean_accuracy,robust_accuracy\n";
  char line[128];
  for (double eps : epsilons) {
    AttackConfig acfg;
    acfg.epsilon = eps;
    acfg.label_smoothing = loaded.cfg.label_smoothing;
    const double robust = robust_accuracy(loaded.model, data.test, batch_size, acfg);
    std::printf("epsilon %.8g  clean %.6f  robust %.6f\n", eps, clean, robust);
    std::snprintf(line, sizeof(line), "%.10g,%.10g,%.10g\n", eps, clean, robust);
    csv << line;
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(out_dir + "/attack.csv", csv.str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lcforge: training and analysis of linear combinations of frozen random conv filters"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model and write checkpoint + history");
  std::string config_path;
  CliOverrides ov;
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--data-dir", ov.data_dir, "dataset root directory");
  train->add_option("--out", ov.out_dir, "output directory");
  train->add_option("--seed", ov.seed, "RNG seed");
  train->add_option("--depth", ov.depth, "model depth D (6n+2)");
  train->add_option("--width", ov.width, "model width W");
  train->add_option("--expansion", ov.expansion, "LC expansion factor E (E>1 implies LC blocks)");
  train->add_option("--kernel-size", ov.kernel_size, "spatial kernel size (3,5,7,9)");
  train->add_flag("--frozen,!--no-frozen", ov.frozen, "freeze spatial conv weights at init");
  train->add_option("--intermediate", ov.intermediate, "LC intermediate op: none|relu|bn|bnrelu");
  train->add_flag("--lc,!--no-lc", ov.use_lc, "replace spatial convs with LC blocks");
  train->add_option("--epochs", ov.epochs, "training epochs");
  train->add_option("--batch-size", ov.batch_size, "mini-batch size");
  train->add_option("--train-subset", ov.train_subset, "train on the first K samples only");
  train->add_option("--dataset", ov.dataset, "cifar10|mnist");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string e_ckpt, e_data, e_out, e_dataset = "cifar10", e_split = "test";
  int64_t e_bs = 256;
  eval_cmd->add_option("--checkpoint", e_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data-dir", e_data, "dataset root")->required();
  eval_cmd->add_option("--dataset", e_dataset, "cifar10|mnist");
  eval_cmd->add_option("--split", e_split, "train|test");
  eval_cmd->add_option("--batch-size", e_bs, "evaluation batch size");
  eval_cmd->add_option("--out", e_out, "write predictions.csv and eval.json here");

  // fold
  auto* fold_cmd = app.add_subcommand("fold", "export combined filters of an LC model");
  std::string f_ckpt, f_out;
  fold_cmd->add_option("--checkpoint", f_ckpt, "checkpoint file")->required();
  fold_cmd->add_option("--out", f_out, "output directory")->required();

  // analyze
  auto* an_cmd = app.add_subcommand("analyze", "filter diversity metrics and heatmaps");
  std::string a_ckpt, a_out;
  an_cmd->add_option("--checkpoint", a_ckpt, "checkpoint file")->required();
  an_cmd->add_option("--out", a_out, "output directory")->required();

  // attack
  auto* at_cmd = app.add_subcommand("attack", "FGSM robustness evaluation");
  std::string t_ckpt, t_data, t_out, t_dataset = "cifar10";
  std::vector<double> t_eps{1.0 / 255.0};
  int64_t t_bs = 256;
  at_cmd->add_option("--checkpoint", t_ckpt, "checkpoint file")->required();
  at_cmd->add_option("--data-dir", t_data, "dataset root")->required();
  at_cmd->add_option("--dataset", t_dataset, "cifar10|mnist");
  at_cmd->add_option("--epsilon", t_eps, "l_inf budgets (repeatable)")->expected(-1);
  at_cmd->add_option("--batch-size", t_bs, "batch size");
  at_cmd->add_option("--out", t_out, "write attack.csv here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad flags are input errors
  }

  try {
    if (*train) {
      RunConfig cfg;
      if (!config_path.empty()) cfg = load_run_config(config_path);
      ov.apply(cfg);
      return cmd_train(cfg);
    }
    if (*eval_cmd) return cmd_eval(e_ckpt, e_dataset, e_data, e_bs, e_out, e_split);
    if (*fold_cmd) return cmd_fold(f_ckpt, f_out);
    if (*an_cmd) return cmd_analyze(a_ckpt, a_out);
    if (*at_cmd) return cmd_attack(t_ckpt, t_dataset, t_data, t_eps, t_bs, t_out);
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
  return 2;
}
