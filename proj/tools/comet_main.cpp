// comet: prepare / train / evaluate / ablate / export-kernels.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "comet/cli.hpp"
#include "comet/error.hpp"

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  long long seed = -1;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "Config file (key = value lines)");
  cmd->add_option("--set", c.overrides, "Override a key, e.g. --set train.epochs=5");
  cmd->add_option("--seed", c.seed, "Run seed");
  cmd->add_option("-o,--out", c.out, "Output directory");
}

comet::RunConfig resolve(const Common& c) {
  comet::RunConfig config = c.config_path.empty() ? comet::RunConfig{} : comet::RunConfig::load(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw comet::ConfigError("--set expects key=value, got '" + kv + "'");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed >= 0) config.hyper.seed = static_cast<std::uint64_t>(c.seed);
  if (!c.out.empty()) config.out_dir = c.out;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COMET recommender: convolutional embedding towers over interaction histories"};
  app.require_subcommand(1);

  Common prepare_opts, train_opts, eval_opts, ablate_opts, export_opts;
  std::string eval_ckpt, export_ckpt;
  std::vector<std::string> variants;

  auto* prepare = app.add_subcommand("prepare", "Parse ratings, split leave-one-out, write the split cache");
  add_common(prepare, prepare_opts);
  auto* train = app.add_subcommand("train", "Train and evaluate one model");
  add_common(train, train_opts);
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  add_common(evaluate, eval_opts);
  evaluate->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  auto* ablate = app.add_subcommand("ablate", "Train every ablation variant on one split");
  add_common(ablate, ablate_opts);
  ablate->add_option("--variants", variants, "Subset of variants (default: all)")->delimiter(',');
  auto* export_kernels = app.add_subcommand("export-kernels", "Dump convolution kernels as text");
  add_common(export_kernels, export_opts);
  export_kernels->add_option("--checkpoint", export_ckpt, "Checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) {
      comet::cmd_prepare(resolve(prepare_opts), std::cout);
    } else if (*train) {
      comet::cmd_train(resolve(train_opts), std::cout);
    } else if (*evaluate) {
      comet::cmd_evaluate(resolve(eval_opts), eval_ckpt, std::cout);
    } else if (*ablate) {
      comet::cmd_ablate(resolve(ablate_opts), variants.empty() ? comet::ablation_variants() : variants, std::cout);
    } else if (*export_kernels) {
      comet::cmd_export_kernels(resolve(export_opts), export_ckpt, std::cout);
    }
  } catch (const comet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
