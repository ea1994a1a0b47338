#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "comet/data.hpp"
#include "comet/evaluator.hpp"
#include "comet/model.hpp"
#include "comet/trainer.hpp"

namespace comet {

inline constexpr const char* kCodeVersion = "0.1.0";

/// Everything that determines a run. Serialized as flat `key = value` lines;
/// see configs/ and README for the key list.
struct RunConfig {
  std::filesystem::path data_path = "data/ml-100k/u.data";
  RatingFormat format = RatingFormat::movielens_100k();
  int min_user_interactions = 0;
  std::filesystem::path split_cache;  // empty: <out_dir>/split.tsv

  ModelConfig model;
  TrainHyper hyper;
  std::string precision = "float32";  // or float64

  int eval_negatives = 99;
  bool rank_dump = false;
  std::filesystem::path out_dir = "runs/default";

  /// Apply one key; unknown keys and malformed values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  static RunConfig parse(std::istream& in, const std::string& source = "<config>");
  static RunConfig parse_text(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  /// Every key, in a fixed order; parse_text(to_text()) reproduces the config.
  std::string to_text() const;
  void validate() const;
  std::filesystem::path split_cache_path() const;
};

// ---------------------------------------------------------------------------
// Checkpoint

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // bytes into the payload
};

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t version = kFormatVersion;
  std::string config_text;
  std::vector<CheckpointEntry> entries;
  std::vector<float> payload;
};

/// Magic "COMETCK1", format version, config text, then (name, shape, byte
/// offset) per parameter and a little-endian float32 payload.
std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "<checkpoint>");

template <typename Scalar>
Checkpoint make_checkpoint(const ModelParams<Scalar>& params, const std::string& config_text);

/// Parameters for `config`; a registry mismatch throws VersionError naming
/// the missing and extra parameters.
template <typename Scalar>
ModelParams<Scalar> checkpoint_params(const Checkpoint& checkpoint, const ModelConfig& config,
                                      std::int32_t users, std::int32_t items);

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Commands. Progress goes to `log`.

struct PrepareSummary {
  std::int32_t users = 0;
  std::int32_t items = 0;
  std::size_t interactions = 0;
  double density = 0.0;
  std::size_t train_only_users = 0;
  std::string split_hash;
};

PrepareSummary cmd_prepare(const RunConfig& config, std::ostream& log);

/// The cached split, preparing it first when missing.
Dataset load_split(const RunConfig& config, std::ostream& log);

struct TrainOutcome {
  TrainReport report;
  EvalReport final_eval;
  std::string split_hash;
};

/// Writes metrics.csv, model.ckpt, manifest.cfg, eval.csv (and ranks.tsv)
/// under the output directory.
TrainOutcome cmd_train(const RunConfig& config, std::ostream& log);

EvalReport cmd_evaluate(const RunConfig& config, const std::filesystem::path& checkpoint, std::ostream& log);

/// Ablation names: filters_1, filters_1_8, filters_1_8_32, filters_1_8_32_128,
/// cnn_only, mlp_only, original_only, interaction_only, mf_baseline.
std::vector<std::string> ablation_variants();
/// `config` with one ablation applied.
RunConfig ablation_config(const RunConfig& base, const std::string& name);

struct AblationRow {
  std::string name;
  std::string split_hash;
  double final_loss = 0.0;
  EvalReport eval;
};

/// Trains each variant on the shared split and seed; writes ablation.csv
/// with one row per variant.
std::vector<AblationRow> cmd_ablate(const RunConfig& config, const std::vector<std::string>& variants,
                                    std::ostream& log);

/// Text dump of every convolution kernel in a checkpoint, one file per
/// tower and width, rows = channel/history row, columns = kernel width.
void cmd_export_kernels(const RunConfig& config, const std::filesystem::path& checkpoint, std::ostream& log);

}  // namespace comet
