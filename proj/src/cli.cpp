#include "comet/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "comet/error.hpp"

namespace comet {

// ---------------------------------------------------------------------------
// RunConfig

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_value(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty())
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  std::stringstream ss(value);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_value<T>(key, item));
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t k = 0; k < xs.size(); ++k) out += (k ? "," : "") + std::to_string(xs[k]);
  return out;
}

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string separator_name(const std::string& sep) {
  if (sep == "\t") return "tab";
  if (sep == ",") return "comma";
  if (sep == " ") return "space";
  return sep;
}

std::string separator_value(const std::string& name) {
  if (name == "tab") return "\t";
  if (name == "comma") return ",";
  if (name == "space") return " ";
  return name;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "data.path") data_path = value;
  else if (key == "data.separator") format.separator = separator_value(value);
  else if (key == "data.columns") {
    const auto cols = parse_list<int>(key, value);
    if (cols.size() != 4) throw ConfigError("data.columns needs 4 entries (user,item,rating,timestamp)");
    std::copy(cols.begin(), cols.end(), format.columns.begin());
  } else if (key == "data.skip_lines") format.skip_lines = parse_value<int>(key, value);
  else if (key == "data.min_user_interactions") min_user_interactions = parse_value<int>(key, value);
  else if (key == "data.split_cache") split_cache = value;
  else if (key == "model.variant") model.variant = parse_variant(value);
  else if (key == "model.K") model.K = parse_value<Index>(key, value);
  else if (key == "model.history_length") model.history_length = parse_value<Index>(key, value);
  else if (key == "model.channels") model.channels = parse_value<Index>(key, value);
  else if (key == "model.filter_widths") model.filter_widths = parse_list<Index>(key, value);
  else if (key == "model.mlp_hidden") model.mlp_hidden = parse_list<Index>(key, value);
  else if (key == "model.mlp_activation") model.mlp_activation = parse_activation(value);
  else if (key == "model.dropout") model.dropout = parse_value<double>(key, value);
  else if (key == "model.mlp_only_layers") model.mlp_only_layers = parse_value<int>(key, value);
  else if (key == "train.lr") hyper.lr = parse_value<double>(key, value);
  else if (key == "train.lambda") hyper.lambda = parse_value<double>(key, value);
  else if (key == "train.epochs") hyper.epochs = parse_value<int>(key, value);
  else if (key == "train.batch_size") hyper.batch_size = parse_value<int>(key, value);
  else if (key == "train.neg_per_pos") hyper.neg_per_pos = parse_value<int>(key, value);
  else if (key == "train.eval_every") hyper.eval_every = parse_value<int>(key, value);
  else if (key == "train.precision") {
    if (value != "float32" && value != "float64") throw ConfigError("train.precision must be float32 or float64");
    precision = value;
  } else if (key == "eval.negatives") eval_negatives = parse_value<int>(key, value);
  else if (key == "eval.cutoffs") hyper.cutoffs = parse_list<int>(key, value);
  else if (key == "eval.rank_dump") rank_dump = parse_bool(key, value);
  else if (key == "run.seed") hyper.seed = parse_value<std::uint64_t>(key, value);
  else if (key == "run.out_dir") out_dir = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

RunConfig RunConfig::parse(std::istream& in, const std::string& source) {
  RunConfig config;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.rfind("manifest.", 0) == 0) continue;
    try {
      config.set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

RunConfig RunConfig::parse_text(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  return parse(in, path.string());
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "data.path = " << data_path.string() << '\n'
     << "data.separator = " << separator_name(format.separator) << '\n'
     << "data.columns = " << join(std::vector<int>(format.columns.begin(), format.columns.end())) << '\n'
     << "data.skip_lines = " << format.skip_lines << '\n'
     << "data.min_user_interactions = " << min_user_interactions << '\n'
     << "data.split_cache = " << split_cache.string() << '\n'
     << "model.variant = " << to_string(model.variant) << '\n'
     << "model.K = " << model.K << '\n'
     << "model.history_length = " << model.history_length << '\n'
     << "model.channels = " << model.channels << '\n'
     << "model.filter_widths = " << join(model.filter_widths) << '\n'
     << "model.mlp_hidden = " << join(model.mlp_hidden) << '\n'
     << "model.mlp_activation = " << to_string(model.mlp_activation) << '\n'
     << "model.dropout = " << format_double(model.dropout) << '\n'
     << "model.mlp_only_layers = " << model.mlp_only_layers << '\n'
     << "train.lr = " << format_double(hyper.lr) << '\n'
     << "train.lambda = " << format_double(hyper.lambda) << '\n'
     << "train.epochs = " << hyper.epochs << '\n'
     << "train.batch_size = " << hyper.batch_size << '\n'
     << "train.neg_per_pos = " << hyper.neg_per_pos << '\n'
     << "train.eval_every = " << hyper.eval_every << '\n'
     << "train.precision = " << precision << '\n'
     << "eval.negatives = " << eval_negatives << '\n'
     << "eval.cutoffs = " << join(hyper.cutoffs) << '\n'
     << "eval.rank_dump = " << (rank_dump ? "true" : "false") << '\n'
     << "run.seed = " << hyper.seed << '\n'
     << "run.out_dir = " << out_dir.string() << '\n';
  return os.str();
}

void RunConfig::validate() const {
  model.validate();
  hyper.validate();
  if (hyper.cutoffs.empty()) throw ConfigError("eval.cutoffs is empty");
  for (int k : hyper.cutoffs)
    if (k < 1) throw ConfigError("eval.cutoffs must be >= 1");
  if (eval_negatives < 0) throw ConfigError("eval.negatives must be >= 0");
  if (out_dir.empty()) throw ConfigError("run.out_dir is empty");
  const bool cached = std::filesystem::exists(split_cache_path());
  if (!cached && !std::filesystem::exists(data_path))
    throw ConfigError("data.path '" + data_path.string() + "' does not exist and no split cache at '" +
                      split_cache_path().string() + "'");
}

std::filesystem::path RunConfig::split_cache_path() const {
  return split_cache.empty() ? out_dir / "split.tsv" : split_cache;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'C', 'O', 'M', 'E', 'T', 'C', 'K', '1'};

void put_u32(std::string& out, std::uint32_t x) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((x >> (8 * b)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t x) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((x >> (8 * b)) & 0xff));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t x = 0;
    for (int b = 0; b < width; ++b) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * b);
    return x;
  }
  std::string string() {
    const auto len = static_cast<std::size_t>(uint(4));
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  std::string raw(std::size_t len) {
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t len) const {
    if (bytes_.size() - pos_ < len) throw CheckpointError(source_ + ": truncated checkpoint");
  }
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, checkpoint.version);
  put_string(out, checkpoint.config_text);
  put_u32(out, static_cast<std::uint32_t>(checkpoint.entries.size()));
  for (const auto& e : checkpoint.entries) {
    put_string(out, e.name);
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (Index d : e.shape) put_u64(out, static_cast<std::uint64_t>(d));
    put_u64(out, e.offset);
  }
  put_u64(out, static_cast<std::uint64_t>(checkpoint.payload.size()) * 4);
  for (float f : checkpoint.payload) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source) {
  Reader in(bytes, source);
  if (in.raw(sizeof kMagic) != std::string(kMagic, sizeof kMagic))
    throw CheckpointError(source + ": not a checkpoint (bad magic)");
  Checkpoint c;
  c.version = static_cast<std::uint32_t>(in.uint(4));
  if (c.version != Checkpoint::kFormatVersion)
    throw VersionError(source + ": checkpoint format version " + std::to_string(c.version) + ", expected " +
                       std::to_string(Checkpoint::kFormatVersion));
  c.config_text = in.string();
  const auto count = in.uint(4);
  for (std::uint64_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    e.name = in.string();
    const auto rank = in.uint(4);
    for (std::uint64_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<Index>(in.uint(8)));
    e.offset = in.uint(8);
    c.entries.push_back(std::move(e));
  }
  const auto payload_bytes = in.uint(8);
  if (payload_bytes % 4 != 0 || payload_bytes != in.remaining())
    throw CheckpointError(source + ": payload size does not match the file");
  c.payload.resize(static_cast<std::size_t>(payload_bytes / 4));
  for (float& f : c.payload) {
    const auto bits = static_cast<std::uint32_t>(in.uint(4));
    std::memcpy(&f, &bits, 4);
  }
  for (const auto& e : c.entries) {
    const auto size = static_cast<std::uint64_t>(shape_size(e.shape));
    if (e.offset % 4 != 0 || e.offset / 4 + size > c.payload.size())
      throw CheckpointError(source + ": parameter '" + e.name + "' lies outside the payload");
  }
  return c;
}

template <typename Scalar>
Checkpoint make_checkpoint(const ModelParams<Scalar>& params, const std::string& config_text) {
  Checkpoint c;
  c.config_text = config_text;
  for (const auto& name : params.names()) {
    const auto& t = params.get(name);
    c.entries.push_back({name, t.shape(), static_cast<std::uint64_t>(c.payload.size()) * 4});
    for (Index k = 0; k < t.size(); ++k) c.payload.push_back(static_cast<float>(t.data()[k]));
  }
  return c;
}

template <typename Scalar>
ModelParams<Scalar> checkpoint_params(const Checkpoint& checkpoint, const ModelConfig& config, std::int32_t users,
                                      std::int32_t items) {
  const auto layout = parameter_layout(config, users, items);
  std::map<std::string, const CheckpointEntry*> stored;
  for (const auto& e : checkpoint.entries) stored[e.name] = &e;
  std::vector<std::string> missing, extra, reshaped;
  std::set<std::string> expected;
  for (const auto& [name, shape] : layout) {
    expected.insert(name);
    auto it = stored.find(name);
    if (it == stored.end()) missing.push_back(name);
    else if (it->second->shape != shape)
      reshaped.push_back(name + " " + shape_string(it->second->shape) + " vs " + shape_string(shape));
  }
  for (const auto& e : checkpoint.entries)
    if (!expected.count(e.name)) extra.push_back(e.name);
  if (!missing.empty() || !extra.empty() || !reshaped.empty()) {
    auto list = [](const std::vector<std::string>& xs) {
      std::string s;
      for (const auto& x : xs) s += (s.empty() ? "" : ", ") + x;
      return "[" + s + "]";
    };
    throw VersionError("checkpoint does not match the configured model (variant " + to_string(config.variant) +
                       "): missing " + list(missing) + "; extra " + list(extra) + "; shape mismatch " +
                       list(reshaped));
  }
  ModelParams<Scalar> params;
  for (const auto& [name, shape] : layout) {
    const CheckpointEntry& e = *stored.at(name);
    const float* src = checkpoint.payload.data() + e.offset / 4;
    std::vector<Scalar> values(src, src + shape_size(shape));
    params.add(name, Tensor<Scalar>::from_values(shape, std::move(values), true));
  }
  return params;
}

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(path.string() + ": cannot write");
  const std::string bytes = encode_checkpoint(checkpoint);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(path.string() + ": write failed");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path.string());
}

template Checkpoint make_checkpoint(const ModelParams<float>&, const std::string&);
template Checkpoint make_checkpoint(const ModelParams<double>&, const std::string&);
template ModelParams<float> checkpoint_params(const Checkpoint&, const ModelConfig&, std::int32_t, std::int32_t);
template ModelParams<double> checkpoint_params(const Checkpoint&, const ModelConfig&, std::int32_t, std::int32_t);

// ---------------------------------------------------------------------------
// Commands

namespace {

PrepareSummary summarize(const Dataset& d) {
  PrepareSummary s;
  s.users = d.m;
  s.items = d.n;
  s.interactions = d.interaction_count();
  s.density = d.density();
  s.train_only_users = static_cast<std::size_t>(d.m) - d.evaluated_users().size();
  s.split_hash = split_hash(d);
  return s;
}

void print_summary(const PrepareSummary& s, std::ostream& log) {
  char density[32];
  std::snprintf(density, sizeof density, "%.5f", s.density);
  log << "users " << s.users << ", items " << s.items << ", interactions " << s.interactions << ", density "
      << density << ", train-only users " << s.train_only_users << ", split " << s.split_hash << '\n';
}

std::string manifest_text(const RunConfig& config, const std::string& hash) {
  return config.to_text() + "manifest.split_hash = " + hash + "\nmanifest.code_version = " + kCodeVersion +
         "\nmanifest.init = embeddings and kernels uniform [-0.05, 0.05]; weights and h xavier-uniform; biases 0" +
         "\nmanifest.adam = beta1 0.9, beta2 0.999, eps 1e-8\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot write");
  out << text;
}

EvalCandidates candidates_for(const RunConfig& config, const Dataset& dataset) {
  Rng rng = make_rng(config.hyper.seed, kEvalStream);
  return build_eval_candidates(dataset, static_cast<int>(config.model.history_length), rng, config.eval_negatives);
}

std::string metrics_row(int epoch, double loss, const EvalReport* eval, std::size_t metric_count) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%d,%.8f", epoch, loss);
  std::string row = buf;
  if (eval) row += "," + metric_values(*eval);
  else row += std::string(metric_count, ',');
  return row + "\n";
}

template <typename Scalar>
TrainOutcome train_and_save(const RunConfig& config, const Dataset& dataset, const std::string& hash,
                            std::ostream& log) {
  const EvalCandidates candidates = candidates_for(config, dataset);
  log << "evaluation: " << candidates.users.size() << " users, " << candidates.skipped_users << " skipped\n";

  const auto metrics_path = config.out_dir / "metrics.csv";
  std::filesystem::create_directories(config.out_dir);
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error(metrics_path.string() + ": cannot write");
  metrics << "epoch,loss," << metric_columns(config.hyper.cutoffs) << '\n' << std::flush;
  const std::size_t metric_count = 2 * config.hyper.cutoffs.size();
  const int epochs = config.hyper.epochs;

  auto on_epoch = [&](const EpochRecord& r) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %d/%d loss %.6f reg %.6g (%.1f s)", r.epoch, epochs, r.mean_loss,
                  r.regularization, r.seconds);
    log << line;
    if (r.eval) log << " " << metric_columns(r.eval->cutoffs) << " " << metric_values(*r.eval);
    log << std::endl;
    if (r.epoch < epochs) metrics << metrics_row(r.epoch, r.mean_loss, r.eval ? &*r.eval : nullptr, metric_count) << std::flush;
  };
  auto result = train<Scalar>(dataset, config.model, config.hyper, &candidates, on_epoch);

  TrainOutcome outcome;
  outcome.split_hash = hash;
  outcome.report = result.report;
  if (!result.report.epochs.empty() && result.report.epochs.back().eval)
    outcome.final_eval = *result.report.epochs.back().eval;
  else
    outcome.final_eval = evaluate(result.params, config.model, candidates, config.hyper.cutoffs);
  if (!result.report.epochs.empty())
    metrics << metrics_row(epochs, result.report.epochs.back().mean_loss, &outcome.final_eval, metric_count);
  else
    metrics << metrics_row(0, 0.0, &outcome.final_eval, metric_count);
  metrics.close();

  write_checkpoint(make_checkpoint(result.params, config.to_text()), config.out_dir / "model.ckpt");
  write_text(config.out_dir / "manifest.cfg", manifest_text(config, hash));
  write_eval_csv(outcome.final_eval, config.out_dir / "eval.csv");
  if (config.rank_dump) write_rank_dump(outcome.final_eval, dataset, config.out_dir / "ranks.tsv");
  std::string curve = "# epoch loss\n";
  for (const auto& r : result.report.epochs) curve += std::to_string(r.epoch) + " " + format_double(r.mean_loss) + "\n";
  write_text(config.out_dir / "loss_curve.dat", curve);
  log << "final " << metric_columns(config.hyper.cutoffs) << " " << metric_values(outcome.final_eval) << '\n';
  return outcome;
}

}  // namespace

PrepareSummary cmd_prepare(const RunConfig& config, std::ostream& log) {
  const auto records = load_ratings(config.data_path, config.format);
  log << "read " << records.size() << " ratings from " << config.data_path.string() << '\n';
  const Dataset dataset = leave_one_out_split(build_dataset(records, config.min_user_interactions));
  write_split_cache(dataset, config.split_cache_path());
  const PrepareSummary s = summarize(dataset);
  print_summary(s, log);
  log << "split cache: " << config.split_cache_path().string() << '\n';
  return s;
}

Dataset load_split(const RunConfig& config, std::ostream& log) {
  if (!std::filesystem::exists(config.split_cache_path())) cmd_prepare(config, log);
  Dataset d = read_split_cache(config.split_cache_path());
  print_summary(summarize(d), log);
  return d;
}

TrainOutcome cmd_train(const RunConfig& config, std::ostream& log) {
  config.validate();
  const Dataset dataset = load_split(config, log);
  const std::string hash = split_hash(dataset);
  log << "training " << to_string(config.model.variant) << " (" << config.precision << ") for "
      << config.hyper.epochs << " epochs\n";
  return config.precision == "float64" ? train_and_save<double>(config, dataset, hash, log)
                                       : train_and_save<float>(config, dataset, hash, log);
}

EvalReport cmd_evaluate(const RunConfig& config, const std::filesystem::path& checkpoint, std::ostream& log) {
  config.validate();
  const Dataset dataset = load_split(config, log);
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const EvalCandidates candidates = candidates_for(config, dataset);
  EvalReport report =
      config.precision == "float64"
          ? evaluate(checkpoint_params<double>(ckpt, config.model, dataset.m, dataset.n), config.model, candidates,
                     config.hyper.cutoffs)
          : evaluate(checkpoint_params<float>(ckpt, config.model, dataset.m, dataset.n), config.model, candidates,
                     config.hyper.cutoffs);
  write_eval_csv(report, config.out_dir / "eval.csv");
  if (config.rank_dump) write_rank_dump(report, dataset, config.out_dir / "ranks.tsv");
  log << "evaluated " << report.evaluated() << " users: " << metric_columns(report.cutoffs) << " "
      << metric_values(report) << '\n';
  return report;
}

std::vector<std::string> ablation_variants() {
  return {"filters_1",    "filters_1_8",   "filters_1_8_32", "filters_1_8_32_128", "cnn_only",
          "mlp_only",     "original_only", "interaction_only", "mf_baseline"};
}

RunConfig ablation_config(const RunConfig& base, const std::string& name) {
  RunConfig c = base;
  if (name.rfind("filters_", 0) == 0) {
    c.model.variant = Variant::full;
    c.model.filter_widths.clear();
    std::stringstream ss(name.substr(8));
    for (std::string w; std::getline(ss, w, '_');) c.model.filter_widths.push_back(parse_value<Index>("variant", w));
    if (c.model.filter_widths.empty()) throw ConfigError("ablation '" + name + "' lists no filter widths");
  } else {
    c.model.variant = parse_variant(name);
  }
  c.model.validate();
  return c;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& config, const std::vector<std::string>& variants,
                                    std::ostream& log) {
  config.validate();
  std::vector<RunConfig> runs;
  for (const auto& name : variants) runs.push_back(ablation_config(config, name));  // reject unknown names first
  std::vector<AblationRow> rows;
  for (std::size_t k = 0; k < variants.size(); ++k) {
    RunConfig run = runs[k];
    run.split_cache = config.split_cache_path();
    run.out_dir = config.out_dir / variants[k];
    log << "== " << variants[k] << '\n';
    const TrainOutcome outcome = cmd_train(run, log);
    AblationRow row;
    row.name = variants[k];
    row.split_hash = outcome.split_hash;
    row.final_loss = outcome.report.epochs.empty() ? 0.0 : outcome.report.epochs.back().mean_loss;
    row.eval = outcome.final_eval;
    rows.push_back(std::move(row));
  }
  std::string csv = "variant,split_hash,final_loss," + metric_columns(config.hyper.cutoffs) + "\n";
  for (const auto& r : rows) {
    char loss[32];
    std::snprintf(loss, sizeof loss, "%.8f", r.final_loss);
    csv += r.name + "," + r.split_hash + "," + loss + "," + metric_values(r.eval) + "\n";
  }
  write_text(config.out_dir / "ablation.csv", csv);
  log << "wrote " << (config.out_dir / "ablation.csv").string() << '\n';
  return rows;
}

void cmd_export_kernels(const RunConfig& config, const std::filesystem::path& checkpoint, std::ostream& log) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  int written = 0;
  for (const auto& e : ckpt.entries) {
    if (e.name.find(".conv.w") == std::string::npos || e.shape.size() != 3) continue;
    const Index C = e.shape[0], H = e.shape[1], W = e.shape[2];
    const float* src = ckpt.payload.data() + e.offset / 4;
    std::ostringstream os;
    os << "# " << e.name << " " << shape_string(e.shape) << "; one block per channel, rows = history slots\n";
    for (Index c = 0; c < C; ++c) {
      os << "# channel " << c << '\n';
      for (Index r = 0; r < H; ++r) {
        for (Index s = 0; s < W; ++s) os << (s ? " " : "") << format_double(src[(c * H + r) * W + s]);
        os << '\n';
      }
    }
    write_text(config.out_dir / "kernels" / (e.name + ".txt"), os.str());
    ++written;
  }
  log << "exported " << written << " kernels to " << (config.out_dir / "kernels").string() << '\n';
}

}  // namespace comet
