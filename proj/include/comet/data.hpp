#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "comet/random.hpp"

namespace comet {

struct RatingRecord {
  std::string user;
  std::string item;
  double rating = 0.0;
  std::int64_t timestamp = 0;
};

/// Field separator plus the column position of user, item, rating and
/// timestamp (in that order).
struct RatingFormat {
  std::string separator = "\t";
  std::array<int, 4> columns{0, 1, 2, 3};
  int skip_lines = 0;

  static RatingFormat movielens_100k() { return {"\t", {0, 1, 2, 3}, 0}; }
  static RatingFormat movielens_1m() { return {"::", {0, 1, 2, 3}, 0}; }
  static RatingFormat csv() { return {",", {0, 1, 2, 3}, 0}; }
};

std::vector<RatingRecord> parse_ratings(std::istream& in, const RatingFormat& format,
                                        const std::string& source = "<stream>");
std::vector<RatingRecord> load_ratings(const std::filesystem::path& path, const RatingFormat& format);

/// Implicit-feedback corpus with dense ids.
///
/// Users are numbered in order of first appearance in the input. Items are
/// numbered by walking users in index order over their chronological
/// interactions, so a dataset rebuilt from its own split cache gets the same
/// ids.
struct Dataset {
  static constexpr std::int32_t kNoTest = -1;

  std::int32_t m = 0;
  std::int32_t n = 0;
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::unordered_map<std::string, std::int32_t> user_index;
  std::unordered_map<std::string, std::int32_t> item_index;

  std::vector<std::vector<std::int32_t>> train;  // chronological
  std::vector<std::int32_t> test_positive;       // kNoTest when the user is train-only
  std::vector<std::vector<std::int32_t>> item_users;
  std::vector<std::vector<std::int32_t>> seen;  // sorted train + test items per user

  /// Training interactions plus held-out positives.
  std::size_t interaction_count() const;
  std::size_t train_count() const;
  double density() const;
  bool interacted(std::int32_t user, std::int32_t item) const;
  /// Users holding a test positive, ascending.
  std::vector<std::int32_t> evaluated_users() const;
  /// Recompute item_users and seen from train/test_positive.
  void rebuild_indexes();
};

/// Binarize, deduplicate (the latest interaction of a repeated pair wins) and
/// reindex. Users with fewer than `min_user_interactions` distinct items are
/// dropped. Every interaction lands in `train`, sorted by timestamp with ties
/// kept in input order; no test positives yet.
Dataset build_dataset(const std::vector<RatingRecord>& records, int min_user_interactions);

/// Move each user's latest interaction to test_positive. Users with a single
/// interaction stay train-only.
Dataset leave_one_out_split(Dataset dataset);

/// One line per user: raw user id, tab, space-separated raw train items,
/// tab, raw test item (empty for train-only users).
std::string split_cache_text(const Dataset& dataset);
void write_split_cache(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_split_cache(const std::filesystem::path& path);
Dataset parse_split_cache(std::istream& in, const std::string& source = "<stream>");
/// 64-bit FNV-1a of the split cache text, as 16 hex digits.
std::string split_hash(const Dataset& dataset);

// ---------------------------------------------------------------------------
// Sampling

struct Pair {
  std::int32_t user = 0;
  std::int32_t item = 0;
};

/// `per_positive` label-0 pairs for every training positive, users in index
/// order and positives in chronological order. Items are drawn uniformly and
/// rejected while the user has interacted with them.
std::vector<Pair> sample_negatives(const Dataset& dataset, Rng& rng, int per_positive = 4);

struct Histories {
  std::vector<std::int32_t> user_hist;  // item ids
  std::vector<std::int32_t> item_hist;  // user ids
  bool user_empty = false;
  bool item_empty = false;
};

/// user_hist from train[u] without i, item_hist from item_users[i] without u.
/// A source with at least `length` elements is sampled without replacement,
/// a smaller one with replacement. An empty source sets the empty flag and
/// fills the slots with an id other than the target.
Histories sample_history(const Dataset& dataset, std::int32_t user, std::int32_t item, int label,
                         int length, Rng& rng);

/// Fixed-width arrays for one optimization step. History rows are
/// [B x H] row-major; keep flags are 0 where the history came back empty.
struct TrainBatch {
  int history_length = 0;
  std::vector<std::int32_t> users;
  std::vector<std::int32_t> items;
  std::vector<std::uint8_t> labels;
  std::vector<std::int32_t> user_hist;
  std::vector<std::int32_t> item_hist;
  std::vector<std::uint8_t> user_keep;
  std::vector<std::uint8_t> item_keep;

  std::size_t size() const { return users.size(); }
  void reserve(std::size_t rows);
  void append(std::int32_t user, std::int32_t item, std::uint8_t label, const Histories& h);
};

/// Positives and freshly drawn negatives for one epoch, shuffled.
struct EpochPlan {
  std::vector<std::int32_t> users;
  std::vector<std::int32_t> items;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return users.size(); }
};

EpochPlan plan_epoch(const Dataset& dataset, int neg_per_pos, Rng& rng);

/// Rows [begin, end) of the plan with freshly sampled histories.
TrainBatch assemble_batch(const Dataset& dataset, const EpochPlan& plan, std::size_t begin,
                          std::size_t end, int history_length, Rng& rng);

/// The test positive (slot 0) and the sampled negatives of one user, with the
/// user's history and one item history per candidate.
struct UserCandidates {
  std::int32_t user = 0;
  std::vector<std::int32_t> items;
  std::vector<std::int32_t> user_hist;
  bool user_empty = false;
  std::vector<std::int32_t> item_hists;  // [items x H]
  std::vector<std::uint8_t> item_keep;
};

struct EvalCandidates {
  int history_length = 0;
  int negatives = 0;
  std::vector<UserCandidates> users;
  std::size_t skipped_users = 0;  // too few non-interacted items
};

EvalCandidates build_eval_candidates(const Dataset& dataset, int history_length, Rng& rng,
                                     int negatives = 99);

}  // namespace comet
