#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "comet/data.hpp"
#include "comet/model.hpp"

namespace comet {

/// 1 + candidates scoring strictly higher + other candidates scoring equal:
/// the positive loses every tie.
template <typename Scalar>
int rank_of_positive(std::span<const Scalar> scores, std::size_t positive_index);

inline int hr_at_k(int rank, int k) { return rank <= k ? 1 : 0; }
double ndcg_at_k(int rank, int k);

struct EvalReport {
  std::vector<int> cutoffs;
  std::vector<double> hr;    // per cutoff, mean over evaluated users
  std::vector<double> ndcg;  // per cutoff
  std::vector<std::int32_t> users;
  std::vector<int> ranks;  // per evaluated user
  std::size_t skipped_users = 0;

  std::size_t evaluated() const { return users.size(); }
  double hr_at(int k) const;
  double ndcg_at(int k) const;
};

/// Scores for every candidate of one user, positive in slot 0.
using Scorer = std::function<std::vector<double>(const UserCandidates&)>;

EvalReport evaluate_scores(const EvalCandidates& candidates, const Scorer& scorer,
                           const std::vector<int>& cutoffs = {5, 10});

/// Evaluation-mode ranking of every candidate list.
template <typename Scalar>
EvalReport evaluate(const ModelParams<Scalar>& params, const ModelConfig& config,
                    const EvalCandidates& candidates, const std::vector<int>& cutoffs = {5, 10});

/// "hr5,ndcg5,hr10,ndcg10" for the default cutoffs.
std::string metric_columns(const std::vector<int>& cutoffs);
/// Values in the order of metric_columns, fixed 6-digit precision.
std::string metric_values(const EvalReport& report);

/// Header plus one row: evaluated_users, skipped_users, then the metrics.
void write_eval_csv(const EvalReport& report, const std::filesystem::path& path);
/// One line per evaluated user: raw user id, tab, rank.
void write_rank_dump(const EvalReport& report, const Dataset& dataset, const std::filesystem::path& path);

}  // namespace comet
