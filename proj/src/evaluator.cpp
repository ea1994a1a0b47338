#include "comet/evaluator.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "comet/error.hpp"

namespace comet {

template <typename Scalar>
int rank_of_positive(std::span<const Scalar> scores, std::size_t positive_index) {
  if (positive_index >= scores.size())
    throw IndexError("rank_of_positive: positive index " + std::to_string(positive_index) + " outside " +
                     std::to_string(scores.size()) + " scores");
  for (Scalar s : scores)
    if (std::isnan(s)) throw ContractError("rank_of_positive: NaN score");
  const Scalar target = scores[positive_index];
  int rank = 1;
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (k != positive_index && scores[k] >= target) ++rank;
  return rank;
}

template int rank_of_positive(std::span<const float>, std::size_t);
template int rank_of_positive(std::span<const double>, std::size_t);

double ndcg_at_k(int rank, int k) {
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

namespace {

std::size_t cutoff_slot(const std::vector<int>& cutoffs, int k) {
  for (std::size_t c = 0; c < cutoffs.size(); ++c)
    if (cutoffs[c] == k) return c;
  throw IndexError("cutoff " + std::to_string(k) + " was not evaluated");
}

}  // namespace

double EvalReport::hr_at(int k) const { return hr[cutoff_slot(cutoffs, k)]; }
double EvalReport::ndcg_at(int k) const { return ndcg[cutoff_slot(cutoffs, k)]; }

EvalReport evaluate_scores(const EvalCandidates& candidates, const Scorer& scorer, const std::vector<int>& cutoffs) {
  if (cutoffs.empty()) throw ConfigError("evaluate: no cutoffs");
  for (int k : cutoffs)
    if (k < 1) throw ConfigError("evaluate: cutoffs must be >= 1");
  EvalReport report;
  report.cutoffs = cutoffs;
  report.skipped_users = candidates.skipped_users;
  std::vector<double> hr_sum(cutoffs.size(), 0.0), ndcg_sum(cutoffs.size(), 0.0);
  for (const auto& user : candidates.users) {
    const std::vector<double> scores = scorer(user);
    if (scores.size() != user.items.size())
      throw ContractError("evaluate: scorer returned " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(user.items.size()) + " candidates");
    const int rank = rank_of_positive(std::span<const double>(scores), 0);
    report.users.push_back(user.user);
    report.ranks.push_back(rank);
    for (std::size_t c = 0; c < cutoffs.size(); ++c) {
      hr_sum[c] += hr_at_k(rank, cutoffs[c]);
      ndcg_sum[c] += ndcg_at_k(rank, cutoffs[c]);
    }
  }
  const double count = static_cast<double>(report.users.size());
  for (std::size_t c = 0; c < cutoffs.size(); ++c) {
    report.hr.push_back(count > 0 ? hr_sum[c] / count : 0.0);
    report.ndcg.push_back(count > 0 ? ndcg_sum[c] / count : 0.0);
  }
  return report;
}

template <typename Scalar>
EvalReport evaluate(const ModelParams<Scalar>& params, const ModelConfig& config, const EvalCandidates& candidates,
                    const std::vector<int>& cutoffs) {
  // Untracked copy: evaluation records no graph.
  ModelParams<Scalar> frozen = params.clone();
  frozen.set_tracked(false);
  const Index H = candidates.history_length;
  return evaluate_scores(
      candidates,
      [&](const UserCandidates& user) {
        const std::vector<Scalar> s = score_candidates(frozen, config, user, H);
        return std::vector<double>(s.begin(), s.end());
      },
      cutoffs);
}

template EvalReport evaluate(const ModelParams<float>&, const ModelConfig&, const EvalCandidates&,
                             const std::vector<int>&);
template EvalReport evaluate(const ModelParams<double>&, const ModelConfig&, const EvalCandidates&,
                             const std::vector<int>&);

std::string metric_columns(const std::vector<int>& cutoffs) {
  std::string out;
  for (int k : cutoffs) {
    if (!out.empty()) out += ',';
    out += "hr" + std::to_string(k) + ",ndcg" + std::to_string(k);
  }
  return out;
}

std::string metric_values(const EvalReport& report) {
  std::string out;
  char buf[64];
  for (std::size_t c = 0; c < report.cutoffs.size(); ++c) {
    std::snprintf(buf, sizeof buf, "%s%.6f,%.6f", c ? "," : "", report.hr[c], report.ndcg[c]);
    out += buf;
  }
  return out;
}

void write_eval_csv(const EvalReport& report, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot write");
  out << "evaluated_users,skipped_users," << metric_columns(report.cutoffs) << '\n'
      << report.evaluated() << ',' << report.skipped_users << ',' << metric_values(report) << '\n';
}

void write_rank_dump(const EvalReport& report, const Dataset& dataset, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot write");
  for (std::size_t k = 0; k < report.users.size(); ++k)
    out << dataset.user_ids[static_cast<std::size_t>(report.users[k])] << '\t' << report.ranks[k] << '\n';
}

}  // namespace comet
