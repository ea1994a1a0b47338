#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "comet/data.hpp"
#include "comet/evaluator.hpp"
#include "comet/model.hpp"

namespace comet {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // coupled: added to the gradient as weight_decay * theta
};

/// First and second moments of one parameter.
template <typename Scalar>
struct AdamMoments {
  typename Tensor<Scalar>::Vector m;
  typename Tensor<Scalar>::Vector v;
};

template <typename Scalar>
struct OptimState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<AdamMoments<Scalar>> moments;  // registry order
};

/// Bias-corrected Adam update of `param` at step `step` (>= 1).
template <typename Scalar>
void adam_step(Tensor<Scalar>& param, const typename Tensor<Scalar>::Vector& grad, AdamMoments<Scalar>& moments,
               std::int64_t step, const AdamConfig& config);

/// Advance the step counter and update every parameter from its gradient.
template <typename Scalar>
void adam_update(ModelParams<Scalar>& params, OptimState<Scalar>& state);

/// lambda * sum of squares over every trainable array.
template <typename Scalar>
Tensor<Scalar> regularization(const ModelParams<Scalar>& params, double lambda);

struct TrainHyper {
  double lr = 1e-3;
  double lambda = 1e-6;
  int epochs = 30;
  int batch_size = 256;
  int neg_per_pos = 4;
  std::uint64_t seed = 42;
  int eval_every = 0;  // 0 disables mid-training evaluation
  std::vector<int> cutoffs{5, 10};

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;       // BCE per sample
  double regularization = 0.0;  // lambda * sum of squares after the epoch
  double seconds = 0.0;
  std::optional<EvalReport> eval;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
};

/// Called after every epoch with the record just completed.
using EpochCallback = std::function<void(const EpochRecord&)>;

template <typename Scalar>
struct TrainResult {
  ModelParams<Scalar> params;
  TrainReport report;
};

/// Mini-batch training of BCE + lambda * ||theta||^2 with Adam. `candidates`
/// is used for evaluation every `eval_every` epochs when given.
template <typename Scalar>
TrainResult<Scalar> train(const Dataset& dataset, const ModelConfig& config, const TrainHyper& hyper,
                          const EvalCandidates* candidates = nullptr, const EpochCallback& on_epoch = {});

/// Same, continuing from given parameters.
template <typename Scalar>
TrainResult<Scalar> train_from(ModelParams<Scalar> params, const Dataset& dataset, const ModelConfig& config,
                               const TrainHyper& hyper, const EvalCandidates* candidates = nullptr,
                               const EpochCallback& on_epoch = {});

}  // namespace comet
