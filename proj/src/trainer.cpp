#include "comet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "comet/error.hpp"

namespace comet {

template <typename Scalar>
void adam_step(Tensor<Scalar>& param, const typename Tensor<Scalar>::Vector& grad, AdamMoments<Scalar>& moments,
               std::int64_t step, const AdamConfig& config) {
  if (grad.size() != param.size() || step < 1)
    throw ContractError("adam_step: gradient of " + std::to_string(grad.size()) + " entries for parameter of " +
                        std::to_string(param.size()) + ", step " + std::to_string(step));
  using Vector = typename Tensor<Scalar>::Vector;
  if (moments.m.size() != param.size()) moments.m = Vector::Zero(param.size());
  if (moments.v.size() != param.size()) moments.v = Vector::Zero(param.size());
  const Scalar b1 = static_cast<Scalar>(config.beta1);
  const Scalar b2 = static_cast<Scalar>(config.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(config.beta1, static_cast<double>(step)));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(config.beta2, static_cast<double>(step)));
  const Scalar lr = static_cast<Scalar>(config.lr);
  const Scalar eps = static_cast<Scalar>(config.eps);
  const Scalar wd = static_cast<Scalar>(config.weight_decay);

  auto theta = param.values().array();
  auto m = moments.m.array();
  auto v = moments.v.array();
  const auto g = (grad.array() + wd * theta).eval();
  m = b1 * m + (Scalar(1) - b1) * g;
  v = b2 * v + (Scalar(1) - b2) * g * g;
  theta -= lr * (m / c1) / ((v / c2).sqrt() + eps);
}

template <typename Scalar>
void adam_update(ModelParams<Scalar>& params, OptimState<Scalar>& state) {
  if (state.moments.size() != params.size()) state.moments.resize(params.size());
  ++state.step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& t = params.get(params.names()[k]);
    adam_step(t, t.grad(), state.moments[k], state.step, state.config);
  }
}

template <typename Scalar>
Tensor<Scalar> regularization(const ModelParams<Scalar>& params, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("regularization: lambda must be >= 0");
  return scale(sum_squares(params.tensors()), static_cast<Scalar>(lambda));
}

void TrainHyper::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (neg_per_pos < 0) throw ConfigError("neg_per_pos must be >= 0");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
}

namespace {

template <typename Scalar>
std::string parameter_norms(const ModelParams<Scalar>& params) {
  std::ostringstream os;
  for (const auto& name : params.names()) {
    const auto& t = params.get(name);
    double sq = 0.0;
    for (Index k = 0; k < t.size(); ++k) sq += static_cast<double>(t.data()[k]) * static_cast<double>(t.data()[k]);
    os << "\n  " << name << " " << shape_string(t.shape()) << " |theta| = " << std::sqrt(sq);
  }
  return os.str();
}

}  // namespace

template <typename Scalar>
TrainResult<Scalar> train_from(ModelParams<Scalar> params, const Dataset& dataset, const ModelConfig& config,
                               const TrainHyper& hyper, const EvalCandidates* candidates,
                               const EpochCallback& on_epoch) {
  hyper.validate();
  config.validate();
  params.set_tracked(true);
  Rng rng = make_rng(hyper.seed, kTrainStream);
  OptimState<Scalar> state;
  state.config.lr = hyper.lr;
  const int H = static_cast<int>(config.history_length);
  const auto batch_size = static_cast<std::size_t>(hyper.batch_size);

  TrainReport report;
  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const EpochPlan plan = plan_epoch(dataset, hyper.neg_per_pos, rng);
    double bce_total = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < plan.size(); begin += batch_size, ++batch_index) {
      const std::size_t end = std::min(plan.size(), begin + batch_size);
      const TrainBatch batch = assemble_batch(dataset, plan, begin, end, H, rng);
      params.zero_grad();
      const auto scores = predict_batch(params, config, batch, true, &rng);
      const auto count = static_cast<Index>(batch.labels.size());
      const auto labels =
          Tensor<Scalar>::from_values({count}, std::vector<Scalar>(batch.labels.begin(), batch.labels.end()));
      const auto bce = bce_loss(scores, labels);
      const auto loss = hyper.lambda > 0.0 ? add(bce, regularization(params, hyper.lambda)) : bce;
      if (!std::isfinite(static_cast<double>(loss.item())))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index) + "; parameter norms:" + parameter_norms(params));
      backward(loss);
      adam_update(params, state);
      bce_total += static_cast<double>(bce.item());
    }

    EpochRecord record;
    record.epoch = epoch;
    record.mean_loss = plan.size() ? bce_total / static_cast<double>(plan.size()) : 0.0;
    {
      ModelParams<Scalar> frozen = params.clone();
      frozen.set_tracked(false);
      record.regularization = static_cast<double>(regularization(frozen, hyper.lambda).item());
    }
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (candidates && hyper.eval_every > 0 && epoch % hyper.eval_every == 0)
      record.eval = evaluate(params, config, *candidates, hyper.cutoffs);
    report.epochs.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return {std::move(params), std::move(report)};
}

template <typename Scalar>
TrainResult<Scalar> train(const Dataset& dataset, const ModelConfig& config, const TrainHyper& hyper,
                          const EvalCandidates* candidates, const EpochCallback& on_epoch) {
  return train_from(ModelParams<Scalar>::init(config, dataset.m, dataset.n, hyper.seed), dataset, config, hyper,
                    candidates, on_epoch);
}

#define COMET_INSTANTIATE_TRAINER(S)                                                                         \
  template void adam_step(Tensor<S>&, const typename Tensor<S>::Vector&, AdamMoments<S>&, std::int64_t,      \
                          const AdamConfig&);                                                                \
  template void adam_update(ModelParams<S>&, OptimState<S>&);                                                \
  template Tensor<S> regularization(const ModelParams<S>&, double);                                          \
  template TrainResult<S> train_from(ModelParams<S>, const Dataset&, const ModelConfig&, const TrainHyper&,  \
                                     const EvalCandidates*, const EpochCallback&);                           \
  template TrainResult<S> train(const Dataset&, const ModelConfig&, const TrainHyper&, const EvalCandidates*, \
                                const EpochCallback&);

COMET_INSTANTIATE_TRAINER(float)
COMET_INSTANTIATE_TRAINER(double)

#undef COMET_INSTANTIATE_TRAINER

}  // namespace comet
