#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "comet/data.hpp"
#include "comet/tensor.hpp"

namespace comet {

enum class Variant { full, original_only, interaction_only, cnn_only, mlp_only, mf_baseline };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

enum class Activation { relu, tanh, sigmoid };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

enum class Side { user, item };

struct ModelConfig {
  Index K = 128;
  Index history_length = 50;
  Index channels = 8;
  std::vector<Index> filter_widths{1, 8, 32, 128};
  std::vector<Index> mlp_hidden{512, 256};
  Activation mlp_activation = Activation::relu;
  double dropout = 0.3;
  Variant variant = Variant::full;
  int mlp_only_layers = 2;  // hidden layers of the mlp_only tower: K*2^L, ..., K*2

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
  bool uses_towers() const;
  bool uses_embeddings_only() const { return variant == Variant::mf_baseline; }
  /// Length of the flattened multi-width convolution features.
  Index concat_length() const;
  /// Spatial size after the three stride-2 3x3 layers of cnn_only.
  std::pair<Index, Index> cnn_output_size() const;
  std::vector<Index> mlp_only_hidden() const;
};

/// Trainable arrays under unique names, in a fixed registration order.
template <typename Scalar>
class ModelParams {
 public:
  static ModelParams init(const ModelConfig& config, std::int32_t users, std::int32_t items,
                          std::uint64_t seed);

  void add(const std::string& name, Tensor<Scalar> tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<Scalar>& get(const std::string& name);
  const Tensor<Scalar>& get(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<Scalar>> tensors() const;
  std::size_t size() const { return names_.size(); }
  Index scalar_count() const;

  /// Deep copy with the same tracked flags.
  ModelParams clone() const;
  void zero_grad();
  void set_tracked(bool tracked);

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    for (const auto& name : names_) {
      const auto& t = get(name);
      std::vector<Other> values(static_cast<std::size_t>(t.size()));
      for (Index k = 0; k < t.size(); ++k) values[static_cast<std::size_t>(k)] = static_cast<Other>(t.data()[k]);
      out.add(name, Tensor<Other>::from_values(t.shape(), std::move(values), t.tracked()));
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<Scalar>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// "user_tower" or "item_tower"; the user tower reads the map of the user's
/// items (rows of Q), the item tower the map of the item's users (rows of P).
std::string tower_prefix(Side side);

/// Names and shapes every parameter of `config` must have.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config,
                                                            std::int32_t users, std::int32_t items);

template <typename Scalar>
struct EmbeddingMaps {
  Tensor<Scalar> items_of_user;  // E_i, rows of Q
  Tensor<Scalar> users_of_item;  // E_u, rows of P
};

/// Histories hold `history_length` ids per sample; a single sample gives
/// [H x K] maps, several give [B x H x K].
template <typename Scalar>
EmbeddingMaps<Scalar> build_embedding_maps(const ModelParams<Scalar>& params,
                                           std::span<const std::int32_t> user_hist,
                                           std::span<const std::int32_t> item_hist,
                                           Index history_length);

/// Interaction vector of one tower: [H x K] map gives [K], [B x H x K] gives
/// [B x K]. `rng` is only read in training mode.
template <typename Scalar>
Tensor<Scalar> interaction_vector(const ModelParams<Scalar>& params, const ModelConfig& config,
                                  Side side, const Tensor<Scalar>& map, bool training, Rng* rng);

/// Scores of a batch, [B]. Dropout is active only with `training`.
template <typename Scalar>
Tensor<Scalar> predict_batch(const ModelParams<Scalar>& params, const ModelConfig& config,
                             const TrainBatch& batch, bool training, Rng* rng);

/// Evaluation-mode score of one pair. An empty history span stands for an
/// empty history and contributes a zero interaction vector.
template <typename Scalar>
Scalar predict(const ModelParams<Scalar>& params, const ModelConfig& config, std::int32_t user,
               std::int32_t item, std::span<const std::int32_t> user_hist,
               std::span<const std::int32_t> item_hist);

/// Evaluation-mode scores of every candidate of one user; the user side is
/// computed once.
template <typename Scalar>
std::vector<Scalar> score_candidates(const ModelParams<Scalar>& params, const ModelConfig& config,
                                     const UserCandidates& candidates, Index history_length);

}  // namespace comet
