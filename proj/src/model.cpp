#include "comet/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "comet/error.hpp"

namespace comet {

// ---------------------------------------------------------------------------
// Config

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::original_only: return "original_only";
    case Variant::interaction_only: return "interaction_only";
    case Variant::cnn_only: return "cnn_only";
    case Variant::mlp_only: return "mlp_only";
    case Variant::mf_baseline: return "mf_baseline";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::full, Variant::original_only, Variant::interaction_only, Variant::cnn_only,
                    Variant::mlp_only, Variant::mf_baseline})
    if (to_string(v) == name) return v;
  throw ConfigError("unknown model variant '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  for (Activation a : {Activation::relu, Activation::tanh, Activation::sigmoid})
    if (to_string(a) == name) return a;
  throw ConfigError("unknown activation '" + name + "'");
}

namespace {

Index cnn_shrink(Index d) { return (d - 3) / 2 + 1; }

}  // namespace

void ModelConfig::validate() const {
  if (K < 1) throw ConfigError("K must be >= 1");
  if (history_length < 1) throw ConfigError("history_length must be >= 1");
  if (channels < 1) throw ConfigError("channels must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (variant == Variant::full || variant == Variant::interaction_only) {
    if (filter_widths.empty()) throw ConfigError("filter_widths is empty");
    std::set<Index> distinct;
    for (Index w : filter_widths) {
      if (w < 1 || w > K)
        throw ConfigError("filter width " + std::to_string(w) + " outside [1, K=" + std::to_string(K) + "]");
      if (!distinct.insert(w).second) throw ConfigError("filter width " + std::to_string(w) + " repeated");
    }
    for (Index h : mlp_hidden)
      if (h < 1) throw ConfigError("mlp_hidden sizes must be >= 1");
  }
  if (variant == Variant::cnn_only && (history_length < 15 || K < 15))
    throw ConfigError("cnn_only needs history_length >= 15 and K >= 15 for three stride-2 3x3 layers, got " +
                      std::to_string(history_length) + " x " + std::to_string(K));
  if (variant == Variant::mlp_only && (mlp_only_layers < 1 || mlp_only_layers > 3))
    throw ConfigError("mlp_only_layers must lie in [1, 3]");
}

bool ModelConfig::uses_towers() const {
  return variant == Variant::full || variant == Variant::interaction_only || variant == Variant::cnn_only ||
         variant == Variant::mlp_only;
}

Index ModelConfig::concat_length() const {
  Index total = 0;
  for (Index w : filter_widths) total += channels * (K - w + 1);
  return total;
}

std::pair<Index, Index> ModelConfig::cnn_output_size() const {
  Index h = history_length, w = K;
  for (int l = 0; l < 3; ++l) {
    h = cnn_shrink(h);
    w = cnn_shrink(w);
  }
  return {h, w};
}

std::vector<Index> ModelConfig::mlp_only_hidden() const {
  std::vector<Index> sizes;
  for (int l = mlp_only_layers; l >= 1; --l) sizes.push_back(K << l);
  return sizes;
}

// ---------------------------------------------------------------------------
// Parameters

std::string tower_prefix(Side side) { return side == Side::user ? "user_tower" : "item_tower"; }

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config, std::int32_t users,
                                                            std::int32_t items) {
  config.validate();
  if (users < 1 || items < 1) throw ConfigError("model needs at least one user and one item");
  const Index K = config.K, H = config.history_length, C = config.channels;
  std::vector<std::pair<std::string, Shape>> layout{{"P", {users, K}}, {"Q", {items, K}}};
  if (config.variant == Variant::mf_baseline) return layout;
  layout.push_back({"h", {K}});
  if (!config.uses_towers()) return layout;

  for (Side side : {Side::user, Side::item}) {
    const std::string pre = tower_prefix(side) + ".";
    auto dense = [&](const std::vector<Index>& hidden, Index in) {
      for (std::size_t l = 0; l < hidden.size(); ++l) {
        layout.push_back({pre + "mlp." + std::to_string(l) + ".weight", {hidden[l], in}});
        layout.push_back({pre + "mlp." + std::to_string(l) + ".bias", {hidden[l]}});
        in = hidden[l];
      }
      layout.push_back({pre + "out.weight", {K, in}});
      layout.push_back({pre + "out.bias", {K}});
    };
    switch (config.variant) {
      case Variant::full:
      case Variant::interaction_only:
        for (Index w : config.filter_widths) {
          const std::string base = pre + "conv.w" + std::to_string(w);
          layout.push_back({base + ".kernel", {C, H, w}});
          layout.push_back({base + ".bias", {C}});
        }
        dense(config.mlp_hidden, config.concat_length());
        break;
      case Variant::cnn_only: {
        for (int l = 0; l < 3; ++l) {
          const std::string base = pre + "cnn." + std::to_string(l);
          layout.push_back({base + ".kernel", {C, l == 0 ? Index(1) : C, 3, 3}});
          layout.push_back({base + ".bias", {C}});
        }
        const auto [oh, ow] = config.cnn_output_size();
        dense({}, C * oh * ow);
        break;
      }
      case Variant::mlp_only:
        dense(config.mlp_only_hidden(), H * K);
        break;
      default:
        break;
    }
  }
  return layout;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

constexpr double kUniformInit = 0.05;

}  // namespace

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::init(const ModelConfig& config, std::int32_t users,
                                              std::int32_t items, std::uint64_t seed) {
  Rng rng = make_rng(seed, kInitStream);
  ModelParams out;
  for (auto& [name, shape] : parameter_layout(config, users, items)) {
    auto t = Tensor<Scalar>::zeros(shape, true);
    double limit = 0.0;
    if (name == "P" || name == "Q" || ends_with(name, ".kernel")) {
      limit = kUniformInit;
    } else if (name == "h") {
      limit = std::sqrt(6.0 / static_cast<double>(shape[0] + 1));
    } else if (ends_with(name, ".weight")) {
      limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    }
    if (limit > 0.0)
      for (Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * limit);
    out.add(name, std::move(t));
  }
  return out;
}

template <typename Scalar>
void ModelParams<Scalar>::add(const std::string& name, Tensor<Scalar> tensor) {
  if (!index_.emplace(name, names_.size()).second) throw ConfigError("parameter '" + name + "' registered twice");
  names_.push_back(name);
  tensors_.push_back(std::move(tensor));
}

template <typename Scalar>
Tensor<Scalar>& ModelParams<Scalar>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("no parameter named '" + name + "'");
  return tensors_[it->second];
}

template <typename Scalar>
const Tensor<Scalar>& ModelParams<Scalar>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("no parameter named '" + name + "'");
  return tensors_[it->second];
}

template <typename Scalar>
std::vector<Tensor<Scalar>> ModelParams<Scalar>::tensors() const {
  return tensors_;
}

template <typename Scalar>
Index ModelParams<Scalar>::scalar_count() const {
  Index total = 0;
  for (const auto& t : tensors_) total += t.size();
  return total;
}

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::clone() const {
  ModelParams out;
  for (std::size_t k = 0; k < names_.size(); ++k) out.add(names_[k], tensors_[k].clone());
  return out;
}

template <typename Scalar>
void ModelParams<Scalar>::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

template <typename Scalar>
void ModelParams<Scalar>::set_tracked(bool tracked) {
  for (auto& t : tensors_) t.set_tracked(tracked);
}

template class ModelParams<float>;
template class ModelParams<double>;

// ---------------------------------------------------------------------------
// Forward

template <typename Scalar>
EmbeddingMaps<Scalar> build_embedding_maps(const ModelParams<Scalar>& params,
                                           std::span<const std::int32_t> user_hist,
                                           std::span<const std::int32_t> item_hist, Index history_length) {
  if (history_length < 1 || user_hist.size() != item_hist.size() ||
      user_hist.size() % static_cast<std::size_t>(history_length) != 0 || user_hist.empty())
    throw ShapeError("build_embedding_maps: histories of " + std::to_string(user_hist.size()) + " and " +
                     std::to_string(item_hist.size()) + " ids do not form rows of " +
                     std::to_string(history_length));
  const Index rows = static_cast<Index>(user_hist.size()) / history_length;
  const Index K = params.get("Q").dim(1);
  Shape shape = rows == 1 ? Shape{history_length, K} : Shape{rows, history_length, K};
  EmbeddingMaps<Scalar> maps;
  maps.items_of_user = reshape(embed_lookup(params.get("Q"), user_hist), shape);
  maps.users_of_item = reshape(embed_lookup(params.get("P"), item_hist), shape);
  return maps;
}

namespace {

template <typename Scalar>
Tensor<Scalar> activate(const Tensor<Scalar>& x, Activation a) {
  switch (a) {
    case Activation::relu: return relu(x);
    case Activation::tanh: return tanh(x);
    case Activation::sigmoid: return sigmoid(x);
  }
  return x;
}

/// Hidden layers (activation then dropout) and the output projection.
template <typename Scalar>
Tensor<Scalar> dense_tower(const ModelParams<Scalar>& params, const std::string& pre, std::size_t hidden,
                           Tensor<Scalar> x, Activation act, double rate, bool training, Rng* rng) {
  for (std::size_t l = 0; l < hidden; ++l) {
    const std::string base = pre + "mlp." + std::to_string(l);
    x = activate(affine(x, params.get(base + ".weight"), params.get(base + ".bias")), act);
    if (training && rate > 0.0) x = dropout(x, rate, true, *rng);
  }
  return affine(x, params.get(pre + "out.weight"), params.get(pre + "out.bias"));
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> interaction_vector(const ModelParams<Scalar>& params, const ModelConfig& config, Side side,
                                  const Tensor<Scalar>& map, bool training, Rng* rng) {
  if (!config.uses_towers())
    throw ContractError("interaction_vector: variant " + to_string(config.variant) + " has no towers");
  if (training && config.dropout > 0.0 && rng == nullptr)
    throw ContractError("interaction_vector: training mode needs a generator");
  const Index H = config.history_length, K = config.K;
  const bool single = map.rank() == 2;
  if (!(single && map.dim(0) == H && map.dim(1) == K) && !(map.rank() == 3 && map.dim(1) == H && map.dim(2) == K))
    throw ShapeError("interaction_vector: map " + shape_string(map.shape()) + " does not match history " +
                     std::to_string(H) + " x K " + std::to_string(K));
  const Index B = single ? 1 : map.dim(0);
  const Tensor<Scalar> maps = single ? reshape(map, {1, H, K}) : map;
  const std::string pre = tower_prefix(side) + ".";

  Tensor<Scalar> out;
  switch (config.variant) {
    case Variant::full:
    case Variant::interaction_only: {
      std::vector<Tensor<Scalar>> features;
      for (Index w : config.filter_widths) {
        const std::string base = pre + "conv.w" + std::to_string(w);
        auto y = relu(conv_full_height(maps, params.get(base + ".kernel"), params.get(base + ".bias")));
        features.push_back(reshape(y, {B, y.dim(1) * y.dim(2)}));
      }
      auto c = features.size() == 1 ? features.front() : concat(features, 1);
      out = dense_tower(params, pre, config.mlp_hidden.size(), c, config.mlp_activation, config.dropout, training,
                        rng);
      break;
    }
    case Variant::cnn_only: {
      auto x = reshape(maps, {B, 1, H, K});
      for (int l = 0; l < 3; ++l) {
        const std::string base = pre + "cnn." + std::to_string(l);
        x = relu(conv2d(x, params.get(base + ".kernel"), params.get(base + ".bias"), 2));
      }
      out = dense_tower(params, pre, 0, reshape(x, {B, x.size() / B}), config.mlp_activation, config.dropout,
                        training, rng);
      break;
    }
    case Variant::mlp_only:
      out = dense_tower(params, pre, config.mlp_only_hidden().size(), reshape(maps, {B, H * K}),
                        config.mlp_activation, config.dropout, training, rng);
      break;
    default:
      break;
  }
  return single ? reshape(out, {K}) : out;
}

namespace {

template <typename Scalar>
Tensor<Scalar> ones(Index k) {
  return Tensor<Scalar>::full({k}, Scalar(1));
}

/// Pre-sigmoid score from target embeddings and (masked) interaction vectors.
template <typename Scalar>
Tensor<Scalar> combine(const ModelParams<Scalar>& params, const ModelConfig& config, const Tensor<Scalar>& p,
                       const Tensor<Scalar>& q, const Tensor<Scalar>& pp, const Tensor<Scalar>& qq) {
  const auto& h = params.get("h");
  switch (config.variant) {
    case Variant::original_only: return dot(h, elementwise_mul(p, q));
    case Variant::interaction_only: return dot(h, elementwise_mul(pp, qq));
    default: return dot(h, elementwise_mul(add(p, pp), add(q, qq)));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> predict_batch(const ModelParams<Scalar>& params, const ModelConfig& config, const TrainBatch& batch,
                             bool training, Rng* rng) {
  const Index B = static_cast<Index>(batch.size());
  if (B == 0) throw ShapeError("predict_batch: empty batch");
  auto p = embed_lookup(params.get("P"), batch.users);
  auto q = embed_lookup(params.get("Q"), batch.items);
  if (config.variant == Variant::mf_baseline) return sigmoid(dot(ones<Scalar>(config.K), elementwise_mul(p, q)));
  if (config.variant == Variant::original_only) return sigmoid(combine(params, config, p, q, p, q));

  if (batch.history_length != config.history_length)
    throw ShapeError("predict_batch: batch history length " + std::to_string(batch.history_length) +
                     " != configured " + std::to_string(config.history_length));
  const Index H = config.history_length, K = config.K;
  auto items_of_user = reshape(embed_lookup(params.get("Q"), batch.user_hist), {B, H, K});
  auto users_of_item = reshape(embed_lookup(params.get("P"), batch.item_hist), {B, H, K});
  auto pp = mask_rows(interaction_vector(params, config, Side::user, items_of_user, training, rng),
                      std::span<const std::uint8_t>(batch.user_keep));
  auto qq = mask_rows(interaction_vector(params, config, Side::item, users_of_item, training, rng),
                      std::span<const std::uint8_t>(batch.item_keep));
  return sigmoid(combine(params, config, p, q, pp, qq));
}

template <typename Scalar>
Scalar predict(const ModelParams<Scalar>& params, const ModelConfig& config, std::int32_t user, std::int32_t item,
               std::span<const std::int32_t> user_hist, std::span<const std::int32_t> item_hist) {
  const auto H = static_cast<std::size_t>(config.history_length);
  for (auto span : {user_hist, item_hist})
    if (!span.empty() && span.size() != H)
      throw ShapeError("predict: history of " + std::to_string(span.size()) + " ids, expected " + std::to_string(H));
  Histories h;
  h.user_empty = user_hist.empty();
  h.item_empty = item_hist.empty();
  h.user_hist = h.user_empty ? std::vector<std::int32_t>(H, 0) : std::vector<std::int32_t>(user_hist.begin(), user_hist.end());
  h.item_hist = h.item_empty ? std::vector<std::int32_t>(H, 0) : std::vector<std::int32_t>(item_hist.begin(), item_hist.end());
  TrainBatch batch;
  batch.history_length = static_cast<int>(H);
  batch.append(user, item, 0, h);
  return predict_batch(params, config, batch, false, nullptr).data()[0];
}

template <typename Scalar>
std::vector<Scalar> score_candidates(const ModelParams<Scalar>& params, const ModelConfig& config,
                                     const UserCandidates& candidates, Index history_length) {
  const Index C = static_cast<Index>(candidates.items.size());
  if (C == 0) return {};
  const std::vector<std::int32_t> users(static_cast<std::size_t>(C), candidates.user);
  auto p = embed_lookup(params.get("P"), users);
  auto q = embed_lookup(params.get("Q"), candidates.items);
  Tensor<Scalar> z;
  if (config.variant == Variant::mf_baseline) {
    z = dot(ones<Scalar>(config.K), elementwise_mul(p, q));
  } else if (config.variant == Variant::original_only) {
    z = combine(params, config, p, q, p, q);
  } else {
    if (history_length != config.history_length)
      throw ShapeError("score_candidates: candidate history length does not match the model");
    const Index H = config.history_length, K = config.K;
    auto items_of_user = reshape(embed_lookup(params.get("Q"), candidates.user_hist), {1, H, K});
    const std::uint8_t user_keep = candidates.user_empty ? 0 : 1;
    auto one = mask_rows(interaction_vector(params, config, Side::user, items_of_user, false, nullptr),
                         std::span<const std::uint8_t>(&user_keep, 1));
    auto pp = concat(std::vector<Tensor<Scalar>>(static_cast<std::size_t>(C), one), 0);
    auto users_of_item = reshape(embed_lookup(params.get("P"), candidates.item_hists), {C, H, K});
    auto qq = mask_rows(interaction_vector(params, config, Side::item, users_of_item, false, nullptr),
                        std::span<const std::uint8_t>(candidates.item_keep));
    z = combine(params, config, p, q, pp, qq);
  }
  auto y = sigmoid(z);
  return std::vector<Scalar>(y.data(), y.data() + y.size());
}

#define COMET_INSTANTIATE_MODEL(S)                                                                            \
  template EmbeddingMaps<S> build_embedding_maps(const ModelParams<S>&, std::span<const std::int32_t>,        \
                                                 std::span<const std::int32_t>, Index);                       \
  template Tensor<S> interaction_vector(const ModelParams<S>&, const ModelConfig&, Side, const Tensor<S>&,    \
                                        bool, Rng*);                                                          \
  template Tensor<S> predict_batch(const ModelParams<S>&, const ModelConfig&, const TrainBatch&, bool, Rng*); \
  template S predict(const ModelParams<S>&, const ModelConfig&, std::int32_t, std::int32_t,                   \
                     std::span<const std::int32_t>, std::span<const std::int32_t>);                           \
  template std::vector<S> score_candidates(const ModelParams<S>&, const ModelConfig&, const UserCandidates&,  \
                                           Index);

COMET_INSTANTIATE_MODEL(float)
COMET_INSTANTIATE_MODEL(double)

#undef COMET_INSTANTIATE_MODEL

}  // namespace comet
