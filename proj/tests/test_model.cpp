#include <algorithm>
#include <cmath>
#include <numeric>

#include "comet/error.hpp"
#include "comet/model.hpp"
#include "comet/trainer.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "toy.hpp"

using namespace comet;
using P = ModelParams<double>;

namespace {

using toy::all_params;
using toy::column;
using toy::full_loss_check;
using toy::scramble;
using toy::toy_batch;

}  // namespace

TEST_SUITE("model") {

TEST_CASE("configuration checks") {
  ModelConfig c;
  CHECK(c.concat_length() == 2776);
  CHECK(c.cnn_output_size() == std::pair<Index, Index>{5, 15});
  CHECK(c.mlp_only_hidden() == std::vector<Index>{512, 256});
  c.validate();

  ModelConfig wide = c;
  wide.filter_widths = {1, 129};
  CHECK_THROWS_AS(wide.validate(), ConfigError);
  ModelConfig cnn = c;
  cnn.variant = Variant::cnn_only;
  cnn.history_length = 14;
  CHECK_THROWS_AS(cnn.validate(), ConfigError);
  cnn.history_length = 15;
  cnn.validate();
  CHECK_THROWS_AS(parse_variant("cnn"), ConfigError);
  for (auto v : {Variant::full, Variant::original_only, Variant::interaction_only, Variant::cnn_only,
                 Variant::mlp_only, Variant::mf_baseline})
    CHECK(parse_variant(to_string(v)) == v);
}

TEST_CASE("parameter registry") {
  const ModelConfig c;
  const auto layout = parameter_layout(c, 943, 1682);
  std::set<std::string> names;
  for (const auto& [name, shape] : layout) CHECK(names.insert(name).second);
  const P params = P::init(c, 943, 1682, 1);
  CHECK(params.names().size() == layout.size());
  CHECK(params.get("P").shape() == Shape{943, 128});
  CHECK(params.get("Q").shape() == Shape{1682, 128});
  CHECK(params.get("h").shape() == Shape{128});
  CHECK(params.get("user_tower.conv.w32.kernel").shape() == Shape{8, 50, 32});
  CHECK(params.get("item_tower.mlp.0.weight").shape() == Shape{512, 2776});
  CHECK(params.get("item_tower.mlp.1.weight").shape() == Shape{256, 512});
  CHECK(params.get("user_tower.out.weight").shape() == Shape{128, 256});

  ModelConfig one = c;
  one.filter_widths = {1};
  CHECK(one.concat_length() == one.channels * one.K);
  for (const auto& [name, shape] : parameter_layout(one, 10, 10))
    if (name.find(".conv.") != std::string::npos && name.find(".kernel") != std::string::npos) CHECK(shape.back() == 1);

  ModelConfig mf = c;
  mf.variant = Variant::mf_baseline;
  CHECK(parameter_layout(mf, 3, 4).size() == 2);
}

TEST_CASE("initialization ranges") {
  const ModelConfig c = toy::ablation_config();
  const P params = P::init(c, 30, 40, 3);
  for (const auto& name : params.names()) {
    const auto& t = params.get(name);
    const auto max_abs = t.values().cwiseAbs().maxCoeff();
    CAPTURE(name);
    if (name == "P" || name == "Q" || name.ends_with(".kernel")) CHECK(max_abs <= 0.05);
    else if (name == "h") CHECK(max_abs <= std::sqrt(6.0 / (c.K + 1)));
    else if (name.ends_with(".weight")) CHECK(max_abs <= std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1))));
    else CHECK(max_abs == 0.0);
    if (!name.ends_with(".bias")) CHECK(max_abs > 0.0);
  }
  const P again = P::init(c, 30, 40, 3);
  for (const auto& name : params.names()) CHECK(params.get(name).values() == again.get(name).values());
}

TEST_CASE("embedding maps") {
  ModelConfig c = toy::tiny_config();
  c.history_length = 1;
  P params = P::init(c, 4, 6, 2);
  const std::vector<std::int32_t> uh{3}, ih{2};
  const auto maps = build_embedding_maps(params, std::span<const std::int32_t>(uh), std::span<const std::int32_t>(ih), 1);
  CHECK(maps.items_of_user.shape() == Shape{1, c.K});
  CHECK(std::equal(maps.items_of_user.data(), maps.items_of_user.data() + c.K, params.get("Q").data() + 3 * c.K));
  CHECK(std::equal(maps.users_of_item.data(), maps.users_of_item.data() + c.K, params.get("P").data() + 2 * c.K));

  const std::vector<std::int32_t> dup{5, 5, 1}, users{1, 1, 0};
  const auto d3 = build_embedding_maps(params, std::span<const std::int32_t>(dup), std::span<const std::int32_t>(users), 3);
  CHECK(std::equal(d3.items_of_user.data(), d3.items_of_user.data() + c.K, d3.items_of_user.data() + c.K));

  // gradient reaches Q through the map
  const auto check = oracle::finite_differences({{"Q", params.get("Q")}}, [&] {
    const auto m = build_embedding_maps(params, std::span<const std::int32_t>(dup), std::span<const std::int32_t>(users), 3);
    return sum_squares(std::vector<Tensor<double>>{m.items_of_user});
  });
  CHECK(check.max_rel < 1e-6);
  CHECK(check.checked == static_cast<std::size_t>(2 * c.K));
}

TEST_CASE("interaction vector on a zero map is zero") {
  for (auto variant : {Variant::full, Variant::cnn_only, Variant::mlp_only}) {
    ModelConfig c = toy::ablation_config();
    c.variant = variant;
    const P params = P::init(c, 5, 5, 4);
    const auto zero = Tensor<double>::zeros({c.history_length, c.K});
    const auto v = interaction_vector(params, c, Side::user, zero, false, nullptr);
    CHECK(v.shape() == Shape{c.K});
    CHECK(v.values().cwiseAbs().maxCoeff() == 0.0);
  }
  ModelConfig mlp = toy::tiny_config();
  mlp.variant = Variant::mlp_only;
  mlp.history_length = 1;
  CHECK(parameter_layout(mlp, 2, 2)[3].second == Shape{mlp.K * 4, mlp.K});
}

TEST_CASE("predict matches the straight-line oracle") {
  const Dataset d = toy::tiny();
  for (auto variant : {Variant::full, Variant::original_only, Variant::interaction_only, Variant::mlp_only,
                       Variant::mf_baseline, Variant::cnn_only}) {
    ModelConfig c = variant == Variant::cnn_only ? toy::ablation_config() : toy::tiny_config();
    c.variant = variant;
    CAPTURE(to_string(variant));
    for (auto act : {Activation::relu, Activation::tanh, Activation::sigmoid}) {
      c.mlp_activation = act;
      P params = P::init(c, d.m, d.n, 5);
      scramble(params, 6);
      const oracle::StraightLine line(params, c);
      const auto H = static_cast<std::size_t>(c.history_length);
      const TrainBatch batch = toy_batch(d, static_cast<int>(H), 8);
      double worst = 0;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto uh = column(batch.user_hist, b, H), ih = column(batch.item_hist, b, H);
        const double got = predict(params, c, batch.users[b], batch.items[b], std::span<const std::int32_t>(uh),
                                   std::span<const std::int32_t>(ih));
        worst = std::max(worst, std::abs(got - line.predict(batch.users[b], batch.items[b], uh, ih)));
        // empty histories
        const double bare = predict(params, c, batch.users[b], batch.items[b], {}, {});
        worst = std::max(worst, std::abs(bare - line.predict(batch.users[b], batch.items[b], {}, {})));
      }
      CHECK(worst < 1e-12);
    }
  }
}

TEST_CASE("MF is recovered with zero interaction vectors and unit h") {
  const Dataset d = toy::small();
  const ModelConfig c = toy::tiny_config();
  P params = P::init(c, d.m, d.n, 9);
  scramble(params, 10);
  for (const std::string side : {"user_tower", "item_tower"}) {
    params.get(side + ".out.weight").values().setZero();
    params.get(side + ".out.bias").values().setZero();
  }
  params.get("h").values().setOnes();
  Rng rng = make_rng(11, 0);
  const auto H = static_cast<int>(c.history_length);
  double worst = 0;
  for (int k = 0; k < 200; ++k) {
    const auto u = static_cast<std::int32_t>(uniform_index(rng, static_cast<std::uint64_t>(d.m)));
    const auto i = static_cast<std::int32_t>(uniform_index(rng, static_cast<std::uint64_t>(d.n)));
    const auto h = sample_history(d, u, i, 0, H, rng);
    const double got = predict(params, c, u, i, std::span<const std::int32_t>(h.user_hist),
                               std::span<const std::int32_t>(h.item_hist));
    double s = 0;
    for (Index j = 0; j < c.K; ++j) s += params.get("P").data()[u * c.K + j] * params.get("Q").data()[i * c.K + j];
    worst = std::max(worst, std::abs(got - 1.0 / (1.0 + std::exp(-s))));
  }
  CHECK(worst < 1e-12);

  P zero = P::init(c, d.m, d.n, 9);
  for (const auto& name : zero.names()) zero.get(name).values().setZero();
  const std::vector<std::int32_t> hist(static_cast<std::size_t>(H), 0);
  CHECK(predict(zero, c, 0, 0, std::span<const std::int32_t>(hist), std::span<const std::int32_t>(hist)) == 0.5);
}

TEST_CASE("batched scores equal single predictions bitwise") {
  const Dataset d = toy::dataset(30, 120, 2, 40, 12);
  for (auto variant : {Variant::full, Variant::mf_baseline, Variant::cnn_only, Variant::mlp_only}) {
    ModelConfig c = toy::ablation_config();
    c.variant = variant;
    CAPTURE(to_string(variant));
    const P params = P::init(c, d.m, d.n, 13);
    const auto H = static_cast<std::size_t>(c.history_length);
    const TrainBatch batch = toy_batch(d, static_cast<int>(H), 14);
    const auto scores = predict_batch(params, c, batch, false, nullptr);
    bool equal = true;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto uh = column(batch.user_hist, b, H), ih = column(batch.item_hist, b, H);
      const double single = predict(params, c, batch.users[b], batch.items[b],
                                    std::span<const std::int32_t>(batch.user_keep[b] ? uh : std::vector<std::int32_t>{}),
                                    std::span<const std::int32_t>(batch.item_keep[b] ? ih : std::vector<std::int32_t>{}));
      equal &= single == scores.data()[b];
      CHECK(scores.data()[b] > 0.0);
      CHECK(scores.data()[b] < 1.0);
    }
    CHECK(equal);

    // permuted batch gives permuted scores
    std::vector<std::size_t> order(batch.size());
    std::iota(order.begin(), order.end(), 0);
    std::reverse(order.begin(), order.end());
    TrainBatch permuted;
    permuted.history_length = batch.history_length;
    for (auto b : order) {
      Histories h;
      h.user_hist = column(batch.user_hist, b, H);
      h.item_hist = column(batch.item_hist, b, H);
      h.user_empty = !batch.user_keep[b];
      h.item_empty = !batch.item_keep[b];
      permuted.append(batch.users[b], batch.items[b], batch.labels[b], h);
    }
    const auto again = predict_batch(params, c, permuted, false, nullptr);
    bool permuted_equal = true;
    for (std::size_t k = 0; k < order.size(); ++k) permuted_equal &= again.data()[k] == scores.data()[order[k]];
    CHECK(permuted_equal);

    // candidate lists score like single calls
    Rng rng = make_rng(15, kEvalStream);
    const auto cands = build_eval_candidates(d, static_cast<int>(H), rng, 60);
    REQUIRE(!cands.users.empty());
    for (const auto& uc : std::vector<UserCandidates>(cands.users.begin(), cands.users.begin() + 3)) {
      const auto listed = score_candidates(params, c, uc, c.history_length);
      bool same = true;
      for (std::size_t k = 0; k < uc.items.size(); ++k) {
        const auto ih = column(uc.item_hists, k, H);
        const double single = predict(
            params, c, uc.user, uc.items[k], std::span<const std::int32_t>(uc.user_empty ? std::vector<std::int32_t>{} : uc.user_hist),
            std::span<const std::int32_t>(uc.item_keep[k] ? ih : std::vector<std::int32_t>{}));
        same &= single == listed[k];
      }
      CHECK(same);
    }
  }
}

TEST_CASE("single precision scoring is deterministic and in range") {
  const Dataset d = toy::small();
  const ModelConfig c = toy::tiny_config();
  const auto params = ModelParams<float>::init(c, d.m, d.n, 16);
  const TrainBatch batch = toy_batch(d, static_cast<int>(c.history_length), 17);
  const auto a = predict_batch(params, c, batch, false, nullptr);
  const auto b = predict_batch(params, c, batch, false, nullptr);
  CHECK(a.values() == b.values());
  for (Index k = 0; k < a.size(); ++k) CHECK((a.data()[k] > 0.0f && a.data()[k] < 1.0f));
}

TEST_CASE("towers share no parameters") {
  const Dataset d = toy::small();
  const ModelConfig c = toy::tiny_config();
  P params = P::init(c, d.m, d.n, 18);
  scramble(params, 19);
  Rng rng = make_rng(20, 0);
  const auto h = sample_history(d, 0, 1, 0, static_cast<int>(c.history_length), rng);
  const auto maps = build_embedding_maps(params, std::span<const std::int32_t>(h.user_hist),
                                         std::span<const std::int32_t>(h.item_hist), c.history_length);
  const auto q_before = interaction_vector(params, c, Side::item, maps.users_of_item, false, nullptr);
  const auto p_before = interaction_vector(params, c, Side::user, maps.items_of_user, false, nullptr);
  for (const auto& name : params.names())
    if (name.rfind("user_tower.", 0) == 0) params.get(name).values().setZero();
  const auto q_after = interaction_vector(params, c, Side::item, maps.users_of_item, false, nullptr);
  const auto p_after = interaction_vector(params, c, Side::user, maps.items_of_user, false, nullptr);
  CHECK(q_before.values() == q_after.values());
  CHECK(p_before.values() != p_after.values());
}

TEST_CASE("dropout is off in evaluation and repeatable in training") {
  const Dataset d = toy::small();
  ModelConfig c = toy::tiny_config();
  c.dropout = 0.5;
  const P params = P::init(c, d.m, d.n, 21);
  const TrainBatch batch = toy_batch(d, static_cast<int>(c.history_length), 22);
  CHECK(predict_batch(params, c, batch, false, nullptr).values() == predict_batch(params, c, batch, false, nullptr).values());
  Rng a = make_rng(1, 0), b = make_rng(1, 0), other = make_rng(2, 0);
  const auto ta = predict_batch(params, c, batch, true, &a);
  CHECK(ta.values() == predict_batch(params, c, batch, true, &b).values());
  CHECK(ta.values() != predict_batch(params, c, batch, true, &other).values());
}

TEST_CASE("full loss gradients on a 4-user corpus") {
  const Dataset d = toy::tiny();
  for (auto variant : {Variant::full, Variant::original_only, Variant::interaction_only, Variant::mlp_only,
                       Variant::mf_baseline}) {
    ModelConfig c = toy::tiny_config();
    c.variant = variant;
    CAPTURE(to_string(variant));
    const auto check = full_loss_check(d, c, 1e-3, 23);
    CAPTURE(check.worst);
    CHECK(check.max_rel < 1e-4);
    CHECK(check.checked > 0);
  }
}

TEST_CASE("cnn_only gradients") {
  const Dataset d = toy::tiny();
  ModelConfig c = toy::ablation_config();
  c.variant = Variant::cnn_only;
  c.history_length = 15;
  c.K = 16;
  const auto check = full_loss_check(d, c, 0.0, 24);
  CAPTURE(check.worst);
  CHECK(check.max_rel < 1e-4);
}

}  // TEST_SUITE
