#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "comet/data.hpp"
#include "comet/error.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "toy.hpp"

using namespace comet;

namespace {

std::vector<RatingRecord> parse(const std::string& text, RatingFormat format = RatingFormat::csv()) {
  std::istringstream in(text);
  return parse_ratings(in, format, "fixture");
}

Dataset split(const std::string& csv, int threshold = 0) {
  return leave_one_out_split(build_dataset(parse(csv), threshold));
}

std::vector<std::string> raw_items(const Dataset& d, const std::vector<std::int32_t>& ids) {
  std::vector<std::string> out;
  for (auto id : ids) out.push_back(d.item_ids[static_cast<std::size_t>(id)]);
  return out;
}

std::int32_t user_of(const Dataset& d, const std::string& raw) { return d.user_index.at(raw); }
std::int32_t item_of(const Dataset& d, const std::string& raw) { return d.item_index.at(raw); }

const std::filesystem::path kData = COMET_DATA_DIR;

}  // namespace

TEST_SUITE("data") {

TEST_CASE("load_ratings parses delimited text") {
  CHECK(parse("").empty());
  const auto one = parse("u1,i9,5.0,100\n");
  REQUIRE(one.size() == 1);
  CHECK(one[0].user == "u1");
  CHECK(one[0].item == "i9");
  CHECK(one[0].rating == 5.0);
  CHECK(one[0].timestamp == 100);

  const auto ml1m = parse("1::1193::5::978300760\n1::661::3::978302109\n", RatingFormat::movielens_1m());
  REQUIRE(ml1m.size() == 2);
  CHECK(ml1m[1].item == "661");

  RatingFormat reordered{";", {3, 2, 1, 0}, 1};
  const auto r = parse("header\n7;4.5;itemA;userB\n", reordered);
  REQUIRE(r.size() == 1);
  CHECK(r[0].user == "userB");
  CHECK(r[0].item == "itemA");
  CHECK(r[0].timestamp == 7);
}

TEST_CASE("malformed lines carry their location") {
  try {
    parse("u1,i1,5,10\nu2,i2,oops,11\n");
    FAIL("expected an ingestion error");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find("fixture:2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse("u1,i1,5\n"), IngestionError);
  CHECK_THROWS_AS(parse("u1,i1,5,-3\n"), IngestionError);
  CHECK_THROWS_AS(load_ratings("/nonexistent/ratings.csv", RatingFormat::csv()), IngestionError);
}

TEST_CASE("MovieLens-100K statistics") {
  const auto path = kData / "ml-100k" / "u.data";
  if (!std::filesystem::exists(path)) {
    MESSAGE("ml-100k not present; run tools/fetch_movielens.sh");
    return;
  }
  const auto records = load_ratings(path, RatingFormat::movielens_100k());
  CHECK(records.size() == 100000);
  const Dataset d = leave_one_out_split(build_dataset(records, 0));
  CHECK(d.m == 943);
  CHECK(d.n == 1682);
  CHECK(d.interaction_count() == 100000);
  CHECK(d.density() == doctest::Approx(100000.0 / (943.0 * 1682.0)));
}

TEST_CASE("MovieLens-1M statistics") {
  const auto path = kData / "ml-1m" / "ratings.dat";
  if (!std::filesystem::exists(path)) {
    MESSAGE("ml-1m not present; skipped");
    return;
  }
  const auto records = load_ratings(path, RatingFormat::movielens_1m());
  CHECK(records.size() == 1000209);
  const Dataset d = build_dataset(records, 0);
  CHECK(d.m == 6040);
  CHECK(d.n == 3706);
  CHECK(d.density() == doctest::Approx(0.04468).epsilon(1e-4));
}

TEST_CASE("build_dataset filters and binarizes") {
  std::string csv = "lonely,i1,1,5\n";
  for (int k = 0; k < 10; ++k) csv += "busy,i" + std::to_string(k) + ",2.5," + std::to_string(100 + k) + "\n";
  const Dataset d = build_dataset(parse(csv), 10);
  CHECK(d.m == 1);
  CHECK(d.user_index.count("lonely") == 0);
  CHECK(d.train[0].size() == 10);
  CHECK_THROWS_AS(build_dataset(parse("a,i1,1,1\n"), 10), EmptyDatasetError);
  CHECK_THROWS_AS(build_dataset({}, 0), EmptyDatasetError);

  // repeated pair keeps its latest occurrence
  const Dataset dup = build_dataset(parse("a,x,1,1\na,y,1,2\na,x,1,3\n"), 0);
  CHECK(raw_items(dup, dup.train[0]) == std::vector<std::string>{"y", "x"});
  CHECK(dup.interaction_count() == 2);
}

TEST_CASE("leave_one_out_split holds out the latest item") {
  const Dataset d = split("u,i3,5,1\nu,i7,5,9\nu,i2,5,4\n");
  CHECK(raw_items(d, {d.test_positive[0]}) == std::vector<std::string>{"i7"});
  CHECK(raw_items(d, d.train[0]) == std::vector<std::string>{"i3", "i2"});

  const Dataset two = split("u,a,1,1\nu,b,1,2\n");
  CHECK(two.train[0].size() == 1);
  CHECK(two.test_positive[0] == item_of(two, "b"));

  // ties go to the later line
  const Dataset tie = split("u,a,1,5\nu,b,1,5\nu,c,1,1\n");
  CHECK(tie.test_positive[0] == item_of(tie, "b"));

  // single-interaction users stay train-only
  const Dataset single = split("u,a,1,1\nu,b,1,2\nv,a,1,3\n");
  CHECK(single.test_positive[user_of(single, "v")] == Dataset::kNoTest);
  CHECK(single.evaluated_users() == std::vector<std::int32_t>{user_of(single, "u")});
}

TEST_CASE("split equals a brute-force scan") {
  for (auto [users, items, seed] : std::vector<std::array<int, 3>>{{3, 3, 1}, {50, 40, 2}, {50, 30, 3}}) {
    auto recs = toy::records(users, items, 1, std::min(items, 12), static_cast<std::uint64_t>(seed));
    // add repeats and timestamp ties
    recs.push_back(recs[0]);
    recs.push_back({recs[1].user, recs[2].item, 3.0, recs[1].timestamp});
    for (int threshold : {0, 5}) {
      const auto expect = oracle::split_by_scan(recs, threshold);
      Dataset d;
      try {
        d = leave_one_out_split(build_dataset(recs, threshold));
      } catch (const EmptyDatasetError&) {
        CHECK(expect.empty());
        continue;
      }
      REQUIRE(static_cast<std::size_t>(d.m) == expect.size());
      for (std::int32_t u = 0; u < d.m; ++u) {
        const auto& e = expect.at(d.user_ids[static_cast<std::size_t>(u)]);
        CHECK(raw_items(d, d.train[static_cast<std::size_t>(u)]) == e.train);
        const auto t = d.test_positive[static_cast<std::size_t>(u)];
        CHECK((t == Dataset::kNoTest ? std::string() : d.item_ids[static_cast<std::size_t>(t)]) == e.test);
      }
    }
  }
}

TEST_CASE("dataset invariants") {
  const Dataset d = toy::dataset(60, 45, 2, 20, 5);
  std::size_t train = 0, transposed = 0;
  for (const auto& items : d.train) train += items.size();
  for (const auto& users : d.item_users) transposed += users.size();
  CHECK(train == transposed);
  CHECK(d.train_count() == train);
  for (std::int32_t u = 0; u < d.m; ++u) {
    const auto& items = d.train[static_cast<std::size_t>(u)];
    CHECK(!items.empty());
    const auto t = d.test_positive[static_cast<std::size_t>(u)];
    if (t != Dataset::kNoTest) CHECK(std::find(items.begin(), items.end(), t) == items.end());
    for (auto i : items) {
      const auto& users = d.item_users[static_cast<std::size_t>(i)];
      CHECK(std::count(users.begin(), users.end(), u) == 1);
    }
  }
  const auto recs = toy::records(60, 45, 2, 20, 5);
  std::set<std::pair<std::string, std::string>> distinct;
  for (const auto& r : recs) distinct.insert({r.user, r.item});
  CHECK(d.interaction_count() == distinct.size());
}

TEST_CASE("split cache round trip") {
  const Dataset d = toy::dataset(30, 25, 1, 9, 8);
  const auto dir = toy::scratch("split_cache");
  write_split_cache(d, dir / "split.tsv");
  const Dataset back = read_split_cache(dir / "split.tsv");
  CHECK(split_cache_text(back) == split_cache_text(d));
  CHECK(split_hash(back) == split_hash(d));
  CHECK(back.user_ids == d.user_ids);
  CHECK(back.item_ids == d.item_ids);
  CHECK(back.train == d.train);
  CHECK(back.test_positive == d.test_positive);
  CHECK(split_hash(d).size() == 16);

  std::istringstream broken("u1\ti1 i2\n");
  CHECK_THROWS_AS(parse_split_cache(broken), IngestionError);
}

TEST_CASE("sample_negatives") {
  const Dataset d = toy::dataset(20, 30, 2, 10, 9);
  Rng rng = make_rng(1, 0);
  const auto negatives = sample_negatives(d, rng);
  CHECK(negatives.size() == 4 * d.train_count());
  for (const auto& p : negatives) CHECK_FALSE(d.interacted(p.user, p.item));

  // all but one item: every draw is forced
  std::string csv;
  for (int k = 0; k < 6; ++k) csv += "a,i" + std::to_string(k) + ",1," + std::to_string(k) + "\n";
  csv += "b,i6,1,10\nb,i0,1,11\n";
  const Dataset forced = split(csv);
  const auto only = sample_negatives(forced, rng);
  for (const auto& p : only)
    if (p.user == user_of(forced, "a")) CHECK(p.item == item_of(forced, "i6"));

  csv += "a,i6,1,20\n";
  CHECK_THROWS_AS(sample_negatives(split(csv), rng), SamplingError);
}

TEST_CASE("negative draws are uniform over eligible items") {
  // user u has 2 of 102 items; 100 remain eligible
  std::string csv = "u,i0,1,1\nu,i1,1,2\n";
  for (int k = 2; k < 102; ++k) csv += "v" + std::to_string(k) + ",i" + std::to_string(k) + ",1," + std::to_string(k) + "\n";
  const Dataset d = split(csv);
  const auto u = user_of(d, "u");
  Rng rng = make_rng(2, 0);
  std::vector<int> counts(static_cast<std::size_t>(d.n), 0);
  int draws = 0;
  while (draws < 100000)
    for (const auto& p : sample_negatives(d, rng))
      if (p.user == u) {
        ++counts[static_cast<std::size_t>(p.item)];
        ++draws;
      }
  const double expect = draws / 100.0, sigma = std::sqrt(draws * 0.01 * 0.99);
  double chi2 = 0.0;
  int eligible = 0;
  for (std::int32_t j = 0; j < d.n; ++j) {
    if (d.interacted(u, j)) {
      CHECK(counts[static_cast<std::size_t>(j)] == 0);
      continue;
    }
    ++eligible;
    const double c = counts[static_cast<std::size_t>(j)];
    CHECK(std::abs(c - expect) < 4.5 * sigma);
    chi2 += (c - expect) * (c - expect) / expect;
  }
  CHECK(eligible == 100);
  CHECK(chi2 < 160.0);  // 99 degrees of freedom
}

TEST_CASE("sample_history") {
  Rng rng = make_rng(3, 0);
  const Dataset d = split("u,a,1,1\nu,b,1,2\nu,c,1,3\nu,z,1,9\nw,a,1,4\nw,y,1,10\n");
  const auto u = user_of(d, "u");
  for (int rep = 0; rep < 50; ++rep) {
    const auto h = sample_history(d, u, item_of(d, "b"), 1, 2, rng);
    for (auto i : h.user_hist) CHECK((i == item_of(d, "a") || i == item_of(d, "c")));
    CHECK(h.user_hist[0] != h.user_hist[1]);
  }

  const auto w = user_of(d, "w");
  const auto filled = sample_history(d, w, item_of(d, "c"), 0, 3, rng);
  CHECK(filled.user_hist == std::vector<std::int32_t>(3, item_of(d, "a")));
  CHECK_FALSE(filled.user_empty);

  // item b has only u: excluding u leaves nothing
  const auto empty = sample_history(d, u, item_of(d, "b"), 1, 3, rng);
  CHECK(empty.item_empty);
  for (auto id : empty.item_hist) CHECK((id >= 0 && id < d.m));

  std::string csv;
  for (int k = 0; k < 81; ++k) csv += "big,i" + std::to_string(k) + ",1," + std::to_string(k) + "\n";
  const Dataset big = split(csv);
  const auto target = item_of(big, "i5");
  const auto h = sample_history(big, 0, target, 1, 50, rng);
  std::set<std::int32_t> distinct(h.user_hist.begin(), h.user_hist.end());
  CHECK(distinct.size() == 50);
  CHECK(distinct.count(target) == 0);
  for (auto i : distinct) {
    const auto& items = big.train[0];
    CHECK(std::find(items.begin(), items.end(), i) != items.end());
  }
}

TEST_CASE("training batches respect target exclusion") {
  const Dataset d = toy::dataset(40, 30, 2, 12, 4);
  Rng rng = make_rng(5, 0);
  const EpochPlan plan = plan_epoch(d, 4, rng);
  CHECK(plan.size() == 5 * d.train_count());
  CHECK(std::count(plan.labels.begin(), plan.labels.end(), 1) == static_cast<long>(d.train_count()));
  const int H = 6;
  const TrainBatch batch = assemble_batch(d, plan, 0, plan.size(), H, rng);
  REQUIRE(batch.size() == plan.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (int s = 0; s < H; ++s) {
      const auto i = batch.user_hist[b * H + s];
      const auto u = batch.item_hist[b * H + s];
      CHECK((i >= 0 && i < d.n));
      CHECK((u >= 0 && u < d.m));
      if (batch.labels[b] == 1) {
        if (batch.user_keep[b]) CHECK(i != batch.items[b]);
        if (batch.item_keep[b]) CHECK(u != batch.users[b]);
      }
    }
    if (batch.labels[b] == 1) CHECK(d.interacted(batch.users[b], batch.items[b]));
    else CHECK_FALSE(d.interacted(batch.users[b], batch.items[b]));
  }
  CHECK_THROWS_AS(assemble_batch(d, plan, 0, plan.size() + 1, H, rng), IndexError);
}

TEST_CASE("sampling is a pure function of the seed") {
  const Dataset d = toy::dataset(30, 25, 2, 10, 6);
  auto run = [&](std::uint64_t seed) {
    Rng rng = make_rng(seed, kTrainStream);
    const auto plan = plan_epoch(d, 4, rng);
    const auto batch = assemble_batch(d, plan, 0, plan.size(), 5, rng);
    Rng eval = make_rng(seed, kEvalStream);
    const auto cands = build_eval_candidates(d, 5, eval, 10);
    std::vector<std::int32_t> flat = batch.user_hist;
    flat.insert(flat.end(), batch.items.begin(), batch.items.end());
    for (const auto& c : cands.users) flat.insert(flat.end(), c.items.begin(), c.items.end());
    return flat;
  };
  CHECK(run(42) == run(42));
  CHECK(run(42) != run(43));
}

TEST_CASE("evaluation candidates") {
  const auto path = kData / "ml-100k" / "u.data";
  const Dataset d = std::filesystem::exists(path)
                        ? leave_one_out_split(build_dataset(load_ratings(path, RatingFormat::movielens_100k()), 0))
                        : toy::dataset(200, 300, 2, 60, 10);
  Rng rng = make_rng(7, kEvalStream);
  const int H = 8;
  const EvalCandidates c = build_eval_candidates(d, H, rng);
  CHECK(c.users.size() + c.skipped_users == d.evaluated_users().size());
  for (const auto& uc : c.users) {
    REQUIRE(uc.items.size() == 100);
    CHECK(uc.items[0] == d.test_positive[static_cast<std::size_t>(uc.user)]);
    std::set<std::int32_t> distinct(uc.items.begin(), uc.items.end());
    CHECK(distinct.size() == 100);
    const auto& train = d.train[static_cast<std::size_t>(uc.user)];
    for (std::size_t k = 1; k < uc.items.size(); ++k) {
      CHECK(std::find(train.begin(), train.end(), uc.items[k]) == train.end());
      CHECK(uc.items[k] != uc.items[0]);
    }
    CHECK(uc.user_hist.size() == static_cast<std::size_t>(H));
    CHECK(uc.item_hists.size() == 100u * H);
    for (auto i : uc.user_hist) CHECK(i != uc.items[0]);
  }

  // a user who has seen all but a few items is skipped
  std::string csv;
  for (int k = 0; k < 10; ++k) csv += "a,i" + std::to_string(k) + ",1," + std::to_string(k) + "\n";
  csv += "b,i0,1,20\nb,i1,1,21\n";
  Rng small = make_rng(8, 0);
  const EvalCandidates few = build_eval_candidates(split(csv), 2, small, 99);
  CHECK(few.users.empty());
  CHECK(few.skipped_users == 2);
}

}  // TEST_SUITE
