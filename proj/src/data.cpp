#include "comet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "comet/error.hpp"

namespace comet {

// ---------------------------------------------------------------------------
// Ingestion

namespace {

std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

std::vector<RatingRecord> parse_ratings(std::istream& in, const RatingFormat& format,
                                        const std::string& source) {
  if (format.separator.empty()) throw ConfigError("rating format: empty separator");
  int needed = 0;
  for (int c : format.columns) {
    if (c < 0) throw ConfigError("rating format: negative column index");
    needed = std::max(needed, c + 1);
  }
  std::vector<RatingRecord> records;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no <= format.skip_lines) continue;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (trim(view).empty()) continue;
    const auto fields = split_fields(view, format.separator);
    auto fail = [&](const std::string& what) {
      return IngestionError(source + ":" + std::to_string(line_no) + ": " + what);
    };
    if (static_cast<int>(fields.size()) < needed)
      throw fail("expected " + std::to_string(needed) + " fields, found " + std::to_string(fields.size()));
    RatingRecord r;
    r.user = std::string(trim(fields[static_cast<std::size_t>(format.columns[0])]));
    r.item = std::string(trim(fields[static_cast<std::size_t>(format.columns[1])]));
    if (r.user.empty() || r.item.empty()) throw fail("empty user or item id");
    if (!parse_number(trim(fields[static_cast<std::size_t>(format.columns[2])]), r.rating))
      throw fail("bad rating '" + std::string(fields[static_cast<std::size_t>(format.columns[2])]) + "'");
    if (!parse_number(trim(fields[static_cast<std::size_t>(format.columns[3])]), r.timestamp))
      throw fail("bad timestamp '" + std::string(fields[static_cast<std::size_t>(format.columns[3])]) + "'");
    if (r.timestamp < 0) throw fail("negative timestamp");
    records.push_back(std::move(r));
  }
  if (in.bad()) throw IngestionError(source + ": read error");
  return records;
}

std::vector<RatingRecord> load_ratings(const std::filesystem::path& path, const RatingFormat& format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(path.string() + ": cannot open");
  return parse_ratings(in, format, path.string());
}

// ---------------------------------------------------------------------------
// Dataset

std::size_t Dataset::train_count() const {
  std::size_t total = 0;
  for (const auto& items : train) total += items.size();
  return total;
}

std::size_t Dataset::interaction_count() const {
  std::size_t total = train_count();
  for (std::int32_t t : test_positive)
    if (t != kNoTest) ++total;
  return total;
}

double Dataset::density() const {
  return static_cast<double>(interaction_count()) / (static_cast<double>(m) * static_cast<double>(n));
}

bool Dataset::interacted(std::int32_t user, std::int32_t item) const {
  const auto& s = seen[static_cast<std::size_t>(user)];
  return std::binary_search(s.begin(), s.end(), item);
}

std::vector<std::int32_t> Dataset::evaluated_users() const {
  std::vector<std::int32_t> users;
  for (std::int32_t u = 0; u < m; ++u)
    if (test_positive[static_cast<std::size_t>(u)] != kNoTest) users.push_back(u);
  return users;
}

void Dataset::rebuild_indexes() {
  item_users.assign(static_cast<std::size_t>(n), {});
  seen.assign(static_cast<std::size_t>(m), {});
  for (std::int32_t u = 0; u < m; ++u) {
    auto& s = seen[static_cast<std::size_t>(u)];
    for (std::int32_t i : train[static_cast<std::size_t>(u)]) {
      item_users[static_cast<std::size_t>(i)].push_back(u);
      s.push_back(i);
    }
    if (test_positive[static_cast<std::size_t>(u)] != kNoTest) s.push_back(test_positive[static_cast<std::size_t>(u)]);
    std::sort(s.begin(), s.end());
  }
}

namespace {

struct Event {
  std::string item;
  std::int64_t timestamp;
  std::size_t line;
};

bool earlier(const Event& a, const Event& b) {
  return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.line < b.line;
}

/// Dense ids from per-user chronological raw item lists (tests appended last).
Dataset index_users(std::vector<std::string> users, const std::vector<std::vector<std::string>>& items,
                    const std::vector<std::string>& tests) {
  Dataset d;
  d.m = static_cast<std::int32_t>(users.size());
  d.user_ids = std::move(users);
  for (std::int32_t u = 0; u < d.m; ++u) d.user_index.emplace(d.user_ids[static_cast<std::size_t>(u)], u);
  auto item_id = [&d](const std::string& raw) {
    auto [it, inserted] = d.item_index.emplace(raw, static_cast<std::int32_t>(d.item_ids.size()));
    if (inserted) d.item_ids.push_back(raw);
    return it->second;
  };
  d.train.resize(static_cast<std::size_t>(d.m));
  d.test_positive.assign(static_cast<std::size_t>(d.m), Dataset::kNoTest);
  for (std::size_t u = 0; u < items.size(); ++u) {
    for (const auto& raw : items[u]) d.train[u].push_back(item_id(raw));
    if (!tests[u].empty()) d.test_positive[u] = item_id(tests[u]);
  }
  d.n = static_cast<std::int32_t>(d.item_ids.size());
  d.rebuild_indexes();
  return d;
}

}  // namespace

Dataset build_dataset(const std::vector<RatingRecord>& records, int min_user_interactions) {
  if (records.empty()) throw EmptyDatasetError("build_dataset: no rating records");
  std::unordered_map<std::string, std::size_t> first_seen;
  std::vector<std::string> order;
  std::vector<std::unordered_map<std::string, Event>> latest;
  for (std::size_t line = 0; line < records.size(); ++line) {
    const RatingRecord& r = records[line];
    auto [it, inserted] = first_seen.emplace(r.user, order.size());
    if (inserted) {
      order.push_back(r.user);
      latest.emplace_back();
    }
    Event e{r.item, r.timestamp, line};
    auto& events = latest[it->second];
    auto [slot, fresh] = events.emplace(r.item, e);
    if (!fresh && earlier(slot->second, e)) slot->second = e;
  }

  std::vector<std::string> users;
  std::vector<std::vector<std::string>> items;
  for (std::size_t u = 0; u < order.size(); ++u) {
    if (static_cast<int>(latest[u].size()) < min_user_interactions) continue;
    std::vector<Event> events;
    events.reserve(latest[u].size());
    for (auto& [item, e] : latest[u]) events.push_back(e);
    std::sort(events.begin(), events.end(), earlier);
    users.push_back(order[u]);
    auto& list = items.emplace_back();
    for (auto& e : events) list.push_back(std::move(e.item));
  }
  if (users.empty())
    throw EmptyDatasetError("build_dataset: every user has fewer than " +
                            std::to_string(min_user_interactions) + " interactions");
  std::vector<std::string> tests(users.size());
  return index_users(std::move(users), items, tests);
}

Dataset leave_one_out_split(Dataset dataset) {
  for (std::int32_t u = 0; u < dataset.m; ++u) {
    auto& items = dataset.train[static_cast<std::size_t>(u)];
    auto& test = dataset.test_positive[static_cast<std::size_t>(u)];
    if (test != Dataset::kNoTest || items.size() < 2) continue;
    test = items.back();
    items.pop_back();
  }
  dataset.rebuild_indexes();
  return dataset;
}

// ---------------------------------------------------------------------------
// Split cache

std::string split_cache_text(const Dataset& dataset) {
  std::string out;
  for (std::int32_t u = 0; u < dataset.m; ++u) {
    out += dataset.user_ids[static_cast<std::size_t>(u)];
    out += '\t';
    const auto& items = dataset.train[static_cast<std::size_t>(u)];
    for (std::size_t k = 0; k < items.size(); ++k) {
      if (k) out += ' ';
      out += dataset.item_ids[static_cast<std::size_t>(items[k])];
    }
    out += '\t';
    const std::int32_t t = dataset.test_positive[static_cast<std::size_t>(u)];
    if (t != Dataset::kNoTest) out += dataset.item_ids[static_cast<std::size_t>(t)];
    out += '\n';
  }
  return out;
}

void write_split_cache(const Dataset& dataset, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError(path.string() + ": cannot write split cache");
  out << split_cache_text(dataset);
  if (!out) throw IngestionError(path.string() + ": write failed");
}

Dataset parse_split_cache(std::istream& in, const std::string& source) {
  std::vector<std::string> users;
  std::vector<std::vector<std::string>> items;
  std::vector<std::string> tests;
  std::unordered_map<std::string, int> dup;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line, "\t");
    if (fields.size() != 3)
      throw IngestionError(source + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields");
    std::string user(fields[0]);
    if (user.empty() || !dup.emplace(user, 1).second)
      throw IngestionError(source + ":" + std::to_string(line_no) + ": empty or repeated user '" + user + "'");
    auto& list = items.emplace_back();
    std::istringstream tokens{std::string(fields[1])};
    for (std::string tok; tokens >> tok;) list.push_back(tok);
    if (list.empty())
      throw IngestionError(source + ":" + std::to_string(line_no) + ": user without training items");
    users.push_back(std::move(user));
    tests.emplace_back(fields[2]);
  }
  if (users.empty()) throw EmptyDatasetError(source + ": empty split cache");
  return index_users(std::move(users), items, tests);
}

Dataset read_split_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(path.string() + ": cannot open split cache");
  return parse_split_cache(in, path.string());
}

std::string split_hash(const Dataset& dataset) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : split_cache_text(dataset)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Sampling

std::vector<Pair> sample_negatives(const Dataset& dataset, Rng& rng, int per_positive) {
  std::vector<Pair> out;
  out.reserve(dataset.train_count() * static_cast<std::size_t>(std::max(per_positive, 0)));
  for (std::int32_t u = 0; u < dataset.m; ++u) {
    const auto& items = dataset.train[static_cast<std::size_t>(u)];
    if (items.empty() || per_positive <= 0) continue;
    if (static_cast<std::int32_t>(dataset.seen[static_cast<std::size_t>(u)].size()) >= dataset.n)
      throw SamplingError("sample_negatives: user '" + dataset.user_ids[static_cast<std::size_t>(u)] +
                          "' has interacted with every item");
    for (std::size_t k = 0; k < items.size(); ++k)
      for (int d = 0; d < per_positive; ++d) {
        std::int32_t j;
        do j = static_cast<std::int32_t>(uniform_index(rng, static_cast<std::uint64_t>(dataset.n)));
        while (dataset.interacted(u, j));
        out.push_back({u, j});
      }
  }
  return out;
}

namespace {

/// Fill `out` with `length` ids from `source` minus `exclude`; returns false
/// (and fills with `filler`) when nothing is left to draw from.
bool draw_history(const std::vector<std::int32_t>& source, std::int32_t exclude, int length,
                  std::int32_t filler, Rng& rng, std::int32_t* out) {
  std::vector<std::int32_t> pool;
  pool.reserve(source.size());
  for (std::int32_t id : source)
    if (id != exclude) pool.push_back(id);
  const std::size_t size = pool.size();
  const auto len = static_cast<std::size_t>(length);
  if (size == 0) {
    std::fill_n(out, len, filler);
    return false;
  }
  if (size >= len) {
    for (std::size_t k = 0; k < len; ++k) {
      const std::size_t j = k + uniform_index(rng, size - k);
      std::swap(pool[k], pool[j]);
      out[k] = pool[k];
    }
  } else {
    for (std::size_t k = 0; k < len; ++k) out[k] = pool[uniform_index(rng, size)];
  }
  return true;
}

std::int32_t other_than(std::int32_t id, std::int32_t count) {
  return count > 1 ? (id + 1) % count : 0;
}

}  // namespace

Histories sample_history(const Dataset& dataset, std::int32_t user, std::int32_t item, int label,
                         int length, Rng& rng) {
  (void)label;  // exclusion is applied to every pair; it only matters for positives
  if (length < 1) throw ConfigError("sample_history: history length must be >= 1");
  Histories h;
  h.user_hist.resize(static_cast<std::size_t>(length));
  h.item_hist.resize(static_cast<std::size_t>(length));
  h.user_empty = !draw_history(dataset.train[static_cast<std::size_t>(user)], item, length,
                               other_than(item, dataset.n), rng, h.user_hist.data());
  h.item_empty = !draw_history(dataset.item_users[static_cast<std::size_t>(item)], user, length,
                               other_than(user, dataset.m), rng, h.item_hist.data());
  return h;
}

void TrainBatch::reserve(std::size_t rows) {
  users.reserve(rows);
  items.reserve(rows);
  labels.reserve(rows);
  user_hist.reserve(rows * static_cast<std::size_t>(history_length));
  item_hist.reserve(rows * static_cast<std::size_t>(history_length));
  user_keep.reserve(rows);
  item_keep.reserve(rows);
}

void TrainBatch::append(std::int32_t user, std::int32_t item, std::uint8_t label, const Histories& h) {
  if (static_cast<int>(h.user_hist.size()) != history_length ||
      static_cast<int>(h.item_hist.size()) != history_length)
    throw ContractError("TrainBatch::append: history width does not match the batch");
  users.push_back(user);
  items.push_back(item);
  labels.push_back(label);
  user_hist.insert(user_hist.end(), h.user_hist.begin(), h.user_hist.end());
  item_hist.insert(item_hist.end(), h.item_hist.begin(), h.item_hist.end());
  user_keep.push_back(h.user_empty ? 0 : 1);
  item_keep.push_back(h.item_empty ? 0 : 1);
}

EpochPlan plan_epoch(const Dataset& dataset, int neg_per_pos, Rng& rng) {
  EpochPlan plan;
  for (std::int32_t u = 0; u < dataset.m; ++u)
    for (std::int32_t i : dataset.train[static_cast<std::size_t>(u)]) {
      plan.users.push_back(u);
      plan.items.push_back(i);
      plan.labels.push_back(1);
    }
  for (const Pair& p : sample_negatives(dataset, rng, neg_per_pos)) {
    plan.users.push_back(p.user);
    plan.items.push_back(p.item);
    plan.labels.push_back(0);
  }
  for (std::size_t k = plan.size(); k > 1; --k) {
    const std::size_t j = uniform_index(rng, k);
    std::swap(plan.users[k - 1], plan.users[j]);
    std::swap(plan.items[k - 1], plan.items[j]);
    std::swap(plan.labels[k - 1], plan.labels[j]);
  }
  return plan;
}

TrainBatch assemble_batch(const Dataset& dataset, const EpochPlan& plan, std::size_t begin,
                          std::size_t end, int history_length, Rng& rng) {
  if (begin > end || end > plan.size()) throw IndexError("assemble_batch: row range outside the plan");
  TrainBatch batch;
  batch.history_length = history_length;
  batch.reserve(end - begin);
  for (std::size_t r = begin; r < end; ++r)
    batch.append(plan.users[r], plan.items[r], plan.labels[r],
                 sample_history(dataset, plan.users[r], plan.items[r], plan.labels[r], history_length, rng));
  return batch;
}

EvalCandidates build_eval_candidates(const Dataset& dataset, int history_length, Rng& rng, int negatives) {
  if (history_length < 1) throw ConfigError("build_eval_candidates: history length must be >= 1");
  if (negatives < 0) throw ConfigError("build_eval_candidates: negative count must be >= 0");
  EvalCandidates out;
  out.history_length = history_length;
  out.negatives = negatives;
  const auto len = static_cast<std::size_t>(history_length);
  for (std::int32_t u : dataset.evaluated_users()) {
    const auto& seen = dataset.seen[static_cast<std::size_t>(u)];
    if (static_cast<std::int64_t>(dataset.n) - static_cast<std::int64_t>(seen.size()) < negatives) {
      ++out.skipped_users;
      continue;
    }
    UserCandidates c;
    c.user = u;
    const std::int32_t positive = dataset.test_positive[static_cast<std::size_t>(u)];
    c.items.push_back(positive);
    std::vector<std::int32_t> chosen;
    while (static_cast<int>(chosen.size()) < negatives) {
      const auto j = static_cast<std::int32_t>(uniform_index(rng, static_cast<std::uint64_t>(dataset.n)));
      if (dataset.interacted(u, j) || std::find(chosen.begin(), chosen.end(), j) != chosen.end()) continue;
      chosen.push_back(j);
      c.items.push_back(j);
    }
    c.user_hist.resize(len);
    c.user_empty = !draw_history(dataset.train[static_cast<std::size_t>(u)], positive, history_length,
                                 other_than(positive, dataset.n), rng, c.user_hist.data());
    c.item_hists.resize(c.items.size() * len);
    for (std::size_t k = 0; k < c.items.size(); ++k) {
      const std::int32_t item = c.items[k];
      const bool ok = draw_history(dataset.item_users[static_cast<std::size_t>(item)], u, history_length,
                                   other_than(u, dataset.m), rng, c.item_hists.data() + k * len);
      c.item_keep.push_back(ok ? 1 : 0);
    }
    out.users.push_back(std::move(c));
  }
  return out;
}

}  // namespace comet
