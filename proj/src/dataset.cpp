#include "cel/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string_view>

namespace cel {

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error("cannot replace " + path.string());
  }
}

// ---------------------------------------------------------------------------
// IdMap

Index IdMap::intern(const std::string& raw) {
  auto [it, inserted] = to_dense_.try_emplace(raw, static_cast<Index>(to_raw_.size()));
  if (inserted) to_raw_.push_back(raw);
  return it->second;
}

std::optional<Index> IdMap::find(const std::string& raw) const {
  auto it = to_dense_.find(raw);
  if (it == to_dense_.end()) return std::nullopt;
  return it->second;
}

void IdMap::save(const std::filesystem::path& path) const {
  std::ostringstream out;
  for (std::size_t i = 0; i < to_raw_.size(); ++i) out << to_raw_[i] << '\t' << i << '\n';
  write_file_atomic(path, out.str());
}

IdMap IdMap::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  IdMap map;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(path.string() + ":" + std::to_string(lineno) + ": missing tab");
    const std::string raw = line.substr(0, tab);
    std::size_t dense = 0;
    const char* b = line.data() + tab + 1;
    const char* e = line.data() + line.size();
    if (auto r = std::from_chars(b, e, dense); r.ec != std::errc() || r.ptr != e)
      throw Error(path.string() + ":" + std::to_string(lineno) + ": bad dense index");
    if (dense != map.size() || map.find(raw))
      throw Error(path.string() + ":" + std::to_string(lineno) + ": indices must be dense and unique");
    map.intern(raw);
  }
  return map;
}

// ---------------------------------------------------------------------------
// InteractionView

InteractionView::Groups InteractionView::build(std::span<const Interaction> xs, Side side) {
  auto key = [side](const Interaction& x) { return side == Side::kItem ? x.item : x.user; };
  std::vector<std::uint32_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return key(xs[a]) < key(xs[b]); });
  Groups g;
  g.positions = std::move(order);
  for (std::size_t p = 0; p < g.positions.size(); ++p) {
    const Index id = key(xs[g.positions[p]]);
    if (g.ids.empty() || g.ids.back() != id) {
      g.ids.push_back(id);
      g.offsets.push_back(static_cast<std::uint32_t>(p));
    }
  }
  g.offsets.push_back(static_cast<std::uint32_t>(g.positions.size()));
  return g;
}

InteractionView::InteractionView(std::vector<Interaction> interactions)
    : interactions_(std::move(interactions)) {
  if (interactions_.size() > std::numeric_limits<std::uint32_t>::max())
    throw Error("too many interactions for one view");
  users_ = build(interactions_, Side::kUser);
  items_ = build(interactions_, Side::kItem);
}

std::span<const std::uint32_t> InteractionView::slot_positions(Side side, std::size_t slot) const {
  const Groups& g = groups(side);
  return std::span<const std::uint32_t>(g.positions).subspan(g.offsets[slot],
                                                              g.offsets[slot + 1] - g.offsets[slot]);
}

std::span<const std::uint32_t> InteractionView::positions(Side side, Index entity) const {
  const Groups& g = groups(side);
  auto it = std::lower_bound(g.ids.begin(), g.ids.end(), entity);
  if (it == g.ids.end() || *it != entity) return {};
  return slot_positions(side, static_cast<std::size_t>(it - g.ids.begin()));
}

// ---------------------------------------------------------------------------
// InteractionStore

InteractionStore::InteractionStore(std::vector<Interaction> interactions, std::size_t num_users,
                                   std::size_t num_items, std::shared_ptr<const IdMaps> maps)
    : num_users_(num_users), num_items_(num_items), maps_(std::move(maps)) {
  for (const auto& x : interactions) {
    if (x.user >= num_users || x.item >= num_items) throw Error("interaction index out of range");
    if (!std::isfinite(x.rating)) throw Error("non-finite rating");
  }
  view_ = InteractionView(std::move(interactions));
}

std::vector<std::size_t> InteractionStore::counts(Side side) const {
  std::vector<std::size_t> c(num_entities(side), 0);
  for (const auto& x : interactions()) ++c[side == Side::kItem ? x.item : x.user];
  return c;
}

InteractionStore InteractionStore::subset(std::span<const std::size_t> positions) const {
  std::vector<Interaction> xs;
  xs.reserve(positions.size());
  for (std::size_t p : positions) xs.push_back(interactions()[p]);
  return InteractionStore(std::move(xs), num_users_, num_items_, maps_);
}

// ---------------------------------------------------------------------------
// Loading

DatasetFormat parse_format(const std::string& name) {
  if (name == "mldat" || name == "dat") return DatasetFormat::kMovieLensDat;
  if (name == "csv") return DatasetFormat::kCsv;
  throw Error("unknown dataset format '" + name + "' (expected mldat or csv)");
}

namespace {

struct RawRecord {
  std::string user;
  std::string item;
  double rating;
  std::optional<std::int64_t> timestamp;
};

std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

template <class Sink>
void read_records(const std::filesystem::path& path, DatasetFormat format, Sink&& sink) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  const std::string_view sep = format == DatasetFormat::kCsv ? "," : "::";
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw Error(path.string() + ": line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    if (format == DatasetFormat::kCsv && lineno == 1) {
      auto header = split_fields(trim(line), sep);
      if (header.size() < 3 || trim(header[0]) != "user" || trim(header[1]) != "item" ||
          trim(header[2]) != "rating")
        fail("expected header user,item,rating[,timestamp]");
      continue;
    }
    auto f = split_fields(trim(line), sep);
    if (f.size() != 3 && f.size() != 4) fail("expected 3 or 4 fields, got " + std::to_string(f.size()));
    RawRecord rec{std::string(trim(f[0])), std::string(trim(f[1])), 0.0, std::nullopt};
    if (rec.user.empty() || rec.item.empty()) fail("empty id");
    if (!parse_number(f[2], rec.rating) || !std::isfinite(rec.rating)) fail("bad rating");
    if (f.size() == 4) {
      std::int64_t ts = 0;
      if (!parse_number(f[3], ts)) fail("bad timestamp");
      rec.timestamp = ts;
    }
    sink(std::move(rec));
  }
}

}  // namespace

InteractionStore load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  auto maps = std::make_shared<IdMaps>();
  std::vector<Interaction> xs;
  read_records(path, format, [&](RawRecord rec) {
    xs.push_back({maps->users.intern(rec.user), maps->items.intern(rec.item), rec.rating, rec.timestamp});
  });
  const std::size_t n = maps->users.size();
  const std::size_t m = maps->items.size();
  return InteractionStore(std::move(xs), n, m, std::move(maps));
}

InteractionStore load_dataset(const std::filesystem::path& path, DatasetFormat format,
                              std::shared_ptr<const IdMaps> maps, std::size_t* dropped) {
  if (!maps) throw Error("load_dataset: ID maps required");
  std::vector<Interaction> xs;
  std::size_t skipped = 0;
  read_records(path, format, [&](RawRecord rec) {
    auto u = maps->users.find(rec.user);
    auto i = maps->items.find(rec.item);
    if (!u || !i) {
      ++skipped;
      return;
    }
    xs.push_back({*u, *i, rec.rating, rec.timestamp});
  });
  if (dropped) *dropped = skipped;
  const std::size_t n = maps->users.size();
  const std::size_t m = maps->items.size();
  return InteractionStore(std::move(xs), n, m, std::move(maps));
}

void write_dataset(const std::filesystem::path& path, const InteractionStore& store) {
  const IdMaps* maps = store.id_maps();
  std::ostringstream out;
  out.precision(17);
  for (const auto& x : store.interactions()) {
    if (maps)
      out << maps->users.raw(x.user) << "::" << maps->items.raw(x.item);
    else
      out << x.user << "::" << x.item;
    out << "::" << x.rating;
    if (x.timestamp) out << "::" << *x.timestamp;
    out << '\n';
  }
  write_file_atomic(path, out.str());
}

std::vector<std::vector<std::string>> load_genres(const std::filesystem::path& path,
                                                  const IdMap& items) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::vector<std::string>> genres(items.size());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    // Titles may themselves contain "::"; the id is first and genres last.
    const auto first = line.find("::");
    const auto last = line.rfind("::");
    if (first == std::string::npos || first == last)
      throw Error(path.string() + ": line " + std::to_string(lineno) + ": expected id::title::genres");
    auto dense = items.find(std::string(trim(std::string_view(line).substr(0, first))));
    if (!dense) continue;
    for (auto g : split_fields(trim(std::string_view(line).substr(last + 2)), "|")) {
      g = trim(g);
      if (!g.empty()) genres[*dense].emplace_back(g);
    }
  }
  return genres;
}

// ---------------------------------------------------------------------------
// Splits

void SplitSpec::validate() const {
  if (mode == Mode::kHoldout && !(fraction > 0.0 && fraction < 1.0))
    throw Error("holdout fraction must be in (0,1)");
  if (mode == Mode::kKFold && (folds < 2 || fold >= folds))
    throw Error("k-fold requires k >= 2 and fold < k");
}

std::pair<InteractionStore, InteractionStore> split_train_test(const InteractionStore& store,
                                                               const SplitSpec& spec) {
  spec.validate();
  const std::size_t d = store.size();
  std::vector<std::size_t> perm(d);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(spec.seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::size_t lo = 0;
  std::size_t hi = 0;
  if (spec.mode == SplitSpec::Mode::kHoldout) {
    hi = static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(d)));
  } else {
    // Fold f covers [f*D/k, (f+1)*D/k) of the shuffled order.
    lo = spec.fold * d / spec.folds;
    hi = (spec.fold + 1) * d / spec.folds;
  }
  std::vector<std::size_t> train;
  std::vector<std::size_t> test(perm.begin() + static_cast<std::ptrdiff_t>(lo),
                                perm.begin() + static_cast<std::ptrdiff_t>(hi));
  train.reserve(d - test.size());
  train.insert(train.end(), perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(lo));
  train.insert(train.end(), perm.begin() + static_cast<std::ptrdiff_t>(hi), perm.end());
  // Keep file order inside each side so streaming replays stay chronological.
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {store.subset(train), store.subset(test)};
}

// ---------------------------------------------------------------------------
// ReplayBuffer

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw Error("replay buffer capacity must be positive");
}

void ReplayBuffer::append(std::vector<Ring>& rings, Index entity, const Entry& e) {
  if (entity >= rings.size()) rings.resize(static_cast<std::size_t>(entity) + 1);
  Ring& r = rings[entity];
  if (r.slots.size() < capacity_) {
    r.slots.push_back(e);
  } else {
    r.slots[r.head] = e;
    r.head = (r.head + 1) % capacity_;
  }
}

void ReplayBuffer::push(std::span<const Interaction> batch) {
  for (const auto& x : batch) {
    const Entry e{next_seq_++, x};
    append(users_, x.user, e);
    append(items_, x.item, e);
  }
}

template <class F>
void ReplayBuffer::visit(const Ring& ring, F&& f) const {
  const std::size_t n = ring.slots.size();
  for (std::size_t k = 0; k < n; ++k) f(ring.slots[(ring.head + k) % n]);
}

std::vector<Interaction> ReplayBuffer::entries(Side side, Index entity) const {
  std::vector<Interaction> out;
  const auto& rs = rings(side);
  if (entity < rs.size()) visit(rs[entity], [&](const Entry& e) { out.push_back(e.x); });
  return out;
}

std::size_t ReplayBuffer::size(Side side, Index entity) const {
  const auto& rs = rings(side);
  return entity < rs.size() ? rs[entity].slots.size() : 0;
}

std::vector<Interaction> ReplayBuffer::gather(std::span<const Index> users,
                                              std::span<const Index> items) const {
  std::vector<const Entry*> hits;
  auto collect = [&](const std::vector<Ring>& rs, std::span<const Index> ids) {
    for (Index id : ids)
      if (id < rs.size()) visit(rs[id], [&](const Entry& e) { hits.push_back(&e); });
  };
  collect(users_, users);
  collect(items_, items);
  std::sort(hits.begin(), hits.end(), [](const Entry* a, const Entry* b) { return a->seq < b->seq; });
  hits.erase(std::unique(hits.begin(), hits.end(),
                         [](const Entry* a, const Entry* b) { return a->seq == b->seq; }),
             hits.end());
  std::vector<Interaction> out;
  out.reserve(hits.size());
  for (const Entry* e : hits) out.push_back(e->x);
  return out;
}

}  // namespace cel
