#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cel/common.hpp"

namespace cel {

/// Writes through a temporary file next to `path` and renames it into place,
/// so readers never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

struct Interaction {
  Index user = 0;
  Index item = 0;
  double rating = 0.0;
  std::optional<std::int64_t> timestamp;

  bool operator==(const Interaction&) const = default;
};

/// Bijection between raw string IDs and dense indices, assigned in first-seen order.
class IdMap {
 public:
  Index intern(const std::string& raw);
  std::optional<Index> find(const std::string& raw) const;
  const std::string& raw(Index dense) const { return to_raw_.at(dense); }
  std::size_t size() const { return to_raw_.size(); }

  /// Sidecar format: one `raw_id<TAB>dense_index` line per entity.
  void save(const std::filesystem::path& path) const;
  static IdMap load(const std::filesystem::path& path);

  bool operator==(const IdMap& o) const { return to_raw_ == o.to_raw_; }

 private:
  std::unordered_map<std::string, Index> to_dense_;
  std::vector<std::string> to_raw_;
};

struct IdMaps {
  IdMap users;
  IdMap items;
};

/// Interactions grouped by user and by item. Groups are addressed either by
/// slot (0..entities(side).size()) or by entity index via binary search.
class InteractionView {
 public:
  InteractionView() = default;
  explicit InteractionView(std::vector<Interaction> interactions);

  std::span<const Interaction> interactions() const { return interactions_; }
  std::size_t size() const { return interactions_.size(); }
  bool empty() const { return interactions_.empty(); }

  /// Distinct entities of `side` present in the view, ascending.
  std::span<const Index> entities(Side side) const { return groups(side).ids; }
  std::span<const std::uint32_t> slot_positions(Side side, std::size_t slot) const;
  /// Positions into interactions() for one entity; empty if it has none here.
  std::span<const std::uint32_t> positions(Side side, Index entity) const;
  std::size_t count(Side side, Index entity) const { return positions(side, entity).size(); }

 private:
  struct Groups {
    std::vector<Index> ids;
    std::vector<std::uint32_t> offsets;
    std::vector<std::uint32_t> positions;
  };
  const Groups& groups(Side side) const { return side == Side::kItem ? items_ : users_; }
  static Groups build(std::span<const Interaction> xs, Side side);

  std::vector<Interaction> interactions_;
  Groups users_;
  Groups items_;
};

/// Immutable set of interactions over N users and M items.
class InteractionStore {
 public:
  InteractionStore() = default;
  InteractionStore(std::vector<Interaction> interactions, std::size_t num_users,
                   std::size_t num_items, std::shared_ptr<const IdMaps> maps = nullptr);

  const InteractionView& view() const { return view_; }
  std::span<const Interaction> interactions() const { return view_.interactions(); }
  std::size_t size() const { return view_.size(); }
  std::size_t num_users() const { return num_users_; }
  std::size_t num_items() const { return num_items_; }
  std::size_t num_entities(Side side) const {
    return side == Side::kItem ? num_items_ : num_users_;
  }

  /// Interaction count of every dense entity on `side` (zeros included).
  std::vector<std::size_t> counts(Side side) const;

  const IdMaps* id_maps() const { return maps_.get(); }
  std::shared_ptr<const IdMaps> shared_id_maps() const { return maps_; }

  /// Same N, M and ID maps; only the interactions at `positions`.
  InteractionStore subset(std::span<const std::size_t> positions) const;

 private:
  InteractionView view_;
  std::size_t num_users_ = 0;
  std::size_t num_items_ = 0;
  std::shared_ptr<const IdMaps> maps_;
};

enum class DatasetFormat { kMovieLensDat, kCsv };

DatasetFormat parse_format(const std::string& name);

/// Parses a ratings file, assigning dense indices in first-seen order.
InteractionStore load_dataset(const std::filesystem::path& path, DatasetFormat format);

/// Parses a ratings file against existing ID maps. Records whose user or item
/// is unknown are skipped and counted in `*dropped`.
InteractionStore load_dataset(const std::filesystem::path& path, DatasetFormat format,
                              std::shared_ptr<const IdMaps> maps, std::size_t* dropped);

/// Writes the store in `user::item::rating[::timestamp]` form using raw IDs.
void write_dataset(const std::filesystem::path& path, const InteractionStore& store);

/// Genre tags per dense item from `movieId::title::g1|g2|...` lines. Items
/// absent from the file get an empty list.
std::vector<std::vector<std::string>> load_genres(const std::filesystem::path& path,
                                                  const IdMap& items);

struct SplitSpec {
  enum class Mode { kHoldout, kKFold };
  Mode mode = Mode::kHoldout;
  double fraction = 0.2;  // holdout test fraction
  std::size_t folds = 5;
  std::size_t fold = 0;  // which fold is the test set
  std::uint64_t seed = 1;

  void validate() const;
};

/// Disjoint, exhaustive (train, test) partition; deterministic in spec.seed.
std::pair<InteractionStore, InteractionStore> split_train_test(const InteractionStore& store,
                                                               const SplitSpec& spec);

/// Per-entity ring buffers holding the latest `capacity` interactions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  std::size_t capacity() const { return capacity_; }
  void push(std::span<const Interaction> batch);

  /// Buffered interactions of one entity, oldest first.
  std::vector<Interaction> entries(Side side, Index entity) const;
  std::size_t size(Side side, Index entity) const;

  /// Union of the buffers of the given users and items, deduplicated, in
  /// arrival order.
  std::vector<Interaction> gather(std::span<const Index> users, std::span<const Index> items) const;

 private:
  struct Entry {
    std::uint64_t seq;
    Interaction x;
  };
  struct Ring {
    std::vector<Entry> slots;
    std::size_t head = 0;  // oldest slot once full
  };
  void append(std::vector<Ring>& rings, Index entity, const Entry& e);
  template <class F>
  void visit(const Ring& ring, F&& f) const;
  const std::vector<Ring>& rings(Side side) const { return side == Side::kItem ? items_ : users_; }

  std::size_t capacity_;
  std::uint64_t next_seq_ = 0;
  std::vector<Ring> users_;
  std::vector<Ring> items_;
};

}  // namespace cel
