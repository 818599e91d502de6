#pragma once

#include <optional>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "cel/common.hpp"

namespace cel {

/// Hard assignment of entities to clusters with per-cluster membership lists
/// and interaction counts (the number of observed interactions of all
/// members). Every cluster keeps at least one member; operations that would
/// empty a cluster throw.
class ClusterState {
 public:
  ClusterState() = default;
  ClusterState(std::vector<Index> assignment, std::size_t num_clusters,
               std::vector<std::size_t> entity_counts = {});

  /// One cluster per entity, entity e in cluster e.
  static ClusterState identity(std::size_t num_entities, std::vector<std::size_t> entity_counts = {});

  std::size_t num_entities() const { return cluster_of_.size(); }
  std::size_t num_clusters() const { return members_.size(); }

  Index cluster_of(Index entity) const { return cluster_of_[entity]; }
  std::span<const Index> assignment() const { return cluster_of_; }

  /// Members in unspecified order.
  std::span<const Index> members(Index cluster) const { return members_[cluster]; }
  std::vector<Index> sorted_members(Index cluster) const;
  std::size_t member_count(Index cluster) const { return members_[cluster].size(); }
  std::size_t interaction_count(Index cluster) const { return cluster_count_[cluster]; }
  std::size_t entity_count(Index entity) const { return entity_count_[entity]; }

  /// Moves `entity` to cluster `to`. Throws if it is the sole member of its cluster.
  void move(Index entity, Index to);

  /// Moves every entity in `entities` out of `from` into a new cluster and
  /// returns its index. Both sides must stay nonempty.
  Index split_off(Index from, std::span<const Index> entities);

  /// Registers a new entity in `cluster`; returns its index.
  Index add_entity(Index cluster, std::size_t count = 0);
  /// Registers a new entity as the sole member of a new cluster.
  std::pair<Index, Index> add_entity_in_new_cluster(std::size_t count = 0);

  void add_interactions(Index entity, std::size_t n);

  /// Cluster with the fewest interactions (lowest index on ties).
  Index smallest_cluster() const;
  /// Multi-member cluster with the most interactions (lowest index on ties).
  std::optional<Index> largest_splittable() const;
  /// Multi-member clusters ordered by interaction count, largest first.
  template <class F>
  void for_each_splittable(F&& f) const {
    for (const auto& key : splittable_)
      if (!f(key.second)) break;
  }

  /// Recomputes membership and counts from the assignment and throws on any
  /// mismatch or empty cluster.
  void check() const;

  bool operator==(const ClusterState& o) const {
    return cluster_of_ == o.cluster_of_ && entity_count_ == o.entity_count_ &&
           members_.size() == o.members_.size();
  }

 private:
  struct Desc {
    bool operator()(const std::pair<std::size_t, Index>& a,
                    const std::pair<std::size_t, Index>& b) const {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    }
  };
  void unindex(Index cluster);
  void reindex(Index cluster);
  void attach(Index entity, Index cluster);
  void detach(Index entity);

  std::vector<Index> cluster_of_;
  std::vector<std::size_t> slot_;  // position of each entity in its members_ list
  std::vector<std::size_t> entity_count_;
  std::vector<std::vector<Index>> members_;
  std::vector<std::size_t> cluster_count_;
  std::set<std::pair<std::size_t, Index>> by_count_;             // ascending
  std::set<std::pair<std::size_t, Index>, Desc> splittable_;     // descending
};

}  // namespace cel
