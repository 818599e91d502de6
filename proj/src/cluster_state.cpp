#include "cel/cluster_state.hpp"

#include <algorithm>
#include <string>

namespace cel {

ClusterState::ClusterState(std::vector<Index> assignment, std::size_t num_clusters,
                           std::vector<std::size_t> entity_counts)
    : cluster_of_(std::move(assignment)),
      slot_(cluster_of_.size(), 0),
      entity_count_(std::move(entity_counts)),
      members_(num_clusters),
      cluster_count_(num_clusters, 0) {
  if (entity_count_.empty()) entity_count_.assign(cluster_of_.size(), 0);
  if (entity_count_.size() != cluster_of_.size()) throw Error("ClusterState: count/assignment size mismatch");
  for (Index e = 0; e < cluster_of_.size(); ++e) {
    const Index k = cluster_of_[e];
    if (k >= num_clusters) throw Error("ClusterState: cluster index out of range");
    slot_[e] = members_[k].size();
    members_[k].push_back(e);
    cluster_count_[k] += entity_count_[e];
  }
  for (Index k = 0; k < num_clusters; ++k) {
    if (members_[k].empty()) throw Error("ClusterState: cluster " + std::to_string(k) + " is empty");
    reindex(k);
  }
}

ClusterState ClusterState::identity(std::size_t num_entities, std::vector<std::size_t> entity_counts) {
  std::vector<Index> assign(num_entities);
  for (Index e = 0; e < num_entities; ++e) assign[e] = e;
  return ClusterState(std::move(assign), num_entities, std::move(entity_counts));
}

std::vector<Index> ClusterState::sorted_members(Index cluster) const {
  std::vector<Index> m = members_[cluster];
  std::sort(m.begin(), m.end());
  return m;
}

void ClusterState::unindex(Index k) {
  by_count_.erase({cluster_count_[k], k});
  splittable_.erase({cluster_count_[k], k});
}

void ClusterState::reindex(Index k) {
  by_count_.insert({cluster_count_[k], k});
  if (members_[k].size() >= 2) splittable_.insert({cluster_count_[k], k});
}

void ClusterState::detach(Index e) {
  const Index k = cluster_of_[e];
  auto& list = members_[k];
  const std::size_t s = slot_[e];
  list[s] = list.back();
  slot_[list[s]] = s;
  list.pop_back();
  cluster_count_[k] -= entity_count_[e];
}

void ClusterState::attach(Index e, Index k) {
  cluster_of_[e] = k;
  slot_[e] = members_[k].size();
  members_[k].push_back(e);
  cluster_count_[k] += entity_count_[e];
}

void ClusterState::move(Index entity, Index to) {
  const Index from = cluster_of_[entity];
  if (from == to) return;
  if (to >= members_.size()) throw Error("move: cluster index out of range");
  if (members_[from].size() == 1) throw Error("move: would empty cluster " + std::to_string(from));
  unindex(from);
  unindex(to);
  detach(entity);
  attach(entity, to);
  reindex(from);
  reindex(to);
}

Index ClusterState::split_off(Index from, std::span<const Index> entities) {
  if (entities.empty() || entities.size() >= members_[from].size())
    throw Error("split_off: both sides must be nonempty");
  for (Index e : entities)
    if (cluster_of_[e] != from) throw Error("split_off: entity not in source cluster");
  const Index fresh = static_cast<Index>(members_.size());
  members_.emplace_back();
  cluster_count_.push_back(0);
  unindex(from);
  for (Index e : entities) {
    detach(e);
    attach(e, fresh);
  }
  reindex(from);
  reindex(fresh);
  return fresh;
}

Index ClusterState::add_entity(Index cluster, std::size_t count) {
  if (cluster >= members_.size()) throw Error("add_entity: cluster index out of range");
  const Index e = static_cast<Index>(cluster_of_.size());
  cluster_of_.push_back(cluster);
  slot_.push_back(0);
  entity_count_.push_back(count);
  unindex(cluster);
  attach(e, cluster);
  reindex(cluster);
  return e;
}

std::pair<Index, Index> ClusterState::add_entity_in_new_cluster(std::size_t count) {
  const Index e = static_cast<Index>(cluster_of_.size());
  const Index k = static_cast<Index>(members_.size());
  members_.emplace_back();
  cluster_count_.push_back(0);
  cluster_of_.push_back(k);
  slot_.push_back(0);
  entity_count_.push_back(count);
  attach(e, k);
  reindex(k);
  return {e, k};
}

void ClusterState::add_interactions(Index entity, std::size_t n) {
  if (n == 0) return;
  const Index k = cluster_of_[entity];
  unindex(k);
  entity_count_[entity] += n;
  cluster_count_[k] += n;
  reindex(k);
}

Index ClusterState::smallest_cluster() const {
  if (by_count_.empty()) throw Error("smallest_cluster: no clusters");
  return by_count_.begin()->second;
}

std::optional<Index> ClusterState::largest_splittable() const {
  if (splittable_.empty()) return std::nullopt;
  return splittable_.begin()->second;
}

void ClusterState::check() const {
  const std::size_t k = members_.size();
  std::vector<std::size_t> members(k, 0);
  std::vector<std::size_t> counts(k, 0);
  for (Index e = 0; e < cluster_of_.size(); ++e) {
    const Index c = cluster_of_[e];
    if (c >= k) throw Error("check: assignment out of range");
    if (members_[c][slot_[e]] != e) throw Error("check: membership index corrupt");
    ++members[c];
    counts[c] += entity_count_[e];
  }
  for (Index c = 0; c < k; ++c) {
    if (members[c] == 0) throw Error("check: empty cluster " + std::to_string(c));
    if (members[c] != members_[c].size()) throw Error("check: member list size mismatch");
    if (counts[c] != cluster_count_[c]) throw Error("check: interaction count mismatch");
    if (!by_count_.count({counts[c], c})) throw Error("check: count index stale");
  }
  if (by_count_.size() != k) throw Error("check: count index size mismatch");
}

}  // namespace cel
