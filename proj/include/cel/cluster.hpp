#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cel/model.hpp"

namespace cel {

enum class SplitCriterion { kTotalLoss, kMeanLoss, kMemberCount, kInteractionCount, kGradientNorm };
enum class SplitMethod { kGpca, kRandomProjection, kRandom };

SplitCriterion parse_criterion(const std::string& name);
std::string to_string(SplitCriterion c);
SplitMethod parse_split_method(const std::string& name);
std::string to_string(SplitMethod m);

// ---------------------------------------------------------------------------
// Reassignment

/// Moves each candidate entity to the cluster of its pool with the smallest
/// loss over its own interactions in `view`. An empty `pools` span means every
/// cluster is a candidate. Choices are made against the state at entry; sole
/// members at entry never move and a commit that would empty a cluster is
/// skipped. Ties keep the current cluster, then prefer the lowest index.
/// Commits happen in ascending entity order. Returns the number of moved entities.
std::size_t reassign(EmbeddingModel& model, const InteractionView& view, Side side,
                     std::span<const Index> candidates,
                     std::span<const std::vector<Index>> pools = {}, unsigned threads = 1);

/// {current cluster} plus `m` distinct other clusters drawn uniformly; all
/// clusters when there are at most m+1. Sorted ascending.
std::vector<Index> sample_cluster_pool(const ClusterState& state, Index entity, std::size_t m, Rng& rng);

// ---------------------------------------------------------------------------
// Splitting

/// Splittable (>= 2 members) cluster maximizing the criterion, lowest index on
/// ties; nullopt if every cluster is a singleton.
std::optional<Index> choose_cluster(const EmbeddingModel& model, const InteractionView& view, Side side,
                                    SplitCriterion criterion);

/// Unit top eigenvector of a symmetric PSD matrix by power iteration. The
/// iterate is multiplied by successive squarings of the matrix, so k steps
/// apply the (2^k - 1)-th power.
std::vector<double> top_eigenvector(const RowMatrix& sym, double tol = 1e-10, std::size_t max_iter = 1000);

/// Subtracts column means and divides by column standard deviations
/// (floored at 1e-12).
void standardize_columns(RowMatrix& g);

/// G^T G for a row matrix G.
RowMatrix gram(const RowMatrix& g);

struct Projected {
  std::vector<double> direction;  // unit R-vector
  std::vector<double> scores;     // one per row of the standardized G
};

/// Standardizes G and projects it on its first principal direction.
Projected principal_scores(RowMatrix g);
/// Standardizes G and projects it on `direction`.
Projected project_scores(RowMatrix g, std::vector<double> direction);

/// Indices of rows with score >= delta. If that leaves a side empty, only the
/// highest-scoring row (lowest index on ties) is returned and `*degenerate`
/// is set.
std::vector<std::size_t> delta_rule(std::span<const double> scores, double delta, bool* degenerate = nullptr);

struct BalancedCut {
  double threshold = 0.0;
  bool feasible = false;             // |difference| <= d and the threshold separates the sides
  std::size_t difference = 0;        // |upper count - lower count|
  std::vector<std::size_t> upper;    // indices on the high-score side
};

/// Cut of the (score, index) order into two nonempty sides whose weighted
/// sizes differ the least, found by weighted quickselect. The threshold is
/// the midpoint between the scores adjacent to the cut.
BalancedCut balanced_threshold(std::span<const double> scores, std::span<const std::size_t> counts,
                               std::size_t d);

struct SplitOptions {
  SplitMethod method = SplitMethod::kGpca;
  double delta = 0.0;
  std::optional<std::size_t> balance_d;  // use balanced_threshold instead of delta
};

struct SplitResult {
  Index source = 0;
  Index created = 0;
  std::size_t moved = 0;
  bool degenerate = false;  // delta rule fell back to a single member
  bool balanced = true;     // balanced cut was feasible (balance mode only)
};

/// Splits cluster k in two. Gradients come from the members' interactions in
/// `view`. The new cluster starts with a copy of k's row, so predictions are
/// unchanged.
SplitResult split_cluster(EmbeddingModel& model, const InteractionView& view, Side side, Index k,
                          const SplitOptions& opt, Rng& rng);

/// Moves `entities` out of cluster k into a new cluster with k's row.
Index apply_split(ClusteredTable& table, Index k, std::span<const Index> entities);

/// Every candidate with more than d interactions that shares its cluster
/// becomes a singleton, stopping once the table has `max_clusters` clusters.
/// Returns the number isolated.
std::size_t strategy1_isolate(ClusteredTable& table, std::size_t d, std::span<const Index> candidates,
                              std::size_t max_clusters);

inline bool strategy2_eligible(const ClusterState& state, Index k, std::size_t d) {
  return state.interaction_count(k) > 2 * d;
}

/// Clusters eligible for a Strategy-2 split, largest interaction count first.
std::vector<Index> strategy2_candidates(const ClusterState& state, std::size_t d);

/// assign[j] = j mod num_clusters.
std::vector<Index> modulo_assign(std::size_t num_entities, std::size_t num_clusters);

}  // namespace cel
