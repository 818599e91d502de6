#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cel/cluster_state.hpp"
#include "cel/common.hpp"
#include "cel/dataset.hpp"

namespace cel {

/// Hyperparameters shared by the model, cluster and trainer modules.
struct Hyperparams {
  std::size_t dim = 64;            // embedding dimension R
  double lr = 1e-4;                // step size
  double lambda_reg = 1.0;         // norm regularization weight
  double lambda_p = 50.0;          // personalization pull-back weight
  std::size_t t1 = 40;             // steps (batches in lite mode) per reassignment
  std::size_t t2 = 10;             // steps per split
  double delta = 0.0;              // split threshold on principal-component scores
  std::size_t d = 100;             // interaction threshold of the lite split strategies
  std::size_t n = 20;              // replay buffer capacity per entity
  std::size_t m = 10;              // sampled extra clusters per lite reassignment
  std::size_t b = 2000;            // lite batch size
  double target_ratio = 0.01;      // M*/M
  std::size_t initial_clusters = 1;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Differentiable interaction model mapping (user row, item row) to a score.
class InteractionScorer {
 public:
  virtual ~InteractionScorer() = default;
  virtual double score(std::span<const double> user, std::span<const double> item) const = 0;
  /// Adds coeff * d(score)/d(user) to grad_user and coeff * d(score)/d(item) to grad_item.
  virtual void accumulate_gradient(std::span<const double> user, std::span<const double> item,
                                   double coeff, std::span<double> grad_user,
                                   std::span<double> grad_item) const = 0;
  /// Whether embeddings are kept elementwise nonnegative.
  virtual bool nonnegative() const = 0;
  virtual std::string name() const = 0;

  /// Gradient of the squared error (rating - score)^2 where residual = rating - score.
  std::pair<std::vector<double>, std::vector<double>> gradient(std::span<const double> user,
                                                               std::span<const double> item,
                                                               double residual) const;
};

/// NMF scorer: plain dot product.
class DotProductScorer final : public InteractionScorer {
 public:
  double score(std::span<const double> user, std::span<const double> item) const override {
    return dot(user, item);
  }
  void accumulate_gradient(std::span<const double> user, std::span<const double> item, double coeff,
                           std::span<double> grad_user, std::span<double> grad_item) const override;
  bool nonnegative() const override { return true; }
  std::string name() const override { return "nmf"; }
};

std::shared_ptr<const InteractionScorer> default_scorer();

/// Cluster assignment plus one embedding row per cluster. A full (unshared)
/// table is the identity assignment.
struct ClusteredTable {
  ClusterState state;
  RowMatrix embeddings;  // num_clusters x dim
  std::uint64_t splits = 0;

  std::size_t dim() const { return embeddings.cols(); }
  std::size_t num_clusters() const { return state.num_clusters(); }
  std::span<const double> entity_row(Index e) const { return embeddings.row(state.cluster_of(e)); }

  /// Cluster rows set to the mean of the given per-entity rows of their members.
  static ClusteredTable from_entity_rows(const RowMatrix& entity_rows, std::vector<Index> assignment,
                                         std::size_t num_clusters,
                                         std::vector<std::size_t> entity_counts = {});
  static ClusteredTable identity(RowMatrix entity_rows, std::vector<std::size_t> entity_counts = {});

  /// Expanded entity table S * B.
  RowMatrix expanded() const;
};

/// Anything that scores (user, item) pairs; used by the evaluation code.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual double predict(Index user, Index item) const = 0;
};

/// User table A and clustered item table (S_q, B_q). The user side is a full
/// table unless user clustering is enabled.
class EmbeddingModel final : public Predictor {
 public:
  EmbeddingModel() = default;
  EmbeddingModel(ClusteredTable users, ClusteredTable items, bool users_clustered = false,
                 std::shared_ptr<const InteractionScorer> scorer = default_scorer());

  double predict(Index user, Index item) const override {
    return scorer_->score(users_.entity_row(user), items_.entity_row(item));
  }

  ClusteredTable& table(Side side) { return side == Side::kItem ? items_ : users_; }
  const ClusteredTable& table(Side side) const { return side == Side::kItem ? items_ : users_; }
  ClusteredTable& users() { return users_; }
  ClusteredTable& items() { return items_; }
  const ClusteredTable& users() const { return users_; }
  const ClusteredTable& items() const { return items_; }

  std::size_t dim() const { return items_.dim(); }
  std::size_t num_users() const { return users_.state.num_entities(); }
  std::size_t num_items() const { return items_.state.num_entities(); }
  bool users_clustered() const { return users_clustered_; }
  const InteractionScorer& scorer() const { return *scorer_; }
  std::shared_ptr<const InteractionScorer> shared_scorer() const { return scorer_; }

  /// Score with one side's row replaced by an arbitrary cluster row.
  double score_with_cluster(Side side, Index entity_other, Index cluster) const;

 private:
  ClusteredTable users_;
  ClusteredTable items_;
  bool users_clustered_ = false;
  std::shared_ptr<const InteractionScorer> scorer_ = default_scorer();
};

/// Per-entity rows: N x R for users and `num_rows` x R for items, each
/// entry drawn from N(0,1), divided by the row's max |entry|, and made
/// nonnegative when requested.
RowMatrix random_embeddings(std::size_t num_rows, std::size_t dim, Rng& rng, bool nonnegative);

/// Fresh model: full user table, items grouped by `item_assignment` with
/// cluster rows at the mean of their members' initial rows.
EmbeddingModel init_model(std::size_t num_users, std::size_t num_items, std::size_t dim,
                          std::vector<Index> item_assignment, std::size_t num_item_clusters,
                          Rng& rng, std::vector<std::size_t> item_counts = {},
                          std::vector<std::size_t> user_counts = {},
                          std::shared_ptr<const InteractionScorer> scorer = default_scorer());

/// Random assignment of `num_entities` to `num_clusters` with no empty cluster.
std::vector<Index> random_assignment(std::size_t num_entities, std::size_t num_clusters, Rng& rng);

// ---------------------------------------------------------------------------
// Losses and gradients

/// Sum of squared residuals over the view.
double data_loss(const Predictor& model, const InteractionView& view);
/// lambda/2 * (|A|^2 + |B_q|^2) over the cluster tables.
double regularizer(const EmbeddingModel& model, double lambda_reg);
/// data_loss + regularizer.
double loss(const EmbeddingModel& model, const InteractionView& view, double lambda_reg);
/// Squared residuals of interactions whose `side` entity lies in cluster k.
double cluster_loss(const EmbeddingModel& model, const InteractionView& view, Side side, Index k);

enum class GradScaling {
  kNone,           // gradient of the summed loss
  kMemberAverage,  // cluster-row data gradients divided by member count
  kViewAverage,    // each row's gradient divided by its interactions in the view
};

enum class Projection { kAbs, kClampZero };

/// Gradient of a cluster table restricted to the rows listed in `rows`.
struct TableGradient {
  std::vector<Index> rows;  // ascending cluster indices
  RowMatrix values;         // rows.size() x dim
  std::vector<std::size_t> view_counts;
};

struct ModelGradient {
  TableGradient users;
  TableGradient items;
  double data_loss = 0.0;
};

/// Gradient of data_loss + regularizer with respect to the cluster tables.
/// With `all_rows` every cluster row is listed (regularizer included);
/// otherwise only rows touched by the view.
ModelGradient compute_gradient(const EmbeddingModel& model, const InteractionView& view,
                               double lambda_reg, GradScaling scaling, bool all_rows,
                               unsigned threads = 1);

struct StepOptions {
  double lr = 1e-4;
  double lambda_reg = 1.0;
  GradScaling scaling = GradScaling::kMemberAverage;
  Projection projection = Projection::kAbs;
  bool all_rows = true;
  unsigned threads = 1;
};

/// One descent step on both tables. Returns the data loss before the step.
double grad_step(EmbeddingModel& model, const InteractionView& view, const StepOptions& opt);

/// Elementwise projection of a row onto the nonnegative orthant.
void project_row(std::span<double> row, Projection projection);

/// -dL/d(row of `entity`) of the unregularized loss over the view.
std::vector<double> entity_gradient(const EmbeddingModel& model, const InteractionView& view, Side side,
                                    Index entity);
inline std::vector<double> item_gradient(const EmbeddingModel& model, const InteractionView& view,
                                         Index item) {
  return entity_gradient(model, view, Side::kItem, item);
}

/// entity_gradient for several entities at once, one row each.
RowMatrix entity_gradients(const EmbeddingModel& model, const InteractionView& view, Side side,
                           std::span<const Index> entities);

// ---------------------------------------------------------------------------
// Personalization

/// Untied per-entity tables.
class PersonalizedModel final : public Predictor {
 public:
  PersonalizedModel(RowMatrix users, RowMatrix items, std::shared_ptr<const InteractionScorer> scorer)
      : users_(std::move(users)), items_(std::move(items)), scorer_(std::move(scorer)) {}

  double predict(Index user, Index item) const override {
    return scorer_->score(users_.row(user), items_.row(item));
  }
  const RowMatrix& users() const { return users_; }
  const RowMatrix& items() const { return items_; }
  RowMatrix& users() { return users_; }
  RowMatrix& items() { return items_; }

 private:
  RowMatrix users_;
  RowMatrix items_;
  std::shared_ptr<const InteractionScorer> scorer_;
};

struct PersonalizeOptions {
  double lambda_p = 50.0;
  double lr = 1e-4;
  std::size_t steps = 30;
  Projection projection = Projection::kAbs;
  unsigned threads = 1;
};

/// Starts from the shared rows (S_q B_q) and fine-tunes every item row on its
/// own interactions plus lambda_p/2 * |row - cluster row|^2. User rows are
/// tuned the same way when the user table is clustered and left fixed otherwise.
PersonalizedModel personalize(const EmbeddingModel& model, const InteractionView& train,
                              const PersonalizeOptions& opt);

/// data_loss + pull-back terms minimized by personalize().
double personalized_objective(const PersonalizedModel& p, const EmbeddingModel& anchor,
                              const InteractionView& view, const PersonalizeOptions& opt);

}  // namespace cel
