#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cel/cluster.hpp"
#include "cel/dataset.hpp"
#include "cel/model.hpp"

namespace cel {

struct TrainConfig {
  Hyperparams hp;
  std::size_t steps = 1200;  // full-data steps E (CEL and retrain)
  std::size_t epochs = 1;    // passes over the stream (lite)
  SplitMethod split_method = SplitMethod::kGpca;
  SplitCriterion criterion = SplitCriterion::kInteractionCount;
  bool averaging = true;
  Projection projection = Projection::kAbs;
  double user_ratio = 1.0;      // below 1 the user table is clustered too
  std::size_t eval_every = 0;   // steps (batches in lite) between validation checks; 0 = none
  std::size_t patience = 0;     // stop after this many checks without improvement; 0 = off
  unsigned threads = 1;

  void validate() const;
};

/// round(ratio * n), at least 1 and at most n.
std::size_t target_clusters(std::size_t n, double ratio);

struct LogRecord {
  std::size_t step = 0;
  std::string phase;  // embed, reassign, split, eval
  double value = 0.0; // train data loss, or validation MSE for eval
  std::size_t clusters = 0;
  double wall_ms = 0.0;
};

struct RunReport {
  std::string mode;
  std::vector<LogRecord> log;
  std::vector<double> train_loss;     // data loss before each embedding step
  std::vector<std::size_t> clusters;  // item cluster count after each step
  std::vector<std::pair<std::size_t, double>> validation_mse;
  double embed_ms = 0.0;
  double reassign_ms = 0.0;
  double split_ms = 0.0;
  std::size_t reassigned = 0;  // total entity moves
  bool stopped_early = false;
  nlohmann::json final_metrics = nlohmann::json::object();

  /// `step phase value clusters wall_ms` per line.
  std::string log_text() const;
  nlohmann::json summary() const;
};

struct TrainResult {
  EmbeddingModel model;
  RunReport report;
};

/// Full-data training with reassignment every t1 steps and one split every
/// t2 steps until the target cluster count is reached.
TrainResult train_cel(const InteractionStore& train, const TrainConfig& config,
                      const InteractionView* validation = nullptr);

/// Embedding training with the item (and optionally user) clustering frozen.
TrainResult retrain_fixed(const InteractionStore& train, std::vector<Index> item_assignment,
                          std::size_t num_item_clusters, const TrainConfig& config,
                          const InteractionView* validation = nullptr,
                          std::optional<std::vector<Index>> user_assignment = std::nullopt,
                          std::size_t num_user_clusters = 0);

/// Online training over `stream` in order, `hp.b` interactions per batch.
/// Entities enter the model on first sight; those never seen are placed at
/// the end (items in the smallest cluster, users with fresh rows).
TrainResult train_cel_lite(std::span<const Interaction> stream, std::size_t num_users,
                           std::size_t num_items, const TrainConfig& config,
                           const InteractionView* validation = nullptr);

/// Interactions ordered by timestamp (stable; untimed ones keep their order).
std::vector<Interaction> time_ordered(std::span<const Interaction> xs);

struct SyntheticData {
  InteractionStore store;
  std::vector<Index> truth;  // item -> true cluster
  RowMatrix users;           // N x R
  RowMatrix clusters;        // K x R
};

/// Nonnegative X = A B_q^T S_q^T with uniform entries, cluster rows at least
/// `min_separation` apart, every cluster nonempty. A fraction `observed` of
/// the entries is kept; Gaussian noise of std `noise` is added.
SyntheticData generate_synthetic(std::size_t num_users, std::size_t num_items, std::size_t num_clusters,
                                 std::size_t dim, double noise, Rng& rng, double observed = 1.0,
                                 double min_separation = 0.5);

}  // namespace cel
