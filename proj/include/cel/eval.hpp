#pragma once

#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cel/model.hpp"

namespace cel {

/// Mean squared error over the view. Throws on an empty view.
double mse(const Predictor& model, const InteractionView& test);

/// Rank-statistic AUC of predictions, positives being ratings >= threshold.
/// Tied scores count one half. Throws unless both classes are present.
double auc(const Predictor& model, const InteractionView& test, double positive_threshold = 4.0);
double auc_from_scores(std::span<const double> scores, std::span<const bool> positive);

inline const std::vector<double> kDefaultWarmthEdges = {0, 5, 20, 100, 800, 2000};

struct WarmthBucket {
  double lo = 0.0;  // first bucket is [lo, hi], later ones (lo, hi]
  double hi = std::numeric_limits<double>::infinity();
  double mse = 0.0;            // mean over the bucket's test interactions; NaN if none
  std::size_t items = 0;       // distinct test items in the bucket
  std::size_t interactions = 0;
};

/// Test MSE grouped by each item's training interaction count. `edges` are
/// strictly increasing lower bounds; the last bucket is unbounded.
std::vector<WarmthBucket> warmth_buckets(const Predictor& model, std::span<const std::size_t> train_counts,
                                         const InteractionView& test,
                                         std::span<const double> edges = kDefaultWarmthEdges);

struct ScatteredReport {
  double fraction = 0.0;  // rows with x.1 < sqrt(R-1) |x|
  std::size_t rows = 0;
  std::size_t outside = 0;
  std::size_t zero_rows = 0;  // counted as inside
};

ScatteredReport scattered(const RowMatrix& rows);
inline double scattered_fraction(const RowMatrix& rows) { return scattered(rows).fraction; }

struct EntropyReport {
  double signed_value = 0.0;  // (1/|G|) sum_g sum_k p log p, nonpositive
  double entropy = 0.0;       // -signed_value
  std::size_t genres = 0;
  std::size_t excluded_items = 0;  // items without genre tags
};

/// Average over genres of the entropy of each genre's distribution over
/// clusters, p_g(k) being the share of genre-g items that sit in cluster k.
EntropyReport genre_entropy(std::span<const Index> assignment,
                            const std::vector<std::vector<std::string>>& genres);

double adjusted_rand_index(std::span<const Index> a, std::span<const Index> b);

inline double compression_ratio(const ClusteredTable& t) {
  return static_cast<double>(t.num_clusters()) / static_cast<double>(t.state.num_entities());
}

struct MetricReport {
  double mse = 0.0;
  std::optional<double> auc;
  std::vector<WarmthBucket> buckets;
  double compression_ratio = 1.0;
  ScatteredReport scattered;
  std::optional<EntropyReport> genre_entropy;

  nlohmann::json to_json() const;
  /// One `key value` pair per line.
  std::string to_text() const;
};

/// Full report for a clustered model. AUC is omitted when the test set has a
/// single class; genre entropy when `genres` is null.
MetricReport evaluate(const EmbeddingModel& model, std::span<const std::size_t> train_counts,
                      const InteractionView& test,
                      const std::vector<std::vector<std::string>>* genres = nullptr);

}  // namespace cel
