#include "cel/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace cel {

double mse(const Predictor& model, const InteractionView& test) {
  if (test.empty()) throw Error("mse: empty test set");
  return data_loss(model, test) / static_cast<double>(test.size());
}

double auc_from_scores(std::span<const double> scores, std::span<const bool> positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> ord(n);
  std::iota(ord.begin(), ord.end(), std::size_t{0});
  std::sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of positive ranks with average ranks for ties.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[ord[j]] == scores[ord[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t)
      if (positive[ord[t]]) {
        rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw Error("auc: test set needs both positive and negative examples");
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

double auc(const Predictor& model, const InteractionView& test, double positive_threshold) {
  const auto xs = test.interactions();
  std::vector<double> scores(xs.size());
  std::unique_ptr<bool[]> labels(new bool[xs.size()]);
  for (std::size_t t = 0; t < xs.size(); ++t) {
    scores[t] = model.predict(xs[t].user, xs[t].item);
    labels[t] = xs[t].rating >= positive_threshold;
  }
  return auc_from_scores(scores, std::span<const bool>(labels.get(), xs.size()));
}

std::vector<WarmthBucket> warmth_buckets(const Predictor& model, std::span<const std::size_t> train_counts,
                                         const InteractionView& test, std::span<const double> edges) {
  if (edges.empty()) throw Error("warmth_buckets: no edges");
  for (std::size_t b = 1; b < edges.size(); ++b)
    if (!(edges[b] > edges[b - 1])) throw Error("warmth_buckets: edges must be strictly increasing");

  std::vector<WarmthBucket> out(edges.size());
  for (std::size_t b = 0; b < edges.size(); ++b) {
    out[b].lo = edges[b];
    if (b + 1 < edges.size()) out[b].hi = edges[b + 1];
  }
  auto bucket_of = [&](double w) {
    // Bucket b covers (edges[b], edges[b+1]]; the first also takes edges[0].
    const auto it = std::lower_bound(edges.begin() + 1, edges.end(), w);
    return static_cast<std::size_t>(it - (edges.begin() + 1));
  };
  std::vector<double> sums(edges.size(), 0.0);
  for (Index item : test.entities(Side::kItem)) {
    const double warmth = item < train_counts.size() ? static_cast<double>(train_counts[item]) : 0.0;
    const std::size_t b = bucket_of(warmth);
    ++out[b].items;
    for (auto p : test.positions(Side::kItem, item)) {
      const auto& x = test.interactions()[p];
      const double r = x.rating - model.predict(x.user, x.item);
      sums[b] += r * r;
      ++out[b].interactions;
    }
  }
  for (std::size_t b = 0; b < out.size(); ++b)
    out[b].mse = out[b].interactions ? sums[b] / static_cast<double>(out[b].interactions)
                                     : std::numeric_limits<double>::quiet_NaN();
  return out;
}

ScatteredReport scattered(const RowMatrix& rows) {
  const std::size_t r = rows.cols();
  if (r < 2) throw Error("scattered: dimension must be at least 2");
  const double c = std::sqrt(static_cast<double>(r - 1));
  ScatteredReport out;
  out.rows = rows.rows();
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    const auto x = rows.row(i);
    double sum = 0.0, sq = 0.0;
    for (double v : x) {
      sum += v;
      sq += v * v;
    }
    if (sq == 0.0) {
      ++out.zero_rows;
      continue;
    }
    if (sum < c * std::sqrt(sq)) ++out.outside;
  }
  out.fraction = out.rows ? static_cast<double>(out.outside) / static_cast<double>(out.rows) : 0.0;
  return out;
}

EntropyReport genre_entropy(std::span<const Index> assignment,
                            const std::vector<std::vector<std::string>>& genres) {
  std::map<std::string, std::map<Index, std::size_t>> per_genre;
  EntropyReport out;
  for (std::size_t j = 0; j < assignment.size(); ++j) {
    if (j >= genres.size() || genres[j].empty()) {
      ++out.excluded_items;
      continue;
    }
    for (const auto& g : genres[j]) ++per_genre[g][assignment[j]];
  }
  out.genres = per_genre.size();
  if (per_genre.empty()) return out;
  double total = 0.0;
  for (const auto& [genre, clusters] : per_genre) {
    std::size_t n = 0;
    for (const auto& kv : clusters) n += kv.second;
    for (const auto& kv : clusters) {
      const double p = static_cast<double>(kv.second) / static_cast<double>(n);
      total += p * std::log(p);
    }
  }
  out.signed_value = total / static_cast<double>(out.genres);
  out.entropy = -out.signed_value;
  return out;
}

double adjusted_rand_index(std::span<const Index> a, std::span<const Index> b) {
  if (a.size() != b.size()) throw Error("adjusted_rand_index: label vectors differ in length");
  const std::size_t n = a.size();
  if (n < 2) return 1.0;
  auto choose2 = [](double x) { return x * (x - 1.0) / 2.0; };
  std::map<std::pair<Index, Index>, std::size_t> table;
  std::unordered_map<Index, std::size_t> ra, rb;
  for (std::size_t i = 0; i < n; ++i) {
    ++table[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& kv : table) index += choose2(static_cast<double>(kv.second));
  for (const auto& kv : ra) sa += choose2(static_cast<double>(kv.second));
  for (const auto& kv : rb) sb += choose2(static_cast<double>(kv.second));
  const double expected = sa * sb / choose2(static_cast<double>(n));
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;  // both partitions trivial and identical in shape
  return (index - expected) / (max_index - expected);
}

MetricReport evaluate(const EmbeddingModel& model, std::span<const std::size_t> train_counts,
                      const InteractionView& test, const std::vector<std::vector<std::string>>* genres) {
  MetricReport r;
  r.mse = mse(model, test);
  try {
    r.auc = auc(model, test);
  } catch (const Error&) {
    r.auc.reset();
  }
  r.buckets = warmth_buckets(model, train_counts, test);
  r.compression_ratio = compression_ratio(model.items());
  r.scattered = scattered(model.items().embeddings);
  if (genres) r.genre_entropy = genre_entropy(model.items().state.assignment(), *genres);
  return r;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["mse"] = mse;
  j["auc"] = auc ? nlohmann::json(*auc) : nlohmann::json(nullptr);
  j["compression_ratio"] = compression_ratio;
  j["scattered_fraction"] = scattered.fraction;
  j["scattered_zero_rows"] = scattered.zero_rows;
  auto& buckets_json = j["warmth_buckets"] = nlohmann::json::array();
  for (const auto& b : buckets) {
    buckets_json.push_back({{"lo", b.lo},
                            {"hi", std::isinf(b.hi) ? nlohmann::json(nullptr) : nlohmann::json(b.hi)},
                            {"mse", std::isnan(b.mse) ? nlohmann::json(nullptr) : nlohmann::json(b.mse)},
                            {"items", b.items},
                            {"interactions", b.interactions}});
  }
  if (genre_entropy) {
    j["genre_entropy"] = {{"signed", genre_entropy->signed_value},
                          {"entropy", genre_entropy->entropy},
                          {"genres", genre_entropy->genres},
                          {"excluded_items", genre_entropy->excluded_items}};
  }
  return j;
}

std::string MetricReport::to_text() const {
  std::ostringstream out;
  out.precision(6);
  out << "mse " << mse << '\n';
  if (auc) out << "auc " << *auc << '\n';
  out << "compression_ratio " << compression_ratio << '\n';
  out << "scattered_fraction " << scattered.fraction << '\n';
  if (scattered.zero_rows) out << "scattered_zero_rows " << scattered.zero_rows << '\n';
  for (const auto& b : buckets) {
    out << "bucket " << b.lo << '-';
    if (std::isinf(b.hi))
      out << "inf";
    else
      out << b.hi;
    out << " items " << b.items << " interactions " << b.interactions << " mse " << b.mse << '\n';
  }
  if (genre_entropy)
    out << "genre_entropy " << genre_entropy->entropy << " signed " << genre_entropy->signed_value << '\n';
  return out.str();
}

}  // namespace cel
