#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "cel/model.hpp"

namespace cel::testing {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cel-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

/// Model with explicit rows: users unclustered, items grouped by `assign`.
inline EmbeddingModel make_model(const std::vector<std::vector<double>>& users,
                                 const std::vector<std::vector<double>>& clusters, std::vector<Index> assign) {
  const std::size_t r = clusters.empty() ? users.at(0).size() : clusters[0].size();
  RowMatrix a(users.size(), r), b(clusters.size(), r);
  for (std::size_t i = 0; i < users.size(); ++i)
    for (std::size_t c = 0; c < r; ++c) a(i, c) = users[i][c];
  for (std::size_t k = 0; k < clusters.size(); ++k)
    for (std::size_t c = 0; c < r; ++c) b(k, c) = clusters[k][c];
  ClusteredTable items;
  items.state = ClusterState(std::move(assign), clusters.size());
  items.embeddings = std::move(b);
  return EmbeddingModel(ClusteredTable::identity(std::move(a)), std::move(items));
}

/// Random toy instance: each (user, item) pair observed with probability
/// `density`, every item observed at least once, random item clustering.
struct Toy {
  InteractionStore store;
  EmbeddingModel model;
};

inline Toy random_toy(Rng& rng, std::size_t n, std::size_t m, std::size_t k, std::size_t dim = 3,
                      double density = 0.6) {
  std::uniform_real_distribution<double> u(0.0, 1.0), rating(1.0, 5.0);
  std::vector<Interaction> xs;
  std::vector<bool> seen(m, false);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j)
      if (u(rng) < density) {
        xs.push_back({i, j, rating(rng), std::nullopt});
        seen[j] = true;
      }
  for (Index j = 0; j < m; ++j)
    if (!seen[j]) xs.push_back({static_cast<Index>(j % n), j, rating(rng), std::nullopt});
  InteractionStore store(std::move(xs), n, m);
  EmbeddingModel model = init_model(n, m, dim, random_assignment(m, k, rng), k, rng, store.counts(Side::kItem),
                                    store.counts(Side::kUser));
  return {std::move(store), std::move(model)};
}

/// Masked squared error computed on dense matrices, independent of the
/// library's grouped views.
inline double dense_data_loss(const EmbeddingModel& model, const InteractionStore& store) {
  const std::size_t n = model.num_users(), m = model.num_items(), r = model.dim();
  std::vector<double> x(n * m, 0.0), w(n * m, 0.0);
  for (const auto& it : store.interactions()) {
    x[it.user * m + it.item] += it.rating;
    w[it.user * m + it.item] += 1.0;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (w[i * m + j] == 0.0) continue;
      double pred = 0.0;
      for (std::size_t c = 0; c < r; ++c)
        pred += model.users().embeddings(model.users().state.cluster_of(static_cast<Index>(i)), c) *
                model.items().embeddings(model.items().state.cluster_of(static_cast<Index>(j)), c);
      const double d = x[i * m + j] - pred;
      s += d * d;
    }
  return s;
}

}  // namespace cel::testing
