#include "cel/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace cel {

namespace {

const char* const kCriterionNames[] = {"total-loss", "mean-loss", "member-count", "interaction-count",
                                       "gradient-norm"};
const char* const kMethodNames[] = {"gpca", "random-projection", "random"};

}  // namespace

SplitCriterion parse_criterion(const std::string& name) {
  for (int i = 0; i < 5; ++i)
    if (name == kCriterionNames[i]) return static_cast<SplitCriterion>(i);
  throw Error("unknown split criterion '" + name + "'");
}

std::string to_string(SplitCriterion c) { return kCriterionNames[static_cast<int>(c)]; }

SplitMethod parse_split_method(const std::string& name) {
  for (int i = 0; i < 3; ++i)
    if (name == kMethodNames[i]) return static_cast<SplitMethod>(i);
  throw Error("unknown split method '" + name + "'");
}

std::string to_string(SplitMethod m) { return kMethodNames[static_cast<int>(m)]; }

// ---------------------------------------------------------------------------
// Reassignment

std::size_t reassign(EmbeddingModel& model, const InteractionView& view, Side side,
                     std::span<const Index> candidates, std::span<const std::vector<Index>> pools,
                     unsigned threads) {
  if (!pools.empty() && pools.size() != candidates.size())
    throw Error("reassign: one pool per candidate required");
  ClusteredTable& table = model.table(side);
  const std::size_t num_clusters = table.num_clusters();
  const auto xs = view.interactions();
  const auto others = view.entities(other(side));
  auto other_of = [side](const Interaction& x) { return side == Side::kItem ? x.user : x.item; };

  // Full pools score every (other entity, cluster) pair once.
  std::vector<double> cache;
  if (pools.empty()) {
    cache.resize(others.size() * num_clusters);
    parallel_for(others.size(), threads, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t s = lo; s < hi; ++s)
        for (Index k = 0; k < num_clusters; ++k)
          cache[s * num_clusters + k] = model.score_with_cluster(side, others[s], k);
    });
  }

  std::vector<Index> best(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> slots;
    for (std::size_t c = lo; c < hi; ++c) {
      const Index e = candidates[c];
      const Index cur = table.state.cluster_of(e);
      best[c] = cur;
      const auto pos = view.positions(side, e);
      if (pos.empty() || table.state.member_count(cur) == 1) continue;

      std::function<double(Index)> item_loss;
      if (pools.empty()) {
        slots.clear();
        for (auto p : pos)
          slots.push_back(static_cast<std::size_t>(
              std::lower_bound(others.begin(), others.end(), other_of(xs[p])) - others.begin()));
        item_loss = [&](Index k) {
          double s = 0.0;
          for (std::size_t t = 0; t < pos.size(); ++t) {
            const double r = xs[pos[t]].rating - cache[slots[t] * num_clusters + k];
            s += r * r;
          }
          return s;
        };
      } else {
        item_loss = [&](Index k) {
          double s = 0.0;
          for (auto p : pos) {
            const double r = xs[p].rating - model.score_with_cluster(side, other_of(xs[p]), k);
            s += r * r;
          }
          return s;
        };
      }

      double best_loss = item_loss(cur);
      auto consider = [&](Index k) {
        if (k == cur) return;
        const double l = item_loss(k);
        if (l < best_loss) {
          best_loss = l;
          best[c] = k;
        }
      };
      if (pools.empty()) {
        for (Index k = 0; k < num_clusters; ++k) consider(k);
      } else {
        std::vector<Index> pool = pools[c];
        std::sort(pool.begin(), pool.end());
        for (Index k : pool) {
          if (k >= num_clusters) throw Error("reassign: pool cluster out of range");
          consider(k);
        }
      }
    }
  });

  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return candidates[a] < candidates[b]; });
  std::size_t moved = 0;
  for (std::size_t c : order) {
    const Index e = candidates[c];
    const Index cur = table.state.cluster_of(e);
    if (best[c] == cur || table.state.member_count(cur) == 1) continue;
    table.state.move(e, best[c]);
    ++moved;
  }
  return moved;
}

std::vector<Index> sample_cluster_pool(const ClusterState& state, Index entity, std::size_t m, Rng& rng) {
  const std::size_t k = state.num_clusters();
  const Index cur = state.cluster_of(entity);
  std::vector<Index> pool;
  if (k <= m + 1) {
    pool.resize(k);
    std::iota(pool.begin(), pool.end(), Index{0});
    return pool;
  }
  // Floyd's sampling over the k-1 other clusters, then skip the current one.
  const std::size_t n = k - 1;
  pool.reserve(m + 1);
  for (std::size_t j = n - m; j < n; ++j) {
    const auto t = static_cast<Index>(std::uniform_int_distribution<std::size_t>(0, j)(rng));
    if (std::find(pool.begin(), pool.end(), t) == pool.end())
      pool.push_back(t);
    else
      pool.push_back(static_cast<Index>(j));
  }
  for (Index& c : pool)
    if (c >= cur) ++c;
  pool.push_back(cur);
  std::sort(pool.begin(), pool.end());
  return pool;
}

// ---------------------------------------------------------------------------
// Splitting

std::optional<Index> choose_cluster(const EmbeddingModel& model, const InteractionView& view, Side side,
                                    SplitCriterion criterion) {
  const ClusteredTable& table = model.table(side);
  const ClusterState& st = table.state;
  if (criterion == SplitCriterion::kInteractionCount) return st.largest_splittable();

  const std::size_t k_count = table.num_clusters();
  std::vector<double> value(k_count, 0.0);
  switch (criterion) {
    case SplitCriterion::kMemberCount:
      for (Index k = 0; k < k_count; ++k) value[k] = static_cast<double>(st.member_count(k));
      break;
    case SplitCriterion::kTotalLoss:
    case SplitCriterion::kMeanLoss:
      for (const auto& x : view.interactions()) {
        const double r = x.rating - model.predict(x.user, x.item);
        value[st.cluster_of(side == Side::kItem ? x.item : x.user)] += r * r;
      }
      if (criterion == SplitCriterion::kMeanLoss)
        for (Index k = 0; k < k_count; ++k) value[k] /= static_cast<double>(st.member_count(k));
      break;
    case SplitCriterion::kGradientNorm: {
      const auto ents = view.entities(side);
      const RowMatrix g = entity_gradients(model, view, side, ents);
      for (std::size_t s = 0; s < ents.size(); ++s) {
        double n2 = 0.0;
        for (double v : g.row(s)) n2 += v * v;
        value[st.cluster_of(ents[s])] += n2;
      }
      break;
    }
    case SplitCriterion::kInteractionCount:
      break;
  }
  std::optional<Index> best;
  for (Index k = 0; k < k_count; ++k) {
    if (st.member_count(k) < 2) continue;
    if (!best || value[k] > value[*best]) best = k;
  }
  return best;
}

std::vector<double> top_eigenvector(const RowMatrix& sym, double tol, std::size_t max_iter) {
  const std::size_t n = sym.rows();
  if (n == 0 || sym.cols() != n) throw Error("top_eigenvector: square matrix required");
  auto norm = [](std::span<const double> v) { return std::sqrt(dot(v, v)); };
  auto multiply = [n](const RowMatrix& a, std::span<const double> v) {
    std::vector<double> w(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) w[i] = dot(a.row(i), v);
    return w;
  };
  auto square = [n](const RowMatrix& a) {
    RowMatrix out(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        const double aik = a(i, k);
        if (aik == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) out(i, j) += aik * a(k, j);
      }
    return out;
  };

  std::vector<double> start(n, 1.0 / std::sqrt(static_cast<double>(n)));
  const double scale = std::sqrt(sym.squared_norm());
  if (scale == 0.0) return start;

  // Restart from basis vectors if the start is orthogonal to the top eigenspace.
  for (std::size_t attempt = 0; attempt <= n; ++attempt) {
    if (attempt > 0) {
      std::fill(start.begin(), start.end(), 0.0);
      start[attempt - 1] = 1.0;
    }
    RowMatrix m = sym;
    for (double& v : m.values()) v /= scale;
    std::vector<double> v = start;
    bool lost = false;
    for (std::size_t it = 0; it < max_iter; ++it) {
      std::vector<double> w = multiply(m, v);
      const double nw = norm(w);
      if (it == 0 && nw <= 1e-12) {
        lost = true;
        break;
      }
      for (double& x : w) x /= nw;
      double diff = 0.0;
      for (std::size_t i = 0; i < n; ++i) diff += (w[i] - v[i]) * (w[i] - v[i]);
      v = std::move(w);
      if (std::sqrt(diff) < tol) break;
      m = square(m);
      const double fm = std::sqrt(m.squared_norm());
      for (double& x : m.values()) x /= fm;
    }
    if (!lost) return v;
  }
  return start;
}

void standardize_columns(RowMatrix& g) {
  const std::size_t rows = g.rows();
  if (rows == 0) return;
  for (std::size_t c = 0; c < g.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mean += g(r, c);
    mean /= static_cast<double>(rows);
    double var = 0.0;
    for (std::size_t r = 0; r < rows; ++r) var += (g(r, c) - mean) * (g(r, c) - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(rows)), 1e-12);
    for (std::size_t r = 0; r < rows; ++r) g(r, c) = (g(r, c) - mean) / sd;
  }
}

RowMatrix gram(const RowMatrix& g) {
  const std::size_t n = g.cols();
  RowMatrix out(n, n);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    auto row = g.row(r);
    for (std::size_t i = 0; i < n; ++i) {
      if (row[i] == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += row[i] * row[j];
    }
  }
  return out;
}

Projected project_scores(RowMatrix g, std::vector<double> direction) {
  if (direction.size() != g.cols()) throw Error("project_scores: direction width mismatch");
  standardize_columns(g);
  const double n = std::sqrt(dot(direction, direction));
  if (n > 0.0)
    for (double& v : direction) v /= n;
  Projected out;
  out.scores.resize(g.rows());
  for (std::size_t r = 0; r < g.rows(); ++r) out.scores[r] = dot(g.row(r), direction);
  out.direction = std::move(direction);
  return out;
}

Projected principal_scores(RowMatrix g) {
  standardize_columns(g);
  std::vector<double> p = top_eigenvector(gram(g));
  Projected out;
  out.scores.resize(g.rows());
  for (std::size_t r = 0; r < g.rows(); ++r) out.scores[r] = dot(g.row(r), p);
  out.direction = std::move(p);
  return out;
}

std::vector<std::size_t> delta_rule(std::span<const double> scores, double delta, bool* degenerate) {
  std::vector<std::size_t> upper;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] >= delta) upper.push_back(i);
  const bool guard = upper.empty() || upper.size() == scores.size();
  if (degenerate) *degenerate = guard;
  if (guard && !scores.empty()) {
    const auto top = std::max_element(scores.begin(), scores.end()) - scores.begin();
    upper.assign(1, static_cast<std::size_t>(top));
  }
  return upper;
}

BalancedCut balanced_threshold(std::span<const double> scores, std::span<const std::size_t> counts,
                               std::size_t d) {
  const std::size_t n = scores.size();
  if (n < 2 || counts.size() != n) throw Error("balanced_threshold: need >= 2 scored entries with counts");
  std::size_t total = 0;
  for (auto c : counts) total += c;
  const bool unit = total == 0;  // no counts: balance member numbers
  auto w = [&](std::size_t i) { return unit ? std::size_t{1} : counts[i]; };
  if (unit) total = n;

  auto less = [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] < scores[b] : a < b;
  };
  std::vector<std::size_t> ord(n);
  std::iota(ord.begin(), ord.end(), std::size_t{0});

  // Weighted quickselect for the last order position p whose prefix weight
  // is at most total/2.
  std::size_t lo = 0, hi = n, acc = 0;
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(ord.begin() + lo, ord.begin() + mid, ord.begin() + hi, less);
    std::size_t wl = 0;
    for (std::size_t t = lo; t < mid; ++t) wl += w(ord[t]);
    if (2 * (acc + wl) > total) {
      hi = mid;
    } else {
      acc += wl;
      lo = mid;
    }
  }
  const std::size_t p = lo;
  // ord[0..p) precede ord[p] and ord(p..n) follow it, each side unordered.
  auto diff_at = [&](std::size_t lower) { return lower * 2 > total ? lower * 2 - total : total - lower * 2; };
  std::size_t cut = 0;
  std::size_t lower_w = 0;
  const std::size_t lower_p = acc, lower_p1 = acc + w(ord[p]);
  if (p >= 1 && (p + 1 > n - 1 || diff_at(lower_p) <= diff_at(lower_p1))) {
    cut = p;
    lower_w = lower_p;
  } else {
    cut = p + 1;
    lower_w = lower_p1;
  }

  std::size_t below, above;  // order positions cut-1 and cut
  if (cut == p) {
    below = *std::max_element(ord.begin(), ord.begin() + p, less);
    above = ord[p];
  } else {
    below = ord[p];
    above = *std::min_element(ord.begin() + p + 1, ord.end(), less);
  }

  BalancedCut out;
  out.difference = diff_at(lower_w);
  const bool separated = scores[below] < scores[above];
  out.threshold = separated ? 0.5 * (scores[below] + scores[above]) : scores[above];
  out.feasible = separated && out.difference <= d;
  out.upper.assign(ord.begin() + cut, ord.end());
  std::sort(out.upper.begin(), out.upper.end());
  return out;
}

Index apply_split(ClusteredTable& table, Index k, std::span<const Index> entities) {
  const auto src = table.embeddings.row(k);
  const std::vector<double> copy(src.begin(), src.end());
  const Index created = table.state.split_off(k, entities);
  table.embeddings.append_row(copy);
  ++table.splits;
  return created;
}

SplitResult split_cluster(EmbeddingModel& model, const InteractionView& view, Side side, Index k,
                          const SplitOptions& opt, Rng& rng) {
  ClusteredTable& table = model.table(side);
  if (k >= table.num_clusters()) throw Error("split_cluster: cluster index out of range");
  const std::vector<Index> members = table.state.sorted_members(k);
  if (members.size() < 2) throw Error("split_cluster: cluster needs at least 2 members");

  SplitResult res;
  res.source = k;
  std::vector<std::size_t> upper;
  if (opt.method == SplitMethod::kRandom) {
    std::bernoulli_distribution coin(0.5);
    do {
      upper.clear();
      for (std::size_t i = 0; i < members.size(); ++i)
        if (coin(rng)) upper.push_back(i);
    } while (upper.empty() || upper.size() == members.size());
  } else {
    RowMatrix g = entity_gradients(model, view, side, members);
    Projected pr;
    if (opt.method == SplitMethod::kGpca) {
      pr = principal_scores(std::move(g));
    } else {
      std::normal_distribution<double> normal(0.0, 1.0);
      std::vector<double> dir(model.dim());
      for (double& v : dir) v = normal(rng);
      pr = project_scores(std::move(g), std::move(dir));
    }
    if (opt.balance_d) {
      std::vector<std::size_t> counts(members.size());
      for (std::size_t i = 0; i < members.size(); ++i) counts[i] = table.state.entity_count(members[i]);
      BalancedCut cut = balanced_threshold(pr.scores, counts, *opt.balance_d);
      res.balanced = cut.feasible;
      upper = std::move(cut.upper);
    } else {
      upper = delta_rule(pr.scores, opt.delta, &res.degenerate);
    }
  }

  std::vector<Index> moving;
  moving.reserve(upper.size());
  for (std::size_t i : upper) moving.push_back(members[i]);
  res.created = apply_split(table, k, moving);
  res.moved = moving.size();
  return res;
}

std::size_t strategy1_isolate(ClusteredTable& table, std::size_t d, std::span<const Index> candidates,
                              std::size_t max_clusters) {
  std::vector<Index> order(candidates.begin(), candidates.end());
  std::sort(order.begin(), order.end());
  order.erase(std::unique(order.begin(), order.end()), order.end());
  std::size_t isolated = 0;
  for (Index e : order) {
    if (table.num_clusters() >= max_clusters) break;
    const Index k = table.state.cluster_of(e);
    if (table.state.entity_count(e) > d && table.state.member_count(k) > 1) {
      const Index one[] = {e};
      apply_split(table, k, one);
      ++isolated;
    }
  }
  return isolated;
}

std::vector<Index> strategy2_candidates(const ClusterState& state, std::size_t d) {
  std::vector<Index> out;
  state.for_each_splittable([&](Index k) {
    if (!strategy2_eligible(state, k, d)) return false;
    out.push_back(k);
    return true;
  });
  return out;
}

std::vector<Index> modulo_assign(std::size_t num_entities, std::size_t num_clusters) {
  if (num_clusters == 0) throw Error("modulo_assign: need at least one cluster");
  std::vector<Index> out(num_entities);
  for (std::size_t j = 0; j < num_entities; ++j) out[j] = static_cast<Index>(j % num_clusters);
  return out;
}

}  // namespace cel
