#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cel/cluster.hpp"
#include "helpers.hpp"

using namespace cel;
using namespace cel::testing;

namespace {

// Loss of item j's interactions if it used cluster row k.
double item_loss_with(const EmbeddingModel& m, const InteractionView& v, Index j, Index k) {
  double s = 0.0;
  for (auto p : v.positions(Side::kItem, j)) {
    const auto& x = v.interactions()[p];
    const double r = x.rating - dot(m.users().entity_row(x.user), m.items().embeddings.row(k));
    s += r * r;
  }
  return s;
}

}  // namespace

TEST_CASE("reassignment matches exhaustive per-item enumeration") {
  Rng rng(31);
  for (int rep = 0; rep < 25; ++rep) {
    Toy t = random_toy(rng, 3, 4, 1 + rep % 4);
    const auto& v = t.store.view();
    const ClusterState before = t.model.items().state;
    std::vector<Index> expected(before.assignment().begin(), before.assignment().end());
    std::vector<std::size_t> sizes(before.num_clusters());
    for (Index k = 0; k < sizes.size(); ++k) sizes[k] = before.member_count(k);
    for (Index j = 0; j < 4; ++j) {
      const Index cur = expected[j];
      // Sole members at the start of the pass stay; no move may empty a cluster.
      if (before.member_count(cur) == 1 || sizes[cur] == 1) continue;
      Index best = cur;
      double best_loss = item_loss_with(t.model, v, j, cur);
      for (Index k = 0; k < sizes.size(); ++k) {
        const double l = item_loss_with(t.model, v, j, k);
        if (l < best_loss) {
          best_loss = l;
          best = k;
        }
      }
      if (best != cur) {
        --sizes[cur];
        ++sizes[best];
        expected[j] = best;
      }
    }
    std::vector<Index> all = {0, 1, 2, 3};
    reassign(t.model, v, Side::kItem, all);
    const auto got = t.model.items().state.assignment();
    CHECK(std::vector<Index>(got.begin(), got.end()) == expected);
    t.model.items().state.check();
  }
}

TEST_CASE("reassignment guards and fixed points") {
  SUBCASE("perfectly fit item stays") {
    auto m = make_model({{1, 0}, {0, 1}}, {{2, 3}, {1, 1}}, {0, 0, 1});
    InteractionStore s({{0, 0, 2, {}}, {1, 0, 3, {}}, {0, 1, 1, {}}, {0, 2, 1, {}}}, 2, 3);
    std::vector<Index> c = {0};
    CHECK(reassign(m, s.view(), Side::kItem, c) == 0);
    CHECK(m.items().state.cluster_of(0) == 0);
  }
  SUBCASE("sole member stays even when another cluster fits better") {
    auto m = make_model({{1, 0}}, {{0, 0}, {5, 0}}, {0, 1, 1});
    InteractionStore s({{0, 0, 5, {}}, {0, 1, 5, {}}, {0, 2, 5, {}}}, 1, 3);
    std::vector<Index> c = {0};
    CHECK(reassign(m, s.view(), Side::kItem, c) == 0);
    CHECK(m.items().state.cluster_of(0) == 0);
  }
  SUBCASE("ties keep the current cluster") {
    auto m = make_model({{1, 0}}, {{1, 0}, {1, 0}}, {1, 1, 0});
    InteractionStore s({{0, 0, 3, {}}, {0, 1, 3, {}}, {0, 2, 3, {}}}, 1, 3);
    std::vector<Index> c = {0, 1};
    CHECK(reassign(m, s.view(), Side::kItem, c) == 0);
  }
  SUBCASE("pools restrict the choice") {
    auto m = make_model({{1, 0}}, {{0, 0}, {2, 0}, {5, 0}}, {0, 0, 1, 2});
    InteractionStore s({{0, 0, 5, {}}, {0, 1, 0, {}}, {0, 2, 2, {}}, {0, 3, 5, {}}}, 1, 4);
    std::vector<Index> c = {0};
    std::vector<std::vector<Index>> pools = {{0, 1}};
    CHECK(reassign(m, s.view(), Side::kItem, c, pools) == 1);
    CHECK(m.items().state.cluster_of(0) == 1);
  }
}

TEST_CASE("sample_cluster_pool") {
  Rng rng(1);
  ClusterState one(std::vector<Index>(5, 0), 1);
  CHECK(sample_cluster_pool(one, 3, 10, rng) == std::vector<Index>{0});
  ClusterState four({0, 1, 2, 3, 0}, 4);
  CHECK(sample_cluster_pool(four, 4, 3, rng) == std::vector<Index>{0, 1, 2, 3});
  std::vector<Index> assign(200);
  for (Index j = 0; j < 200; ++j) assign[j] = j % 100;
  ClusterState big(assign, 100);
  Rng a(7), b(7);
  const auto pa = sample_cluster_pool(big, 42, 10, a);
  CHECK(pa.size() == 11);
  CHECK(std::is_sorted(pa.begin(), pa.end()));
  CHECK(std::count(pa.begin(), pa.end(), Index{42}) == 1);
  CHECK(pa == sample_cluster_pool(big, 42, 10, b));
}

TEST_CASE("choose_cluster") {
  SUBCASE("interaction counts 10 and 3 pick cluster 0") {
    std::vector<Interaction> xs;
    for (int t = 0; t < 10; ++t) xs.push_back({static_cast<Index>(t), static_cast<Index>(t % 2), 1, {}});
    for (int t = 0; t < 3; ++t) xs.push_back({static_cast<Index>(t), static_cast<Index>(2 + t % 2), 1, {}});
    InteractionStore s(xs, 10, 4);
    Rng rng(1);
    auto m = init_model(10, 4, 2, {0, 0, 1, 1}, 2, rng, s.counts(Side::kItem));
    CHECK(choose_cluster(m, s.view(), Side::kItem, SplitCriterion::kInteractionCount) == 0);
    CHECK(choose_cluster(m, s.view(), Side::kItem, SplitCriterion::kMemberCount) == 0);
  }
  SUBCASE("single cluster") {
    Rng rng(2);
    Toy t = random_toy(rng, 3, 4, 1);
    for (int c = 0; c < 5; ++c)
      CHECK(choose_cluster(t.model, t.store.view(), Side::kItem, static_cast<SplitCriterion>(c)) == 0);
  }
  SUBCASE("all singletons") {
    Rng rng(3);
    Toy t = random_toy(rng, 3, 4, 4);
    CHECK_FALSE(choose_cluster(t.model, t.store.view(), Side::kItem, SplitCriterion::kTotalLoss).has_value());
  }
  SUBCASE("loss criteria match a dense oracle") {
    Rng rng(4);
    for (int rep = 0; rep < 10; ++rep) {
      Toy t = random_toy(rng, 4, 8, 3);
      const auto& st = t.model.items().state;
      auto oracle = [&](bool mean) {
        std::optional<Index> best;
        double best_v = -1.0;
        for (Index k = 0; k < st.num_clusters(); ++k) {
          if (st.member_count(k) < 2) continue;
          double l = 0.0;
          for (Index j : st.members(k)) l += item_loss_with(t.model, t.store.view(), j, k);
          if (mean) l /= static_cast<double>(st.member_count(k));
          if (l > best_v) {
            best_v = l;
            best = k;
          }
        }
        return best;
      };
      CHECK(choose_cluster(t.model, t.store.view(), Side::kItem, SplitCriterion::kTotalLoss) == oracle(false));
      CHECK(choose_cluster(t.model, t.store.view(), Side::kItem, SplitCriterion::kMeanLoss) == oracle(true));
    }
  }
}

TEST_CASE("criterion and method names round-trip") {
  for (int c = 0; c < 5; ++c) {
    const auto v = static_cast<SplitCriterion>(c);
    CHECK(parse_criterion(to_string(v)) == v);
  }
  for (int c = 0; c < 3; ++c) {
    const auto v = static_cast<SplitMethod>(c);
    CHECK(parse_split_method(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_criterion("largest"), Error);
  CHECK_THROWS_AS(parse_split_method("kmeans"), Error);
}

TEST_CASE("top eigenvector agrees with a dense symmetric solver") {
  Rng rng(41);
  std::normal_distribution<double> z(0.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t r = 2 + rep % 6;
    RowMatrix g(3 + rep % 11, r);
    for (double& v : g.values()) v = z(rng);
    const RowMatrix c = gram(g);
    Eigen::MatrixXd e(r, r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j) e(i, j) = c(i, j);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(e);
    const Eigen::VectorXd ref = solver.eigenvectors().col(static_cast<Eigen::Index>(r - 1));
    const auto p = top_eigenvector(c);
    double norm = 0.0, sign = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      norm += p[i] * p[i];
      sign += p[i] * ref(static_cast<Eigen::Index>(i));
    }
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-9));
    sign = sign < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < r; ++i) CHECK(std::abs(p[i] - sign * ref(static_cast<Eigen::Index>(i))) < 1e-8);
    // Rayleigh quotient is maximal against random unit vectors.
    auto quad = [&](const std::vector<double>& v) {
      double s = 0.0;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j) s += v[i] * c(i, j) * v[j];
      return s;
    };
    const double top = quad(p);
    for (int t = 0; t < 100; ++t) {
      std::vector<double> v(r);
      double n2 = 0.0;
      for (double& x : v) {
        x = z(rng);
        n2 += x * x;
      }
      for (double& x : v) x /= std::sqrt(n2);
      CHECK(quad(v) <= top * (1 + 1e-12) + 1e-12);
    }
  }
}

TEST_CASE("top eigenvector of a zero matrix is a unit vector") {
  const auto p = top_eigenvector(RowMatrix(3, 3, 0.0));
  double n2 = 0.0;
  for (double v : p) n2 += v * v;
  CHECK(n2 == doctest::Approx(1.0));
}

TEST_CASE("standardized columns have zero mean and unit variance") {
  RowMatrix g(4, 2);
  const double vals[] = {1, 5, 2, 5, 3, 5, 6, 5};
  std::copy(std::begin(vals), std::end(vals), g.values().begin());
  standardize_columns(g);
  double mean = 0.0, var = 0.0;
  for (std::size_t i = 0; i < 4; ++i) mean += g(i, 0);
  for (std::size_t i = 0; i < 4; ++i) var += g(i, 0) * g(i, 0);
  CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(var / 4 == doctest::Approx(1.0));
  for (std::size_t i = 0; i < 4; ++i) CHECK(g(i, 1) == 0.0);  // constant column
}

TEST_CASE("two opposite gradients split one per side along g") {
  RowMatrix g(2, 2);
  g(0, 0) = 3;
  g(0, 1) = 4;
  g(1, 0) = -3;
  g(1, 1) = -4;
  const Projected pr = principal_scores(g);
  // Standardized rows are (1,1) and (-1,-1): direction is (1,1)/sqrt(2) up to sign.
  CHECK(std::abs(pr.direction[0]) == doctest::Approx(1 / std::sqrt(2.0)));
  CHECK(pr.direction[0] == doctest::Approx(pr.direction[1]));
  CHECK(pr.scores[0] == doctest::Approx(-pr.scores[1]));
  const auto up = delta_rule(pr.scores, 0.0);
  CHECK(up.size() == 1);
}

TEST_CASE("delta rule degenerate guard") {
  bool degenerate = false;
  std::vector<double> equal = {0.0, 0.0, 0.0};
  // All >= 0: every row would move, so only the first maximal one does.
  CHECK(delta_rule(equal, 0.0, &degenerate) == std::vector<std::size_t>{0});
  CHECK(degenerate);
  std::vector<double> s = {-1.0, 2.0, 0.5, 2.0};
  CHECK(delta_rule(s, 0.0, &degenerate) == std::vector<std::size_t>{1, 2, 3});
  CHECK_FALSE(degenerate);
  CHECK(delta_rule(s, 5.0, &degenerate) == std::vector<std::size_t>{1});
  CHECK(degenerate);
}

TEST_CASE("balanced threshold") {
  SUBCASE("symmetric four") {
    std::vector<double> s = {1, 2, 3, 4};
    std::vector<std::size_t> c = {1, 1, 1, 1};
    const auto cut = balanced_threshold(s, c, 1);
    CHECK(cut.threshold == doctest::Approx(2.5));
    CHECK(cut.upper == std::vector<std::size_t>{2, 3});
    CHECK(cut.difference == 0);
    CHECK(cut.feasible);
  }
  SUBCASE("equal scores are not separable") {
    std::vector<double> s = {1, 1, 1, 1};
    std::vector<std::size_t> c = {1, 1, 1, 1};
    const auto cut = balanced_threshold(s, c, 1);
    CHECK_FALSE(cut.feasible);
    CHECK(cut.upper.size() == 2);
    CHECK(cut.difference == 0);
  }
  SUBCASE("zero counts balance member numbers") {
    std::vector<double> s = {4, 3, 2, 1, 0};
    std::vector<std::size_t> c(5, 0);
    const auto cut = balanced_threshold(s, c, 1);
    CHECK(cut.upper.size() + 1 >= 5 - cut.upper.size());
    CHECK(cut.difference == 1);
  }
  SUBCASE("optimal against enumeration of every cut") {
    Rng rng(51);
    std::normal_distribution<double> z(0.0, 1.0);
    for (int rep = 0; rep < 300; ++rep) {
      const std::size_t n = 2 + rng() % 30;
      std::vector<double> s(n);
      std::vector<std::size_t> c(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = rep % 3 == 0 ? std::round(2 * z(rng)) : z(rng);
        c[i] = 1 + rng() % 40;
      }
      const std::size_t d = 1 + rng() % 60;
      const auto cut = balanced_threshold(s, c, d);
      std::vector<std::size_t> ord(n);
      std::iota(ord.begin(), ord.end(), std::size_t{0});
      std::sort(ord.begin(), ord.end(), [&](auto a, auto b) { return s[a] != s[b] ? s[a] < s[b] : a < b; });
      const std::size_t total = std::accumulate(c.begin(), c.end(), std::size_t{0});
      std::size_t best = std::numeric_limits<std::size_t>::max(), prefix = 0;
      for (std::size_t k = 1; k < n; ++k) {
        prefix += c[ord[k - 1]];
        best = std::min(best, prefix * 2 > total ? prefix * 2 - total : total - prefix * 2);
      }
      CHECK(cut.difference == best);
      std::size_t upper = 0;
      for (auto i : cut.upper) upper += c[i];
      CHECK((upper * 2 > total ? upper * 2 - total : total - upper * 2) == cut.difference);
      REQUIRE_FALSE(cut.upper.empty());
      REQUIRE(cut.upper.size() < n);
      if (cut.feasible)
        for (std::size_t i = 0; i < n; ++i) {
          const bool up = std::binary_search(cut.upper.begin(), cut.upper.end(), i);
          CHECK(up == (s[i] > cut.threshold));
        }
    }
  }
  SUBCASE("unit counts summing to 2d+1 stay within d") {
    const std::size_t d = 7;
    std::vector<double> s(2 * d + 1);
    std::vector<std::size_t> c(2 * d + 1, 1);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sin(static_cast<double>(i));
    CHECK(balanced_threshold(s, c, d).difference <= d);
  }
}

TEST_CASE("splitting") {
  Rng rng(61);
  SUBCASE("loss is unchanged right after a split") {
    for (int rep = 0; rep < 30; ++rep) {
      Toy t = random_toy(rng, 5, 9, 2);
      const double before = data_loss(t.model, t.store.view());
      SplitOptions opt;
      opt.method = static_cast<SplitMethod>(rep % 3);
      const auto k = choose_cluster(t.model, t.store.view(), Side::kItem, SplitCriterion::kInteractionCount);
      REQUIRE(k);
      const auto r = split_cluster(t.model, t.store.view(), Side::kItem, *k, opt, rng);
      CHECK(r.created == t.model.items().num_clusters() - 1);
      CHECK(r.moved >= 1);
      CHECK(t.model.items().splits == 1);
      CHECK(data_loss(t.model, t.store.view()) == doctest::Approx(before).epsilon(1e-12));
      CHECK(t.model.items().embeddings.row(r.created)[0] == t.model.items().embeddings.row(*k)[0]);
      t.model.items().state.check();
    }
  }
  SUBCASE("identical member gradients move exactly one item") {
    auto m = make_model({{1, 0}}, {{0.5, 0.5}}, {0, 0, 0});
    InteractionStore s({{0, 0, 2, {}}, {0, 1, 2, {}}, {0, 2, 2, {}}}, 1, 3);
    const auto r = split_cluster(m, s.view(), Side::kItem, 0, {}, rng);
    CHECK(r.degenerate);
    CHECK(r.moved == 1);
    CHECK(m.items().state.member_count(1) == 1);
  }
  SUBCASE("two-member clusters split one-one under every method") {
    for (int method = 0; method < 3; ++method) {
      Toy t = random_toy(rng, 4, 2, 1);
      SplitOptions opt;
      opt.method = static_cast<SplitMethod>(method);
      split_cluster(t.model, t.store.view(), Side::kItem, 0, opt, rng);
      CHECK(t.model.items().state.member_count(0) == 1);
      CHECK(t.model.items().state.member_count(1) == 1);
    }
  }
  SUBCASE("fixed seed gives the same partition") {
    Rng base(5);
    Toy t = random_toy(base, 6, 12, 1);
    for (int method = 0; method < 3; ++method) {
      EmbeddingModel a = t.model, b = t.model;
      Rng ra(77), rb(77);
      SplitOptions opt;
      opt.method = static_cast<SplitMethod>(method);
      split_cluster(a, t.store.view(), Side::kItem, 0, opt, ra);
      split_cluster(b, t.store.view(), Side::kItem, 0, opt, rb);
      CHECK(a.items().state == b.items().state);
    }
  }
  SUBCASE("balanced split keeps both sides near half the interactions") {
    std::vector<Interaction> xs;
    for (Index j = 0; j < 20; ++j)
      for (Index u = 0; u <= j % 5; ++u) xs.push_back({u, j, 1.0 + j % 3, {}});
    InteractionStore s(xs, 5, 20);
    Rng r2(3);
    auto m = init_model(5, 20, 3, std::vector<Index>(20, 0), 1, r2, s.counts(Side::kItem));
    SplitOptions opt;
    opt.balance_d = 5;
    const auto res = split_cluster(m, s.view(), Side::kItem, 0, opt, r2);
    const auto& st = m.items().state;
    const std::size_t a = st.interaction_count(0), b = st.interaction_count(res.created);
    CHECK((a > b ? a - b : b - a) <= 5);
    CHECK(a >= 5 / 2);
    CHECK(b >= 5 / 2);
  }
}

TEST_CASE("strategy 1 isolates items with more than d interactions") {
  std::vector<std::size_t> counts = {150, 10, 100, 5, 1};
  ClusteredTable t = ClusteredTable::from_entity_rows(RowMatrix(5, 2, 1.0), {0, 0, 0, 0, 0}, 1, counts);
  std::vector<Index> cand = {0, 1, 2, 3, 4};
  CHECK(strategy1_isolate(t, 100, cand, 10) == 1);
  CHECK(t.num_clusters() == 2);
  CHECK(t.state.member_count(t.state.cluster_of(0)) == 1);
  CHECK(t.state.cluster_of(2) == 0);  // exactly d stays
  CHECK(strategy1_isolate(t, 100, cand, 10) == 0);  // idempotent
  ClusteredTable capped = ClusteredTable::from_entity_rows(RowMatrix(5, 2, 1.0), {0, 0, 0, 0, 0}, 1, counts);
  CHECK(strategy1_isolate(capped, 1, cand, 3) == 2);
  CHECK(capped.num_clusters() == 3);
}

TEST_CASE("strategy 2 eligibility is strict") {
  ClusterState s({0, 0, 1}, 2, {100, 100, 201});
  CHECK_FALSE(strategy2_eligible(s, 0, 100));
  ClusterState s2({0, 0, 1}, 2, {100, 101, 5});
  CHECK(strategy2_eligible(s2, 0, 100));
  CHECK(strategy2_candidates(s2, 100) == std::vector<Index>{0});
}

TEST_CASE("modulo assignment") {
  CHECK(modulo_assign(5, 2) == std::vector<Index>{0, 1, 0, 1, 0});
  CHECK(modulo_assign(4, 1) == std::vector<Index>{0, 0, 0, 0});
  CHECK(modulo_assign(4, 4) == std::vector<Index>{0, 1, 2, 3});
  CHECK_THROWS_AS(modulo_assign(4, 0), Error);
}

TEST_CASE("cluster state keeps clusters nonempty") {
  ClusterState s({0, 0, 1}, 2, {1, 2, 3});
  CHECK_THROWS_AS(s.move(2, 0), Error);
  s.move(0, 1);
  CHECK(s.interaction_count(1) == 4);
  std::vector<Index> all = {1};
  CHECK_THROWS_AS(s.split_off(0, all), Error);
  CHECK_THROWS_AS(ClusterState({0, 0}, 2), Error);
  s.check();
}
