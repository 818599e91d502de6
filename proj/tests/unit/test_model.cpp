#include <doctest.h>

#include <cmath>

#include "cel/model.hpp"
#include "helpers.hpp"

using namespace cel;
using namespace cel::testing;

TEST_CASE("prediction is the dot product of user row and cluster row") {
  auto m = make_model({{1, 0}, {0, 0}}, {{2, 3}}, {0, 0});
  CHECK(m.predict(0, 0) == doctest::Approx(2.0));
  CHECK(m.predict(1, 0) == 0.0);
  CHECK(m.predict(1, 1) == 0.0);
}

TEST_CASE("predictions match an elementwise recomputation") {
  Rng rng(2);
  Toy t = random_toy(rng, 3, 4, 2, 5);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 4; ++j) {
      double s = 0.0;
      const auto a = t.model.users().embeddings.row(i);
      const auto b = t.model.items().embeddings.row(t.model.items().state.cluster_of(j));
      for (std::size_t c = 0; c < 5; ++c) s += a[c] * b[c];
      CHECK(t.model.predict(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("losses") {
  SUBCASE("exact fit has zero loss") {
    auto m = make_model({{1, 2}}, {{1, 1}, {0, 2}}, {0, 1});
    InteractionStore s({{0, 0, 3.0, {}}, {0, 1, 4.0, {}}}, 1, 2);
    CHECK(loss(m, s.view(), 0.0) == 0.0);
  }
  SUBCASE("one interaction with zero prediction") {
    auto m = make_model({{0, 0}}, {{1, 1}}, {0});
    InteractionStore s({{0, 0, 1.0, {}}}, 1, 1);
    CHECK(data_loss(m, s.view()) == 1.0);
  }
  SUBCASE("toy instance matches the dense masked Frobenius oracle") {
    Rng rng(5);
    for (int rep = 0; rep < 10; ++rep) {
      Toy t = random_toy(rng, 3, 4, 2);
      CHECK(data_loss(t.model, t.store.view()) == doctest::Approx(dense_data_loss(t.model, t.store)));
      const double reg = 0.5 * 0.7 *
                         (t.model.users().embeddings.squared_norm() + t.model.items().embeddings.squared_norm());
      CHECK(loss(t.model, t.store.view(), 0.7) == doctest::Approx(dense_data_loss(t.model, t.store) + reg));
    }
  }
  SUBCASE("cluster losses add up to the data loss") {
    Rng rng(6);
    Toy t = random_toy(rng, 4, 6, 2);
    const double total = data_loss(t.model, t.store.view());
    CHECK(cluster_loss(t.model, t.store.view(), Side::kItem, 0) +
              cluster_loss(t.model, t.store.view(), Side::kItem, 1) ==
          doctest::Approx(total));
    Toy one = random_toy(rng, 4, 6, 1);
    CHECK(cluster_loss(one.model, one.store.view(), Side::kItem, 0) ==
          doctest::Approx(data_loss(one.model, one.store.view())));
  }
  SUBCASE("cluster without interactions in the view") {
    auto m = make_model({{1, 1}}, {{1, 0}, {0, 1}}, {0, 1});
    InteractionStore s({{0, 0, 5.0, {}}}, 1, 2);
    CHECK(cluster_loss(m, s.view(), Side::kItem, 1) == 0.0);
  }
}

TEST_CASE("initialization rows are nonnegative with max entry 1") {
  Rng rng(9);
  const RowMatrix r = random_embeddings(50, 8, rng, true);
  for (std::size_t i = 0; i < r.rows(); ++i) {
    double mx = 0.0;
    for (double v : r.row(i)) {
      CHECK(v >= 0.0);
      mx = std::max(mx, v);
    }
    CHECK(mx == doctest::Approx(1.0));
  }
}

TEST_CASE("init_model sets cluster rows to the member mean") {
  Rng a(4), b(4);
  const auto m = init_model(3, 4, 2, {0, 1, 0, 1}, 2, a);
  const RowMatrix users = random_embeddings(3, 2, b, true);
  const RowMatrix items = random_embeddings(4, 2, b, true);
  CHECK(m.users().embeddings == users);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(m.items().embeddings(0, c) == doctest::Approx(0.5 * (items(0, c) + items(2, c))));
    CHECK(m.items().embeddings(1, c) == doctest::Approx(0.5 * (items(1, c) + items(3, c))));
  }
}

TEST_CASE("random_assignment leaves no cluster empty") {
  Rng rng(1);
  for (std::size_t k = 1; k <= 10; ++k) {
    const auto a = random_assignment(10, k, rng);
    ClusterState s(a, k);
    s.check();
  }
  CHECK_THROWS_AS(random_assignment(3, 4, rng), Error);
}

TEST_CASE("entity gradient of one interaction is 2 (r - a.b) a") {
  auto m = make_model({{0.5, 1.0, 2.0}}, {{1.0, 0.25, 0.5}}, {0});
  InteractionStore s({{0, 0, 4.0, {}}}, 1, 1);
  const double res = 4.0 - (0.5 + 0.25 + 1.0);
  const auto g = item_gradient(m, s.view(), 0);
  CHECK(g[0] == doctest::Approx(2 * res * 0.5));
  CHECK(g[1] == doctest::Approx(2 * res * 1.0));
  CHECK(g[2] == doctest::Approx(2 * res * 2.0));
  InteractionStore none({{0, 0, 4.0, {}}}, 1, 2);
  auto m2 = make_model({{0.5, 1.0, 2.0}}, {{1.0, 0.25, 0.5}}, {0, 0});
  for (double v : item_gradient(m2, none.view(), 1)) CHECK(v == 0.0);
}

TEST_CASE("items with identical interactions have identical gradients") {
  auto m = make_model({{1, 0}, {0.5, 2}}, {{1, 1}}, {0, 0});
  InteractionStore s({{0, 0, 3, {}}, {1, 0, 2, {}}, {0, 1, 3, {}}, {1, 1, 2, {}}}, 2, 2);
  CHECK(item_gradient(m, s.view(), 0) == item_gradient(m, s.view(), 1));
}

TEST_CASE("compute_gradient matches central differences") {
  Rng rng(13);
  for (int rep = 0; rep < 20; ++rep) {
    Toy t = random_toy(rng, 4, 6, 1 + rep % 4);
    const double lambda = 0.3 * (rep % 3);
    const auto g = compute_gradient(t.model, t.store.view(), lambda, GradScaling::kNone, true);
    for (Side side : {Side::kUser, Side::kItem}) {
      const TableGradient& tg = side == Side::kItem ? g.items : g.users;
      RowMatrix& rows = t.model.table(side).embeddings;
      REQUIRE(tg.rows.size() == rows.rows());
      for (std::size_t k = 0; k < tg.rows.size(); ++k)
        for (std::size_t c = 0; c < rows.cols(); ++c) {
          double& v = rows(tg.rows[k], c);
          const double v0 = v, h = 1e-6;
          v = v0 + h;
          const double up = loss(t.model, t.store.view(), lambda);
          v = v0 - h;
          const double down = loss(t.model, t.store.view(), lambda);
          v = v0;
          CHECK(tg.values(k, c) == doctest::Approx((up - down) / (2 * h)).epsilon(1e-5));
        }
    }
  }
}

TEST_CASE("grad_step") {
  SUBCASE("zero residuals and no regularization leave the model unchanged") {
    auto m = make_model({{1, 2}}, {{1, 1}}, {0});
    InteractionStore s({{0, 0, 3.0, {}}}, 1, 1);
    const auto before = m.items().embeddings;
    StepOptions opt;
    opt.lambda_reg = 0.0;
    opt.lr = 0.1;
    grad_step(m, s.view(), opt);
    CHECK(m.items().embeddings == before);
  }
  SUBCASE("single interaction step equals the hand gradient") {
    auto m = make_model({{0.5, 1.0}}, {{1.0, 0.5}}, {0});
    InteractionStore s({{0, 0, 3.0, {}}}, 1, 1);
    StepOptions opt;
    opt.lambda_reg = 0.0;
    opt.lr = 0.01;
    const double res = 3.0 - (0.5 + 0.5);
    grad_step(m, s.view(), opt);
    CHECK(m.items().embeddings(0, 0) == doctest::Approx(1.0 + 0.01 * 2 * res * 0.5));
    CHECK(m.items().embeddings(0, 1) == doctest::Approx(0.5 + 0.01 * 2 * res * 1.0));
    CHECK(m.users().embeddings(0, 0) == doctest::Approx(0.5 + 0.01 * 2 * res * 1.0));
  }
  SUBCASE("averaging equalizes clusters with identical member gradients") {
    // Cluster 0 has 1 member, cluster 1 has 100; every item has the same
    // single interaction with user 0.
    std::vector<Index> assign(101, 1);
    assign[0] = 0;
    auto m = make_model({{1.0, 0.5}}, {{0.2, 0.2}, {0.2, 0.2}}, assign);
    std::vector<Interaction> xs;
    for (Index j = 0; j < 101; ++j) xs.push_back({0, j, 2.0, {}});
    InteractionStore s(std::move(xs), 1, 101);
    StepOptions opt;
    opt.lambda_reg = 0.0;
    opt.lr = 1e-3;
    grad_step(m, s.view(), opt);
    CHECK(m.items().embeddings(0, 0) == doctest::Approx(m.items().embeddings(1, 0)));
    CHECK(m.items().embeddings(0, 1) == doctest::Approx(m.items().embeddings(1, 1)));
  }
  SUBCASE("rows stay nonnegative") {
    Rng rng(3);
    Toy t = random_toy(rng, 5, 8, 3);
    StepOptions opt;
    opt.lr = 0.5;
    for (Projection p : {Projection::kAbs, Projection::kClampZero}) {
      opt.projection = p;
      for (int s = 0; s < 5; ++s) grad_step(t.model, t.store.view(), opt);
      for (double v : t.model.users().embeddings.values()) CHECK(v >= 0.0);
      for (double v : t.model.items().embeddings.values()) CHECK(v >= 0.0);
    }
  }
}

TEST_CASE("project_row") {
  std::vector<double> a = {-1.0, 2.0, -0.5};
  project_row(a, Projection::kAbs);
  CHECK(a == std::vector<double>{1.0, 2.0, 0.5});
  std::vector<double> b = {-1.0, 2.0, -0.5};
  project_row(b, Projection::kClampZero);
  CHECK(b == std::vector<double>{0.0, 2.0, 0.0});
}

TEST_CASE("personalization") {
  Rng rng(21);
  Toy t = random_toy(rng, 6, 10, 3);
  const RowMatrix shared = t.model.items().expanded();
  SUBCASE("huge pull-back keeps rows at their cluster rows") {
    PersonalizeOptions opt;
    opt.lambda_p = 1e9;
    opt.lr = 1e-9;
    opt.steps = 50;
    const auto p = personalize(t.model, t.store.view(), opt);
    for (std::size_t i = 0; i < shared.values().size(); ++i)
      CHECK(std::abs(p.items().values()[i] - shared.values()[i]) < 1e-3);
  }
  SUBCASE("item without interactions stays at its cluster row") {
    std::vector<Interaction> xs(t.store.interactions().begin(), t.store.interactions().end());
    std::erase_if(xs, [](const Interaction& x) { return x.item == 4; });
    InteractionStore s(std::move(xs), 6, 10);
    PersonalizeOptions opt;
    opt.lr = 1e-3;
    const auto p = personalize(t.model, s.view(), opt);
    for (std::size_t c = 0; c < shared.cols(); ++c) CHECK(p.items()(4, c) == shared(4, c));
  }
  SUBCASE("train loss does not exceed the shared model's") {
    PersonalizeOptions opt;
    opt.lr = 1e-3;
    opt.steps = 100;
    const auto p = personalize(t.model, t.store.view(), opt);
    CHECK(data_loss(p, t.store.view()) <= data_loss(t.model, t.store.view()));
    const PersonalizedModel start(t.model.users().expanded(), shared, t.model.shared_scorer());
    CHECK(personalized_objective(p, t.model, t.store.view(), opt) <=
          personalized_objective(start, t.model, t.store.view(), opt));
    CHECK(p.users() == t.model.users().embeddings);
  }
}

TEST_CASE("hyperparameter validation") {
  Hyperparams hp;
  CHECK_NOTHROW(hp.validate());
  hp.t1 = 0;
  CHECK_THROWS_AS(hp.validate(), Error);
  hp = {};
  hp.target_ratio = 0.0;
  CHECK_THROWS_AS(hp.validate(), Error);
  hp = {};
  hp.lr = -1.0;
  CHECK_THROWS_AS(hp.validate(), Error);
}
