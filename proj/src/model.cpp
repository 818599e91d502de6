#include "cel/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cel {

void Hyperparams::validate() const {
  if (dim == 0) throw Error("dim must be positive");
  if (!(lr > 0.0)) throw Error("learning rate must be positive");
  if (lambda_reg < 0.0 || lambda_p < 0.0) throw Error("regularization weights must be nonnegative");
  if (t1 == 0 || t2 == 0) throw Error("t1 and t2 must be >= 1");
  if (n == 0 || b == 0) throw Error("buffer size n and batch size b must be positive");
  if (!(target_ratio > 0.0 && target_ratio <= 1.0)) throw Error("target ratio must be in (0,1]");
  if (initial_clusters == 0) throw Error("initial cluster count must be >= 1");
}

std::pair<std::vector<double>, std::vector<double>> InteractionScorer::gradient(
    std::span<const double> user, std::span<const double> item, double residual) const {
  std::vector<double> gu(user.size(), 0.0);
  std::vector<double> gi(item.size(), 0.0);
  accumulate_gradient(user, item, -2.0 * residual, gu, gi);
  return {std::move(gu), std::move(gi)};
}

void DotProductScorer::accumulate_gradient(std::span<const double> user, std::span<const double> item,
                                           double coeff, std::span<double> grad_user,
                                           std::span<double> grad_item) const {
  for (std::size_t r = 0; r < user.size(); ++r) {
    grad_user[r] += coeff * item[r];
    grad_item[r] += coeff * user[r];
  }
}

std::shared_ptr<const InteractionScorer> default_scorer() {
  static const auto scorer = std::make_shared<const DotProductScorer>();
  return scorer;
}

// ---------------------------------------------------------------------------
// Tables

ClusteredTable ClusteredTable::from_entity_rows(const RowMatrix& entity_rows, std::vector<Index> assignment,
                                                std::size_t num_clusters,
                                                std::vector<std::size_t> entity_counts) {
  if (assignment.size() != entity_rows.rows()) throw Error("assignment/row count mismatch");
  ClusteredTable t;
  t.state = ClusterState(std::move(assignment), num_clusters, std::move(entity_counts));
  t.embeddings = RowMatrix(num_clusters, entity_rows.cols());
  for (Index e = 0; e < entity_rows.rows(); ++e) {
    auto dst = t.embeddings.row(t.state.cluster_of(e));
    auto src = entity_rows.row(e);
    for (std::size_t r = 0; r < dst.size(); ++r) dst[r] += src[r];
  }
  for (Index k = 0; k < num_clusters; ++k) {
    const double inv = 1.0 / static_cast<double>(t.state.member_count(k));
    for (double& v : t.embeddings.row(k)) v *= inv;
  }
  return t;
}

ClusteredTable ClusteredTable::identity(RowMatrix entity_rows, std::vector<std::size_t> entity_counts) {
  ClusteredTable t;
  t.state = ClusterState::identity(entity_rows.rows(), std::move(entity_counts));
  t.embeddings = std::move(entity_rows);
  return t;
}

RowMatrix ClusteredTable::expanded() const {
  RowMatrix out(state.num_entities(), dim());
  for (Index e = 0; e < state.num_entities(); ++e) {
    auto src = entity_row(e);
    std::copy(src.begin(), src.end(), out.row(e).begin());
  }
  return out;
}

EmbeddingModel::EmbeddingModel(ClusteredTable users, ClusteredTable items, bool users_clustered,
                               std::shared_ptr<const InteractionScorer> scorer)
    : users_(std::move(users)),
      items_(std::move(items)),
      users_clustered_(users_clustered),
      scorer_(std::move(scorer)) {
  if (users_.dim() != items_.dim()) throw Error("user/item embedding dimensions differ");
  if (!scorer_) throw Error("scorer required");
}

double EmbeddingModel::score_with_cluster(Side side, Index entity_other, Index cluster) const {
  if (side == Side::kItem) return scorer_->score(users_.entity_row(entity_other), items_.embeddings.row(cluster));
  return scorer_->score(users_.embeddings.row(cluster), items_.entity_row(entity_other));
}

RowMatrix random_embeddings(std::size_t num_rows, std::size_t dim, Rng& rng, bool nonnegative) {
  RowMatrix out(num_rows, dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < num_rows; ++i) {
    auto row = out.row(i);
    double peak = 0.0;
    for (double& v : row) {
      v = normal(rng);
      peak = std::max(peak, std::abs(v));
    }
    for (double& v : row) {
      v = peak > 0.0 ? v / peak : 0.0;
      if (nonnegative) v = std::abs(v);
    }
  }
  return out;
}

std::vector<Index> random_assignment(std::size_t num_entities, std::size_t num_clusters, Rng& rng) {
  if (num_clusters == 0 || num_clusters > num_entities)
    throw Error("random_assignment: need 1 <= clusters <= entities");
  std::vector<Index> order(num_entities);
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Index> assign(num_entities, 0);
  std::uniform_int_distribution<Index> pick(0, static_cast<Index>(num_clusters - 1));
  for (std::size_t p = 0; p < num_entities; ++p)
    assign[order[p]] = p < num_clusters ? static_cast<Index>(p) : pick(rng);
  return assign;
}

EmbeddingModel init_model(std::size_t num_users, std::size_t num_items, std::size_t dim,
                          std::vector<Index> item_assignment, std::size_t num_item_clusters, Rng& rng,
                          std::vector<std::size_t> item_counts, std::vector<std::size_t> user_counts,
                          std::shared_ptr<const InteractionScorer> scorer) {
  const bool nonneg = scorer->nonnegative();
  RowMatrix users = random_embeddings(num_users, dim, rng, nonneg);
  RowMatrix items = random_embeddings(num_items, dim, rng, nonneg);
  return EmbeddingModel(ClusteredTable::identity(std::move(users), std::move(user_counts)),
                        ClusteredTable::from_entity_rows(items, std::move(item_assignment),
                                                         num_item_clusters, std::move(item_counts)),
                        false, std::move(scorer));
}

// ---------------------------------------------------------------------------
// Losses

double data_loss(const Predictor& model, const InteractionView& view) {
  double s = 0.0;
  for (const auto& x : view.interactions()) {
    const double e = x.rating - model.predict(x.user, x.item);
    s += e * e;
  }
  return s;
}

double regularizer(const EmbeddingModel& model, double lambda_reg) {
  return 0.5 * lambda_reg *
         (model.users().embeddings.squared_norm() + model.items().embeddings.squared_norm());
}

double loss(const EmbeddingModel& model, const InteractionView& view, double lambda_reg) {
  return data_loss(model, view) + regularizer(model, lambda_reg);
}

double cluster_loss(const EmbeddingModel& model, const InteractionView& view, Side side, Index k) {
  const auto& table = model.table(side);
  if (k >= table.num_clusters()) throw Error("cluster_loss: cluster index out of range");
  double s = 0.0;
  for (Index e : table.state.members(k)) {
    for (auto pos : view.positions(side, e)) {
      const auto& x = view.interactions()[pos];
      const double r = x.rating - model.predict(x.user, x.item);
      s += r * r;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Gradients

namespace {

std::vector<double> residuals(const Predictor& model, const InteractionView& view, unsigned threads) {
  std::vector<double> res(view.size());
  const auto xs = view.interactions();
  parallel_for(xs.size(), threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t t = lo; t < hi; ++t) res[t] = xs[t].rating - model.predict(xs[t].user, xs[t].item);
  });
  return res;
}

/// Per-slot gradient of the summed squared error w.r.t. the `side` row used
/// by each interaction. Row accessors map an interaction to its rows.
template <class UserRow, class ItemRow>
RowMatrix slot_gradients(const InteractionView& view, Side side, std::span<const double> res,
                         const InteractionScorer& scorer, std::size_t dim, UserRow&& user_row,
                         ItemRow&& item_row, unsigned threads) {
  const auto ents = view.entities(side);
  RowMatrix grad(ents.size(), dim);
  const auto xs = view.interactions();
  parallel_for(ents.size(), threads, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> scratch(dim, 0.0);
    for (std::size_t s = lo; s < hi; ++s) {
      auto g = grad.row(s);
      for (auto pos : view.slot_positions(side, s)) {
        const auto& x = xs[pos];
        const double coeff = -2.0 * res[pos];
        if (side == Side::kItem)
          scorer.accumulate_gradient(user_row(x), item_row(x), coeff, scratch, g);
        else
          scorer.accumulate_gradient(user_row(x), item_row(x), coeff, g, scratch);
      }
    }
  });
  return grad;
}

TableGradient reduce_to_clusters(const EmbeddingModel& model, const InteractionView& view, Side side,
                                 const RowMatrix& slot_grad, double lambda_reg, GradScaling scaling,
                                 bool all_rows) {
  const auto& table = model.table(side);
  const auto ents = view.entities(side);
  const std::size_t dim = model.dim();
  TableGradient out;

  if (all_rows) {
    out.rows.resize(table.num_clusters());
    std::iota(out.rows.begin(), out.rows.end(), Index{0});
  } else {
    out.rows.reserve(ents.size());
    for (Index e : ents) out.rows.push_back(table.state.cluster_of(e));
    std::sort(out.rows.begin(), out.rows.end());
    out.rows.erase(std::unique(out.rows.begin(), out.rows.end()), out.rows.end());
  }
  auto row_slot = [&](Index cluster) -> std::size_t {
    if (all_rows) return cluster;
    return static_cast<std::size_t>(std::lower_bound(out.rows.begin(), out.rows.end(), cluster) -
                                    out.rows.begin());
  };

  out.values = RowMatrix(out.rows.size(), dim);
  out.view_counts.assign(out.rows.size(), 0);
  for (std::size_t s = 0; s < ents.size(); ++s) {
    const std::size_t r = row_slot(table.state.cluster_of(ents[s]));
    auto dst = out.values.row(r);
    auto src = slot_grad.row(s);
    for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
    out.view_counts[r] += view.slot_positions(side, s).size();
  }

  for (std::size_t r = 0; r < out.rows.size(); ++r) {
    const Index k = out.rows[r];
    auto g = out.values.row(r);
    auto w = table.embeddings.row(k);
    double data_scale = 1.0;
    double reg_scale = 1.0;
    if (scaling == GradScaling::kMemberAverage) {
      data_scale = 1.0 / static_cast<double>(table.state.member_count(k));
    } else if (scaling == GradScaling::kViewAverage && out.view_counts[r] > 0) {
      data_scale = reg_scale = 1.0 / static_cast<double>(out.view_counts[r]);
    }
    for (std::size_t c = 0; c < dim; ++c) g[c] = data_scale * g[c] + reg_scale * lambda_reg * w[c];
  }
  return out;
}

}  // namespace

ModelGradient compute_gradient(const EmbeddingModel& model, const InteractionView& view, double lambda_reg,
                               GradScaling scaling, bool all_rows, unsigned threads) {
  const auto res = residuals(model, view, threads);
  ModelGradient out;
  for (double e : res) out.data_loss += e * e;
  auto urow = [&](const Interaction& x) { return model.users().entity_row(x.user); };
  auto irow = [&](const Interaction& x) { return model.items().entity_row(x.item); };
  for (Side side : {Side::kUser, Side::kItem}) {
    const RowMatrix sg = slot_gradients(view, side, res, model.scorer(), model.dim(), urow, irow, threads);
    (side == Side::kItem ? out.items : out.users) =
        reduce_to_clusters(model, view, side, sg, lambda_reg, scaling, all_rows);
  }
  return out;
}

void project_row(std::span<double> row, Projection projection) {
  if (projection == Projection::kAbs) {
    for (double& v : row) v = std::abs(v);
  } else {
    for (double& v : row) v = std::max(v, 0.0);
  }
}

double grad_step(EmbeddingModel& model, const InteractionView& view, const StepOptions& opt) {
  ModelGradient g = compute_gradient(model, view, opt.lambda_reg, opt.scaling, opt.all_rows, opt.threads);
  const bool nonneg = model.scorer().nonnegative();
  for (Side side : {Side::kUser, Side::kItem}) {
    const TableGradient& tg = side == Side::kItem ? g.items : g.users;
    auto& table = model.table(side);
    for (std::size_t r = 0; r < tg.rows.size(); ++r) {
      auto w = table.embeddings.row(tg.rows[r]);
      auto d = tg.values.row(r);
      for (std::size_t c = 0; c < w.size(); ++c) w[c] -= opt.lr * d[c];
      if (nonneg) project_row(w, opt.projection);
    }
  }
  return g.data_loss;
}

RowMatrix entity_gradients(const EmbeddingModel& model, const InteractionView& view, Side side,
                           std::span<const Index> entities) {
  const std::size_t dim = model.dim();
  RowMatrix out(entities.size(), dim);
  std::vector<double> scratch(dim, 0.0);
  const auto xs = view.interactions();
  for (std::size_t s = 0; s < entities.size(); ++s) {
    auto g = out.row(s);
    for (auto pos : view.positions(side, entities[s])) {
      const auto& x = xs[pos];
      const auto u = model.users().entity_row(x.user);
      const auto i = model.items().entity_row(x.item);
      const double coeff = 2.0 * (x.rating - model.scorer().score(u, i));  // negative gradient
      if (side == Side::kItem)
        model.scorer().accumulate_gradient(u, i, coeff, scratch, g);
      else
        model.scorer().accumulate_gradient(u, i, coeff, g, scratch);
    }
  }
  return out;
}

std::vector<double> entity_gradient(const EmbeddingModel& model, const InteractionView& view, Side side,
                                    Index entity) {
  const Index one[] = {entity};
  RowMatrix g = entity_gradients(model, view, side, one);
  auto row = g.row(0);
  return {row.begin(), row.end()};
}

// ---------------------------------------------------------------------------
// Personalization

double personalized_objective(const PersonalizedModel& p, const EmbeddingModel& anchor,
                              const InteractionView& view, const PersonalizeOptions& opt) {
  double s = data_loss(p, view);
  auto pull = [&](const RowMatrix& rows, const ClusteredTable& table) {
    double acc = 0.0;
    for (Index e = 0; e < rows.rows(); ++e) {
      auto a = rows.row(e);
      auto c = table.entity_row(e);
      for (std::size_t r = 0; r < a.size(); ++r) acc += (a[r] - c[r]) * (a[r] - c[r]);
    }
    return 0.5 * opt.lambda_p * acc;
  };
  s += pull(p.items(), anchor.items());
  if (anchor.users_clustered()) s += pull(p.users(), anchor.users());
  return s;
}

PersonalizedModel personalize(const EmbeddingModel& model, const InteractionView& train,
                              const PersonalizeOptions& opt) {
  PersonalizedModel p(model.users().expanded(), model.items().expanded(), model.shared_scorer());
  const bool nonneg = model.scorer().nonnegative();
  const std::size_t dim = model.dim();
  auto urow = [&](const Interaction& x) { return std::span<const double>(p.users().row(x.user)); };
  auto irow = [&](const Interaction& x) { return std::span<const double>(p.items().row(x.item)); };

  for (std::size_t step = 0; step < opt.steps; ++step) {
    const auto res = residuals(p, train, opt.threads);
    const RowMatrix gi = slot_gradients(train, Side::kItem, res, model.scorer(), dim, urow, irow, opt.threads);

    auto update = [&](RowMatrix& rows, const RowMatrix& slot_grad, Side side, const ClusteredTable& anchor) {
      const auto ents = train.entities(side);
      std::size_t s = 0;
      for (Index e = 0; e < rows.rows(); ++e) {
        auto w = rows.row(e);
        auto c = anchor.entity_row(e);
        const bool has_data = s < ents.size() && ents[s] == e;
        for (std::size_t r = 0; r < dim; ++r) {
          double g = has_data ? slot_grad(s, r) : 0.0;
          g += opt.lambda_p * (w[r] - c[r]);
          w[r] -= opt.lr * g;
        }
        if (has_data) ++s;
        if (nonneg) project_row(w, opt.projection);
      }
    };
    // A full user table has nothing to untie and stays fixed.
    if (model.users_clustered()) {
      const RowMatrix gu = slot_gradients(train, Side::kUser, res, model.scorer(), dim, urow, irow, opt.threads);
      update(p.users(), gu, Side::kUser, model.users());
    }
    update(p.items(), gi, Side::kItem, model.items());
  }
  return p;
}

}  // namespace cel
