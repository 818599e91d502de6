#include "cel/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "cel/eval.hpp"

namespace cel {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t).count();
}

constexpr Index kUnseen = std::numeric_limits<Index>::max();

/// Early stopping on a validation MSE plateau.
class Plateau {
 public:
  explicit Plateau(std::size_t patience) : patience_(patience) {}
  bool update(double v) {
    if (v < best_) {
      best_ = v;
      since_ = 0;
      return false;
    }
    return patience_ > 0 && ++since_ >= patience_;
  }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_ = 0;
};

struct LoopOptions {
  bool reassign = true;
  bool split = true;
  std::size_t item_target = 1;
  std::size_t user_target = 1;
};

void full_data_loop(EmbeddingModel& model, const InteractionStore& train, const TrainConfig& cfg,
                    const LoopOptions& lo, const InteractionView* validation, Rng& rng, RunReport& report) {
  const InteractionView& view = train.view();
  StepOptions opt;
  opt.lr = cfg.hp.lr;
  opt.lambda_reg = cfg.hp.lambda_reg;
  opt.scaling = cfg.averaging ? GradScaling::kMemberAverage : GradScaling::kNone;
  opt.projection = cfg.projection;
  opt.all_rows = true;
  opt.threads = cfg.threads;

  std::vector<Index> all_items(model.num_items());
  std::iota(all_items.begin(), all_items.end(), Index{0});
  std::vector<Index> all_users(model.num_users());
  std::iota(all_users.begin(), all_users.end(), Index{0});
  SplitOptions split_opt;
  split_opt.method = cfg.split_method;
  split_opt.delta = cfg.hp.delta;
  Plateau plateau(cfg.patience);

  const auto start = Clock::now();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    auto t = Clock::now();
    const double loss = grad_step(model, view, opt);
    report.embed_ms += ms_since(t);
    report.train_loss.push_back(loss);
    report.log.push_back({step, "embed", loss, model.items().num_clusters(), ms_since(start)});

    if (lo.reassign && step % cfg.hp.t1 == 0) {
      t = Clock::now();
      std::size_t moved = reassign(model, view, Side::kItem, all_items, {}, cfg.threads);
      if (model.users_clustered()) moved += reassign(model, view, Side::kUser, all_users, {}, cfg.threads);
      report.reassign_ms += ms_since(t);
      report.reassigned += moved;
      report.log.push_back({step, "reassign", data_loss(model, view), model.items().num_clusters(),
                            ms_since(start)});
    }

    if (lo.split && step % cfg.hp.t2 == 0) {
      t = Clock::now();
      bool any = false;
      const std::pair<Side, std::size_t> sides[] = {{Side::kItem, lo.item_target},
                                                    {Side::kUser, lo.user_target}};
      for (auto [side, target] : sides) {
        if (side == Side::kUser && !model.users_clustered()) continue;
        if (model.table(side).num_clusters() >= target) continue;
        if (auto k = choose_cluster(model, view, side, cfg.criterion)) {
          split_cluster(model, view, side, *k, split_opt, rng);
          any = true;
        }
      }
      report.split_ms += ms_since(t);
      if (any) report.log.push_back({step, "split", loss, model.items().num_clusters(), ms_since(start)});
    }
    report.clusters.push_back(model.items().num_clusters());

    if (validation && cfg.eval_every && step % cfg.eval_every == 0) {
      const double v = mse(model, *validation);
      report.validation_mse.emplace_back(step, v);
      report.log.push_back({step, "eval", v, model.items().num_clusters(), ms_since(start)});
      if (plateau.update(v)) {
        report.stopped_early = true;
        break;
      }
    }
  }
}

void finish_report(const EmbeddingModel& model, const InteractionStore& train,
                   const InteractionView* validation, RunReport& report) {
  auto& f = report.final_metrics;
  f["train_mse"] = train.size() ? data_loss(model, train.view()) / static_cast<double>(train.size()) : 0.0;
  f["item_clusters"] = model.items().num_clusters();
  f["item_splits"] = model.items().splits;
  if (model.users_clustered()) {
    f["user_clusters"] = model.users().num_clusters();
    f["user_splits"] = model.users().splits;
  }
  f["compression_ratio"] = compression_ratio(model.items());
  if (validation && !validation->empty()) f["test_mse"] = mse(model, *validation);
}

ClusteredTable user_table(RowMatrix rows, bool clustered, std::vector<Index> assignment, std::size_t k,
                          std::vector<std::size_t> counts) {
  if (!clustered) return ClusteredTable::identity(std::move(rows), std::move(counts));
  return ClusteredTable::from_entity_rows(rows, std::move(assignment), k, std::move(counts));
}

}  // namespace

void TrainConfig::validate() const {
  hp.validate();
  if (steps == 0 && epochs == 0) throw Error("nothing to train: steps and epochs are both zero");
  if (!(user_ratio > 0.0 && user_ratio <= 1.0)) throw Error("user ratio must be in (0,1]");
  if (threads == 0) throw Error("threads must be >= 1");
}

std::size_t target_clusters(std::size_t n, double ratio) {
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(n, 1));
}

std::string RunReport::log_text() const {
  std::ostringstream out;
  out.precision(10);
  for (const auto& r : log)
    out << r.step << ' ' << r.phase << ' ' << r.value << ' ' << r.clusters << ' ' << r.wall_ms << '\n';
  return out.str();
}

nlohmann::json RunReport::summary() const {
  nlohmann::json j;
  j["mode"] = mode;
  j["steps"] = train_loss.size();
  j["final_train_loss"] = train_loss.empty() ? 0.0 : train_loss.back();
  j["reassigned"] = reassigned;
  j["stopped_early"] = stopped_early;
  j["time_ms"] = {{"embed", embed_ms}, {"reassign", reassign_ms}, {"split", split_ms}};
  // Cluster count trajectory as (step, count) change points.
  auto& traj = j["cluster_trajectory"] = nlohmann::json::array();
  for (std::size_t s = 0; s < clusters.size(); ++s)
    if (s == 0 || clusters[s] != clusters[s - 1]) traj.push_back({s + 1, clusters[s]});
  auto& val = j["validation_mse"] = nlohmann::json::array();
  for (const auto& [step, v] : validation_mse) val.push_back({step, v});
  j["metrics"] = final_metrics;
  return j;
}

TrainResult train_cel(const InteractionStore& train, const TrainConfig& config,
                      const InteractionView* validation) {
  config.validate();
  const std::size_t n = train.num_users();
  const std::size_t m = train.num_items();
  if (m == 0 || n == 0) throw Error("train_cel: empty dataset");
  if (config.hp.initial_clusters > m) throw Error("initial cluster count exceeds item count");
  LoopOptions lo;
  lo.item_target = target_clusters(m, config.hp.target_ratio);
  lo.user_target = target_clusters(n, config.user_ratio);
  if (config.hp.initial_clusters > lo.item_target)
    throw Error("initial cluster count exceeds the target cluster count");
  const bool users_clustered = config.user_ratio < 1.0;

  Rng rng(config.hp.seed);
  auto scorer = default_scorer();
  RowMatrix urows = random_embeddings(n, config.hp.dim, rng, scorer->nonnegative());
  RowMatrix irows = random_embeddings(m, config.hp.dim, rng, scorer->nonnegative());
  std::vector<Index> item_assign = config.hp.initial_clusters == 1
                                       ? std::vector<Index>(m, 0)
                                       : random_assignment(m, config.hp.initial_clusters, rng);
  EmbeddingModel model(
      user_table(std::move(urows), users_clustered, std::vector<Index>(n, 0), 1, train.counts(Side::kUser)),
      ClusteredTable::from_entity_rows(irows, std::move(item_assign), config.hp.initial_clusters,
                                       train.counts(Side::kItem)),
      users_clustered, scorer);

  TrainResult res{std::move(model), {}};
  res.report.mode = "cel";
  full_data_loop(res.model, train, config, lo, validation, rng, res.report);
  finish_report(res.model, train, validation, res.report);
  return res;
}

TrainResult retrain_fixed(const InteractionStore& train, std::vector<Index> item_assignment,
                          std::size_t num_item_clusters, const TrainConfig& config,
                          const InteractionView* validation, std::optional<std::vector<Index>> user_assignment,
                          std::size_t num_user_clusters) {
  config.validate();
  const std::size_t n = train.num_users();
  const std::size_t m = train.num_items();
  if (item_assignment.size() != m) throw Error("retrain: assignment length differs from item count");
  if (user_assignment && user_assignment->size() != n)
    throw Error("retrain: user assignment length differs from user count");

  Rng rng(config.hp.seed);
  auto scorer = default_scorer();
  RowMatrix urows = random_embeddings(n, config.hp.dim, rng, scorer->nonnegative());
  RowMatrix irows = random_embeddings(m, config.hp.dim, rng, scorer->nonnegative());
  const bool users_clustered = user_assignment.has_value();
  EmbeddingModel model(
      user_table(std::move(urows), users_clustered,
                 users_clustered ? std::move(*user_assignment) : std::vector<Index>{}, num_user_clusters,
                 train.counts(Side::kUser)),
      ClusteredTable::from_entity_rows(irows, std::move(item_assignment), num_item_clusters,
                                       train.counts(Side::kItem)),
      users_clustered, scorer);

  LoopOptions lo;
  lo.reassign = false;
  lo.split = false;
  TrainResult res{std::move(model), {}};
  res.report.mode = "retrain";
  full_data_loop(res.model, train, config, lo, validation, rng, res.report);
  finish_report(res.model, train, validation, res.report);
  return res;
}

std::vector<Interaction> time_ordered(std::span<const Interaction> xs) {
  std::vector<Interaction> out(xs.begin(), xs.end());
  const bool timed = std::all_of(out.begin(), out.end(), [](const Interaction& x) { return x.timestamp; });
  if (timed)
    std::stable_sort(out.begin(), out.end(),
                     [](const Interaction& a, const Interaction& b) { return *a.timestamp < *b.timestamp; });
  return out;
}

namespace {

/// Scores dense (user, item) pairs against a lite model whose entities are
/// numbered in arrival order.
class ArrivalOrderPredictor final : public Predictor {
 public:
  ArrivalOrderPredictor(const EmbeddingModel& model, const std::vector<Index>& user_id,
                        const std::vector<Index>& item_id)
      : model_(model), user_id_(user_id), item_id_(item_id), zero_(model.dim(), 0.0) {}

  double predict(Index user, Index item) const override {
    const Index u = user_id_[user];
    const Index i = item_id_[item];
    std::span<const double> urow = u == kUnseen ? std::span<const double>(zero_) : model_.users().entity_row(u);
    std::span<const double> irow;
    if (i != kUnseen)
      irow = model_.items().entity_row(i);
    else if (model_.items().num_clusters() > 0)
      irow = model_.items().embeddings.row(model_.items().state.smallest_cluster());
    else
      irow = zero_;
    return model_.scorer().score(urow, irow);
  }

 private:
  const EmbeddingModel& model_;
  const std::vector<Index>& user_id_;
  const std::vector<Index>& item_id_;
  std::vector<double> zero_;
};

}  // namespace

TrainResult train_cel_lite(std::span<const Interaction> stream, std::size_t num_users, std::size_t num_items,
                           const TrainConfig& config, const InteractionView* validation) {
  config.validate();
  const Hyperparams& hp = config.hp;
  const std::size_t max_clusters = target_clusters(num_items, hp.target_ratio);
  Rng rng(hp.seed);
  auto scorer = default_scorer();
  const bool nonneg = scorer->nonnegative();

  ClusteredTable users = ClusteredTable::identity(RowMatrix(0, hp.dim));
  ClusteredTable items = ClusteredTable::identity(RowMatrix(0, hp.dim));
  EmbeddingModel model(std::move(users), std::move(items), false, scorer);
  std::vector<Index> user_id(num_users, kUnseen), item_id(num_items, kUnseen);
  std::vector<Index> user_dense, item_dense;

  ReplayBuffer buffer(hp.n);
  StepOptions opt;
  opt.lr = hp.lr;
  opt.lambda_reg = hp.lambda_reg;
  opt.scaling = config.averaging ? GradScaling::kViewAverage : GradScaling::kNone;
  opt.projection = config.projection;
  opt.all_rows = false;
  opt.threads = config.threads;
  SplitOptions split_opt;
  split_opt.method = config.split_method;
  split_opt.balance_d = hp.d;

  TrainResult res;
  RunReport& report = res.report;
  report.mode = "lite";
  Plateau plateau(config.patience);
  const auto start = Clock::now();
  std::size_t batch_no = 0;
  std::vector<Interaction> batch;
  std::vector<Index> batch_users, batch_items;
  bool stop = false;

  for (std::size_t epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    for (std::size_t off = 0; off < stream.size() && !stop; off += hp.b) {
      ++batch_no;
      const auto slice = stream.subspan(off, std::min(hp.b, stream.size() - off));
      auto t = Clock::now();

      batch.clear();
      for (const auto& raw : slice) {
        if (raw.user >= num_users || raw.item >= num_items) throw Error("lite: interaction index out of range");
        if (user_id[raw.user] == kUnseen) {
          RowMatrix row = random_embeddings(1, hp.dim, rng, nonneg);
          model.users().embeddings.append_row(row.row(0));
          user_id[raw.user] = model.users().state.add_entity_in_new_cluster().first;
          user_dense.push_back(raw.user);
        }
        if (item_id[raw.item] == kUnseen) {
          ClusteredTable& it = model.items();
          if (it.num_clusters() == 0) {
            RowMatrix row = random_embeddings(1, hp.dim, rng, nonneg);
            it.embeddings.append_row(row.row(0));
            item_id[raw.item] = it.state.add_entity_in_new_cluster().first;
          } else {
            item_id[raw.item] = it.state.add_entity(it.state.smallest_cluster());
          }
          item_dense.push_back(raw.item);
        }
        Interaction x = raw;
        x.user = user_id[raw.user];
        x.item = item_id[raw.item];
        model.users().state.add_interactions(x.user, 1);
        model.items().state.add_interactions(x.item, 1);
        batch.push_back(x);
      }
      buffer.push(batch);

      batch_users.clear();
      batch_items.clear();
      for (const auto& x : batch) {
        batch_users.push_back(x.user);
        batch_items.push_back(x.item);
      }
      for (auto* ids : {&batch_users, &batch_items}) {
        std::sort(ids->begin(), ids->end());
        ids->erase(std::unique(ids->begin(), ids->end()), ids->end());
      }
      const InteractionView view(buffer.gather(batch_users, batch_items));
      const double loss = grad_step(model, view, opt);
      report.embed_ms += ms_since(t);
      report.train_loss.push_back(loss / static_cast<double>(std::max<std::size_t>(view.size(), 1)));
      report.log.push_back({batch_no, "embed", report.train_loss.back(), model.items().num_clusters(),
                            ms_since(start)});

      if (batch_no % hp.t1 == 0) {
        t = Clock::now();
        std::vector<std::vector<Index>> pools;
        pools.reserve(batch_items.size());
        for (Index j : batch_items) pools.push_back(sample_cluster_pool(model.items().state, j, hp.m, rng));
        report.reassigned += reassign(model, view, Side::kItem, batch_items, pools, config.threads);
        report.reassign_ms += ms_since(t);

        t = Clock::now();
        const std::size_t before = model.items().num_clusters();
        strategy1_isolate(model.items(), hp.d, batch_items, max_clusters);
        for (Index k : strategy2_candidates(model.items().state, hp.d)) {
          if (model.items().num_clusters() >= max_clusters) break;
          const std::vector<Index> members = model.items().state.sorted_members(k);
          const InteractionView members_view(buffer.gather({}, members));
          split_cluster(model, members_view, Side::kItem, k, split_opt, rng);
        }
        report.split_ms += ms_since(t);
        if (model.items().num_clusters() != before)
          report.log.push_back({batch_no, "split", report.train_loss.back(), model.items().num_clusters(),
                                ms_since(start)});
      }
      report.clusters.push_back(model.items().num_clusters());

      if (validation && config.eval_every && batch_no % config.eval_every == 0) {
        const double v = mse(ArrivalOrderPredictor(model, user_id, item_id), *validation);
        report.validation_mse.emplace_back(batch_no, v);
        report.log.push_back({batch_no, "eval", v, model.items().num_clusters(), ms_since(start)});
        if (plateau.update(v)) {
          report.stopped_early = true;
          stop = true;
        }
      }
    }
  }

  // Re-index into dense order, placing entities that never arrived.
  const ClusteredTable& it = model.items();
  RowMatrix cluster_rows = it.embeddings;
  if (cluster_rows.rows() == 0 && num_items > 0) cluster_rows = random_embeddings(1, hp.dim, rng, nonneg);
  std::vector<Index> assign(num_items);
  std::vector<std::size_t> item_counts(num_items, 0);
  std::vector<std::size_t> cluster_counts(cluster_rows.rows(), 0);
  for (Index j = 0; j < num_items; ++j)
    if (item_id[j] != kUnseen) {
      assign[j] = it.state.cluster_of(item_id[j]);
      item_counts[j] = it.state.entity_count(item_id[j]);
    }
  const Index fallback = it.num_clusters() > 0 ? it.state.smallest_cluster() : 0;
  for (Index j = 0; j < num_items; ++j)
    if (item_id[j] == kUnseen) assign[j] = fallback;

  RowMatrix urows(num_users, hp.dim);
  std::vector<std::size_t> user_counts(num_users, 0);
  for (Index u = 0; u < num_users; ++u) {
    if (user_id[u] != kUnseen) {
      const auto src = model.users().entity_row(user_id[u]);
      std::copy(src.begin(), src.end(), urows.row(u).begin());
      user_counts[u] = model.users().state.entity_count(user_id[u]);
    } else {
      RowMatrix row = random_embeddings(1, hp.dim, rng, nonneg);
      std::copy(row.row(0).begin(), row.row(0).end(), urows.row(u).begin());
    }
  }
  ClusteredTable dense_items;
  dense_items.state = ClusterState(std::move(assign), cluster_rows.rows(), std::move(item_counts));
  dense_items.embeddings = std::move(cluster_rows);
  dense_items.splits = it.splits;
  res.model = EmbeddingModel(ClusteredTable::identity(std::move(urows), std::move(user_counts)),
                             std::move(dense_items), false, scorer);

  auto& f = report.final_metrics;
  f["batches"] = batch_no;
  f["item_clusters"] = res.model.items().num_clusters();
  f["item_splits"] = res.model.items().splits;
  f["compression_ratio"] = compression_ratio(res.model.items());
  if (validation && !validation->empty()) f["test_mse"] = mse(res.model, *validation);
  return res;
}

SyntheticData generate_synthetic(std::size_t num_users, std::size_t num_items, std::size_t num_clusters,
                                 std::size_t dim, double noise, Rng& rng, double observed,
                                 double min_separation) {
  if (num_users == 0 || num_items == 0 || dim == 0) throw Error("synthetic: sizes must be positive");
  if (num_clusters < dim) throw Error("synthetic: cluster count must be at least the dimension");
  if (num_clusters > num_items) throw Error("synthetic: more clusters than items");
  if (noise < 0.0 || !(observed > 0.0 && observed <= 1.0)) throw Error("synthetic: bad noise or density");

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  SyntheticData out;
  out.users = RowMatrix(num_users, dim);
  for (double& v : out.users.values()) v = unif(rng);
  out.clusters = RowMatrix(0, dim);
  std::vector<double> row(dim);
  for (std::size_t k = 0; k < num_clusters; ++k) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == 10000) throw Error("synthetic: cannot place separated cluster rows");
      for (double& v : row) v = unif(rng);
      bool ok = true;
      for (std::size_t o = 0; o < out.clusters.rows() && ok; ++o) {
        double d2 = 0.0;
        for (std::size_t r = 0; r < dim; ++r) d2 += (row[r] - out.clusters(o, r)) * (row[r] - out.clusters(o, r));
        ok = std::sqrt(d2) >= min_separation;
      }
      if (ok) break;
    }
    out.clusters.append_row(row);
  }
  out.truth = random_assignment(num_items, num_clusters, rng);

  auto maps = std::make_shared<IdMaps>();
  for (std::size_t u = 0; u < num_users; ++u) maps->users.intern(std::to_string(u));
  for (std::size_t j = 0; j < num_items; ++j) maps->items.intern(std::to_string(j));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Interaction> xs;
  for (Index u = 0; u < num_users; ++u)
    for (Index j = 0; j < num_items; ++j) {
      if (observed < 1.0 && unif(rng) >= observed) continue;
      double r = dot(out.users.row(u), out.clusters.row(out.truth[j]));
      if (noise > 0.0) r += noise * normal(rng);
      xs.push_back({u, j, r, std::nullopt});
    }
  out.store = InteractionStore(std::move(xs), num_users, num_items, std::move(maps));
  return out;
}

}  // namespace cel
