#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cel/checkpoint.hpp"
#include "cel/cluster.hpp"
#include "cel/dataset.hpp"
#include "cel/eval.hpp"
#include "cel/model.hpp"
#include "cel/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cel;

namespace {

struct DataOptions {
  std::string data;
  std::string train;
  std::string test;
  std::string format = "mldat";
  std::string genres;
  double holdout = 0.0;
  std::size_t folds = 5;
  int fold = -1;
};

struct Options {
  DataOptions data;
  TrainConfig cfg;
  std::string out = "run";
  std::string criterion = "interaction-count";
  std::string split_method = "gpca";
  std::string projection = "abs";
  bool no_averaging = false;
  std::size_t lite_epochs = 1;
};

struct Fold {
  std::string name;  // empty for a single split
  InteractionStore train;
  InteractionStore test;
};

std::vector<Fold> make_folds(const DataOptions& d, std::uint64_t seed) {
  const auto fmt = parse_format(d.format);
  std::vector<Fold> out;
  if (!d.train.empty()) {
    if (d.test.empty()) throw Error("--train requires --test");
    InteractionStore train = load_dataset(d.train, fmt);
    std::size_t dropped = 0;
    InteractionStore test = load_dataset(d.test, fmt, train.shared_id_maps(), &dropped);
    if (dropped) std::cerr << "note: skipped " << dropped << " test records with unseen IDs\n";
    out.push_back({"", std::move(train), std::move(test)});
    return out;
  }
  if (d.data.empty()) throw Error("no input: pass --data or --train/--test");
  const InteractionStore store = load_dataset(d.data, fmt);
  SplitSpec spec;
  spec.seed = seed;
  if (d.holdout > 0.0) {
    spec.mode = SplitSpec::Mode::kHoldout;
    spec.fraction = d.holdout;
    auto [tr, te] = split_train_test(store, spec);
    out.push_back({"", std::move(tr), std::move(te)});
    return out;
  }
  spec.mode = SplitSpec::Mode::kKFold;
  spec.folds = d.folds;
  if (d.fold >= 0) {
    spec.fold = static_cast<std::size_t>(d.fold);
    auto [tr, te] = split_train_test(store, spec);
    out.push_back({"", std::move(tr), std::move(te)});
    return out;
  }
  for (std::size_t f = 0; f < d.folds; ++f) {
    spec.fold = f;
    auto [tr, te] = split_train_test(store, spec);
    out.push_back({"fold-" + std::to_string(f), std::move(tr), std::move(te)});
  }
  return out;
}

void write_text(const fs::path& path, const std::string& s) { write_file_atomic(path, s); }

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json config_json(const Options& o) {
  const auto& hp = o.cfg.hp;
  return {{"dim", hp.dim},          {"lr", hp.lr},
          {"lambda_reg", hp.lambda_reg}, {"lambda_p", hp.lambda_p},
          {"t1", hp.t1},            {"t2", hp.t2},
          {"delta", hp.delta},      {"d", hp.d},
          {"n", hp.n},              {"m", hp.m},
          {"b", hp.b},              {"ratio", hp.target_ratio},
          {"initial_clusters", hp.initial_clusters}, {"seed", hp.seed},
          {"steps", o.cfg.steps},   {"split_method", o.split_method},
          {"criterion", o.criterion}, {"averaging", o.cfg.averaging},
          {"projection", o.projection}, {"user_ratio", o.cfg.user_ratio}};
}

std::optional<std::vector<std::vector<std::string>>> maybe_genres(const std::string& path, const IdMaps* maps) {
  if (path.empty() || !maps) return std::nullopt;
  return load_genres(path, maps->items);
}

/// Writes model, ID maps, data splits, log and summary for one run into `dir`.
json write_run(const fs::path& dir, const Options& o, const Fold& fold, const TrainResult& res) {
  fs::create_directories(dir);
  save_checkpoint(dir / "model.cel", res.model);
  if (const IdMaps* maps = fold.train.id_maps()) {
    maps->users.save(dir / "users.map");
    maps->items.save(dir / "items.map");
  }
  write_dataset(dir / "train.dat", fold.train);
  write_dataset(dir / "test.dat", fold.test);

  const auto genres = maybe_genres(o.data.genres, fold.train.id_maps());
  const auto train_counts = fold.train.counts(Side::kItem);
  MetricReport metrics = evaluate(res.model, train_counts, fold.test.view(), genres ? &*genres : nullptr);
  write_text(dir / "metrics.log", res.report.log_text() + metrics.to_text());
  json summary = res.report.summary();
  summary["test"] = metrics.to_json();
  summary["config"] = config_json(o);
  write_json(dir / "summary.json", summary);
  return summary;
}

void print_run(const std::string& name, const json& s) {
  std::cout << (name.empty() ? "run" : name) << ": test_mse " << std::setprecision(6)
            << s["test"]["mse"].get<double>() << " clusters " << s["metrics"]["item_clusters"] << '\n';
}

/// Runs `train_one` on every fold and writes per-fold artifacts plus a mean summary.
template <class TrainOne>
int run_folds(const Options& o, const std::string& mode, TrainOne&& train_one) {
  const auto folds = make_folds(o.data, o.cfg.hp.seed);
  const fs::path out = o.out;
  std::vector<double> mses;
  json per_fold = json::array();
  for (const auto& fold : folds) {
    TrainResult res = train_one(fold);
    const fs::path dir = fold.name.empty() ? out : out / fold.name;
    json s = write_run(dir, o, fold, res);
    print_run(fold.name, s);
    mses.push_back(s["test"]["mse"].get<double>());
    per_fold.push_back(s["test"]["mse"]);
  }
  if (folds.size() > 1) {
    const double mean = std::accumulate(mses.begin(), mses.end(), 0.0) / static_cast<double>(mses.size());
    json s = {{"mode", mode}, {"folds", folds.size()}, {"fold_test_mse", per_fold},
              {"mean_test_mse", mean}, {"config", config_json(o)}};
    write_json(out / "summary.json", s);
    std::cout << "mean_test_mse " << std::setprecision(6) << mean << '\n';
  }
  return 0;
}

struct LoadedRun {
  EmbeddingModel model;
  std::shared_ptr<const IdMaps> maps;
  InteractionStore train;
  InteractionStore test;
};

std::shared_ptr<const IdMaps> load_maps(const fs::path& dir) {
  auto maps = std::make_shared<IdMaps>();
  maps->users = IdMap::load(dir / "users.map");
  maps->items = IdMap::load(dir / "items.map");
  return maps;
}

InteractionStore load_with_maps(const std::string& path, const std::string& format,
                                const std::shared_ptr<const IdMaps>& maps) {
  std::size_t dropped = 0;
  InteractionStore s = load_dataset(path, parse_format(format), maps, &dropped);
  if (dropped) std::cerr << "note: skipped " << dropped << " records of " << path << " with unknown IDs\n";
  return s;
}

/// Checkpoint plus ID maps and data from the checkpoint's directory, unless
/// --train/--test name other files.
LoadedRun load_run(const std::string& model_path, const DataOptions& d, bool need_test) {
  const fs::path dir = fs::path(model_path).parent_path();
  LoadedRun r{load_checkpoint(model_path), load_maps(dir), {}, {}};
  if (r.maps->users.size() != r.model.num_users() || r.maps->items.size() != r.model.num_items())
    throw Error("ID maps in " + dir.string() + " do not match the checkpoint dimensions");
  const std::string train = d.train.empty() ? (dir / "train.dat").string() : d.train;
  const std::string test = d.test.empty() ? (dir / "test.dat").string() : d.test;
  const std::string fmt = d.train.empty() ? "mldat" : d.format;
  if (fs::exists(train)) {
    r.train = load_with_maps(train, fmt, r.maps);
    attach_counts(r.model.items(), r.train.counts(Side::kItem));
    if (!r.model.users_clustered()) attach_counts(r.model.users(), r.train.counts(Side::kUser));
  }
  if (need_test) r.test = load_with_maps(test, d.test.empty() ? "mldat" : d.format, r.maps);
  return r;
}

int cmd_train(const Options& o) {
  return run_folds(o, "cel", [&](const Fold& f) { return train_cel(f.train, o.cfg, &f.test.view()); });
}

int cmd_lite(const Options& o) {
  return run_folds(o, "lite", [&](const Fold& f) {
    const auto stream = time_ordered(f.train.interactions());
    TrainConfig cfg = o.cfg;
    cfg.epochs = o.lite_epochs;
    return train_cel_lite(stream, f.train.num_users(), f.train.num_items(), cfg, &f.test.view());
  });
}

int cmd_retrain(const Options& o, const std::string& model_path) {
  LoadedRun run = load_run(model_path, o.data, true);
  if (run.train.size() == 0) throw Error("retrain: no training data found next to the checkpoint");
  const auto& items = run.model.items();
  std::vector<Index> assign(items.state.assignment().begin(), items.state.assignment().end());
  std::optional<std::vector<Index>> uassign;
  if (run.model.users_clustered())
    uassign.emplace(run.model.users().state.assignment().begin(), run.model.users().state.assignment().end());
  TrainResult res = retrain_fixed(run.train, std::move(assign), items.num_clusters(), o.cfg, &run.test.view(),
                                  std::move(uassign), run.model.users().num_clusters());
  Fold fold{"", std::move(run.train), std::move(run.test)};
  print_run("retrain", write_run(o.out, o, fold, res));
  return 0;
}

int cmd_baseline(Options o, const std::string& method) {
  if (method == "random-split" || method == "random-projection") {
    o.split_method = method == "random-split" ? "random" : "random-projection";
    o.cfg.split_method = parse_split_method(o.split_method);
    return run_folds(o, method, [&](const Fold& f) { return train_cel(f.train, o.cfg, &f.test.view()); });
  }
  if (method == "modulo" || method == "full") {
    return run_folds(o, method, [&](const Fold& f) {
      const std::size_t m = f.train.num_items();
      const std::size_t k = method == "full" ? m : target_clusters(m, o.cfg.hp.target_ratio);
      return retrain_fixed(f.train, modulo_assign(m, k), k, o.cfg, &f.test.view());
    });
  }
  throw Error("unknown baseline method '" + method + "' (modulo, full, random-split, random-projection)");
}

int cmd_eval(const Options& o, const std::string& model_path) {
  LoadedRun run = load_run(model_path, o.data, false);
  if (o.data.data.empty() && o.data.test.empty()) throw Error("eval: pass --data with the test file");
  const std::string path = o.data.data.empty() ? o.data.test : o.data.data;
  InteractionStore test = load_with_maps(path, o.data.format, run.maps);
  const auto counts = run.train.size() ? run.train.counts(Side::kItem) : std::vector<std::size_t>{};
  const auto genres = maybe_genres(o.data.genres, run.maps.get());
  MetricReport m = evaluate(run.model, counts, test.view(), genres ? &*genres : nullptr);
  std::cout << m.to_text();
  fs::create_directories(o.out);
  write_json(fs::path(o.out) / "eval.json", m.to_json());
  return 0;
}

int cmd_analyze(const Options& o, const std::string& model_path) {
  LoadedRun run = load_run(model_path, o.data, false);
  const auto& items = run.model.items();
  json j;
  j["users"] = run.model.num_users();
  j["items"] = run.model.num_items();
  j["item_clusters"] = items.num_clusters();
  j["item_splits"] = items.splits;
  j["compression_ratio"] = compression_ratio(items);
  const ScatteredReport sc = scattered(items.embeddings);
  j["scattered_fraction"] = sc.fraction;
  j["scattered_zero_rows"] = sc.zero_rows;
  std::vector<std::size_t> sizes(items.num_clusters());
  for (Index k = 0; k < sizes.size(); ++k) sizes[k] = items.state.member_count(k);
  j["cluster_sizes"] = sizes;
  if (run.train.size()) {
    std::vector<std::size_t> inter(items.num_clusters());
    for (Index k = 0; k < inter.size(); ++k) inter[k] = items.state.interaction_count(k);
    j["cluster_interactions"] = inter;
    j["train_mse"] = mse(run.model, run.train.view());
  }
  if (!o.data.genres.empty()) {
    const auto genres = load_genres(o.data.genres, run.maps->items);
    const EntropyReport e = genre_entropy(items.state.assignment(), genres);
    j["genre_entropy"] = {{"signed", e.signed_value}, {"entropy", e.entropy}, {"genres", e.genres},
                          {"excluded_items", e.excluded_items}};
  }
  std::cout << j.dump(2) << '\n';
  fs::create_directories(o.out);
  write_json(fs::path(o.out) / "analysis.json", j);
  return 0;
}

int cmd_personalize(const Options& o, const std::string& model_path, const PersonalizeOptions& popt) {
  LoadedRun run = load_run(model_path, o.data, true);
  if (run.train.size() == 0) throw Error("personalize: no training data found next to the checkpoint");
  const PersonalizedModel p = personalize(run.model, run.train.view(), popt);
  const auto counts = run.train.counts(Side::kItem);
  const auto shared_buckets = warmth_buckets(run.model, counts, run.test.view());
  const auto own_buckets = warmth_buckets(p, counts, run.test.view());
  json j;
  j["shared_mse"] = mse(run.model, run.test.view());
  j["personalized_mse"] = mse(p, run.test.view());
  j["shared_train_mse"] = mse(run.model, run.train.view());
  j["personalized_train_mse"] = mse(p, run.train.view());
  j["lambda_p"] = popt.lambda_p;
  j["steps"] = popt.steps;
  j["lr"] = popt.lr;
  auto& b = j["buckets"] = json::array();
  for (std::size_t i = 0; i < shared_buckets.size(); ++i) {
    auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
    b.push_back({{"lo", shared_buckets[i].lo},
                 {"hi", std::isinf(shared_buckets[i].hi) ? json(nullptr) : json(shared_buckets[i].hi)},
                 {"items", shared_buckets[i].items},
                 {"shared_mse", num(shared_buckets[i].mse)},
                 {"personalized_mse", num(own_buckets[i].mse)}});
  }
  std::cout << j.dump(2) << '\n';
  fs::create_directories(o.out);
  EmbeddingModel full(ClusteredTable::identity(p.users()), ClusteredTable::identity(p.items()), false,
                      run.model.shared_scorer());
  save_checkpoint(fs::path(o.out) / "model.cel", full);
  run.maps->users.save(fs::path(o.out) / "users.map");
  run.maps->items.save(fs::path(o.out) / "items.map");
  write_json(fs::path(o.out) / "summary.json", j);
  return 0;
}

struct SynthOptions {
  std::size_t users = 60;
  std::size_t items = 80;
  std::size_t clusters = 6;
  std::size_t rank = 4;
  double noise = 0.0;
  double observed = 1.0;
};

int cmd_synth(Options o, const SynthOptions& s, bool lr_set, bool steps_set) {
  Rng rng(o.cfg.hp.seed);
  SyntheticData data = generate_synthetic(s.users, s.items, s.clusters, s.rank, s.noise, rng, s.observed);
  o.cfg.hp.dim = s.rank;
  o.cfg.hp.target_ratio = static_cast<double>(s.clusters) / static_cast<double>(s.items);
  if (!lr_set) o.cfg.hp.lr = 2e-3;
  if (!steps_set) o.cfg.steps = 3000;
  TrainResult res = train_cel(data.store, o.cfg);
  const double ari = adjusted_rand_index(res.model.items().state.assignment(), data.truth);
  json j = res.report.summary();
  j["ari"] = ari;
  j["config"] = config_json(o);
  std::cout << "ari " << std::setprecision(6) << ari << " clusters " << res.model.items().num_clusters()
            << " train_mse " << j["metrics"]["train_mse"].get<double>() << '\n';
  const fs::path out = o.out;
  fs::create_directories(out);
  write_dataset(out / "synthetic.dat", data.store);
  std::ostringstream truth;
  for (std::size_t j2 = 0; j2 < data.truth.size(); ++j2) truth << j2 << '\t' << data.truth[j2] << '\n';
  write_text(out / "truth.tsv", truth.str());
  save_checkpoint(out / "model.cel", res.model);
  write_text(out / "metrics.log", res.report.log_text());
  write_json(out / "summary.json", j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clustered embedding learning for user-item interaction data"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Flat key=value file; command-line flags take precedence");

  Options o;
  Hyperparams& hp = o.cfg.hp;
  auto* lr_opt = app.add_option("--lr", hp.lr, "Learning rate (lite default 0.05)")->capture_default_str();
  auto* t1_opt = app.add_option("--t1", hp.t1, "Steps (lite: batches) per reassignment (lite default 1)")
                     ->capture_default_str();
  app.add_option("--data", o.data.data, "Ratings file, split into train/test");
  app.add_option("--train", o.data.train, "Explicit training file (with --test)");
  app.add_option("--test", o.data.test, "Explicit test file");
  app.add_option("--format", o.data.format, "Input format: mldat or csv")->capture_default_str();
  app.add_option("--genres", o.data.genres, "Genre metadata file (movieId::title::g1|g2)");
  app.add_option("--holdout", o.data.holdout, "Holdout test fraction; 0 uses k-fold")->capture_default_str();
  app.add_option("--folds", o.data.folds, "Number of folds")->capture_default_str();
  app.add_option("--fold", o.data.fold, "Run a single fold; -1 runs all")->capture_default_str();
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--seed", hp.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--threads", o.cfg.threads, "Worker threads")->capture_default_str();
  app.add_option("--dim", hp.dim, "Embedding dimension R")->capture_default_str();
  auto* steps_opt = app.add_option("--steps", o.cfg.steps, "Full-data gradient steps E")->capture_default_str();
  app.add_option("--epochs", o.lite_epochs, "Passes over the stream (lite)")->capture_default_str();
  app.add_option("--t2", hp.t2, "Steps per split")->capture_default_str();
  app.add_option("--ratio", hp.target_ratio, "Target compression ratio M*/M")->capture_default_str();
  app.add_option("--user-ratio", o.cfg.user_ratio, "User compression ratio; 1 keeps a full user table")
      ->capture_default_str();
  app.add_option("--delta", hp.delta, "Split threshold on principal scores")->capture_default_str();
  app.add_option("--lambda-reg", hp.lambda_reg, "Norm regularization weight")->capture_default_str();
  app.add_option("--lambda-p", hp.lambda_p, "Personalization pull-back weight")->capture_default_str();
  app.add_option("--initial-clusters", hp.initial_clusters, "Initial item cluster count")->capture_default_str();
  app.add_option("--criterion", o.criterion,
                 "Split criterion: interaction-count, member-count, total-loss, mean-loss, gradient-norm")
      ->capture_default_str();
  app.add_option("--split-method", o.split_method, "Split method: gpca, random-projection, random")
      ->capture_default_str();
  app.add_option("--projection", o.projection, "Nonnegativity projection: abs or clamp")->capture_default_str();
  app.add_flag("--no-averaging", o.no_averaging, "Use summed instead of member-averaged cluster gradients");
  app.add_option("--d", hp.d, "Lite interaction threshold")->capture_default_str();
  app.add_option("--n", hp.n, "Lite replay buffer size per entity")->capture_default_str();
  app.add_option("--m", hp.m, "Lite sampled clusters per reassignment")->capture_default_str();
  app.add_option("--b", hp.b, "Lite batch size")->capture_default_str();
  app.add_option("--eval-every", o.cfg.eval_every, "Validation interval in steps; 0 disables")
      ->capture_default_str();
  app.add_option("--patience", o.cfg.patience, "Early-stop patience in validation checks; 0 disables")
      ->capture_default_str();

  auto* train = app.add_subcommand("train", "Train with splitting and reassignment");
  auto* lite = app.add_subcommand("lite", "Online training over the time-ordered training stream");
  auto* retrain = app.add_subcommand("retrain", "Retrain embeddings with a checkpoint's clustering fixed");
  auto* pers = app.add_subcommand("personalize", "Untie shared embeddings and fine-tune per entity");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a ratings file");
  auto* analyze = app.add_subcommand("analyze", "Cluster statistics of a checkpoint");
  auto* baseline = app.add_subcommand("baseline", "Baselines: modulo, full, random-split, random-projection");
  auto* synth = app.add_subcommand("synth", "Cluster recovery on synthetic data");

  std::string model_path;
  for (auto* sub : {retrain, pers, eval, analyze})
    sub->add_option("--model", model_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  std::string method = "modulo";
  baseline->add_option("--method", method, "Baseline method")->capture_default_str();
  PersonalizeOptions popt;
  pers->add_option("--p-steps", popt.steps, "Fine-tuning steps")->capture_default_str();
  pers->add_option("--p-lr", popt.lr, "Fine-tuning learning rate")->capture_default_str();
  SynthOptions so;
  synth->add_option("--users", so.users, "Users N")->capture_default_str();
  synth->add_option("--items", so.items, "Items M")->capture_default_str();
  synth->add_option("--clusters", so.clusters, "True cluster count")->capture_default_str();
  synth->add_option("--rank", so.rank, "True and fitted dimension R")->capture_default_str();
  synth->add_option("--noise", so.noise, "Gaussian noise std")->capture_default_str();
  synth->add_option("--observed", so.observed, "Observed fraction of entries")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    o.cfg.criterion = parse_criterion(o.criterion);
    o.cfg.split_method = parse_split_method(o.split_method);
    if (o.projection == "abs")
      o.cfg.projection = Projection::kAbs;
    else if (o.projection == "clamp")
      o.cfg.projection = Projection::kClampZero;
    else
      throw Error("unknown projection '" + o.projection + "'");
    o.cfg.averaging = !o.no_averaging;
    popt.lambda_p = hp.lambda_p;
    popt.projection = o.cfg.projection;
    popt.threads = o.cfg.threads;

    if (*train) return cmd_train(o);
    if (*lite) {
      if (lr_opt->count() == 0) hp.lr = 0.05;
      if (t1_opt->count() == 0) hp.t1 = 1;
      return cmd_lite(o);
    }
    if (*retrain) return cmd_retrain(o, model_path);
    if (*pers) return cmd_personalize(o, model_path, popt);
    if (*eval) return cmd_eval(o, model_path);
    if (*analyze) return cmd_analyze(o, model_path);
    if (*baseline) return cmd_baseline(o, method);
    if (*synth) return cmd_synth(o, so, lr_opt->count() > 0, steps_opt->count() > 0);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
