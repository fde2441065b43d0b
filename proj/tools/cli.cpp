#include "cli.hpp"

#include "iiae/data.hpp"
#include "iiae/evaltasks.hpp"
#include "iiae/file_util.hpp"
#include "iiae/model.hpp"
#include "iiae/trainer.hpp"
#include "iiae/verification.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

namespace iiae::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Flag validation failure detected after parsing.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void require_output_dir(const std::string& path) {
  if (path.empty()) return;
  const fs::path parent = fs::absolute(fs::path(path)).parent_path();
  if (!fs::is_directory(parent)) throw ValidationError("output directory does not exist: " + parent.string());
}

void require_file(const std::string& path, const std::string& flag) {
  if (!fs::is_regular_file(path)) throw ValidationError(flag + ": no such file '" + path + "'");
}

void emit(const json& report, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << report.dump(2) << '\n';
    return;
  }
  write_atomically(path, [&](std::ostream& os) { os << report.dump(2) << '\n'; });
}

std::vector<int> parse_ks(const std::vector<int>& ks) {
  if (ks.empty()) throw ValidationError("--k needs at least one value");
  for (int k : ks) {
    if (k < 1) throw ValidationError("--k values must be >= 1");
  }
  return ks;
}

struct TrainFlags {
  std::string variant = "iiae";
  double lambda = 2.0;
  double recon_weight = 10.0;
  double lr = 2e-4;
  std::int64_t steps = 20000;
  int batch = 64;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 100;
  std::string arch = "synthetic";
  std::string repair = "auto";

  void add_to(CLI::App* app, bool with_variant) {
    if (with_variant) app->add_option("--variant", variant, "elbo|iiae|ii|ii_mi|elbo_plus_ii|elbo_plus_ii_mi");
    app->add_option("--lambda", lambda, "regularization weight");
    app->add_option("--recon-weight", recon_weight, "reconstruction weight");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--steps", steps, "Adam steps");
    app->add_option("--batch", batch, "mini-batch size");
    app->add_option("--seed", seed, "run seed");
    app->add_option("--eval-every", eval_every, "loss logging interval");
    app->add_option("--arch", arch, "synthetic|retrieval layer sizes");
    app->add_option("--repair", repair, "auto|epoch|never: re-pair y within class each epoch");
  }

  TrainConfig resolve(const PairedDataset& ds) const {
    TrainConfig c;
    c.objective.variant = variant_from_string(variant);
    c.objective.lambda = lambda;
    c.objective.recon_weight = recon_weight;
    if (arch == "synthetic") {
      c.model = ModelConfig::synthetic_default(static_cast<int>(ds.x.cols()), static_cast<int>(ds.y.cols()));
    } else if (arch == "retrieval") {
      c.model = ModelConfig::retrieval_default();
      c.model.x_dim = static_cast<int>(ds.x.cols());
      c.model.y_dim = static_cast<int>(ds.y.cols());
    } else {
      throw ValidationError("--arch must be synthetic or retrieval");
    }
    c.learning_rate = lr;
    c.total_steps = steps;
    c.batch_size = batch;
    c.seed = seed;
    c.eval_every = eval_every;
    c.repairing = repairing_from_string(repair);
    if (c.repairing == Repairing::per_epoch && !ds.shared_class) {
      throw ValidationError("--repair epoch needs a dataset with shared_class labels");
    }
    c.validate();
    return c;
  }

  // Range checks that need no dataset.
  void precheck() const {
    ObjectiveParams p;
    p.variant = variant_from_string(variant);
    p.lambda = lambda;
    p.recon_weight = recon_weight;
    p.validate();
    if (!(lr > 0.0)) throw ValidationError("--lr must be > 0");
    if (steps < 1) throw ValidationError("--steps must be >= 1");
    if (batch < 1) throw ValidationError("--batch must be >= 1");
    if (eval_every < 1) throw ValidationError("--eval-every must be >= 1");
    if (arch != "synthetic" && arch != "retrieval") throw ValidationError("--arch must be synthetic or retrieval");
    repairing_from_string(repair);
  }
};

PairedDataset load_paired(const std::string& path) {
  PairedDataset ds = load_dataset(path);
  if (ds.y.cols() == 0) throw ValidationError("'" + path + "' is a single-domain file; paired data required");
  return ds;
}

Relevance ground_truth_for(const PairedDataset& ds, const std::string& kind) {
  if (kind == "pair") return pair_relevance(ds.size());
  if (kind == "class") {
    if (!ds.shared_class) throw ValidationError("class ground truth needs shared_class labels in the dataset");
    return class_relevance(*ds.shared_class, *ds.shared_class);
  }
  throw ValidationError("--ground-truth must be pair or class");
}

json retrieval_table_row(const std::string& label, const IIAEModel& model, const PairedDataset& test, Metric metric,
                         const std::string& ground_truth, const std::vector<int>& ks) {
  const Relevance rel = ground_truth_for(test, ground_truth);
  const Mat q = embed(model, test.x, Domain::x, Representation::shared);
  const Mat d = embed(model, test.y, Domain::y, Representation::shared);
  RetrievalReport r = retrieve(q, d, metric, rel, ks);
  json row = to_json(r);
  row.erase("first_relevant_rank");
  row["objective"] = label;
  return row;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shared/exclusive representation learning on paired two-domain data", "iiae"};
  app.require_subcommand(1);
  app.allow_extras(false);

  json invocation{{"argv", args}};

  // gen-data
  GenSpec gen;
  std::optional<std::uint64_t> sample_seed;
  std::string gen_out, gen_split = "all";
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic paired dataset");
  gen_cmd->add_option("--out", gen_out, "IIPD output path")->required();
  gen_cmd->add_option("--n", gen.n, "pairs");
  gen_cmd->add_option("--classes", gen.classes, "shared classes");
  gen_cmd->add_option("--excl-dim-x", gen.excl_dim_x, "exclusive factor width of x");
  gen_cmd->add_option("--excl-dim-y", gen.excl_dim_y, "exclusive factor width of y");
  gen_cmd->add_option("--x-dim", gen.x_dim, "x width");
  gen_cmd->add_option("--y-dim", gen.y_dim, "y width");
  gen_cmd->add_option("--embed-dim", gen.embed_dim, "class codebook width");
  gen_cmd->add_option("--hidden-width", gen.hidden_width, "generator hidden width");
  gen_cmd->add_option("--depth", gen.depth, "generator depth");
  gen_cmd->add_option("--noise-std", gen.noise_std, "observation noise");
  gen_cmd->add_option("--seed", gen.seed, "generator seed (codebook and maps)");
  gen_cmd->add_option("--sample-seed", sample_seed, "row-sampling seed (defaults to --seed)");
  gen_cmd->add_option("--split", gen_split, "split tag stored in the file");

  // train
  TrainFlags tf;
  std::string train_data, train_ckpt, train_log;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--data", train_data, "paired IIPD training set")->required();
  train_cmd->add_option("--out-ckpt", train_ckpt, "checkpoint path")->required();
  train_cmd->add_option("--log", train_log, "JSONL loss log");
  tf.add_to(train_cmd, true);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->require_subcommand(1);
  std::string ev_ckpt, ev_data, ev_out, ev_rep = "shared", ev_metric = "euclidean", ev_gt = "pair";
  std::string ev_direction = "x2y";
  std::vector<int> ev_ks{1, 5, 10, 100};
  auto* retrieve_cmd = eval_cmd->add_subcommand("retrieve", "cross-domain retrieval report");
  retrieve_cmd->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  retrieve_cmd->add_option("--data", ev_data, "paired IIPD test set")->required();
  retrieve_cmd->add_option("--rep", ev_rep, "shared|exclusive-x|exclusive-y");
  retrieve_cmd->add_option("--metric", ev_metric, "euclidean|cosine");
  retrieve_cmd->add_option("--k", ev_ks, "cutoffs")->delimiter(',');
  retrieve_cmd->add_option("--ground-truth", ev_gt, "pair|class");
  retrieve_cmd->add_option("--direction", ev_direction, "x2y|y2x (shared representation)");
  retrieve_cmd->add_option("--out", ev_out, "JSON report path (stdout when omitted)");

  std::string pr_ckpt, pr_data, pr_out, pr_rep = "shared", pr_target = "shared_class", pr_domain = "x";
  std::uint64_t pr_seed = 0;
  auto* probe_cmd = eval_cmd->add_subcommand("probe", "linear probe of one representation");
  probe_cmd->add_option("--ckpt", pr_ckpt, "checkpoint")->required();
  probe_cmd->add_option("--data", pr_data, "paired IIPD set with ground-truth factors")->required();
  probe_cmd->add_option("--rep", pr_rep, "shared|exclusive-x|exclusive-y");
  probe_cmd->add_option("--target", pr_target, "shared_class|excl_x|excl_y");
  probe_cmd->add_option("--domain", pr_domain, "x|y items for the shared representation");
  probe_cmd->add_option("--seed", pr_seed, "fold assignment seed");
  probe_cmd->add_option("--out", pr_out, "JSON report path (stdout when omitted)");

  // translate
  std::string tr_ckpt, tr_data, tr_out, tr_direction = "x2y", tr_mode = "prior", tr_report;
  std::uint64_t tr_seed = 0;
  auto* translate_cmd = app.add_subcommand("translate", "translate a dataset between domains");
  translate_cmd->add_option("--ckpt", tr_ckpt, "checkpoint")->required();
  translate_cmd->add_option("--data", tr_data, "IIPD source set")->required();
  translate_cmd->add_option("--out", tr_out, "single-domain IIPD output")->required();
  translate_cmd->add_option("--direction", tr_direction, "x2y|y2x");
  translate_cmd->add_option("--mode", tr_mode, "prior|guided");
  translate_cmd->add_option("--seed", tr_seed, "prior noise seed");
  translate_cmd->add_option("--report", tr_report, "JSON summary path (stdout when omitted)");

  // ablate
  TrainFlags af;
  std::string ab_data, ab_test, ab_out, ab_metric = "euclidean", ab_gt = "class";
  std::vector<int> ab_ks{1, 5, 10};
  auto* ablate_cmd = app.add_subcommand("ablate", "train every objective variant and compare retrieval");
  ablate_cmd->add_option("--data", ab_data, "paired IIPD training set")->required();
  ablate_cmd->add_option("--test-data", ab_test, "paired IIPD test set")->required();
  ablate_cmd->add_option("--metric", ab_metric, "euclidean|cosine");
  ablate_cmd->add_option("--ground-truth", ab_gt, "pair|class");
  ablate_cmd->add_option("--k", ab_ks, "cutoffs")->delimiter(',');
  ablate_cmd->add_option("--out", ab_out, "JSON table path (stdout when omitted)");
  af.add_to(ablate_cmd, false);

  // check
  auto* check_cmd = app.add_subcommand("check", "verification suites");
  check_cmd->require_subcommand(1);
  check_cmd->fallthrough();
  std::string check_out;
  check_cmd->add_option("--out", check_out, "JSON report path (stdout when omitted)");
  auto* check_grads = check_cmd->add_subcommand("grads", "analytic vs finite-difference gradients");
  auto* check_kl_cmd = check_cmd->add_subcommand("kl", "closed-form KL vs Monte-Carlo");
  auto* check_mi = check_cmd->add_subcommand("mi-identity", "mutual-information identities");
  auto* check_bounds_cmd = check_cmd->add_subcommand("bounds", "variational bound directions");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    if (gen_cmd->parsed()) {
      invocation["subcommand"] = "gen-data";
      gen.validate();
      require_output_dir(gen_out);
      PairedDataset ds = gen_synthetic(gen, sample_seed);
      ds.split = gen_split;
      ds.provenance["invocation"] = invocation;
      save_dataset(ds, gen_out);
      return kExitOk;
    }

    if (train_cmd->parsed()) {
      invocation["subcommand"] = "train";
      tf.precheck();
      require_file(train_data, "--data");
      require_output_dir(train_ckpt);
      require_output_dir(train_log);
      const PairedDataset ds = load_paired(train_data);
      const TrainConfig config = tf.resolve(ds);
      TrainOutputs outputs;
      outputs.checkpoint = fs::path(train_ckpt);
      if (!train_log.empty()) outputs.log = fs::path(train_log);
      outputs.invocation = invocation;
      const TrainResult result = train(config, ds, outputs);
      err << "trained " << config.total_steps << " steps; final loss " << result.records.back().loss.total << '\n';
      return kExitOk;
    }

    if (retrieve_cmd->parsed()) {
      invocation["subcommand"] = "eval retrieve";
      const Representation rep = representation_from_string(ev_rep);
      const Metric metric = metric_from_string(ev_metric);
      const std::vector<int> ks = parse_ks(ev_ks);
      if (ev_direction != "x2y" && ev_direction != "y2x") throw ValidationError("--direction must be x2y or y2x");
      require_file(ev_ckpt, "--ckpt");
      require_file(ev_data, "--data");
      require_output_dir(ev_out);
      const LoadedCheckpoint ck = load_checkpoint(ev_ckpt);
      const PairedDataset ds = load_paired(ev_data);
      const Relevance rel = ground_truth_for(ds, ev_gt);
      Mat q, d;
      if (rep == Representation::shared) {
        const bool x2y = ev_direction == "x2y";
        q = embed(ck.model, x2y ? ds.x : ds.y, x2y ? Domain::x : Domain::y, rep);
        d = embed(ck.model, x2y ? ds.y : ds.x, x2y ? Domain::y : Domain::x, rep);
      } else if (rep == Representation::exclusive_x) {
        q = embed(ck.model, ds.x, Domain::x, rep);
        d = embed(ck.model, ds.y, Domain::y, Representation::exclusive_y);
      } else {
        q = embed(ck.model, ds.y, Domain::y, rep);
        d = embed(ck.model, ds.x, Domain::x, Representation::exclusive_x);
      }
      const RetrievalReport r = retrieve(q, d, metric, rel, ks, rep);
      json report{{"invocation", invocation},
                  {"checkpoint", {{"path", ev_ckpt}, {"step", ck.step}, {"seed", ck.seed}}},
                  {"ground_truth", ev_gt},
                  {"direction", rep == Representation::shared ? ev_direction
                                : rep == Representation::exclusive_x ? "x2y" : "y2x"},
                  {"report", to_json(r)}};
      emit(report, ev_out, out);
      return kExitOk;
    }

    if (probe_cmd->parsed()) {
      invocation["subcommand"] = "eval probe";
      const Representation rep = representation_from_string(pr_rep);
      if (pr_target != "shared_class" && pr_target != "excl_x" && pr_target != "excl_y") {
        throw ValidationError("--target must be shared_class, excl_x or excl_y");
      }
      if (pr_domain != "x" && pr_domain != "y") throw ValidationError("--domain must be x or y");
      require_file(pr_ckpt, "--ckpt");
      require_file(pr_data, "--data");
      require_output_dir(pr_out);
      const LoadedCheckpoint ck = load_checkpoint(pr_ckpt);
      const PairedDataset ds = load_paired(pr_data);
      Domain domain = pr_domain == "x" ? Domain::x : Domain::y;
      if (rep == Representation::exclusive_x) domain = Domain::x;
      if (rep == Representation::exclusive_y) domain = Domain::y;
      const Mat emb = embed(ck.model, domain == Domain::x ? ds.x : ds.y, domain, rep);
      Mat targets;
      ProbeKind kind = ProbeKind::regression;
      if (pr_target == "shared_class") {
        if (!ds.shared_class) throw ValidationError("dataset has no shared_class labels");
        targets.resize(ds.size(), 1);
        for (Eigen::Index i = 0; i < ds.size(); ++i) targets(i, 0) = (*ds.shared_class)[static_cast<std::size_t>(i)];
        kind = ProbeKind::classification;
      } else {
        const auto& f = pr_target == "excl_x" ? ds.excl_x : ds.excl_y;
        if (!f) throw ValidationError("dataset has no " + pr_target + " factors");
        targets = *f;
      }
      ProbeReport r = probe(emb, targets, kind, pr_seed);
      r.target = pr_target;
      r.representation = rep;
      json report{{"invocation", invocation},
                  {"checkpoint", {{"path", pr_ckpt}, {"step", ck.step}, {"seed", ck.seed}}},
                  {"domain", domain == Domain::x ? "x" : "y"},
                  {"report", to_json(r)}};
      emit(report, pr_out, out);
      return kExitOk;
    }

    if (translate_cmd->parsed()) {
      invocation["subcommand"] = "translate";
      if (tr_direction != "x2y" && tr_direction != "y2x") throw ValidationError("--direction must be x2y or y2x");
      if (tr_mode != "prior" && tr_mode != "guided") throw ValidationError("--mode must be prior or guided");
      require_file(tr_ckpt, "--ckpt");
      require_file(tr_data, "--data");
      require_output_dir(tr_out);
      require_output_dir(tr_report);
      const LoadedCheckpoint ck = load_checkpoint(tr_ckpt);
      const PairedDataset ds = load_dataset(tr_data);
      TranslateOptions opts;
      opts.direction = tr_direction == "x2y" ? Direction::x_to_y : Direction::y_to_x;
      opts.guided = tr_mode == "guided";
      opts.noise_seed = tr_seed;
      opts.out_path = fs::path(tr_out);
      opts.invocation = invocation;
      if (opts.guided && (opts.direction == Direction::x_to_y ? ds.y.cols() : ds.x.cols()) == 0) {
        throw ValidationError("guided mode needs paired references in the target domain");
      }
      const TranslationResult r = translate_batch(ck.model, ds, opts);
      json report{{"invocation", invocation},
                  {"rows", r.outputs.rows()},
                  {"cols", r.outputs.cols()},
                  {"output", tr_out},
                  {"mse", r.mse ? json(*r.mse) : json(nullptr)}};
      emit(report, tr_report, out);
      return kExitOk;
    }

    if (ablate_cmd->parsed()) {
      invocation["subcommand"] = "ablate";
      af.precheck();
      const Metric metric = metric_from_string(ab_metric);
      const std::vector<int> ks = parse_ks(ab_ks);
      if (ab_gt != "pair" && ab_gt != "class") throw ValidationError("--ground-truth must be pair or class");
      require_file(ab_data, "--data");
      require_file(ab_test, "--test-data");
      require_output_dir(ab_out);
      const PairedDataset train_set = load_paired(ab_data);
      const PairedDataset test_set = load_paired(ab_test);
      ground_truth_for(test_set, ab_gt);

      const std::vector<std::pair<std::string, ObjectiveVariant>> rows{
          {"elbo", ObjectiveVariant::elbo},
          {"ii", ObjectiveVariant::ii},
          {"ii_mi", ObjectiveVariant::ii_mi},
          {"elbo_plus_ii", ObjectiveVariant::elbo_plus_ii},
          {"elbo_plus_ii_mi", ObjectiveVariant::elbo_plus_ii_mi},
          {"iiae", ObjectiveVariant::iiae},
      };
      json table = json::array();
      json configs = json::object();
      for (const auto& [label, variant] : rows) {
        TrainFlags flags = af;
        flags.variant = to_string(variant);
        const TrainConfig config = flags.resolve(train_set);
        err << "ablate: training " << label << '\n';
        const TrainResult result = train(config, train_set);
        table.push_back(retrieval_table_row(label, result.model, test_set, metric, ab_gt, ks));
        configs[label] = to_json(config);
      }
      json report{{"invocation", invocation}, {"ground_truth", ab_gt}, {"configs", configs}, {"rows", table}};
      emit(report, ab_out, out);
      return kExitOk;
    }

    if (check_cmd->parsed()) {
      invocation["subcommand"] = "check";
      require_output_dir(check_out);
      SuiteReport suite;
      if (check_grads->parsed()) suite = check_gradients();
      else if (check_kl_cmd->parsed()) suite = check_kl();
      else if (check_mi->parsed()) suite = check_mi_identity();
      else if (check_bounds_cmd->parsed()) suite = check_bounds();
      json report = to_json(suite);
      report["invocation"] = invocation;
      emit(report, check_out, out);
      for (const auto& p : suite.properties) {
        err << (p.passed ? "PASS " : "FAIL ") << p.name << "  " << p.value << (p.detail.empty() ? "" : "  ")
            << p.detail << '\n';
      }
      if (!suite.passed()) {
        err << "failed properties:";
        for (const auto& f : suite.failures()) err << "\n  " << f;
        err << '\n';
        return kExitVerification;
      }
      return kExitOk;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitValidation;
}

}  // namespace iiae::cli
