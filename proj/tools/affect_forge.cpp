// affect-forge: dataset generation, staged training, evaluation, ensembling,
// and gradient audits behind one binary.
//
// Exit codes: 0 success, 2 usage or invalid configuration, 3 I/O failure,
// 4 numeric abort (non-finite loss), 5 gradient-audit breach.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "af/audit.hpp"
#include "af/common.hpp"
#include "af/data.hpp"
#include "af/metrics.hpp"
#include "af/model.hpp"
#include "af/train.hpp"

namespace {

using namespace af;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& v, const std::string& what) {
  std::size_t pos = 0;
  std::uint64_t out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-')
    throw std::invalid_argument(
        msg(what, " must be an unsigned integer, got \"", v, "\""));
  return out;
}

double parse_f64(const std::string& v, const std::string& what) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    throw std::invalid_argument(msg(what, " must be a real, got \"", v, "\""));
  return out;
}

bool parse_flag(const std::string& v, const std::string& what) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument(
      msg(what, " must be true/false/1/0, got \"", v, "\""));
}

std::set<Task> parse_tasks(const std::string& v) {
  std::set<Task> out;
  std::string cur;
  std::istringstream is(v);
  while (std::getline(is, cur, ',')) out.insert(parse_task(trim(cur)));
  if (out.empty())
    throw std::invalid_argument("model.tasks must name at least one task");
  return out;
}

/// Everything the config file can set, with the file's defaults. Flags
/// override individual fields after the file is applied.
struct RunConfig {
  DataMode mode = DataMode::kMtl;
  bool mode_set = false;
  ModelConfig model;
  bool n_expr_set = false;
  bool tasks_set = false;

  TrainOptions train;
  bool seed_set = false;
  std::size_t pretrain_epochs = 20;
  std::size_t frozen_epochs = 30;
  std::size_t joint_epochs = 10;
  std::size_t pretrain_samples = 500;

  std::string data_train;
  std::string data_val;
  std::string out_checkpoint = "affect_model.ckpt";
  std::string out_log = "train_log.csv";

  void apply(const std::string& key, const std::string& value);
  /// Mode-dependent defaults for fields the file left untouched.
  void finalize();
};

void RunConfig::apply(const std::string& key, const std::string& value) {
  if (key == "mode") {
    mode = parse_mode(value);
    mode_set = true;
  } else if (key == "model.backbone") {
    model.backbone = parse_backbone(value);
  } else if (key == "model.input_size") {
    model.input_size = parse_u64(value, key);
  } else if (key == "model.d_model") {
    model.d_model = parse_u64(value, key);
  } else if (key == "model.n_heads") {
    model.n_heads = parse_u64(value, key);
  } else if (key == "model.d_ff") {
    model.d_ff = parse_u64(value, key);
  } else if (key == "model.n_expr_classes") {
    model.n_expr_classes = parse_u64(value, key);
    n_expr_set = true;
  } else if (key == "model.n_aus") {
    model.n_aus = parse_u64(value, key);
  } else if (key == "model.tasks") {
    model.tasks = parse_tasks(value);
    tasks_set = true;
  } else if (key == "train.lr") {
    train.optim.lr = parse_f64(value, key);
  } else if (key == "train.beta1") {
    train.optim.beta1 = parse_f64(value, key);
  } else if (key == "train.beta2") {
    train.optim.beta2 = parse_f64(value, key);
  } else if (key == "train.adam_eps") {
    train.optim.eps = parse_f64(value, key);
  } else if (key == "train.clip_norm") {
    train.optim.clip_norm = parse_f64(value, key);
  } else if (key == "train.batch_size") {
    train.batch_size = parse_u64(value, key);
  } else if (key == "train.augment") {
    train.augment = parse_flag(value, key);
  } else if (key == "train.seed") {
    train.seed = parse_u64(value, key);
    seed_set = true;
  } else if (key == "train.pretrain_epochs") {
    pretrain_epochs = parse_u64(value, key);
  } else if (key == "train.frozen_epochs") {
    frozen_epochs = parse_u64(value, key);
  } else if (key == "train.joint_epochs") {
    joint_epochs = parse_u64(value, key);
  } else if (key == "train.pretrain_samples") {
    pretrain_samples = parse_u64(value, key);
  } else if (key == "loss.expr") {
    train.loss_weights.expr = parse_f64(value, key);
  } else if (key == "loss.au") {
    train.loss_weights.au = parse_f64(value, key);
  } else if (key == "loss.va") {
    train.loss_weights.va = parse_f64(value, key);
  } else if (key == "loss.bce_prob_eps") {
    train.bce_prob_eps = parse_f64(value, key);
  } else if (key == "loss.au_ratio_eps") {
    train.au_ratio_eps = parse_f64(value, key);
  } else if (key == "data.train") {
    data_train = value;
  } else if (key == "data.val") {
    data_val = value;
  } else if (key == "out.checkpoint") {
    out_checkpoint = value;
  } else if (key == "out.log") {
    out_log = value;
  } else {
    throw std::invalid_argument(msg("unknown config key \"", key, "\""));
  }
}

void RunConfig::finalize() {
  if (mode == DataMode::kLsd) {
    if (!n_expr_set)
      model.n_expr_classes = expr_prototypes(DataMode::kLsd).size();
    if (!tasks_set) model.tasks = {Task::kExpr};
  }
  if (train.batch_size == 0)
    throw std::invalid_argument("train.batch_size must be at least 1");
  if (!(train.optim.lr > 0.0))
    throw std::invalid_argument("train.lr must be positive");
  if (train.loss_weights.expr < 0.0 || train.loss_weights.au < 0.0 ||
      train.loss_weights.va < 0.0)
    throw std::invalid_argument("loss weights must be non-negative");
  for (auto [eps, name] : {std::pair{train.bce_prob_eps, "loss.bce_prob_eps"},
                           std::pair{train.au_ratio_eps, "loss.au_ratio_eps"}})
    if (!(eps > 0.0) || !(eps < 0.5))
      throw std::invalid_argument(msg(name, " must lie in (0, 0.5)"));
}

/// Flat key=value lines; '#' starts a comment, blank lines are skipped.
void load_config_file(const std::string& path, RunConfig& cfg) {
  std::ifstream f(path);
  if (!f) throw IoError(msg("cannot open config ", path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(
          msg(path, ":", lineno, ": expected key=value"));
    try {
      cfg.apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(msg(path, ":", lineno, ": ", e.what()));
    }
  }
}

std::uint64_t env_seed() {
  const char* v = std::getenv("AFFECT_FORGE_SEED");
  if (!v || !*v) return 0;
  return parse_u64(v, "AFFECT_FORGE_SEED");
}

/// Precedence: explicit flag, then config file, then environment, then 0.
std::uint64_t resolve_seed(bool flag_set, std::uint64_t flag_value,
                           bool cfg_set, std::uint64_t cfg_value) {
  if (flag_set) return flag_value;
  if (cfg_set) return cfg_value;
  return env_seed();
}

int stage_rank(Stage s) {
  switch (s) {
    case Stage::kPretrainBackbone: return 0;
    case Stage::kFrozenBackbone: return 1;
    case Stage::kJoint: return 2;
  }
  return 3;
}

std::size_t epochs_for(const RunConfig& cfg, Stage s) {
  switch (s) {
    case Stage::kPretrainBackbone: return cfg.pretrain_epochs;
    case Stage::kFrozenBackbone: return cfg.frozen_epochs;
    case Stage::kJoint: return cfg.joint_epochs;
  }
  return 0;
}

int cmd_gen_data(std::size_t n, const std::string& mode_str,
                 std::uint64_t seed, const std::string& out_dir) {
  const DataMode mode = parse_mode(mode_str);
  const std::string manifest = generate_dataset(n, mode, seed, out_dir);
  std::cout << manifest << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
  std::vector<AuditItem> items;
  if (scope == "ops") {
    items = audit_ops(seed);
  } else if (scope == "losses") {
    items = audit_losses(seed);
  } else if (scope == "model") {
    items = audit_model(seed);
  } else {
    throw std::invalid_argument(
        msg("unknown scope \"", scope, "\" (expected ops, losses, or model)"));
  }

  std::vector<std::string> offenders;
  for (const AuditItem& it : items) {
    std::printf("%-20s  worst %.3e  bound %.0e  %s\n", it.name.c_str(),
                it.worst, it.tolerance, it.pass() ? "ok" : "FAIL");
    if (!it.pass()) offenders.push_back(it.name);
  }
  if (!offenders.empty()) {
    std::string list;
    for (const std::string& n : offenders)
      list += (list.empty() ? "" : ", ") + n;
    std::cout << "offenders: " << list << "\n";
    return 5;
  }
  return 0;
}

/// Header field count tells the annotation flavour apart.
DataMode sniff_mode(const std::string& annotation_path) {
  std::ifstream f(annotation_path);
  if (!f) throw IoError(msg("cannot open ", annotation_path));
  std::string line;
  if (!std::getline(f, line))
    throw ParseError(msg("empty annotation file ", annotation_path), 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::size_t fields =
      1 + static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (fields == 2) return DataMode::kLsd;
  if (fields == 4 + kNumAus) return DataMode::kMtl;
  throw ParseError(
      msg("unrecognized annotation header in ", annotation_path), 1);
}

DataMode model_mode(const ModelConfig& cfg) {
  const bool expr_only =
      cfg.tasks.size() == 1 && *cfg.tasks.begin() == Task::kExpr;
  const std::size_t lsd_classes = expr_prototypes(DataMode::kLsd).size();
  return expr_only && cfg.n_expr_classes == lsd_classes ? DataMode::kLsd
                                                        : DataMode::kMtl;
}

int cmd_eval(const std::vector<std::string>& ckpt_paths,
             const std::string& data_path, bool want_ensemble, bool quiet) {
  if (ckpt_paths.size() > 2)
    throw std::invalid_argument("at most two --checkpoint are supported");
  if (ckpt_paths.size() == 2 && !want_ensemble)
    throw std::invalid_argument(
        "two checkpoints need --ensemble; pass it or drop one --checkpoint");
  if (ckpt_paths.size() != 2 && want_ensemble)
    throw std::invalid_argument("--ensemble needs exactly two --checkpoint");

  std::vector<TrainState> states;
  for (const std::string& p : ckpt_paths) states.push_back(load_train_state(p));

  const ModelConfig& first = states.front().model.cfg;
  for (std::size_t i = 1; i < states.size(); ++i) {
    const ModelConfig& other = states[i].model.cfg;
    if (other.n_expr_classes != first.n_expr_classes)
      throw std::invalid_argument(
          msg("mismatched n_expr_classes between checkpoints (",
              first.n_expr_classes, " vs ", other.n_expr_classes, ")"));
    if (other.n_aus != first.n_aus)
      throw std::invalid_argument(
          msg("mismatched n_aus between checkpoints (", first.n_aus, " vs ",
              other.n_aus, ")"));
    if (other.tasks != first.tasks)
      throw std::invalid_argument("mismatched task sets between checkpoints");
    if (other.input_size != first.input_size)
      throw std::invalid_argument(
          msg("mismatched input_size between checkpoints (", first.input_size,
              " vs ", other.input_size, ")"));
  }

  const DataMode mode = sniff_mode(data_path);
  if (mode != model_mode(first))
    throw std::invalid_argument(
        msg("checkpoint expects ", mode_name(model_mode(first)),
            " data but ", data_path, " is ", mode_name(mode)));
  const Dataset ds = load_dataset(data_path, mode);

  std::vector<HybridModel*> models;
  for (TrainState& st : states) models.push_back(&st.model);
  const MetricsReport report = evaluate_ensemble(models, ds);

  std::cout << (quiet ? metrics_kv(report) : metrics_table(report));
  return 0;
}

struct TrainFlags {
  std::string config_path;
  std::string stage = "all";
  std::string backbone;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string resume_path;
};

int cmd_train(const TrainFlags& flags) {
  RunConfig cfg;
  if (!flags.config_path.empty()) load_config_file(flags.config_path, cfg);
  if (!flags.backbone.empty()) cfg.model.backbone = parse_backbone(flags.backbone);
  cfg.finalize();

  std::vector<Stage> order;
  if (flags.stage == "all") {
    order = {Stage::kPretrainBackbone, Stage::kFrozenBackbone, Stage::kJoint};
  } else {
    order = {parse_stage(flags.stage)};
  }

  const bool resuming = !flags.resume_path.empty();
  HybridModel model;
  AdamState adam;
  bool adam_loaded = false;
  std::size_t done_total = 0;
  std::size_t start_idx = 0;
  std::size_t first_epoch_start = 0;
  std::uint64_t seed =
      resolve_seed(flags.seed_set, flags.seed, cfg.seed_set, cfg.train.seed);

  if (resuming) {
    TrainState st = load_train_state(flags.resume_path);
    model = std::move(st.model);
    seed = st.progress.seed;  // replaying the original streams needs it
    done_total = st.progress.epochs_total;
    if (st.has_adam) {
      adam = std::move(st.adam);
      adam_loaded = true;
    }
    const Stage rs = parse_stage(st.progress.stage);
    const std::size_t rs_done = st.progress.stage_epochs_done;
    const auto it = std::find(order.begin(), order.end(), rs);
    if (it != order.end()) {
      start_idx = static_cast<std::size_t>(it - order.begin());
      if (rs_done >= epochs_for(cfg, rs)) {
        ++start_idx;  // stage already complete, its optimizer is spent
        adam_loaded = false;
      } else {
        first_epoch_start = rs_done;
      }
    } else if (stage_rank(order.front()) > stage_rank(rs)) {
      if (rs_done < epochs_for(cfg, rs))
        throw std::invalid_argument(
            msg("checkpoint stopped mid-", st.progress.stage,
                "; resume with --stage ", st.progress.stage, " or all"));
      adam_loaded = false;  // fresh stage, fresh moments
    } else {
      throw std::invalid_argument(
          msg("checkpoint is already past stage ", stage_name(order.front())));
    }
  } else {
    model = build_model(cfg.model, seed);
  }
  if (resuming && !cfg.mode_set) cfg.mode = model_mode(model.cfg);

  bool needs_data = false;
  for (Stage s : order)
    if (s != Stage::kPretrainBackbone && epochs_for(cfg, s) > 0)
      needs_data = true;
  Dataset train_ds, val_ds;
  const Dataset* valp = nullptr;
  if (needs_data) {
    if (cfg.data_train.empty())
      throw std::invalid_argument(
          "data.train is required for the selected stage(s)");
    train_ds = load_dataset(cfg.data_train, cfg.mode);
    if (!cfg.data_val.empty()) {
      val_ds = load_dataset(cfg.data_val, cfg.mode);
      valp = &val_ds;
    }
    for (const Dataset* ds : {static_cast<const Dataset*>(&train_ds), valp})
      if (ds && (ds->height != model.cfg.input_size ||
                 ds->width != model.cfg.input_size))
        throw std::invalid_argument(
            msg("dataset images are ", ds->height, "x", ds->width,
                " but the model expects ", model.cfg.input_size, "x",
                model.cfg.input_size));
  }

  TrainOptions opt = cfg.train;
  opt.seed = seed;

  std::ofstream log(cfg.out_log, resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError(msg("cannot open log ", cfg.out_log));
  if (log.tellp() == std::ofstream::pos_type(0)) log << epoch_csv_header() << "\n";
  log.flush();

  TrainProgress prog;
  prog.seed = seed;
  prog.stage = stage_name(order.back());
  prog.stage_epochs_done =
      order.size() == 1 && resuming ? first_epoch_start : 0;
  prog.epochs_total = done_total;

  for (std::size_t si = start_idx; si < order.size(); ++si) {
    const Stage s = order[si];
    const std::size_t epochs = epochs_for(cfg, s);
    const std::size_t epoch_start = si == start_idx ? first_epoch_start : 0;
    if (s == Stage::kPretrainBackbone) {
      if (epoch_start != 0)
        throw std::invalid_argument("cannot resume mid-pretrain");
      const PretrainReport pr =
          pretrain_backbone(model, cfg.pretrain_samples, epochs, opt);
      for (std::size_t e = 0; e < pr.epoch_loss.size(); ++e) {
        EpochReport r;
        r.epoch = done_total + e + 1;
        r.stage = stage_name(s);
        r.train_loss = pr.epoch_loss[e];
        log << epoch_csv_row(r) << "\n";
        log.flush();
      }
      done_total += epochs;
      prog = {stage_name(s), epochs, done_total, seed};
      save_train_state(cfg.out_checkpoint, model, nullptr, prog);
    } else {
      const StagePlan plan = make_stage_plan(s, epochs);
      const bool reuse = si == start_idx && adam_loaded;
      if (!reuse) adam = make_adam(collect(model), opt.optim);
      const std::size_t stage_base = done_total - epoch_start;
      const EpochHook hook = [&](const EpochReport& r) {
        log << epoch_csv_row(r) << "\n";
        log.flush();
        prog = {stage_name(s), r.epoch - stage_base, r.epoch, seed};
        save_train_state(cfg.out_checkpoint, model, &adam, prog);
      };
      run_stage(model, adam, plan, train_ds, valp, opt, done_total,
                epoch_start, hook);
      done_total = stage_base + epochs;
      prog = {stage_name(s), epochs, done_total, seed};
    }
  }

  // Zero-epoch runs still leave a loadable checkpoint behind.
  save_train_state(cfg.out_checkpoint, model,
                   adam.names.empty() ? nullptr : &adam, prog);
  std::cout << "checkpoint " << cfg.out_checkpoint << "\n"
            << "log " << cfg.out_log << "\n";
  return 0;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic affect recognition: data, training, evaluation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset");
  std::size_t gen_n = 0;
  std::string gen_mode, gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--n", gen_n, "Number of samples")->required();
  gen->add_option("--mode", gen_mode, "mtl or lsd")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Run the staged curriculum");
  TrainFlags tf;
  train->add_option("--config", tf.config_path, "key=value config file");
  train->add_option("--stage", tf.stage,
                    "pretrain_backbone, frozen_backbone, joint, or all");
  train->add_option("--backbone", tf.backbone, "resnet_lite or hrnet_lite");
  train->add_option("--seed", tf.seed,
                    "Run seed (ignored with --resume: the checkpoint's "
                    "seed is reused)");
  train->add_option("--resume", tf.resume_path, "Checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "Evaluate checkpoint(s) on a split");
  std::vector<std::string> eval_ckpts;
  std::string eval_data;
  bool eval_ensemble = false, eval_quiet = false;
  eval->add_option("--checkpoint", eval_ckpts, "Checkpoint path (repeatable)")
      ->required();
  eval->add_option("--data", eval_data, "Annotation file")->required();
  eval->add_flag("--ensemble", eval_ensemble,
                 "Average two checkpoints in probability space");
  eval->add_flag("--quiet", eval_quiet, "Machine-readable key=value output");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference audits");
  std::string gc_scope;
  std::uint64_t gc_seed = 0;
  gc->add_option("--scope", gc_scope, "ops, losses, or model")->required();
  gc->add_option("--seed", gc_seed, "Probe seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (*gen) {
    return guarded([&] {
      const std::uint64_t seed =
          gen->count("--seed") ? gen_seed : env_seed();
      return cmd_gen_data(gen_n, gen_mode, seed, gen_out);
    });
  }
  if (*train) {
    tf.seed_set = train->count("--seed") > 0;
    return guarded([&] { return cmd_train(tf); });
  }
  if (*eval) {
    return guarded(
        [&] { return cmd_eval(eval_ckpts, eval_data, eval_ensemble, eval_quiet); });
  }
  return guarded([&] {
    const std::uint64_t seed = gc->count("--seed") ? gc_seed : env_seed();
    return cmd_gradcheck(gc_scope, seed);
  });
}
