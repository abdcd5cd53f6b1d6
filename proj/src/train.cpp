#include "af/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "af/checkpoint.hpp"
#include "af/common.hpp"
#include "af/ops.hpp"
#include "af/rng.hpp"

namespace af {

namespace {

bool has_prefix(const std::string& name, const std::string& prefix) {
  return name.rfind(prefix, 0) == 0;
}

bool is_frozen(const std::string& name,
               const std::vector<std::string>& prefixes) {
  for (const std::string& p : prefixes)
    if (has_prefix(name, p)) return true;
  return false;
}

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::string fmt_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_u64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

AdamState make_adam(const ParamList& params, const OptimConfig& cfg) {
  AdamState st;
  st.cfg = cfg;
  for (const NamedTensor& p : params) {
    if (!p.trainable) continue;
    st.names.push_back(p.name);
    st.m.push_back(Tensor::zeros(p.tensor.shape()));
    st.v.push_back(Tensor::zeros(p.tensor.shape()));
  }
  return st;
}

void adam_step(ParamList& params, AdamState& st) {
  st.t += 1;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  std::size_t k = 0;
  for (NamedTensor& p : params) {
    if (!p.trainable) continue;
    if (k >= st.names.size() || st.names[k] != p.name ||
        st.m[k].size() != p.tensor.size())
      throw std::logic_error(
          msg("optimizer state does not match parameter \"", p.name, "\""));
    if (p.tensor.requires_grad()) {
      if (!p.tensor.has_grad())
        throw std::logic_error(
            msg("parameter \"", p.name, "\" has no gradient"));
      std::span<const double> g = p.tensor.grad();
      std::span<double> vals = p.tensor.data_mut();
      std::span<double> m = st.m[k].data_mut();
      std::span<double> v = st.v[k].data_mut();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        vals[i] -=
            st.cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.cfg.eps);
      }
    }
    ++k;
  }
  if (k != st.names.size())
    throw std::logic_error("optimizer state does not match parameter list");
}

double global_grad_norm(const ParamList& params) {
  double s = 0.0;
  for (const NamedTensor& p : params) {
    if (!p.trainable || !p.tensor.requires_grad() || !p.tensor.has_grad())
      continue;
    for (double g : p.tensor.grad()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_gradients(ParamList& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm <= 0.0 || norm <= max_norm) return norm;
  const double scale = max_norm / norm;
  for (NamedTensor& p : params) {
    if (!p.trainable || !p.tensor.requires_grad() || !p.tensor.has_grad())
      continue;
    for (double& g : p.tensor.grad_mut()) g *= scale;
  }
  return norm;
}

void zero_grads(ParamList& params) {
  for (NamedTensor& p : params)
    if (p.trainable && p.tensor.requires_grad()) p.tensor.zero_grad();
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kPretrainBackbone: return "pretrain_backbone";
    case Stage::kFrozenBackbone: return "frozen_backbone";
    default: return "joint";
  }
}

Stage parse_stage(const std::string& name) {
  if (name == "pretrain_backbone") return Stage::kPretrainBackbone;
  if (name == "frozen_backbone") return Stage::kFrozenBackbone;
  if (name == "joint") return Stage::kJoint;
  throw std::invalid_argument(msg("unknown stage \"", name, "\""));
}

StagePlan make_stage_plan(Stage stage, std::size_t epochs) {
  StagePlan plan;
  plan.stage = stage;
  plan.epochs = epochs;
  if (stage == Stage::kFrozenBackbone) plan.frozen_prefixes = {"backbone."};
  return plan;
}

void validate(const StagePlan& plan) {
  if (plan.stage == Stage::kFrozenBackbone) {
    if (plan.frozen_prefixes.empty())
      throw std::invalid_argument(
          "frozen_backbone stage requires at least one frozen prefix");
  } else if (!plan.frozen_prefixes.empty()) {
    throw std::invalid_argument(
        msg("stage ", stage_name(plan.stage), " must not freeze parameters"));
  }
}

std::string epoch_csv_header() {
  return "epoch,stage,train_loss,ccc_v,ccc_a,f1_expr,f1_au,mtl_score";
}

std::string epoch_csv_row(const EpochReport& r) {
  char buf[192];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f",
                r.epoch, r.stage.c_str(), r.train_loss, r.val.ccc_v,
                r.val.ccc_a, r.val.f1_expr_macro, r.val.f1_au_macro,
                r.val.mtl_score);
  return buf;
}

MetricsReport evaluate(HybridModel& model, const Dataset& ds,
                       std::size_t batch_size) {
  return evaluate_ensemble({&model}, ds, batch_size);
}

MetricsReport evaluate_ensemble(const std::vector<HybridModel*>& models,
                                const Dataset& ds, std::size_t batch_size) {
  if (models.empty())
    throw std::invalid_argument("evaluate_ensemble: no models given");
  HybridModel& model = *models.front();
  BatchStream stream(ds, batch_size, 0, /*augment=*/false);
  stream.start_epoch(0);
  std::vector<int> expr_pred, expr_true;
  std::vector<std::vector<int>> au_pred, au_true;
  std::vector<double> pv, tv, pa, ta;
  Batch b;
  while (stream.next(b)) {
    std::vector<Prediction> preds = predict(model, b.images);
    for (std::size_t mi = 1; mi < models.size(); ++mi) {
      const std::vector<Prediction> other = predict(*models[mi], b.images);
      for (std::size_t i = 0; i < preds.size(); ++i)
        preds[i] = ensemble(preds[i], other[i]);
    }
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const Prediction& p = preds[i];
      if (model.has_task(Task::kExpr)) {
        expr_pred.push_back(argmax(p.expr_probs));
        expr_true.push_back(b.expr[i]);
      }
      if (model.has_task(Task::kAu) && !b.aus[i].empty()) {
        std::vector<int> bin(p.au_probs.size());
        for (std::size_t j = 0; j < bin.size(); ++j)
          bin[j] = p.au_probs[j] > 0.5 ? 1 : 0;
        au_pred.push_back(std::move(bin));
        au_true.push_back(b.aus[i]);
      }
      if (model.has_task(Task::kVa)) {
        if (b.valence[i] != kVaMissing) {
          pv.push_back(p.valence);
          tv.push_back(b.valence[i]);
        }
        if (b.arousal[i] != kVaMissing) {
          pa.push_back(p.arousal);
          ta.push_back(b.arousal[i]);
        }
      }
    }
  }

  MetricsReport r;
  const bool has_ccc = tv.size() >= 2 && ta.size() >= 2;
  if (has_ccc) {
    r.ccc_v = ccc(pv, tv);
    r.ccc_a = ccc(pa, ta);
  }
  bool has_expr = false;
  for (int t : expr_true) has_expr |= t >= 0;
  if (has_expr)
    r.f1_expr_macro = f1_macro(
        per_class_f1(expr_pred, expr_true, model.cfg.n_expr_classes));
  const bool has_au = !au_true.empty();
  if (has_au) r.f1_au_macro = f1_macro(per_au_f1(au_pred, au_true));
  if (has_ccc && has_expr && has_au)
    r.mtl_score =
        mtl_score(r.ccc_v, r.ccc_a, r.f1_expr_macro, r.f1_au_macro);
  if (ds.mode == DataMode::kLsd) r.lsd_f1 = r.f1_expr_macro;
  return r;
}

std::vector<EpochReport> run_stage(HybridModel& model, AdamState& adam,
                                   const StagePlan& plan, const Dataset& train,
                                   const Dataset* val, const TrainOptions& opt,
                                   std::size_t epoch_base,
                                   std::size_t epoch_start,
                                   const EpochHook& on_epoch) {
  validate(plan);
  if (plan.stage == Stage::kPretrainBackbone)
    throw std::invalid_argument(
        "the pretrain stage runs through pretrain_backbone()");
  if (opt.batch_size == 0)
    throw std::invalid_argument("batch_size must be positive");

  std::vector<EpochReport> reports;
  if (epoch_start >= plan.epochs) return reports;

  ParamList params = collect(model);
  for (NamedTensor& p : params)
    if (p.trainable)
      p.tensor.set_requires_grad(!is_frozen(p.name, plan.frozen_prefixes));
  // A frozen backbone also keeps its normalization statistics pinned: only
  // the joint stage runs batch norm in training mode.
  const bool bn_train = plan.stage == Stage::kJoint;

  const bool use_expr = model.has_task(Task::kExpr);
  const bool use_au =
      model.has_task(Task::kAu) && train.mode == DataMode::kMtl;
  const bool use_va = model.has_task(Task::kVa) && train.mode == DataMode::kMtl;
  AuClassWeights au_w;
  if (use_au) {
    std::vector<std::vector<int>> all_aus;
    all_aus.reserve(train.meta.size());
    for (const Sample& s : train.meta) all_aus.push_back(s.aus);
    au_w = compute_au_weights(all_aus, opt.au_ratio_eps);
  }

  BatchStream stream(train, opt.batch_size,
                     derive_seed(opt.seed, stage_name(plan.stage)),
                     opt.augment);
  for (std::size_t e = epoch_start; e < plan.epochs; ++e) {
    stream.start_epoch(e);
    double loss_sum = 0.0;
    std::size_t seen = 0, bi = 0;
    Batch b;
    while (stream.next(b)) {
      zero_grads(params);
      double total;
      {
        Tape tape;
        const ForwardOut out = forward(model, b.images, bn_train);
        const LossValue le = use_expr ? cross_entropy(out.expr_logits, b.expr)
                                      : masked_loss();
        const LossValue la =
            use_au ? weighted_bce(out.au_logits, b.aus, au_w, opt.bce_prob_eps)
                   : masked_loss();
        const LossValue lv =
            use_va ? ccc_loss(select_column(out.va, 0), select_column(out.va, 1),
                              b.valence, b.arousal)
                   : masked_loss();
        const LossBundle bundle = combined_loss(le, la, lv, opt.loss_weights);
        total = bundle.total.value();
        if (!std::isfinite(total))
          throw NumericError(msg("non-finite loss in stage ",
                                 stage_name(plan.stage), " at epoch ", e + 1,
                                 " batch ", bi));
        tape.backward(bundle.total);
      }
      clip_gradients(params, opt.optim.clip_norm);
      adam_step(params, adam);
      loss_sum += total * static_cast<double>(b.size());
      seen += b.size();
      ++bi;
    }

    EpochReport rep;
    rep.epoch = epoch_base + (e - epoch_start) + 1;
    rep.stage = stage_name(plan.stage);
    rep.train_loss = loss_sum / static_cast<double>(seen);
    if (val) rep.val = evaluate(model, *val, opt.batch_size);
    reports.push_back(rep);
    if (on_epoch) on_epoch(rep);
  }

  for (NamedTensor& p : params)
    if (p.trainable) p.tensor.set_requires_grad(true);
  return reports;
}

PretrainReport pretrain_backbone(HybridModel& model, std::size_t n_samples,
                                 std::size_t epochs, const TrainOptions& opt) {
  if (n_samples == 0)
    throw std::invalid_argument("pretraining needs at least one sample");
  if (opt.batch_size == 0)
    throw std::invalid_argument("batch_size must be positive");

  const std::size_t s = model.cfg.input_size;
  const bool classify = model.cfg.backbone == Backbone::kResNetLite;

  Rng data_rng(derive_seed(opt.seed, "pretrain-data"));
  std::vector<Tensor> images;
  images.reserve(n_samples);
  std::vector<int> cls(n_samples, 0);
  std::vector<std::array<double, 4>> geo(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const DataMode mode = classify ? DataMode::kLsd : DataMode::kMtl;
    const FaceLatent lat = sample_latent(mode, data_rng);
    images.push_back(render_face(lat, s, s));
    if (classify)
      cls[i] = label_from_latent(lat, DataMode::kLsd).expr;
    else
      geo[i] = {lat.mouth_curve, lat.eye_open, lat.brow_raise, lat.brow_knit};
  }

  Rng head_rng(derive_seed(opt.seed, "pretrain-head"));
  const std::size_t n_out = classify ? expr_names(DataMode::kLsd).size() : 4;
  LinearParams head = make_linear(model.backbone_channels, n_out, head_rng);

  ParamList params;
  for (NamedTensor& p : collect(model))
    if (is_backbone_param(p.name)) params.push_back(p);
  collect(head, "pretrain_head", params);
  for (NamedTensor& p : params)
    if (p.trainable) p.tensor.set_requires_grad(true);
  AdamState adam = make_adam(params, opt.optim);

  PretrainReport rep;
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t plane = 3 * s * s;
  for (std::size_t e = 0; e < epochs; ++e) {
    Rng(derive_seed(opt.seed, "pretrain-epoch", e)).shuffle(order);
    double loss_sum = 0.0;
    std::size_t seen = 0, bi = 0;
    for (std::size_t start = 0; start < n_samples;
         start += opt.batch_size, ++bi) {
      const std::size_t bs = std::min(opt.batch_size, n_samples - start);
      std::vector<double> buf(bs * plane);
      std::vector<int> bc(bs);
      std::vector<double> bg(bs * 4);
      for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t idx = order[start + i];
        std::span<const double> src = images[idx].data();
        std::copy(src.begin(), src.end(), buf.begin() + i * plane);
        if (classify)
          bc[i] = cls[idx];
        else
          std::copy(geo[idx].begin(), geo[idx].end(), bg.begin() + i * 4);
      }
      const Tensor x = Tensor::from({bs, 3, s, s}, std::move(buf));

      zero_grads(params);
      double total;
      {
        Tape tape;
        const Tensor feats = backbone_features(model, x, /*train=*/true);
        const Tensor pooled = mean(mean(feats, 3), 2);
        const Tensor out = linear(pooled, head);
        Tensor loss;
        if (classify) {
          loss = cross_entropy(out, bc).value;
        } else {
          const Tensor target = Tensor::from({bs, 4}, std::move(bg));
          const Tensor diff = sub(out, target);
          loss = mean(mul(diff, diff));
        }
        total = loss.value();
        if (!std::isfinite(total))
          throw NumericError(msg("non-finite pretraining loss at epoch ",
                                 e + 1, " batch ", bi));
        tape.backward(loss);
      }
      clip_gradients(params, opt.optim.clip_norm);
      adam_step(params, adam);
      loss_sum += total * static_cast<double>(bs);
      seen += bs;
    }
    rep.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
  }
  return rep;
}

void save_train_state(const std::string& path, HybridModel& model,
                      const AdamState* adam, const TrainProgress& prog) {
  CheckpointData data;
  data.entries = config_to_entries(model.cfg);
  data.entries.emplace_back("train.stage", prog.stage);
  data.entries.emplace_back("train.stage_epochs_done",
                            fmt_u64(prog.stage_epochs_done));
  data.entries.emplace_back("train.epochs_total", fmt_u64(prog.epochs_total));
  data.entries.emplace_back("train.seed", fmt_u64(prog.seed));
  data.entries.emplace_back("optim.present", adam ? "1" : "0");
  if (adam) {
    data.entries.emplace_back("optim.lr", fmt_f64(adam->cfg.lr));
    data.entries.emplace_back("optim.beta1", fmt_f64(adam->cfg.beta1));
    data.entries.emplace_back("optim.beta2", fmt_f64(adam->cfg.beta2));
    data.entries.emplace_back("optim.eps", fmt_f64(adam->cfg.eps));
    data.entries.emplace_back("optim.clip_norm", fmt_f64(adam->cfg.clip_norm));
    data.entries.emplace_back("optim.t", fmt_u64(adam->t));
  }
  for (const NamedTensor& p : collect(model))
    data.tensors.emplace_back(p.name, p.tensor);
  if (adam) {
    for (std::size_t i = 0; i < adam->names.size(); ++i) {
      data.tensors.emplace_back("adam.m." + adam->names[i], adam->m[i]);
      data.tensors.emplace_back("adam.v." + adam->names[i], adam->v[i]);
    }
  }
  write_checkpoint(path, data);
}

namespace {

const std::string& entry_value(
    const std::vector<std::pair<std::string, std::string>>& entries,
    const std::string& key) {
  for (const auto& [k, v] : entries)
    if (k == key) return v;
  throw CheckpointError(msg("checkpoint is missing entry ", key));
}

std::uint64_t entry_u64(
    const std::vector<std::pair<std::string, std::string>>& entries,
    const std::string& key) {
  const std::string& v = entry_value(entries, key);
  char* end = nullptr;
  const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw CheckpointError(msg("bad value for ", key, ": \"", v, "\""));
  return n;
}

double entry_f64(
    const std::vector<std::pair<std::string, std::string>>& entries,
    const std::string& key) {
  const std::string& v = entry_value(entries, key);
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw CheckpointError(msg("bad value for ", key, ": \"", v, "\""));
  return d;
}

void copy_into(const Tensor& src, Tensor& dst, const std::string& name) {
  if (src.shape() != dst.shape())
    throw CheckpointError(msg("tensor \"", name, "\" has shape ",
                              shape_str(src.shape()), ", expected ",
                              shape_str(dst.shape())));
  std::span<const double> s = src.data();
  std::copy(s.begin(), s.end(), dst.data_mut().begin());
}

}  // namespace

TrainState load_train_state(const std::string& path) {
  const CheckpointData data = read_checkpoint(path);

  TrainState st;
  st.model = build_model(config_from_entries(data.entries), 0);
  st.progress.stage = entry_value(data.entries, "train.stage");
  parse_stage(st.progress.stage);  // reject unknown names early
  st.progress.stage_epochs_done =
      entry_u64(data.entries, "train.stage_epochs_done");
  st.progress.epochs_total = entry_u64(data.entries, "train.epochs_total");
  st.progress.seed = entry_u64(data.entries, "train.seed");
  st.has_adam = entry_value(data.entries, "optim.present") == "1";

  ParamList params = collect(st.model);
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < params.size(); ++i) index[params[i].name] = i;

  std::unordered_map<std::string, const Tensor*> adam_m, adam_v;
  std::vector<bool> filled(params.size(), false);
  for (const auto& [name, tensor] : data.tensors) {
    if (has_prefix(name, "adam.m.")) {
      adam_m[name.substr(7)] = &tensor;
    } else if (has_prefix(name, "adam.v.")) {
      adam_v[name.substr(7)] = &tensor;
    } else {
      const auto it = index.find(name);
      if (it == index.end())
        throw CheckpointError(msg("unknown tensor \"", name, "\" in ", path));
      copy_into(tensor, params[it->second].tensor, name);
      filled[it->second] = true;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!filled[i])
      throw CheckpointError(
          msg("checkpoint is missing tensor \"", params[i].name, "\""));

  if (st.has_adam) {
    OptimConfig oc;
    oc.lr = entry_f64(data.entries, "optim.lr");
    oc.beta1 = entry_f64(data.entries, "optim.beta1");
    oc.beta2 = entry_f64(data.entries, "optim.beta2");
    oc.eps = entry_f64(data.entries, "optim.eps");
    oc.clip_norm = entry_f64(data.entries, "optim.clip_norm");
    st.adam = make_adam(params, oc);
    st.adam.t = entry_u64(data.entries, "optim.t");
    for (std::size_t i = 0; i < st.adam.names.size(); ++i) {
      const std::string& name = st.adam.names[i];
      const auto m = adam_m.find(name);
      const auto v = adam_v.find(name);
      if (m == adam_m.end() || v == adam_v.end())
        throw CheckpointError(
            msg("checkpoint is missing optimizer state for \"", name, "\""));
      copy_into(*m->second, st.adam.m[i], "adam.m." + name);
      copy_into(*v->second, st.adam.v[i], "adam.v." + name);
    }
    if (adam_m.size() != st.adam.names.size() ||
        adam_v.size() != st.adam.names.size())
      throw CheckpointError(
          msg("unexpected optimizer tensors in ", path));
  } else if (!adam_m.empty() || !adam_v.empty()) {
    throw CheckpointError(
        msg("optimizer tensors present but optim.present=0 in ", path));
  }
  return st;
}

}  // namespace af
