#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "af/data.hpp"
#include "af/losses.hpp"
#include "af/metrics.hpp"
#include "af/model.hpp"
#include "af/nn.hpp"

namespace af {

struct OptimConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global-norm gradient clip; <= 0 disables
};

/// Adam moments for the trainable parameters of one optimization run, in
/// parameter-list order. Parameters frozen mid-run keep stale moments.
struct AdamState {
  OptimConfig cfg;
  std::uint64_t t = 0;
  std::vector<std::string> names;
  std::vector<Tensor> m, v;
};

AdamState make_adam(const ParamList& params, const OptimConfig& cfg = {});

/// One bias-corrected update: p -= lr * m_hat / (sqrt(v_hat) + eps) for every
/// trainable parameter that still requires gradients. Frozen parameters
/// (requires_grad off) are skipped entirely. Increments t even when every
/// gradient is zero. Throws std::logic_error when params no longer match the
/// state layout or an active parameter has no gradient.
void adam_step(ParamList& params, AdamState& st);

/// L2 norm over the gradients of active (trainable, grad-bearing) params.
double global_grad_norm(const ParamList& params);

/// Scales every gradient so the global norm is at most max_norm; returns the
/// pre-clip norm. No-op when max_norm <= 0 or the norm is already within.
double clip_gradients(ParamList& params, double max_norm);

void zero_grads(ParamList& params);

enum class Stage { kPretrainBackbone, kFrozenBackbone, kJoint };
const char* stage_name(Stage s);
Stage parse_stage(const std::string& name);  // throws invalid_argument

/// One curriculum stage. frozen_prefixes freezes parameters by name prefix
/// and must be empty unless stage == kFrozenBackbone (the frozen stage
/// defaults to freezing everything under "backbone.").
struct StagePlan {
  Stage stage = Stage::kJoint;
  std::size_t epochs = 0;
  std::vector<std::string> frozen_prefixes;
};
StagePlan make_stage_plan(Stage stage, std::size_t epochs);
void validate(const StagePlan& plan);

struct TrainOptions {
  OptimConfig optim;
  TaskWeights loss_weights;
  std::size_t batch_size = 16;
  bool augment = true;
  std::uint64_t seed = 0;
  double bce_prob_eps = 1e-7;  // probability clamp inside the AU loss
  double au_ratio_eps = 1e-3;  // positive-ratio clamp for AU class weights
};

struct EpochReport {
  std::size_t epoch = 0;  // 1-based, cumulative across stages
  std::string stage;
  double train_loss = 0.0;  // sample-weighted mean of batch losses
  MetricsReport val;        // zeros when no validation split was given
};

std::string epoch_csv_header();
std::string epoch_csv_row(const EpochReport& r);

/// Eval-mode metrics over a dataset: CCC on frames with valence/arousal
/// present, macro F1 over expression classes (rows labeled -1 excluded),
/// macro F1 over AUs at a 0.5 threshold, and the combined score when every
/// task is available. LSD datasets populate lsd_f1 (= expression macro F1).
MetricsReport evaluate(HybridModel& model, const Dataset& ds,
                       std::size_t batch_size = 64);

/// Same metrics with per-sample predictions combined in probability space by
/// left-to-right pairwise averaging (the exact mean for one or two models).
/// Models must share task set and class/AU dimensionalities; a single-model
/// "ensemble" reproduces evaluate exactly.
MetricsReport evaluate_ensemble(const std::vector<HybridModel*>& models,
                                const Dataset& ds,
                                std::size_t batch_size = 64);

using EpochHook = std::function<void(const EpochReport&)>;

/// Runs epochs [epoch_start, plan.epochs) of one supervised stage: shuffled
/// augmented batches, combined multi-task loss, global-norm clipping, Adam.
/// Freezing the backbone also pins its normalization statistics (the
/// backbone runs in eval mode), so frozen tensors stay bitwise unchanged.
/// Validation metrics are computed after every epoch when val is non-null,
/// and on_epoch (when set) fires after each epoch, e.g. to checkpoint.
/// epoch_base is the number of epochs finished in earlier stages (cumulative
/// CSV numbering); epoch_start resumes a partially finished stage.
/// Throws NumericError naming epoch and batch index if the loss turns
/// non-finite; plan.epochs == 0 returns an empty report with the model
/// untouched.
std::vector<EpochReport> run_stage(HybridModel& model, AdamState& adam,
                                   const StagePlan& plan, const Dataset& train,
                                   const Dataset* val, const TrainOptions& opt,
                                   std::size_t epoch_base = 0,
                                   std::size_t epoch_start = 0,
                                   const EpochHook& on_epoch = {});

struct PretrainReport {
  std::vector<double> epoch_loss;  // mean train loss per epoch
};

/// Backbone warm-up on freshly rendered faces with a throwaway linear head
/// on mean-pooled backbone features. The residual backbone classifies the
/// six basic expressions (cross-entropy); the two-stream backbone regresses
/// the four face-geometry latents (mean squared error). Only backbone and
/// head weights are optimized; the head is discarded, encoders and task
/// heads are untouched. Deterministic in (model, n_samples, epochs, opt).
PretrainReport pretrain_backbone(HybridModel& model, std::size_t n_samples,
                                 std::size_t epochs, const TrainOptions& opt);

struct TrainProgress {
  std::string stage;  // stage currently in progress (stage_name form)
  std::uint64_t stage_epochs_done = 0;
  std::uint64_t epochs_total = 0;  // cumulative epochs logged across stages
  std::uint64_t seed = 0;
};

/// Serializes model config, stage progress, every model tensor (including
/// normalization statistics), and optionally the optimizer moments. A file
/// written from a freshly loaded state is byte-identical to its source.
void save_train_state(const std::string& path, HybridModel& model,
                      const AdamState* adam, const TrainProgress& prog);

struct TrainState {
  HybridModel model;
  AdamState adam;
  bool has_adam = false;
  TrainProgress progress;
};

/// Rebuilds the model from the stored config and fills every tensor by name.
/// Throws CheckpointError on version mismatch, truncation, unknown or
/// misshapen tensor names, or missing fields; nothing partial escapes.
TrainState load_train_state(const std::string& path);

}  // namespace af
