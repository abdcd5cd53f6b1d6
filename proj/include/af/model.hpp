#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "af/nn.hpp"
#include "af/tensor.hpp"

namespace af {

enum class Backbone { kResNetLite, kHrNetLite };
enum class Task { kVa, kExpr, kAu };

const char* backbone_name(Backbone b);
Backbone parse_backbone(const std::string& name);  // throws invalid_argument
const char* task_name(Task t);
Task parse_task(const std::string& name);  // throws invalid_argument

/// Full model hyperparameters. Defaults describe the MTL configuration on
/// 64x64 inputs; LSD uses n_expr_classes=6 and tasks={EXPR}.
struct ModelConfig {
  Backbone backbone = Backbone::kResNetLite;
  std::size_t input_size = 64;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t n_encoder_layers = 2;  // fixed; validate() rejects other values
  std::size_t n_expr_classes = 8;
  std::size_t n_aus = 12;
  std::set<Task> tasks{Task::kVa, Task::kExpr, Task::kAu};
};

/// Throws std::invalid_argument on any violated constraint. Both backbones
/// reduce spatial resolution by 8, so input_size must be a positive multiple
/// of 8.
void validate(const ModelConfig& cfg);

/// Residual backbone: stem conv (stride 2) then three stages of two basic
/// blocks with channels (16, 32, 64) and strides (1, 2, 2).
struct ResNetLiteParams {
  Conv2dParams stem;
  BatchNorm2dParams stem_bn;
  std::vector<ResidualBlockParams> blocks;  // s1b0 s1b1 s2b0 s2b1 s3b0 s3b1
};

/// Two-stream backbone: a 1/4-resolution stream (32 ch) and a 1/8-resolution
/// stream (64 ch) exchange information after each of two stages, then fuse
/// into the low-resolution map.
struct HrNetLiteParams {
  Conv2dParams stem1;  // 3 -> 16, stride 2
  BatchNorm2dParams stem1_bn;
  Conv2dParams stem2;  // 16 -> 32, stride 2; output is the hi stream
  BatchNorm2dParams stem2_bn;
  Conv2dParams to_lo;  // 32 -> 64, stride 2; creates the lo stream
  BatchNorm2dParams to_lo_bn;
  struct Stage {
    ResidualBlockParams block_hi;  // 32 -> 32
    ResidualBlockParams block_lo;  // 64 -> 64
    Conv2dParams hi2lo;            // 3x3 stride 2, 32 -> 64
    BatchNorm2dParams hi2lo_bn;
    Conv2dParams lo2hi;  // 1x1, 64 -> 32, then nearest 2x upsample
    BatchNorm2dParams lo2hi_bn;
  };
  Stage stages[2];
  Conv2dParams fuse;  // 3x3 stride 2, 32 -> 64; added into the lo stream
  BatchNorm2dParams fuse_bn;
};

/// Backbone -> token projection (when channel count differs from d_model) ->
/// learned positional embedding -> encoder stack -> mean pooling -> heads.
/// Only the heads for configured tasks exist.
struct HybridModel {
  ModelConfig cfg;
  ResNetLiteParams resnet;  // populated iff cfg.backbone == kResNetLite
  HrNetLiteParams hrnet;    // populated iff cfg.backbone == kHrNetLite
  bool has_proj = false;
  LinearParams proj;  // backbone_channels -> d_model
  Tensor pos_embed;   // [n_tokens, d_model]
  std::vector<EncoderLayerParams> encoders;
  LinearParams head_va;    // d_model -> 2, squashed by tanh
  LinearParams head_expr;  // d_model -> n_expr_classes
  LinearParams head_au;    // d_model -> n_aus
  std::size_t n_tokens = 0;
  std::size_t backbone_channels = 0;

  bool has_task(Task t) const { return cfg.tasks.count(t) != 0; }
};

/// Undefined tensors mark tasks absent from the config.
struct ForwardOut {
  Tensor va_raw;       // [B, 2] pre-squash
  Tensor va;           // [B, 2] = tanh(va_raw)
  Tensor expr_logits;  // [B, n_expr_classes]
  Tensor au_logits;    // [B, n_aus]
};

struct Prediction {
  double valence = 0.0;
  double arousal = 0.0;
  std::vector<double> expr_probs;  // softmax over classes; empty if absent
  std::vector<double> au_probs;    // per-AU sigmoid; empty if absent
};

/// Parameter draw order is fixed: backbone (declaration order), projection if
/// present, positional embedding, encoder layers, then heads in the order VA,
/// EXPR, AU. Same (cfg, seed) therefore reproduces every tensor bit-exactly.
HybridModel build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Final feature map [B, backbone_channels, S/8, S/8]. Train mode updates
/// batch-norm running statistics; eval mode never mutates the model.
Tensor backbone_features(HybridModel& m, const Tensor& images, bool train);

/// Flattens spatial positions to tokens, projects to d_model if needed, and
/// adds the positional embedding. features: [B, C, H', W'] -> [B, T, d_model].
Tensor tokenize(const HybridModel& m, const Tensor& features);

/// Encoder stack followed by mean pooling over tokens: [B, T, d_model] ->
/// [B, d_model].
Tensor encode(const HybridModel& m, const Tensor& tokens);

/// Task heads on a pooled representation [B, d_model].
ForwardOut heads(const HybridModel& m, const Tensor& pooled);

/// Composition of the four stages above, with input-shape validation.
ForwardOut forward(HybridModel& m, const Tensor& images, bool train);

/// Eval-mode forward plus probability mapping per sample.
std::vector<Prediction> predict(HybridModel& m, const Tensor& images);

/// Arithmetic mean in probability space. Throws std::invalid_argument when
/// the class or AU dimensionalities differ.
Prediction ensemble(const Prediction& a, const Prediction& b);

/// Every tensor of the model in draw order. Backbone tensors are exactly
/// those whose name starts with "backbone.".
ParamList collect(HybridModel& m);
bool is_backbone_param(const std::string& name);

}  // namespace af
