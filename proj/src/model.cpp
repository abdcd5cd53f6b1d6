#include "af/model.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "af/common.hpp"
#include "af/ops.hpp"
#include "af/rng.hpp"

namespace af {

namespace {

constexpr std::size_t kFinalChannels = 64;
constexpr std::size_t kDownscale = 8;
constexpr double kPosEmbedScale = 0.02;

Tensor conv_bn_relu(const Tensor& x, const Conv2dParams& conv,
                    BatchNorm2dParams& bn, bool train) {
  return relu(batchnorm2d(conv2d(x, conv), bn, train));
}

ResNetLiteParams make_resnet_lite(Rng& rng) {
  ResNetLiteParams p;
  p.stem = make_conv2d(3, 16, 3, 2, 1, rng);
  p.stem_bn = make_batchnorm2d(16);
  p.blocks.push_back(make_residual_block(16, 16, 1, rng));
  p.blocks.push_back(make_residual_block(16, 16, 1, rng));
  p.blocks.push_back(make_residual_block(16, 32, 2, rng));
  p.blocks.push_back(make_residual_block(32, 32, 1, rng));
  p.blocks.push_back(make_residual_block(32, 64, 2, rng));
  p.blocks.push_back(make_residual_block(64, 64, 1, rng));
  return p;
}

HrNetLiteParams make_hrnet_lite(Rng& rng) {
  HrNetLiteParams p;
  p.stem1 = make_conv2d(3, 16, 3, 2, 1, rng);
  p.stem1_bn = make_batchnorm2d(16);
  p.stem2 = make_conv2d(16, 32, 3, 2, 1, rng);
  p.stem2_bn = make_batchnorm2d(32);
  p.to_lo = make_conv2d(32, 64, 3, 2, 1, rng);
  p.to_lo_bn = make_batchnorm2d(64);
  for (auto& s : p.stages) {
    s.block_hi = make_residual_block(32, 32, 1, rng);
    s.block_lo = make_residual_block(64, 64, 1, rng);
    s.hi2lo = make_conv2d(32, 64, 3, 2, 1, rng);
    s.hi2lo_bn = make_batchnorm2d(64);
    s.lo2hi = make_conv2d(64, 32, 1, 1, 0, rng);
    s.lo2hi_bn = make_batchnorm2d(32);
  }
  p.fuse = make_conv2d(32, 64, 3, 2, 1, rng);
  p.fuse_bn = make_batchnorm2d(64);
  return p;
}

Tensor resnet_lite_forward(ResNetLiteParams& p, const Tensor& x, bool train) {
  Tensor h = conv_bn_relu(x, p.stem, p.stem_bn, train);
  for (ResidualBlockParams& b : p.blocks) h = residual_block(h, b, train);
  return h;
}

Tensor hrnet_lite_forward(HrNetLiteParams& p, const Tensor& x, bool train) {
  Tensor h = conv_bn_relu(x, p.stem1, p.stem1_bn, train);
  Tensor hi = conv_bn_relu(h, p.stem2, p.stem2_bn, train);
  Tensor lo = conv_bn_relu(hi, p.to_lo, p.to_lo_bn, train);
  for (auto& s : p.stages) {
    Tensor bh = residual_block(hi, s.block_hi, train);
    Tensor bl = residual_block(lo, s.block_lo, train);
    // Parallel exchange: both updates read the pre-fusion stream outputs.
    Tensor from_lo =
        upsample2x_nearest(batchnorm2d(conv2d(bl, s.lo2hi), s.lo2hi_bn, train));
    Tensor from_hi = batchnorm2d(conv2d(bh, s.hi2lo), s.hi2lo_bn, train);
    hi = relu(add(bh, from_lo));
    lo = relu(add(bl, from_hi));
  }
  return relu(add(lo, batchnorm2d(conv2d(hi, p.fuse), p.fuse_bn, train)));
}

}  // namespace

const char* backbone_name(Backbone b) {
  return b == Backbone::kResNetLite ? "resnet_lite" : "hrnet_lite";
}

Backbone parse_backbone(const std::string& name) {
  if (name == "resnet_lite") return Backbone::kResNetLite;
  if (name == "hrnet_lite") return Backbone::kHrNetLite;
  throw std::invalid_argument(msg("unknown backbone \"", name, "\""));
}

const char* task_name(Task t) {
  switch (t) {
    case Task::kVa: return "va";
    case Task::kExpr: return "expr";
    default: return "au";
  }
}

Task parse_task(const std::string& name) {
  if (name == "va") return Task::kVa;
  if (name == "expr") return Task::kExpr;
  if (name == "au") return Task::kAu;
  throw std::invalid_argument(msg("unknown task \"", name, "\""));
}

void validate(const ModelConfig& cfg) {
  if (cfg.input_size == 0 || cfg.input_size % kDownscale != 0)
    throw std::invalid_argument(
        msg("input_size must be a positive multiple of ", kDownscale, ", got ",
            cfg.input_size));
  if (cfg.d_model == 0 || cfg.n_heads == 0)
    throw std::invalid_argument("d_model and n_heads must be positive");
  if (cfg.d_model % cfg.n_heads != 0)
    throw std::invalid_argument(msg("d_model ", cfg.d_model,
                                    " not divisible by n_heads ", cfg.n_heads));
  if (cfg.d_ff == 0) throw std::invalid_argument("d_ff must be positive");
  if (cfg.n_encoder_layers != 2)
    throw std::invalid_argument(
        msg("n_encoder_layers is fixed at 2, got ", cfg.n_encoder_layers));
  if (cfg.n_expr_classes < 2)
    throw std::invalid_argument("n_expr_classes must be at least 2");
  if (cfg.n_aus == 0) throw std::invalid_argument("n_aus must be positive");
  if (cfg.tasks.empty()) throw std::invalid_argument("tasks must be non-empty");
}

HybridModel build_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  HybridModel m;
  m.cfg = cfg;
  Rng rng(derive_seed(seed, "model-init"));
  if (cfg.backbone == Backbone::kResNetLite)
    m.resnet = make_resnet_lite(rng);
  else
    m.hrnet = make_hrnet_lite(rng);
  m.backbone_channels = kFinalChannels;
  const std::size_t side = cfg.input_size / kDownscale;
  m.n_tokens = side * side;
  m.has_proj = m.backbone_channels != cfg.d_model;
  if (m.has_proj) m.proj = make_linear(m.backbone_channels, cfg.d_model, rng);
  std::vector<double> pe(m.n_tokens * cfg.d_model);
  for (double& v : pe) v = kPosEmbedScale * rng.normal();
  m.pos_embed = Tensor::from({m.n_tokens, cfg.d_model}, std::move(pe));
  for (std::size_t i = 0; i < cfg.n_encoder_layers; ++i)
    m.encoders.push_back(make_encoder_layer(cfg.d_model, cfg.d_ff, cfg.n_heads, rng));
  if (m.has_task(Task::kVa)) m.head_va = make_linear(cfg.d_model, 2, rng);
  if (m.has_task(Task::kExpr))
    m.head_expr = make_linear(cfg.d_model, cfg.n_expr_classes, rng);
  if (m.has_task(Task::kAu)) m.head_au = make_linear(cfg.d_model, cfg.n_aus, rng);
  return m;
}

Tensor backbone_features(HybridModel& m, const Tensor& images, bool train) {
  if (images.rank() != 4 || images.dim(1) != 3 ||
      images.dim(2) != m.cfg.input_size || images.dim(3) != m.cfg.input_size)
    throw std::invalid_argument(
        msg("expected images [B x 3 x ", m.cfg.input_size, " x ",
            m.cfg.input_size, "], got ", shape_str(images.shape())));
  return m.cfg.backbone == Backbone::kResNetLite
             ? resnet_lite_forward(m.resnet, images, train)
             : hrnet_lite_forward(m.hrnet, images, train);
}

Tensor tokenize(const HybridModel& m, const Tensor& features) {
  const std::size_t B = features.dim(0);
  Tensor tokens = reshape(permute(features, {0, 2, 3, 1}),
                          {B, m.n_tokens, m.backbone_channels});
  if (m.has_proj) tokens = linear(tokens, m.proj);
  return add(tokens, m.pos_embed);
}

Tensor encode(const HybridModel& m, const Tensor& tokens) {
  Tensor h = tokens;
  for (const EncoderLayerParams& layer : m.encoders) h = encoder_layer(h, layer);
  return mean(h, 1);
}

ForwardOut heads(const HybridModel& m, const Tensor& pooled) {
  // tanh saturates to exactly +-1.0 in doubles once |x| exceeds ~19; the
  // clamp keeps the advertised open interval for all finite inputs and is
  // the identity everywhere the squash is not already fully saturated.
  static const double kVaBound = std::nextafter(1.0, 0.0);
  ForwardOut out;
  if (m.has_task(Task::kVa)) {
    out.va_raw = linear(pooled, m.head_va);
    out.va = clamp(tanh(out.va_raw), -kVaBound, kVaBound);
  }
  if (m.has_task(Task::kExpr)) out.expr_logits = linear(pooled, m.head_expr);
  if (m.has_task(Task::kAu)) out.au_logits = linear(pooled, m.head_au);
  return out;
}

ForwardOut forward(HybridModel& m, const Tensor& images, bool train) {
  return heads(m, encode(m, tokenize(m, backbone_features(m, images, train))));
}

std::vector<Prediction> predict(HybridModel& m, const Tensor& images) {
  ForwardOut out = forward(m, images, false);
  const std::size_t B = images.dim(0);
  std::vector<Prediction> preds(B);
  if (out.va.defined()) {
    auto va = out.va.data();
    for (std::size_t b = 0; b < B; ++b) {
      preds[b].valence = va[b * 2];
      preds[b].arousal = va[b * 2 + 1];
    }
  }
  if (out.expr_logits.defined()) {
    Tensor probs = softmax(out.expr_logits, 1);
    auto p = probs.data();
    const std::size_t C = probs.dim(1);
    for (std::size_t b = 0; b < B; ++b)
      preds[b].expr_probs.assign(p.begin() + b * C, p.begin() + (b + 1) * C);
  }
  if (out.au_logits.defined()) {
    Tensor probs = sigmoid(out.au_logits);
    auto p = probs.data();
    const std::size_t K = probs.dim(1);
    for (std::size_t b = 0; b < B; ++b)
      preds[b].au_probs.assign(p.begin() + b * K, p.begin() + (b + 1) * K);
  }
  return preds;
}

Prediction ensemble(const Prediction& a, const Prediction& b) {
  if (a.expr_probs.size() != b.expr_probs.size() ||
      a.au_probs.size() != b.au_probs.size())
    throw std::invalid_argument("ensemble members disagree on output sizes");
  Prediction out;
  out.valence = 0.5 * (a.valence + b.valence);
  out.arousal = 0.5 * (a.arousal + b.arousal);
  out.expr_probs.resize(a.expr_probs.size());
  for (std::size_t i = 0; i < out.expr_probs.size(); ++i)
    out.expr_probs[i] = 0.5 * (a.expr_probs[i] + b.expr_probs[i]);
  out.au_probs.resize(a.au_probs.size());
  for (std::size_t i = 0; i < out.au_probs.size(); ++i)
    out.au_probs[i] = 0.5 * (a.au_probs[i] + b.au_probs[i]);
  return out;
}

ParamList collect(HybridModel& m) {
  ParamList out;
  if (m.cfg.backbone == Backbone::kResNetLite) {
    collect(m.resnet.stem, "backbone.stem.conv", out);
    collect(m.resnet.stem_bn, "backbone.stem.bn", out);
    for (std::size_t i = 0; i < m.resnet.blocks.size(); ++i)
      collect(m.resnet.blocks[i],
              msg("backbone.s", i / 2 + 1, "b", i % 2), out);
  } else {
    collect(m.hrnet.stem1, "backbone.stem1.conv", out);
    collect(m.hrnet.stem1_bn, "backbone.stem1.bn", out);
    collect(m.hrnet.stem2, "backbone.stem2.conv", out);
    collect(m.hrnet.stem2_bn, "backbone.stem2.bn", out);
    collect(m.hrnet.to_lo, "backbone.to_lo.conv", out);
    collect(m.hrnet.to_lo_bn, "backbone.to_lo.bn", out);
    for (std::size_t i = 0; i < 2; ++i) {
      auto& s = m.hrnet.stages[i];
      const std::string pre = msg("backbone.stage", i);
      collect(s.block_hi, pre + ".hi", out);
      collect(s.block_lo, pre + ".lo", out);
      collect(s.hi2lo, pre + ".hi2lo.conv", out);
      collect(s.hi2lo_bn, pre + ".hi2lo.bn", out);
      collect(s.lo2hi, pre + ".lo2hi.conv", out);
      collect(s.lo2hi_bn, pre + ".lo2hi.bn", out);
    }
    collect(m.hrnet.fuse, "backbone.fuse.conv", out);
    collect(m.hrnet.fuse_bn, "backbone.fuse.bn", out);
  }
  if (m.has_proj) collect(m.proj, "proj", out);
  out.push_back({"pos_embed", m.pos_embed, true});
  for (std::size_t i = 0; i < m.encoders.size(); ++i)
    collect(m.encoders[i], msg("enc", i), out);
  if (m.has_task(Task::kVa)) collect(m.head_va, "head_va", out);
  if (m.has_task(Task::kExpr)) collect(m.head_expr, "head_expr", out);
  if (m.has_task(Task::kAu)) collect(m.head_au, "head_au", out);
  return out;
}

bool is_backbone_param(const std::string& name) {
  return name.rfind("backbone.", 0) == 0;
}

}  // namespace af
