#include "af/nn.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

#include "af/common.hpp"
#include "af/ops.hpp"

namespace af {
namespace {

using MatMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v));
}

struct ConvDims {
  std::size_t B, C, H, W, OC, k, stride, pad, Ho, Wo;
  std::size_t ckk() const { return C * k * k; }
  std::size_t ncols() const { return Ho * Wo; }
};

// Unrolls one sample's receptive fields into a [C·k·k, Ho·Wo] matrix.
void im2col(const double* x, const ConvDims& d, double* cols) {
  const std::size_t ncols = d.ncols();
  std::size_t row = 0;
  for (std::size_t c = 0; c < d.C; ++c) {
    for (std::size_t ki = 0; ki < d.k; ++ki) {
      for (std::size_t kj = 0; kj < d.k; ++kj, ++row) {
        double* dst = cols + row * ncols;
        for (std::size_t oi = 0; oi < d.Ho; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * d.stride + ki) -
              static_cast<std::ptrdiff_t>(d.pad);
          const bool row_in =
              ii >= 0 && ii < static_cast<std::ptrdiff_t>(d.H);
          for (std::size_t oj = 0; oj < d.Wo; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * d.stride + kj) -
                static_cast<std::ptrdiff_t>(d.pad);
            dst[oi * d.Wo + oj] =
                (row_in && jj >= 0 && jj < static_cast<std::ptrdiff_t>(d.W))
                    ? x[(c * d.H + static_cast<std::size_t>(ii)) * d.W +
                        static_cast<std::size_t>(jj)]
                    : 0.0;
          }
        }
      }
    }
  }
}

// Scatter-adds a [C·k·k, Ho·Wo] matrix back onto one sample's input grad.
void col2im_add(const double* cols, const ConvDims& d, double* gx) {
  const std::size_t ncols = d.ncols();
  std::size_t row = 0;
  for (std::size_t c = 0; c < d.C; ++c) {
    for (std::size_t ki = 0; ki < d.k; ++ki) {
      for (std::size_t kj = 0; kj < d.k; ++kj, ++row) {
        const double* src = cols + row * ncols;
        for (std::size_t oi = 0; oi < d.Ho; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * d.stride + ki) -
              static_cast<std::ptrdiff_t>(d.pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(d.H)) continue;
          for (std::size_t oj = 0; oj < d.Wo; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * d.stride + kj) -
                static_cast<std::ptrdiff_t>(d.pad);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(d.W)) continue;
            gx[(c * d.H + static_cast<std::size_t>(ii)) * d.W +
               static_cast<std::size_t>(jj)] += src[oi * d.Wo + oj];
          }
        }
      }
    }
  }
}

Tensor bn_mean_per_channel(const Tensor& x) {
  // [B,C,H,W] -> [C]; nested means are exact because counts are uniform
  return mean(mean(mean(x, 0), 1), 1);
}

}  // namespace

Conv2dParams make_conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k,
                         std::size_t stride, std::size_t padding, Rng& rng) {
  if (k % 2 == 0) throw std::invalid_argument("conv kernel size must be odd");
  if (stride == 0) throw std::invalid_argument("conv stride must be positive");
  Conv2dParams p;
  p.weight = he_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng);
  p.bias = Tensor::zeros({out_ch});
  p.stride = stride;
  p.padding = padding;
  return p;
}

LinearParams make_linear(std::size_t in, std::size_t out, Rng& rng) {
  LinearParams p;
  p.weight = he_uniform({in, out}, in, rng);
  p.bias = Tensor::zeros({out});
  return p;
}

BatchNorm2dParams make_batchnorm2d(std::size_t channels) {
  BatchNorm2dParams p;
  p.scale = Tensor::ones({channels});
  p.shift = Tensor::zeros({channels});
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor::ones({channels});
  return p;
}

ResidualBlockParams make_residual_block(std::size_t in_ch, std::size_t out_ch,
                                        std::size_t stride, Rng& rng) {
  ResidualBlockParams p;
  p.conv1 = make_conv2d(in_ch, out_ch, 3, stride, 1, rng);
  p.bn1 = make_batchnorm2d(out_ch);
  p.conv2 = make_conv2d(out_ch, out_ch, 3, 1, 1, rng);
  p.bn2 = make_batchnorm2d(out_ch);
  p.has_downsample = stride != 1 || in_ch != out_ch;
  if (p.has_downsample) {
    p.down_conv = make_conv2d(in_ch, out_ch, 1, stride, 0, rng);
    p.down_bn = make_batchnorm2d(out_ch);
  }
  return p;
}

EncoderLayerParams make_encoder_layer(std::size_t d_model, std::size_t d_ff,
                                      std::size_t n_heads, Rng& rng) {
  if (n_heads == 0 || d_model % n_heads != 0)
    throw std::invalid_argument(
        msg("d_model ", d_model, " not divisible by n_heads ", n_heads));
  EncoderLayerParams p;
  p.q = make_linear(d_model, d_model, rng);
  p.k = make_linear(d_model, d_model, rng);
  p.v = make_linear(d_model, d_model, rng);
  p.o = make_linear(d_model, d_model, rng);
  p.ffn1 = make_linear(d_model, d_ff, rng);
  p.ffn2 = make_linear(d_ff, d_model, rng);
  p.ln1_scale = Tensor::ones({d_model});
  p.ln1_shift = Tensor::zeros({d_model});
  p.ln2_scale = Tensor::ones({d_model});
  p.ln2_shift = Tensor::zeros({d_model});
  p.n_heads = n_heads;
  return p;
}

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  if (x.rank() != 4)
    throw std::invalid_argument(
        msg("conv2d: expected [B,C,H,W] input, got ", shape_str(x.shape())));
  if (p.weight.rank() != 4 || p.weight.dim(2) != p.weight.dim(3))
    throw std::invalid_argument("conv2d: weight must be [OC,IC,k,k]");
  if (x.dim(1) != p.weight.dim(1))
    throw std::invalid_argument(msg("conv2d: input has ", x.dim(1),
                                    " channels, weight expects ",
                                    p.weight.dim(1)));
  ConvDims d;
  d.B = x.dim(0);
  d.C = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.OC = p.weight.dim(0);
  d.k = p.weight.dim(2);
  d.stride = p.stride;
  d.pad = p.padding;
  if (p.bias.rank() != 1 || p.bias.dim(0) != d.OC)
    throw std::invalid_argument("conv2d: bias must be [OC]");
  if (d.H + 2 * d.pad < d.k || d.W + 2 * d.pad < d.k)
    throw std::invalid_argument(
        msg("conv2d: kernel ", d.k, " larger than padded input ",
            shape_str(x.shape()), " with pad ", d.pad));
  d.Ho = (d.H + 2 * d.pad - d.k) / d.stride + 1;
  d.Wo = (d.W + 2 * d.pad - d.k) / d.stride + 1;

  Tensor out = Tensor::zeros({d.B, d.OC, d.Ho, d.Wo});
  {
    std::vector<double> cols(d.ckk() * d.ncols());
    ConstMatMap wmat(p.weight.data().data(), static_cast<Eigen::Index>(d.OC),
                     static_cast<Eigen::Index>(d.ckk()));
    for (std::size_t b = 0; b < d.B; ++b) {
      im2col(x.data().data() + b * d.C * d.H * d.W, d, cols.data());
      MatMap o(out.data_mut().data() + b * d.OC * d.ncols(),
               static_cast<Eigen::Index>(d.OC),
               static_cast<Eigen::Index>(d.ncols()));
      o.noalias() = wmat * ConstMatMap(cols.data(),
                                       static_cast<Eigen::Index>(d.ckk()),
                                       static_cast<Eigen::Index>(d.ncols()));
      for (std::size_t oc = 0; oc < d.OC; ++oc)
        o.row(static_cast<Eigen::Index>(oc)).array() += p.bias.data()[oc];
    }
  }
  Tape* tape = Tape::active();
  if (tape &&
      (x.requires_grad() || p.weight.requires_grad() || p.bias.requires_grad())) {
    out.set_requires_grad(true);
    auto xn = x.node(), wn = p.weight.node(), bn = p.bias.node(),
         on = out.node();
    // im2col is recomputed per sample in backward instead of caching the
    // column matrices for the whole batch.
    tape->record(
        [xn, wn, bn, on, d]() {
          if (on->grad.empty()) return;
          const bool wx = xn->requires_grad;
          const bool ww = wn->requires_grad;
          const bool wb = bn->requires_grad;
          if (wx && xn->grad.empty()) xn->grad.assign(xn->values.size(), 0.0);
          if (ww && wn->grad.empty()) wn->grad.assign(wn->values.size(), 0.0);
          if (wb && bn->grad.empty()) bn->grad.assign(bn->values.size(), 0.0);
          const auto eOC = static_cast<Eigen::Index>(d.OC);
          const auto eCKK = static_cast<Eigen::Index>(d.ckk());
          const auto eNC = static_cast<Eigen::Index>(d.ncols());
          std::vector<double> cols((wx || ww) ? d.ckk() * d.ncols() : 0);
          std::vector<double> dcols(wx ? d.ckk() * d.ncols() : 0);
          for (std::size_t b = 0; b < d.B; ++b) {
            ConstMatMap gout(on->grad.data() + b * d.OC * d.ncols(), eOC, eNC);
            if (ww || wx)
              im2col(xn->values.data() + b * d.C * d.H * d.W, d, cols.data());
            if (ww)
              MatMap(wn->grad.data(), eOC, eCKK).noalias() +=
                  gout * ConstMatMap(cols.data(), eCKK, eNC).transpose();
            if (wx) {
              MatMap(dcols.data(), eCKK, eNC).noalias() =
                  ConstMatMap(wn->values.data(), eOC, eCKK).transpose() * gout;
              col2im_add(dcols.data(), d,
                         xn->grad.data() + b * d.C * d.H * d.W);
            }
            if (wb) {
              // Fixed-order accumulation: a vectorized reduction would make
              // the rounding depend on the buffer's alignment.
              const double* g = on->grad.data() + b * d.OC * d.ncols();
              for (std::size_t oc = 0; oc < d.OC; ++oc) {
                double s = 0.0;
                for (std::size_t j = 0; j < d.ncols(); ++j)
                  s += g[oc * d.ncols() + j];
                bn->grad[oc] += s;
              }
            }
          }
        },
        on);
  }
  return out;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  if (x.rank() == 2) return add(matmul(x, p.weight), p.bias);
  if (x.rank() == 3) {
    const std::size_t B = x.dim(0), T = x.dim(1), in = x.dim(2);
    Tensor flat = reshape(x, {B * T, in});
    Tensor out = add(matmul(flat, p.weight), p.bias);
    return reshape(out, {B, T, p.weight.dim(1)});
  }
  throw std::invalid_argument(
      msg("linear: expected rank 2 or 3 input, got ", shape_str(x.shape())));
}

Tensor batchnorm2d(const Tensor& x, BatchNorm2dParams& p, bool train) {
  if (x.rank() != 4)
    throw std::invalid_argument(
        msg("batchnorm2d: expected [B,C,H,W], got ", shape_str(x.shape())));
  const std::size_t C = x.dim(1);
  if (p.scale.dim(0) != C)
    throw std::invalid_argument(msg("batchnorm2d: ", C, " channels vs ",
                                    p.scale.dim(0), " norm parameters"));
  const Shape cshape{C, 1, 1};
  Tensor scale = reshape(p.scale, cshape);
  Tensor shift = reshape(p.shift, cshape);
  if (train) {
    const std::size_t n = x.dim(0) * x.dim(2) * x.dim(3);
    if (n < 2)
      throw std::invalid_argument(
          "batchnorm2d: train mode needs at least 2 values per channel");
    Tensor mu = bn_mean_per_channel(x);
    Tensor centered = sub(x, reshape(mu, cshape));
    Tensor var = bn_mean_per_channel(mul(centered, centered));
    Tensor xhat = div(centered, sqrt(add_scalar(reshape(var, cshape), p.eps)));
    // running stats are plain buffers; update them off-tape
    auto rm = p.running_mean.data_mut();
    auto rv = p.running_var.data_mut();
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (1.0 - p.momentum) * rm[c] + p.momentum * mu.data()[c];
      rv[c] = (1.0 - p.momentum) * rv[c] + p.momentum * var.data()[c];
    }
    return add(mul(xhat, scale), shift);
  }
  Tensor rm = reshape(p.running_mean, cshape);
  Tensor rv = reshape(p.running_var, cshape);
  Tensor xhat = div(sub(x, rm), sqrt(add_scalar(rv, p.eps)));
  return add(mul(xhat, scale), shift);
}

Tensor layernorm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                 double eps) {
  if (x.rank() == 0)
    throw std::invalid_argument("layernorm: input must have rank >= 1");
  const std::size_t last = x.rank() - 1;
  if (scale.rank() != 1 || scale.dim(0) != x.dim(last))
    throw std::invalid_argument(
        msg("layernorm: scale must be [", x.dim(last), "]"));
  Tensor mu = mean(x, last, true);
  Tensor centered = sub(x, mu);
  Tensor var = mean(mul(centered, centered), last, true);
  Tensor xhat = div(centered, sqrt(add_scalar(var, eps)));
  return add(mul(xhat, scale), shift);
}

Tensor residual_block(const Tensor& x, ResidualBlockParams& p, bool train) {
  Tensor h = relu(batchnorm2d(conv2d(x, p.conv1), p.bn1, train));
  h = batchnorm2d(conv2d(h, p.conv2), p.bn2, train);
  Tensor sc = x;
  if (p.has_downsample)
    sc = batchnorm2d(conv2d(x, p.down_conv), p.down_bn, train);
  return relu(add(h, sc));
}

Tensor multi_head_attention(const Tensor& tokens, const EncoderLayerParams& p,
                            Tensor* attn_out) {
  if (tokens.rank() != 3)
    throw std::invalid_argument(msg("multi_head_attention: expected [B,T,D], got ",
                                    shape_str(tokens.shape())));
  const std::size_t B = tokens.dim(0), T = tokens.dim(1), D = tokens.dim(2);
  if (p.q.weight.dim(0) != D)
    throw std::invalid_argument(msg("multi_head_attention: token width ", D,
                                    " vs projection ", p.q.weight.dim(0)));
  const std::size_t h = p.n_heads;
  if (h == 0 || D % h != 0)
    throw std::invalid_argument(
        msg("multi_head_attention: d_model ", D, " not divisible by ", h, " heads"));
  const std::size_t dh = D / h;

  auto split = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {B, T, h, dh}), {0, 2, 1, 3}),
                   {B * h, T, dh});
  };
  Tensor qh = split(linear(tokens, p.q));
  Tensor kh = split(linear(tokens, p.k));
  Tensor vh = split(linear(tokens, p.v));

  Tensor scores = mul_scalar(bmm(qh, permute(kh, {0, 2, 1})),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores, 2);
  if (attn_out) *attn_out = attn;
  Tensor ctx = bmm(attn, vh);
  Tensor merged = reshape(permute(reshape(ctx, {B, h, T, dh}), {0, 2, 1, 3}),
                          {B, T, D});
  return linear(merged, p.o);
}

Tensor encoder_layer(const Tensor& tokens, const EncoderLayerParams& p) {
  Tensor x = layernorm(add(tokens, multi_head_attention(tokens, p)),
                       p.ln1_scale, p.ln1_shift);
  Tensor ffn = linear(relu(linear(x, p.ffn1)), p.ffn2);
  return layernorm(add(x, ffn), p.ln2_scale, p.ln2_shift);
}

Tensor upsample2x_nearest(const Tensor& x) {
  if (x.rank() != 4)
    throw std::invalid_argument(
        msg("upsample2x_nearest: expected [B,C,H,W], got ", shape_str(x.shape())));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  // [B,C,H,1,W,1] * ones[2,1,2] broadcasts each pixel into a 2x2 block whose
  // row-major layout already matches [B,C,2H,2W]
  Tensor expanded = mul(reshape(x, {B, C, H, 1, W, 1}), Tensor::ones({2, 1, 2}));
  return reshape(expanded, {B, C, 2 * H, 2 * W});
}

void collect(const Conv2dParams& p, const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", p.weight, true});
  out.push_back({prefix + ".bias", p.bias, true});
}

void collect(const LinearParams& p, const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", p.weight, true});
  out.push_back({prefix + ".bias", p.bias, true});
}

void collect(const BatchNorm2dParams& p, const std::string& prefix,
             ParamList& out) {
  out.push_back({prefix + ".scale", p.scale, true});
  out.push_back({prefix + ".shift", p.shift, true});
  out.push_back({prefix + ".running_mean", p.running_mean, false});
  out.push_back({prefix + ".running_var", p.running_var, false});
}

void collect(const ResidualBlockParams& p, const std::string& prefix,
             ParamList& out) {
  collect(p.conv1, prefix + ".conv1", out);
  collect(p.bn1, prefix + ".bn1", out);
  collect(p.conv2, prefix + ".conv2", out);
  collect(p.bn2, prefix + ".bn2", out);
  if (p.has_downsample) {
    collect(p.down_conv, prefix + ".down_conv", out);
    collect(p.down_bn, prefix + ".down_bn", out);
  }
}

void collect(const EncoderLayerParams& p, const std::string& prefix,
             ParamList& out) {
  collect(p.q, prefix + ".q", out);
  collect(p.k, prefix + ".k", out);
  collect(p.v, prefix + ".v", out);
  collect(p.o, prefix + ".o", out);
  collect(p.ffn1, prefix + ".ffn1", out);
  collect(p.ffn2, prefix + ".ffn2", out);
  out.push_back({prefix + ".ln1.scale", p.ln1_scale, true});
  out.push_back({prefix + ".ln1.shift", p.ln1_shift, true});
  out.push_back({prefix + ".ln2.scale", p.ln2_scale, true});
  out.push_back({prefix + ".ln2.shift", p.ln2_shift, true});
}

}  // namespace af
