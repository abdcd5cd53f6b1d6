#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "af/gradcheck.hpp"
#include "af/nn.hpp"
#include "af/ops.hpp"
#include "af/rng.hpp"
#include "af/tensor.hpp"

using af::Rng;
using af::Shape;
using af::Tape;
using af::Tensor;

namespace {

Tensor rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(af::numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

void fill(Tensor t, double v) {
  for (double& x : t.data_mut()) x = v;
}

}  // namespace

TEST_CASE("conv2d 1x1 identity kernel") {
  Rng rng(1);
  Tensor x = rand_tensor(rng, {2, 1, 4, 4});
  af::Conv2dParams p = af::make_conv2d(1, 1, 1, 1, 0, rng);
  fill(p.weight, 1.0);
  Tensor y = af::conv2d(x, p);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d ones kernel counts overlap") {
  Rng rng(2);
  af::Conv2dParams p = af::make_conv2d(1, 1, 3, 1, 1, rng);
  fill(p.weight, 1.0);
  Tensor x = Tensor::ones({1, 1, 3, 3});
  Tensor y = af::conv2d(x, p);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.data()[4] == 9.0);  // center
  for (std::size_t corner : {std::size_t{0}, std::size_t{2}, std::size_t{6},
                             std::size_t{8}})
    CHECK(y.data()[corner] == 4.0);
  for (std::size_t edge : {std::size_t{1}, std::size_t{3}, std::size_t{5},
                           std::size_t{7}})
    CHECK(y.data()[edge] == 6.0);
}

TEST_CASE("conv2d shape arithmetic and errors") {
  Rng rng(3);
  af::Conv2dParams p = af::make_conv2d(2, 5, 3, 2, 1, rng);
  Tensor y = af::conv2d(rand_tensor(rng, {3, 2, 9, 9}), p);
  CHECK(y.shape() == Shape{3, 5, 5, 5});  // (9+2-3)/2+1

  CHECK_THROWS_AS(af::conv2d(rand_tensor(rng, {1, 3, 9, 9}), p),
                  std::invalid_argument);
  CHECK_THROWS_AS(af::conv2d(rand_tensor(rng, {2, 9, 9}), p),
                  std::invalid_argument);
  CHECK_THROWS_AS(af::make_conv2d(1, 1, 4, 1, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(af::make_conv2d(1, 1, 3, 0, 0, rng), std::invalid_argument);
}

TEST_CASE("conv2d gradient vs finite differences on 1x2x5x5") {
  Rng rng(5);
  Tensor x = rand_tensor(rng, {1, 2, 5, 5});
  af::Conv2dParams p = af::make_conv2d(2, 3, 3, 1, 1, rng);
  Tensor lossw = rand_tensor(rng, {1, 3, 5, 5});
  auto f = [&]() { return af::sum(af::mul(af::conv2d(x, p), lossw)); };
  CHECK(af::gradcheck(f, {x, p.weight, p.bias}) <= 1e-4);
}

TEST_CASE("conv2d strided gradient") {
  Rng rng(6);
  Tensor x = rand_tensor(rng, {2, 2, 6, 6});
  af::Conv2dParams p = af::make_conv2d(2, 3, 3, 2, 1, rng);
  Tensor lossw = rand_tensor(rng, {2, 3, 3, 3});
  auto f = [&]() { return af::sum(af::mul(af::conv2d(x, p), lossw)); };
  CHECK(af::gradcheck(f, {x, p.weight, p.bias}) <= 1e-4);
}

TEST_CASE("linear rank-2 and rank-3 agree") {
  Rng rng(7);
  af::LinearParams p = af::make_linear(5, 3, rng);
  Tensor x3 = rand_tensor(rng, {2, 4, 5});
  Tensor y3 = af::linear(x3, p);
  REQUIRE(y3.shape() == Shape{2, 4, 3});
  Tensor row = Tensor::from({1, 5}, {x3.data().begin() + 5 * 6,
                                     x3.data().begin() + 5 * 7});
  Tensor yrow = af::linear(row, p);  // batch 1, token (1,2)
  for (std::size_t j = 0; j < 3; ++j)
    CHECK(y3.data()[(1 * 4 + 2) * 3 + j] ==
          doctest::Approx(yrow.data()[j]).epsilon(1e-15));
  CHECK_THROWS_AS(af::linear(rand_tensor(rng, {5}), p), std::invalid_argument);
}

TEST_CASE("batchnorm2d train normalizes each channel") {
  Rng rng(8);
  Tensor x = rand_tensor(rng, {4, 3, 5, 5}, -10.0, 10.0);
  af::BatchNorm2dParams p = af::make_batchnorm2d(3);
  Tensor y = af::batchnorm2d(x, p, true);
  const std::size_t n = 4 * 5 * 5;
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i)
        m += y.data()[(b * 3 + c) * 25 + i];
    m /= static_cast<double>(n);
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) {
        const double d = y.data()[(b * 3 + c) * 25 + i] - m;
        v += d * d;
      }
    v /= static_cast<double>(n);
    CHECK(std::abs(m) <= 1e-9);
    CHECK(std::abs(v - 1.0) <= 1e-6);
  }
}

TEST_CASE("batchnorm2d running stats and eval mode") {
  Rng rng(9);
  af::BatchNorm2dParams p = af::make_batchnorm2d(2);
  Tensor x = rand_tensor(rng, {2, 2, 3, 3}, 1.0, 3.0);
  af::batchnorm2d(x, p, true);
  // momentum 0.1 from (mean 0, var 1) defaults
  for (std::size_t c = 0; c < 2; ++c) {
    double mu = 0.0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 9; ++i) mu += x.data()[(b * 2 + c) * 9 + i];
    mu /= 18.0;
    CHECK(p.running_mean.data()[c] == doctest::Approx(0.1 * mu).epsilon(1e-12));
    CHECK(p.running_var.data()[c] < 1.0);  // batch var of U(1,3) is ~1/3
  }

  af::BatchNorm2dParams fresh = af::make_batchnorm2d(2);  // mean 0, var 1
  Tensor y = af::batchnorm2d(x, fresh, false);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));
}

TEST_CASE("batchnorm2d rejects singleton train batches") {
  af::BatchNorm2dParams p = af::make_batchnorm2d(2);
  Tensor x = Tensor::ones({1, 2, 1, 1});
  CHECK_THROWS_AS(af::batchnorm2d(x, p, true), std::invalid_argument);
  CHECK_NOTHROW(af::batchnorm2d(x, p, false));
}

TEST_CASE("batchnorm2d train-mode gradient") {
  Rng rng(10);
  Tensor x = rand_tensor(rng, {2, 2, 3, 3});
  af::BatchNorm2dParams p = af::make_batchnorm2d(2);
  Tensor lossw = rand_tensor(rng, {2, 2, 3, 3});
  auto f = [&]() {
    return af::sum(af::mul(af::batchnorm2d(x, p, true), lossw));
  };
  CHECK(af::gradcheck(f, {x, p.scale, p.shift}) <= 1e-3);
}

TEST_CASE("layernorm normalizes each token") {
  Rng rng(11);
  Tensor x = rand_tensor(rng, {2, 3, 16}, -10.0, 10.0);
  Tensor y = af::layernorm(x, Tensor::ones({16}), Tensor::zeros({16}));
  for (std::size_t t = 0; t < 6; ++t) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < 16; ++j) m += y.data()[t * 16 + j];
    m /= 16.0;
    for (std::size_t j = 0; j < 16; ++j) {
      const double d = y.data()[t * 16 + j] - m;
      v += d * d;
    }
    v /= 16.0;
    CHECK(std::abs(m) <= 1e-9);
    CHECK(std::abs(v - 1.0) <= 1e-6);
  }
}

TEST_CASE("residual block with zeroed convs is relu(x)") {
  Rng rng(12);
  af::ResidualBlockParams p = af::make_residual_block(4, 4, 1, rng);
  REQUIRE(!p.has_downsample);
  fill(p.conv1.weight, 0.0);
  fill(p.conv2.weight, 0.0);
  Tensor x = rand_tensor(rng, {2, 4, 3, 3});
  Tensor y = af::residual_block(x, p, true);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(y.data()[i] == std::max(x.data()[i], 0.0));
}

TEST_CASE("residual block 16->32 stride 2 shape") {
  Rng rng(13);
  af::ResidualBlockParams p = af::make_residual_block(16, 32, 2, rng);
  REQUIRE(p.has_downsample);
  Tensor y = af::residual_block(rand_tensor(rng, {2, 16, 16, 16}), p, true);
  CHECK(y.shape() == Shape{2, 32, 8, 8});
}

TEST_CASE("residual block end-to-end gradient") {
  Rng rng(14);
  af::ResidualBlockParams p = af::make_residual_block(2, 3, 2, rng);
  Tensor x = rand_tensor(rng, {2, 2, 6, 6});
  Tensor lossw = rand_tensor(rng, {2, 3, 3, 3});
  af::ParamList params;
  af::collect(p, "blk", params);
  std::vector<Tensor> wrt{x};
  for (auto& np : params)
    if (np.trainable) wrt.push_back(np.tensor);
  auto f = [&]() {
    return af::sum(af::mul(af::residual_block(x, p, true), lossw));
  };
  CHECK(af::gradcheck(f, wrt) <= 1e-3);
}

TEST_CASE("attention with zero Q projection is uniform") {
  Rng rng(15);
  af::EncoderLayerParams p = af::make_encoder_layer(8, 16, 2, rng);
  fill(p.q.weight, 0.0);
  Tensor tokens = rand_tensor(rng, {2, 5, 8});
  Tensor attn;
  af::multi_head_attention(tokens, p, &attn);
  REQUIRE(attn.shape() == Shape{4, 5, 5});
  for (std::size_t i = 0; i < attn.size(); ++i)
    CHECK(std::abs(attn.data()[i] - 0.2) <= 1e-12);
}

TEST_CASE("single-token attention is o(v(token))") {
  Rng rng(16);
  af::EncoderLayerParams p = af::make_encoder_layer(8, 16, 4, rng);
  Tensor tokens = rand_tensor(rng, {3, 1, 8});
  Tensor attn;
  Tensor y = af::multi_head_attention(tokens, p, &attn);
  for (std::size_t i = 0; i < attn.size(); ++i) CHECK(attn.data()[i] == 1.0);
  Tensor ref = af::linear(af::linear(tokens, p.v), p.o);
  REQUIRE(y.shape() == ref.shape());
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(std::abs(y.data()[i] - ref.data()[i]) <= 1e-12);
}

TEST_CASE("attention rows sum to 1") {
  Rng rng(17);
  af::EncoderLayerParams p = af::make_encoder_layer(12, 24, 3, rng);
  Tensor attn;
  af::multi_head_attention(rand_tensor(rng, {2, 7, 12}), p, &attn);
  for (std::size_t row = 0; row < 2 * 3 * 7; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += attn.data()[row * 7 + j];
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("attention commutes with token permutation") {
  Rng rng(18);
  const std::size_t B = 2, T = 6, D = 8;
  af::EncoderLayerParams p = af::make_encoder_layer(D, 16, 2, rng);
  Tensor tokens = rand_tensor(rng, {B, T, D});
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<double> pv(tokens.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < D; ++j)
        pv[(b * T + t) * D + j] = tokens.data()[(b * T + perm[t]) * D + j];
  Tensor permuted = Tensor::from({B, T, D}, std::move(pv));

  Tensor y = af::multi_head_attention(tokens, p);
  Tensor yp = af::multi_head_attention(permuted, p);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < D; ++j)
        CHECK(std::abs(yp.data()[(b * T + t) * D + j] -
                       y.data()[(b * T + perm[t]) * D + j]) <= 1e-12);
}

TEST_CASE("encoder layer keeps shape across random configs") {
  Rng rng(19);
  for (int i = 0; i < 4; ++i) {
    const std::size_t B = 1 + rng.uniform_index(3);
    const std::size_t T = 1 + rng.uniform_index(6);
    const std::size_t heads[] = {1, 2, 4};
    const std::size_t h = heads[rng.uniform_index(3)];
    af::EncoderLayerParams p = af::make_encoder_layer(8, 16, h, rng);
    Tensor x = rand_tensor(rng, {B, T, 8});
    CHECK(af::encoder_layer(x, p).shape() == x.shape());
  }
}

TEST_CASE("encoder layer full gradient, B=1 T=3 d_model=8") {
  Rng rng(20);
  af::EncoderLayerParams p = af::make_encoder_layer(8, 16, 2, rng);
  Tensor x = rand_tensor(rng, {1, 3, 8});
  Tensor lossw = rand_tensor(rng, {1, 3, 8});
  af::ParamList params;
  af::collect(p, "enc", params);
  std::vector<Tensor> wrt{x};
  for (auto& np : params) wrt.push_back(np.tensor);
  auto f = [&]() {
    return af::sum(af::mul(af::encoder_layer(x, p), lossw));
  };
  CHECK(af::gradcheck(f, wrt) <= 1e-3);
}

TEST_CASE("no dead parameters in residual block or encoder layer") {
  Rng rng(21);
  SUBCASE("residual block") {
    af::ResidualBlockParams p = af::make_residual_block(2, 3, 2, rng);
    Tensor x = rand_tensor(rng, {2, 2, 6, 6});
    Tensor lossw = rand_tensor(rng, {2, 3, 3, 3});
    af::ParamList params;
    af::collect(p, "blk", params);
    for (auto& np : params)
      if (np.trainable) np.tensor.set_requires_grad(true);
    Tape tape;
    tape.backward(af::sum(af::mul(af::residual_block(x, p, true), lossw)));
    for (auto& np : params) {
      if (!np.trainable) continue;
      REQUIRE(np.tensor.has_grad());
      double mag = 0.0;
      for (double g : np.tensor.grad()) mag += std::abs(g);
      CAPTURE(np.name);
      CHECK(mag > 0.0);
    }
  }
  SUBCASE("encoder layer") {
    af::EncoderLayerParams p = af::make_encoder_layer(8, 16, 2, rng);
    Tensor x = rand_tensor(rng, {2, 4, 8});
    Tensor lossw = rand_tensor(rng, {2, 4, 8});
    af::ParamList params;
    af::collect(p, "enc", params);
    for (auto& np : params) np.tensor.set_requires_grad(true);
    Tape tape;
    tape.backward(af::sum(af::mul(af::encoder_layer(x, p), lossw)));
    for (auto& np : params) {
      REQUIRE(np.tensor.has_grad());
      double mag = 0.0;
      for (double g : np.tensor.grad()) mag += std::abs(g);
      CAPTURE(np.name);
      CHECK(mag > 0.0);
    }
  }
}

TEST_CASE("upsample2x_nearest repeats pixels") {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = af::upsample2x_nearest(x);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2,
                                 3, 3, 4, 4, 3, 3, 4, 4};
  for (std::size_t i = 0; i < 16; ++i) CHECK(y.data()[i] == want[i]);

  Rng rng(22);
  Tensor xin = rand_tensor(rng, {2, 3, 3, 3});
  Tensor lossw = rand_tensor(rng, {2, 3, 6, 6});
  auto f = [&](const Tensor& t) {
    return af::sum(af::mul(af::upsample2x_nearest(t), lossw));
  };
  CHECK(af::gradcheck(f, xin) <= 1e-6);
}

TEST_CASE("parameter construction is seed-deterministic") {
  Rng a(33), b(33);
  af::Conv2dParams pa = af::make_conv2d(3, 8, 3, 1, 1, a);
  af::Conv2dParams pb = af::make_conv2d(3, 8, 3, 1, 1, b);
  for (std::size_t i = 0; i < pa.weight.size(); ++i)
    CHECK(pa.weight.data()[i] == pb.weight.data()[i]);
  af::EncoderLayerParams ea = af::make_encoder_layer(8, 16, 2, a);
  af::EncoderLayerParams eb = af::make_encoder_layer(8, 16, 2, b);
  for (std::size_t i = 0; i < ea.ffn1.weight.size(); ++i)
    CHECK(ea.ffn1.weight.data()[i] == eb.ffn1.weight.data()[i]);
}
