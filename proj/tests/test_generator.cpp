#include <gtest/gtest.h>

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <random>

#include "scmis/errors.hpp"
#include "scmis/generator.hpp"
#include "support.hpp"

using namespace scmis;

namespace {

struct Inputs {
  torch::Tensor onehot;
  torch::Tensor noise;
};

Inputs random_inputs(const GeneratorConfig& c, int64_t batch, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<torch::Tensor> labels;
  for (int64_t b = 0; b < batch; ++b) {
    labels.push_back(fixtures::random_label(c.image_size.height, c.image_size.width,
                                           c.num_classes, rng)
                         .classes());
  }
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return {dataio::encode_labels(torch::stack(labels), c.num_classes),
          dataio::sample_noise_batch(gen, batch, c.image_size.height, c.image_size.width)};
}

void zero_all(torch::nn::Module& m) {
  torch::NoGradGuard no_grad;
  for (auto& p : m.parameters()) p.zero_();
}

}  // namespace

TEST(GeneratorConfig, RejectsBadSizes) {
  GeneratorConfig c;
  c.image_size = {250, 512};
  EXPECT_THROW(c.validate(), ConfigError);
  c.image_size = {256, 512};
  c.decoder_channels = {1, 2, 3};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Encoder, FullSizePyramidShapes) {
  GeneratorConfig c;
  c.num_classes = 40;
  Generator g(c);
  g->eval();
  torch::NoGradGuard no_grad;
  auto in = random_inputs(c, 1, 1);
  auto f = g->encode(in.onehot, in.noise);
  EXPECT_EQ(f.s.sizes(), (std::vector<int64_t>{1, 32, 256, 512}));
  const std::vector<std::vector<int64_t>> expected{
      {1, 64, 8, 16},   {1, 64, 16, 32},   {1, 64, 32, 64},
      {1, 64, 64, 128}, {1, 64, 128, 256}, {1, 64, 256, 512}};
  for (size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(f.level(i).sizes(), expected[i]) << "s" << i;
  }
}

TEST(Decoder, FullSizeStageShapes) {
  GeneratorConfig c;
  c.num_classes = 13;
  Generator g(c);
  g->eval();
  torch::NoGradGuard no_grad;
  auto in = random_inputs(c, 1, 2);
  auto f = g->encode(in.onehot, in.noise);
  std::vector<torch::Tensor> stages;
  auto zy = torch::cat({in.noise, in.onehot}, 1);
  auto geometry = g->geometry->forward(f, zy, &stages);
  const std::vector<std::vector<int64_t>> expected{
      {1, 1024, 8, 16},   {1, 1024, 16, 32},  {1, 512, 32, 64},
      {1, 256, 64, 128},  {1, 128, 128, 256}, {1, 64, 256, 512}};
  ASSERT_EQ(stages.size(), expected.size());
  for (size_t i = 0; i < stages.size(); ++i) {
    EXPECT_EQ(stages[i].sizes(), expected[i]) << "up" << i;
  }
  EXPECT_EQ(geometry.sizes(), (std::vector<int64_t>{1, 1, 256, 512}));
  auto rgb = g->decode(f, in.onehot, in.noise, DecoderHead::kAppearance);
  EXPECT_EQ(rgb.sizes(), (std::vector<int64_t>{1, 3, 256, 512}));
}

TEST(Encoder, EvalModeIsDeterministic) {
  auto c = fixtures::small_generator(5, {32, 64});
  Generator g(c);
  g->eval();
  torch::NoGradGuard no_grad;
  auto in = random_inputs(c, 2, 3);
  auto a = g->encode(in.onehot, in.noise);
  auto b = g->encode(in.onehot, in.noise);
  for (size_t i = 0; i < 6; ++i) EXPECT_TRUE(torch::equal(a.level(i), b.level(i)));
}

TEST(Encoder, ShapeMismatchIsContractViolation) {
  auto c = fixtures::small_generator(5, {32, 64});
  Generator g(c);
  auto in = random_inputs(c, 1, 3);
  auto wrong_label = in.onehot.slice(1, 0, 4);
  EXPECT_THROW(g->encode(wrong_label, in.noise), ContractViolation);
  auto wrong_size = in.noise.slice(2, 0, 16);
  EXPECT_THROW(g->encode(in.onehot, wrong_size), ContractViolation);
}

TEST(Decoder, FeatureMismatchIsContractViolation) {
  auto c = fixtures::small_generator(5, {32, 64});
  Generator g(c);
  auto in = random_inputs(c, 2, 3);
  auto f = g->encode(in.onehot, in.noise);
  auto single = random_inputs(c, 1, 4);
  EXPECT_THROW(g->decode(f, single.onehot, single.noise, DecoderHead::kGeometry),
               ContractViolation);
}

// Hand evaluation of out = gamma(e) * (h - mu) / sqrt(var + eps) + beta(e)
// with one-channel 3x3 convolutions written out as sums over neighbors.
TEST(SpadeNorm, MatchesScalarOracle) {
  const double eps = 1e-5;
  SpadeNorm norm(1, 1, 1, eps, 0.1);
  norm->train();
  {
    torch::NoGradGuard no_grad;
    zero_all(*norm);
    norm->shared_conv->weight[0][0][1][1] = 1.0;  // hidden = relu(e)
    norm->gamma_conv->weight[0][0][1][1] = 0.5;
    norm->gamma_conv->weight[0][0][1][2] = -0.25;  // right neighbor
    norm->gamma_conv->bias[0] = 1.0;
    norm->beta_conv->weight[0][0][1][1] = 2.0;
    norm->beta_conv->weight[0][0][2][1] = 0.75;  // lower neighbor
    norm->beta_conv->bias[0] = -0.5;
  }
  const double hv[2][2][2] = {{{0.3, -1.2}, {2.0, 0.7}}, {{-0.4, 1.1}, {0.0, 3.5}}};
  const double ev[2][2][2] = {{{0.9, 0.1}, {0.4, 1.6}}, {{0.2, 0.8}, {1.3, 0.5}}};
  auto h = torch::empty({2, 1, 2, 2});
  auto e = torch::empty({2, 1, 2, 2});
  for (int n = 0; n < 2; ++n) {
    for (int y = 0; y < 2; ++y) {
      for (int x = 0; x < 2; ++x) {
        h[n][0][y][x] = hv[n][y][x];
        e[n][0][y][x] = ev[n][y][x];
      }
    }
  }
  auto out = norm->forward(h, e);

  double mu = 0;
  for (auto& plane : hv) for (auto& row : plane) for (double v : row) mu += v;
  mu /= 8;
  double var = 0;
  for (auto& plane : hv) for (auto& row : plane) for (double v : row) var += (v - mu) * (v - mu);
  var /= 8;
  auto at = [&](int n, int y, int x) {
    return (y < 0 || y > 1 || x < 0 || x > 1) ? 0.0 : std::max(0.0, ev[n][y][x]);
  };
  for (int n = 0; n < 2; ++n) {
    for (int y = 0; y < 2; ++y) {
      for (int x = 0; x < 2; ++x) {
        const double gamma = 0.5 * at(n, y, x) - 0.25 * at(n, y, x + 1) + 1.0;
        const double beta = 2.0 * at(n, y, x) + 0.75 * at(n, y + 1, x) - 0.5;
        const double expect = gamma * (hv[n][y][x] - mu) / std::sqrt(var + eps) + beta;
        EXPECT_NEAR(out[n][0][y][x].item<double>(), expect, 1e-6) << n << y << x;
      }
    }
  }
}

TEST(SpadeNorm, IdentityModulationIsBatchNorm) {
  SpadeNorm norm(4, 3, 6, 1e-5, 0.1);
  {
    torch::NoGradGuard no_grad;
    norm->gamma_conv->weight.zero_();
    norm->gamma_conv->bias.fill_(1.0);
    norm->beta_conv->weight.zero_();
    norm->beta_conv->bias.zero_();
  }
  torch::manual_seed(3);
  auto h = torch::randn({3, 4, 5, 7}) * 3.0 + 2.0;
  auto e = torch::randn({3, 3, 10, 14});
  auto out = norm->forward(h, e).to(torch::kFloat64);
  auto mean = out.mean({0, 2, 3});
  auto var = out.var({0, 2, 3}, /*unbiased=*/false);
  EXPECT_LT(mean.abs().max().item<double>(), 1e-5);
  EXPECT_LT((var - 1.0).abs().max().item<double>(), 1e-3);

  auto plain = torch::batch_norm(h, {}, {}, {}, {}, true, 0.1, 1e-5, false);
  EXPECT_TRUE(torch::allclose(norm->forward(h, e), plain, 1e-5, 1e-5));
}

TEST(SpadeNorm, ConstantChannelGivesBeta) {
  SpadeNorm norm(2, 2, 4, 1e-5, 0.1);
  torch::manual_seed(5);
  auto h = torch::full({2, 2, 4, 4}, 1.5);
  auto e = torch::rand({2, 2, 4, 4});
  auto out = norm->forward(h, e);
  auto hidden = torch::relu(norm->shared_conv(e));
  // Float rounding of the batch mean is amplified by 1 / sqrt(eps).
  EXPECT_TRUE(torch::allclose(out, norm->beta_conv(hidden), 0.0, 1e-4));
}

TEST(Decoder, ZeroWeightsGiveTanhOfBias) {
  auto c = fixtures::small_generator(4, {32, 64});
  Generator g(c);
  zero_all(*g);
  {
    torch::NoGradGuard no_grad;
    g->appearance->to_output->bias.copy_(torch::tensor({0.3, -0.5, 0.0}));
    g->geometry->to_output->bias.fill_(1.2);
  }
  g->eval();
  torch::NoGradGuard no_grad;
  auto in = random_inputs(c, 2, 6);
  auto out = g->forward(in.onehot, in.noise);
  const double rgb_expect[3] = {std::tanh(0.3), std::tanh(0.2 * -0.5), 0.0};
  for (int k = 0; k < 3; ++k) {
    auto plane = out.rgb.select(1, k);
    EXPECT_NEAR(plane.min().item<double>(), rgb_expect[k], 1e-7);
    EXPECT_NEAR(plane.max().item<double>(), rgb_expect[k], 1e-7);
  }
  EXPECT_NEAR(out.depth.min().item<double>(), std::tanh(1.2), 1e-7);
  EXPECT_NEAR(out.depth.max().item<double>(), std::tanh(1.2), 1e-7);
}

TEST(Generator, GenerateIsDeterministicAndBounded) {
  auto c = fixtures::small_generator(6, {32, 64});
  Generator g(c);
  g->eval();
  std::mt19937_64 rng(7);
  auto label = fixtures::random_label(32, 64, 6, rng);
  auto z = at::make_generator<at::CPUGeneratorImpl>(1);
  auto noise = dataio::sample_noise(z, 32, 64);
  auto a = g->generate(label, noise);
  auto b = g->generate(label, noise);
  EXPECT_TRUE(torch::equal(a.rgb.values(), b.rgb.values()));
  EXPECT_TRUE(torch::equal(a.depth.values(), b.depth.values()));
  EXPECT_TRUE(a.depth.validity().all().item<bool>());
  for (const auto& t : {a.rgb.values(), a.depth.values()}) {
    EXPECT_GE(t.min().item<float>(), -1.0f);
    EXPECT_LE(t.max().item<float>(), 1.0f);
  }
  EXPECT_EQ(a.rgb.height(), 32);
  EXPECT_EQ(a.depth.width(), 64);
}

TEST(Generator, DifferentNoiseGivesDistinctOutputs) {
  auto c = fixtures::small_generator(6, {32, 64});
  Generator g(c);
  g->eval();
  std::mt19937_64 rng(8);
  auto label = fixtures::random_label(32, 64, 6, rng);
  auto z = at::make_generator<at::CPUGeneratorImpl>(2);
  std::vector<GeneratedPair> outs;
  for (int i = 0; i < 3; ++i) outs.push_back(g->generate(label, dataio::sample_noise(z, 32, 64)));
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      EXPECT_FALSE(torch::equal(outs[i].rgb.values(), outs[j].rgb.values()));
      EXPECT_FALSE(torch::equal(outs[i].depth.values(), outs[j].depth.values()));
    }
  }
}

TEST(Generator, BothDecodersShareOneEncoderPass) {
  auto c = fixtures::small_generator(5, {32, 64});
  Generator g(c);
  g->eval();
  torch::NoGradGuard no_grad;
  auto in = random_inputs(c, 2, 9);
  auto f = g->encode(in.onehot, in.noise);
  auto rgb = g->decode(f, in.onehot, in.noise, DecoderHead::kAppearance);
  auto depth = g->decode(f, in.onehot, in.noise, DecoderHead::kGeometry);
  auto joint = g->forward(in.onehot, in.noise);
  EXPECT_TRUE(torch::equal(joint.rgb, rgb));
  EXPECT_TRUE(torch::equal(joint.depth, depth));
}

TEST(Generator, GradientsReachEncoderFromEitherDecoder) {
  auto c = fixtures::small_generator(4, {32, 64});
  auto in = random_inputs(c, 2, 10);
  for (int head = 0; head < 2; ++head) {
    Generator g(c);
    g->train();
    auto out = g->forward(in.onehot, in.noise);
    auto y = head == 0 ? out.rgb : out.depth;
    y.pow(2).mean().backward();
    double encoder_grad = 0;
    for (auto& p : g->encoder->parameters()) {
      if (p.grad().defined()) encoder_grad += p.grad().abs().sum().item<double>();
    }
    EXPECT_GT(encoder_grad, 0.0) << (head == 0 ? "appearance" : "geometry");
  }
}

TEST(Generator, BatchEqualsStackedSingles) {
  auto c = fixtures::small_generator(5, {32, 64});
  Generator g(c);
  g->eval();
  torch::NoGradGuard no_grad;
  auto in = random_inputs(c, 3, 11);
  auto batch = g->forward(in.onehot, in.noise);
  for (int64_t b = 0; b < 3; ++b) {
    auto single = g->forward(in.onehot.slice(0, b, b + 1), in.noise.slice(0, b, b + 1));
    EXPECT_TRUE(torch::allclose(batch.rgb[b], single.rgb[0], 1e-5, 1e-6)) << b;
    EXPECT_TRUE(torch::allclose(batch.depth[b], single.depth[0], 1e-5, 1e-6)) << b;
  }
}

TEST(Generator, InitDrawsSmallConvolutionWeights) {
  GeneratorConfig c = fixtures::small_generator(4, {32, 64});
  c.decoder_channels = {64, 64, 64, 64, 64, 64};
  c.spade_hidden = 64;
  torch::manual_seed(0);
  Generator g(c);
  auto w = g->appearance->blocks[2]->conv_0->weight;
  EXPECT_NEAR(w.std().item<double>(), 0.02, 0.002);
  EXPECT_EQ(g->appearance->blocks[2]->conv_0->bias.abs().sum().item<double>(), 0.0);
  EXPECT_EQ(g->appearance->blocks[0]->norm_0->gamma_conv->bias.min().item<double>(), 1.0);
}
