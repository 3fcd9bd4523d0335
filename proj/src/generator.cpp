#include "scmis/generator.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "scmis/errors.hpp"

namespace F = torch::nn::functional;

namespace scmis {
namespace {

constexpr int64_t kDownsamplings = 5;  // s5 -> s0

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1,
                          bool bias = true) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3)
                               .stride(stride)
                               .padding(1)
                               .bias(bias));
}

torch::Tensor resize_nearest(const torch::Tensor& x, int64_t h, int64_t w) {
  if (x.size(2) == h && x.size(3) == w) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{h, w})
                               .mode(torch::kNearest));
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kNearest));
}

void check_shape(const torch::Tensor& t, int64_t channels, ImageSize size,
                 const char* what) {
  if (t.dim() != 4 || t.size(1) != channels || t.size(2) != size.height ||
      t.size(3) != size.width) {
    throw ContractViolation(fmt::format(
        "{}: expected B x {} x {} x {}, got {}", what, channels, size.height,
        size.width, fmt::join(t.sizes(), "x")));
  }
}

}  // namespace

void GeneratorConfig::validate() const {
  if (num_classes <= 0) throw ConfigError("gen.num_classes must be positive");
  if (noise_channels != kNoiseChannels) {
    throw ConfigError(fmt::format("gen.noise_channels must be {}",
                                  kNoiseChannels));
  }
  if (decoder_channels.size() != 6) {
    throw ConfigError("gen.decoder_channels must list 6 widths (up0..up5)");
  }
  for (auto c : decoder_channels) {
    if (c <= 0) throw ConfigError("gen.decoder_channels must be positive");
  }
  if (stem_channels <= 0 || encoder_channels <= 0 || spade_hidden <= 0) {
    throw ConfigError("generator widths must be positive");
  }
  const int64_t factor = int64_t{1} << kDownsamplings;
  if (image_size.height <= 0 || image_size.width <= 0 ||
      image_size.height % factor || image_size.width % factor) {
    throw ConfigError(fmt::format(
        "image size {}x{} must be a positive multiple of {}",
        image_size.height, image_size.width, factor));
  }
  if (!(eps > 0)) throw ConfigError("gen.eps must be positive");
}

ConvBnReluImpl::ConvBnReluImpl(int64_t in, int64_t out, int64_t stride,
                               double momentum, double eps) {
  conv = register_module("conv", conv3x3(in, out, stride));
  bn = register_module(
      "bn", torch::nn::BatchNorm2d(
                torch::nn::BatchNorm2dOptions(out).momentum(momentum).eps(eps)));
}

torch::Tensor ConvBnReluImpl::forward(const torch::Tensor& x) {
  return torch::relu(bn(conv(x)));
}

SpadeNormImpl::SpadeNormImpl(int64_t channels, int64_t cond_channels,
                             int64_t hidden, double eps_, double momentum_)
    : eps(eps_), momentum(momentum_) {
  shared_conv = register_module("shared_conv", conv3x3(cond_channels, hidden));
  gamma_conv = register_module("gamma_conv", conv3x3(hidden, channels));
  beta_conv = register_module("beta_conv", conv3x3(hidden, channels));
  running_mean = register_buffer("running_mean", torch::zeros({channels}));
  running_var = register_buffer("running_var", torch::ones({channels}));
}

torch::Tensor SpadeNormImpl::forward(const torch::Tensor& h,
                                     const torch::Tensor& e) {
  auto normalized = torch::batch_norm(h, /*weight=*/{}, /*bias=*/{},
                                      running_mean, running_var, is_training(),
                                      momentum, eps, /*cudnn_enabled=*/false);
  auto cond = resize_nearest(e, h.size(2), h.size(3));
  auto hidden = torch::relu(shared_conv(cond));
  return gamma_conv(hidden) * normalized + beta_conv(hidden);
}

SpadeResBlockImpl::SpadeResBlockImpl(int64_t in, int64_t out,
                                     int64_t cond_channels, int64_t hidden,
                                     double eps, double momentum) {
  const int64_t middle = std::min(in, out);
  norm_0 = register_module(
      "norm_0", SpadeNorm(in, cond_channels, hidden, eps, momentum));
  conv_0 = register_module("conv_0", conv3x3(in, middle));
  norm_1 = register_module(
      "norm_1", SpadeNorm(middle, cond_channels, hidden, eps, momentum));
  conv_1 = register_module("conv_1", conv3x3(middle, out));
  if (in != out) {
    norm_s = register_module(
        "norm_s", SpadeNorm(in, cond_channels, hidden, eps, momentum));
    conv_s = register_module(
        "conv_s", torch::nn::Conv2d(
                      torch::nn::Conv2dOptions(in, out, 1).bias(false)));
  }
}

torch::Tensor SpadeResBlockImpl::forward(const torch::Tensor& x,
                                         const torch::Tensor& e) {
  auto shortcut = learned_shortcut() ? conv_s(norm_s(x, e)) : x;
  auto dx = conv_0(torch::leaky_relu(norm_0(x, e), 0.2));
  dx = conv_1(torch::leaky_relu(norm_1(dx, e), 0.2));
  return shortcut + dx;
}

EncoderImpl::EncoderImpl(const GeneratorConfig& c) {
  const int64_t in = c.num_classes + c.noise_channels;
  stem = register_module("stem",
                         ConvBnRelu(in, c.stem_channels, 1, c.bn_momentum, c.eps));
  // s5 keeps full resolution; each following level halves it.
  int64_t prev = c.stem_channels;
  for (int64_t i = 0; i <= kDownsamplings; ++i) {
    const int64_t stride = i == 0 ? 1 : 2;
    down.push_back(register_module(
        fmt::format("down{}", i),
        ConvBnRelu(prev, c.encoder_channels, stride, c.bn_momentum, c.eps)));
    prev = c.encoder_channels;
  }
}

EncoderFeatures EncoderImpl::forward(const torch::Tensor& label_noise) {
  EncoderFeatures f;
  f.s = stem(label_noise);
  auto x = f.s;
  for (size_t i = 0; i < down.size(); ++i) {
    x = down[i](x);
    f.levels[5 - i] = x;
  }
  return f;
}

DecoderImpl::DecoderImpl(const GeneratorConfig& c, int64_t out_channels) {
  const auto& ch = c.decoder_channels;
  stem = register_module("stem",
                         conv3x3(c.num_classes + c.noise_channels, ch[0]));
  for (size_t i = 0; i + 1 < ch.size(); ++i) {
    blocks.push_back(register_module(
        fmt::format("block{}", i),
        SpadeResBlock(ch[i], ch[i + 1], c.encoder_channels, c.spade_hidden,
                      c.eps, c.bn_momentum)));
  }
  to_output = register_module("to_output", conv3x3(ch.back(), out_channels));
}

torch::Tensor DecoderImpl::forward(const EncoderFeatures& features,
                                   const torch::Tensor& label_noise,
                                   std::vector<torch::Tensor>* stages) {
  const auto& s0 = features.level(0);
  auto x = stem(resize_nearest(label_noise, s0.size(2), s0.size(3)));
  if (stages) stages->push_back(x);
  for (size_t i = 0; i < blocks.size(); ++i) {
    x = upsample2x(blocks[i](x, features.level(i)));
    if (stages) stages->push_back(x);
  }
  return torch::tanh(torch::leaky_relu(to_output(x), 0.2));
}

GeneratorImpl::GeneratorImpl(GeneratorConfig config)
    : config_(std::move(config)) {
  config_.validate();
  encoder = register_module("encoder", Encoder(config_));
  appearance = register_module(
      "appearance", Decoder(config_, config_.out_channels_appearance));
  geometry = register_module("geometry",
                             Decoder(config_, config_.out_channels_geometry));
  init_generator_weights(*this);
}

torch::Tensor GeneratorImpl::concat_inputs(const torch::Tensor& label_onehot,
                                           const torch::Tensor& noise) const {
  check_shape(label_onehot, config_.num_classes, config_.image_size,
              "generator label");
  check_shape(noise, config_.noise_channels, config_.image_size,
              "generator noise");
  if (label_onehot.size(0) != noise.size(0)) {
    throw ContractViolation("generator: label and noise batch sizes differ");
  }
  return torch::cat({noise, label_onehot}, 1);
}

EncoderFeatures GeneratorImpl::encode(const torch::Tensor& label_onehot,
                                      const torch::Tensor& noise) {
  return encoder(concat_inputs(label_onehot, noise));
}

torch::Tensor GeneratorImpl::decode(const EncoderFeatures& features,
                                    const torch::Tensor& label_onehot,
                                    const torch::Tensor& noise,
                                    DecoderHead head) {
  const auto& s0 = features.level(0);
  const auto expected_h = config_.image_size.height >> kDownsamplings;
  const auto expected_w = config_.image_size.width >> kDownsamplings;
  if (!s0.defined() || s0.size(2) != expected_h || s0.size(3) != expected_w ||
      s0.size(0) != label_onehot.size(0)) {
    throw ContractViolation("decode: features do not match the label batch");
  }
  auto zy = concat_inputs(label_onehot, noise);
  return head == DecoderHead::kAppearance ? appearance(features, zy)
                                          : geometry(features, zy);
}

GeneratorOutput GeneratorImpl::forward(const torch::Tensor& label_onehot,
                                       const torch::Tensor& noise) {
  auto zy = concat_inputs(label_onehot, noise);
  auto features = encoder(zy);
  return {appearance(features, zy), geometry(features, zy)};
}

GeneratedPair GeneratorImpl::generate(const LabelMap& label,
                                      const NoiseTensor& noise,
                                      double max_depth_m) {
  if (label.num_classes() != config_.num_classes) {
    throw ContractViolation("generate: label map has a different class count");
  }
  torch::NoGradGuard no_grad;
  auto onehot = dataio::encode_label(label).unsqueeze(0);
  auto out = forward(onehot, noise.values().unsqueeze(0));
  auto depth = out.depth[0].detach();
  return {RGBImage(out.rgb[0].detach()),
          DepthMap(depth,
                   torch::ones({depth.size(1), depth.size(2)}, torch::kBool),
                   max_depth_m)};
}

void init_generator_weights(GeneratorImpl& generator) {
  torch::NoGradGuard no_grad;
  for (auto& module : generator.modules(/*include_self=*/false)) {
    if (auto* conv = module->as<torch::nn::Conv2dImpl>()) {
      conv->weight.normal_(0.0, 0.02);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* bn = module->as<torch::nn::BatchNorm2dImpl>()) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
    }
  }
  for (auto& module : generator.modules(false)) {
    if (auto* spade = module->as<SpadeNormImpl>()) {
      spade->gamma_conv->bias.fill_(1.0);
    }
  }
}

}  // namespace scmis
