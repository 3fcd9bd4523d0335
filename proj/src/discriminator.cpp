#include "scmis/discriminator.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <cmath>

#include "scmis/errors.hpp"

namespace F = torch::nn::functional;

namespace scmis {
namespace {

constexpr double kNormEps = 1e-12;

torch::Tensor unit(const torch::Tensor& x) {
  return x / x.norm().clamp_min(kNormEps);
}

torch::Tensor resize_bilinear(const torch::Tensor& x,
                              const std::vector<int64_t>& size) {
  if (x.size(2) == size[0] && x.size(3) == size[1]) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(size)
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

torch::Tensor resize_nearest(const torch::Tensor& x,
                             const std::vector<int64_t>& size) {
  if (x.size(2) == size[0] && x.size(3) == size[1]) return x;
  return F::interpolate(
      x, F::InterpolateFuncOptions().size(size).mode(torch::kNearest));
}

}  // namespace

BackboneDepth parse_backbone_depth(const std::string& name) {
  if (name == "lite") return BackboneDepth::kLite;
  if (name == "shallow") return BackboneDepth::kShallow;
  if (name == "middle") return BackboneDepth::kMiddle;
  if (name == "deep") return BackboneDepth::kDeep;
  throw ConfigError("unknown discriminator depth '" + name +
                    "' (expected lite|shallow|middle|deep)");
}

HeadKind parse_head_kind(const std::string& name) {
  if (name == "upsample") return HeadKind::kUpsample;
  if (name == "pp") return HeadKind::kPyramidPooling;
  if (name == "unet") return HeadKind::kUNet;
  throw ConfigError("unknown discriminator head '" + name +
                    "' (expected upsample|pp|unet)");
}

std::string to_string(BackboneDepth depth) {
  switch (depth) {
    case BackboneDepth::kLite: return "lite";
    case BackboneDepth::kShallow: return "shallow";
    case BackboneDepth::kMiddle: return "middle";
    case BackboneDepth::kDeep: return "deep";
  }
  return "?";
}

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::kUpsample: return "upsample";
    case HeadKind::kPyramidPooling: return "pp";
    case HeadKind::kUNet: return "unet";
  }
  return "?";
}

std::vector<BackboneStage> backbone_layout(BackboneDepth depth, int64_t base) {
  const int64_t c1 = base, c2 = 2 * base, c4 = 4 * base, c8 = 8 * base;
  switch (depth) {
    case BackboneDepth::kLite:
      return {{false, {c1}}, {true, {c2}}, {true, {c4}}, {true, {c8}}};
    case BackboneDepth::kShallow:
      return {{false, {c1}},
              {false, {c1}},
              {true, {c2, c2}},
              {true, {c4, c4}},
              {true, {c8}}};
    case BackboneDepth::kMiddle:
      return {{false, {c1}},
              {false, {c1}},
              {true, {c2, c2}},
              {true, {c4, c4, c4, c4}},
              {true, {c8}}};
    case BackboneDepth::kDeep:
      return {{false, {c1, c1, c1}},
              {false, {c1, c1}},
              {true, {c2, c2, c2}},
              {true, {c4, c4, c4, c4}},
              {true, {c8}}};
  }
  throw ConfigError("unknown backbone depth");
}

SNConv2dImpl::SNConv2dImpl(int64_t in, int64_t out, int64_t kernel,
                           int64_t padding_, bool with_bias)
    : padding(padding_) {
  weight = register_parameter("weight", torch::empty({out, in, kernel, kernel}));
  if (with_bias) bias = register_parameter("bias", torch::zeros({out}));
  u = register_buffer("u", unit(torch::randn({out})));
  v = register_buffer("v", unit(torch::randn({in * kernel * kernel})));
  torch::NoGradGuard no_grad;
  weight.normal_(0.0, 0.02);
  warm_up();
}

void SNConv2dImpl::warm_up(int max_iterations) {
  torch::NoGradGuard no_grad;
  auto w = weight.detach().reshape({weight.size(0), -1});
  double previous = 0;
  for (int i = 0; i < max_iterations; ++i) {
    power_iterate(1);
    const double sigma = torch::dot(u, torch::mv(w, v)).item<double>();
    if (std::abs(sigma - previous) <= 1e-7 * std::abs(sigma)) break;
    previous = sigma;
  }
}

void SNConv2dImpl::power_iterate(int iterations) {
  torch::NoGradGuard no_grad;
  auto w = weight.detach().reshape({weight.size(0), -1});
  for (int i = 0; i < iterations; ++i) {
    v.copy_(unit(torch::mv(w.t(), u)));
    u.copy_(unit(torch::mv(w, v)));
  }
}

torch::Tensor SNConv2dImpl::normalized_weight() const {
  auto w = weight.reshape({weight.size(0), -1});
  auto sigma = torch::dot(u, torch::mv(w, v));
  // A zero weight has sigma 0; the clamp keeps the result at 0 instead of NaN.
  return weight / sigma.clamp_min(kNormEps);
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  if (is_training()) power_iterate(1);
  return F::conv2d(x, normalized_weight(),
                   F::Conv2dFuncOptions().bias(bias).padding(padding));
}

BackboneImpl::BackboneImpl(BackboneDepth depth, int64_t input_channels,
                           int64_t base_channels)
    : layout_(backbone_layout(depth, base_channels)),
      input_channels_(input_channels) {
  int64_t prev = input_channels;
  int index = 0;
  for (size_t s = 0; s < layout_.size(); ++s) {
    std::vector<SNConv2d> stage;
    for (int64_t width : layout_[s].widths) {
      stage.push_back(register_module(fmt::format("conv{}", index++),
                                      SNConv2d(prev, width, 3, 1)));
      prev = width;
    }
    stages.push_back(std::move(stage));
  }
}

std::vector<torch::Tensor> BackboneImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != input_channels_) {
    throw ContractViolation(fmt::format(
        "discriminator backbone: expected B x {} x H x W input, got {}",
        input_channels_, fmt::join(x.sizes(), "x")));
  }
  std::vector<torch::Tensor> taps;
  auto h = x;
  for (size_t s = 0; s < stages.size(); ++s) {
    if (layout_[s].pool_before) h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2));
    for (auto& conv : stages[s]) h = torch::relu(conv(h));
    taps.push_back(h);
  }
  return taps;
}

std::vector<std::string> BackboneImpl::layer_manifest() const {
  std::vector<std::string> out;
  for (const auto& stage : layout_) {
    if (stage.pool_before) out.emplace_back("MaxPool2d");
    for (auto w : stage.widths) out.push_back(fmt::format("ConvBlock-{}", w));
  }
  return out;
}

std::vector<int64_t> BackboneImpl::tap_channels() const {
  std::vector<int64_t> out;
  for (const auto& stage : layout_) out.push_back(stage.widths.back());
  return out;
}

UpsampleHeadImpl::UpsampleHeadImpl(int64_t deep_channels, int64_t num_outputs) {
  classifier = register_module("classifier",
                               SNConv2d(deep_channels, num_outputs, 1));
}

torch::Tensor UpsampleHeadImpl::forward(const std::vector<torch::Tensor>& taps,
                                        std::vector<int64_t> out_size) {
  return resize_bilinear(classifier(taps.back()), out_size);
}

PyramidPoolingHeadImpl::PyramidPoolingHeadImpl(int64_t deep_channels,
                                               int64_t num_outputs,
                                               std::vector<int64_t> grids_)
    : grids(std::move(grids_)) {
  const int64_t branch = deep_channels / 4;
  for (size_t i = 0; i < grids.size(); ++i) {
    reduce.push_back(register_module(fmt::format("reduce{}", i),
                                     SNConv2d(deep_channels, branch, 1)));
  }
  const int64_t fused_in =
      deep_channels + branch * static_cast<int64_t>(grids.size());
  fuse = register_module("fuse", SNConv2d(fused_in, deep_channels / 2, 3, 1));
  classifier = register_module("classifier",
                               SNConv2d(deep_channels / 2, num_outputs, 1));
}

torch::Tensor PyramidPoolingHeadImpl::forward(
    const std::vector<torch::Tensor>& taps, std::vector<int64_t> out_size) {
  const auto& deep = taps.back();
  const std::vector<int64_t> deep_size = {deep.size(2), deep.size(3)};
  std::vector<torch::Tensor> parts = {deep};
  for (size_t i = 0; i < grids.size(); ++i) {
    auto pooled = F::adaptive_avg_pool2d(
        deep, F::AdaptiveAvgPool2dFuncOptions({grids[i], grids[i]}));
    parts.push_back(resize_bilinear(torch::relu(reduce[i](pooled)), deep_size));
  }
  auto fused = torch::relu(fuse(torch::cat(parts, 1)));
  return resize_bilinear(classifier(fused), out_size);
}

UNetHeadImpl::UNetHeadImpl(const std::vector<int64_t>& tap_channels,
                           int64_t num_outputs) {
  // merge[i] combines the upsampled deeper path with tap i.
  merge.resize(tap_channels.size() - 1, SNConv2d(nullptr));
  int64_t path = tap_channels.back();
  for (size_t k = tap_channels.size() - 1; k-- > 0;) {
    merge[k] = register_module(
        fmt::format("merge{}", k),
        SNConv2d(path + tap_channels[k], tap_channels[k], 3, 1));
    path = tap_channels[k];
  }
  classifier = register_module("classifier",
                               SNConv2d(tap_channels.front(), num_outputs, 1));
}

torch::Tensor UNetHeadImpl::forward(const std::vector<torch::Tensor>& taps,
                                    std::vector<int64_t> out_size) {
  auto x = taps.back();
  for (size_t k = taps.size() - 1; k-- > 0;) {
    x = resize_nearest(x, {taps[k].size(2), taps[k].size(3)});
    x = torch::relu(merge[k](torch::cat({x, taps[k]}, 1)));
  }
  return resize_bilinear(classifier(x), out_size);
}

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorConfig config)
    : config_(std::move(config)) {
  if (config_.num_classes <= 0) {
    throw ConfigError("discriminator: num_classes must be positive");
  }
  if (config_.input_channels != 3 && config_.input_channels != 4) {
    throw ConfigError("discriminator: input must be rgb (3) or rgbd (4)");
  }
  backbone = register_module(
      "backbone",
      Backbone(config_.depth, config_.input_channels, config_.base_channels));
  const auto taps = backbone->tap_channels();
  switch (config_.head) {
    case HeadKind::kUpsample:
      head = register_module(
          "head", std::make_shared<UpsampleHeadImpl>(taps.back(), num_outputs()));
      break;
    case HeadKind::kPyramidPooling:
      head = register_module("head", std::make_shared<PyramidPoolingHeadImpl>(
                                         taps.back(), num_outputs(),
                                         config_.pool_grids));
      break;
    case HeadKind::kUNet:
      head = register_module(
          "head", std::make_shared<UNetHeadImpl>(taps, num_outputs()));
      break;
  }
  init_discriminator_weights(*this);
}

DiscriminatorOutput DiscriminatorImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(2) % 8 || image.size(3) % 8) {
    throw ContractViolation(
        "discriminator: expected B x C x H x W with H, W divisible by 8");
  }
  DiscriminatorOutput out;
  out.taps = backbone(image);
  out.logits = head->forward(out.taps, {image.size(2), image.size(3)});
  return out;
}

std::vector<SNConv2dImpl*> DiscriminatorImpl::sn_convs() {
  std::vector<SNConv2dImpl*> out;
  for (auto& module : modules(/*include_self=*/false)) {
    if (auto* sn = module->as<SNConv2dImpl>()) out.push_back(sn);
  }
  return out;
}

void init_discriminator_weights(DiscriminatorImpl& discriminator) {
  torch::NoGradGuard no_grad;
  for (auto* conv : discriminator.sn_convs()) {
    conv->weight.normal_(0.0, 0.02);
    if (conv->bias.defined()) conv->bias.zero_();
    conv->warm_up();
  }
}

double top_singular_value(const torch::Tensor& weight) {
  torch::NoGradGuard no_grad;
  auto w = weight.detach().to(torch::kFloat64).reshape({weight.size(0), -1});
  return torch::linalg_svdvals(w)[0].item<double>();
}

}  // namespace scmis
