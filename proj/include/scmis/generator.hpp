#pragma once

#include <torch/torch.h>

#include <array>
#include <vector>

#include "scmis/dataio.hpp"

namespace scmis {

struct GeneratorConfig {
  int64_t num_classes = 40;
  int64_t noise_channels = kNoiseChannels;
  int64_t stem_channels = 32;     // width of s
  int64_t encoder_channels = 64;  // width of s5 .. s0
  // up0 .. up5 widths
  std::vector<int64_t> decoder_channels = {1024, 1024, 512, 256, 128, 64};
  int64_t spade_hidden = 128;
  int64_t out_channels_appearance = 3;
  int64_t out_channels_geometry = 1;
  ImageSize image_size;
  double eps = 1e-5;
  double bn_momentum = 0.1;

  void validate() const;
};

/// Modal-independent feature pyramid. `levels[i]` is s_i; s0 is the coarsest.
struct EncoderFeatures {
  torch::Tensor s;                    // stem, full resolution
  std::array<torch::Tensor, 6> levels;  // s0 .. s5

  const torch::Tensor& level(size_t i) const { return levels.at(i); }
};

enum class DecoderHead { kAppearance, kGeometry };

/// Encoder building block: 3x3 convolution, batch normalization, ReLU.
class ConvBnReluImpl : public torch::nn::Module {
 public:
  ConvBnReluImpl(int64_t in, int64_t out, int64_t stride, double momentum,
                 double eps);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
};
TORCH_MODULE(ConvBnRelu);

/// Spatially-adaptive normalization:
///   out = gamma(e) * (h - mu_c) / sqrt(var_c + eps) + beta(e)
/// with mu_c, var_c taken over (n, x, y). The conditioning tensor is resampled
/// (nearest) to h's spatial size before the gamma/beta convolutions. Training
/// mode normalizes with batch statistics and updates running averages;
/// evaluation mode uses the running averages.
class SpadeNormImpl : public torch::nn::Module {
 public:
  SpadeNormImpl(int64_t channels, int64_t cond_channels, int64_t hidden,
                double eps, double momentum);
  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& e);

  torch::nn::Conv2d shared_conv{nullptr};
  torch::nn::Conv2d gamma_conv{nullptr};
  torch::nn::Conv2d beta_conv{nullptr};
  torch::Tensor running_mean;
  torch::Tensor running_var;
  double eps;
  double momentum;
};
TORCH_MODULE(SpadeNorm);

/// Residual block with two SPADE -> LeakyReLU -> conv legs and a
/// SPADE-conditioned 1x1 shortcut when the channel count changes.
class SpadeResBlockImpl : public torch::nn::Module {
 public:
  SpadeResBlockImpl(int64_t in, int64_t out, int64_t cond_channels,
                    int64_t hidden, double eps, double momentum);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& e);

  bool learned_shortcut() const { return !norm_s.is_empty(); }

  SpadeNorm norm_0{nullptr}, norm_1{nullptr}, norm_s{nullptr};
  torch::nn::Conv2d conv_0{nullptr}, conv_1{nullptr}, conv_s{nullptr};
};
TORCH_MODULE(SpadeResBlock);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const GeneratorConfig& config);
  /// `label_noise` is the channel concatenation (B x (N+64) x H x W).
  EncoderFeatures forward(const torch::Tensor& label_noise);

  ConvBnRelu stem{nullptr};
  std::vector<ConvBnRelu> down;  // produces s5, s4, ..., s0
};
TORCH_MODULE(Encoder);

class DecoderImpl : public torch::nn::Module {
 public:
  DecoderImpl(const GeneratorConfig& config, int64_t out_channels);

  /// Output in [-1, 1]. When `stages` is given it receives up0 .. up5.
  torch::Tensor forward(const EncoderFeatures& features,
                        const torch::Tensor& label_noise,
                        std::vector<torch::Tensor>* stages = nullptr);

  torch::nn::Conv2d stem{nullptr};
  std::vector<SpadeResBlock> blocks;
  torch::nn::Conv2d to_output{nullptr};
};
TORCH_MODULE(Decoder);

struct GeneratorOutput {
  torch::Tensor rgb;    // B x 3 x H x W
  torch::Tensor depth;  // B x 1 x H x W
};

struct GeneratedPair {
  RGBImage rgb;
  DepthMap depth;
};

/// One shared encoder, an appearance decoder (RGB) and a geometry decoder
/// (depth), both conditioned on the same encoder pyramid.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorConfig config);

  EncoderFeatures encode(const torch::Tensor& label_onehot,
                         const torch::Tensor& noise);
  torch::Tensor decode(const EncoderFeatures& features,
                       const torch::Tensor& label_onehot,
                       const torch::Tensor& noise, DecoderHead head);
  /// Runs the encoder once and both decoders on its output.
  GeneratorOutput forward(const torch::Tensor& label_onehot,
                          const torch::Tensor& noise);

  /// Single-sample generation. Depth validity is all-true.
  GeneratedPair generate(const LabelMap& label, const NoiseTensor& noise,
                         double max_depth_m = 10.0);

  const GeneratorConfig& config() const { return config_; }

  Encoder encoder{nullptr};
  Decoder appearance{nullptr};
  Decoder geometry{nullptr};

 private:
  torch::Tensor concat_inputs(const torch::Tensor& label_onehot,
                              const torch::Tensor& noise) const;

  GeneratorConfig config_;
};
TORCH_MODULE(Generator);

/// Convolution weights ~ N(0, 0.02), biases 0, BN affine (1, 0). SPADE gamma
/// biases start at 1 so every block initially passes its normalized input.
void init_generator_weights(GeneratorImpl& generator);

}  // namespace scmis
