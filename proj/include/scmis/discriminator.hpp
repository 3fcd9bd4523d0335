#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

namespace scmis {

enum class BackboneDepth { kLite, kShallow, kMiddle, kDeep };
enum class HeadKind { kUpsample, kPyramidPooling, kUNet };

BackboneDepth parse_backbone_depth(const std::string& name);
HeadKind parse_head_kind(const std::string& name);
std::string to_string(BackboneDepth depth);
std::string to_string(HeadKind kind);

/// A run of ConvBlocks at one resolution. `pool_before` inserts a 2x2 max
/// pool ahead of the stage.
struct BackboneStage {
  bool pool_before = false;
  std::vector<int64_t> widths;
};

/// Stage layout of the four backbone variants. The first stage is the stem;
/// the remaining convolutions are split at the max pools. One feature tap is
/// taken at the end of each stage.
std::vector<BackboneStage> backbone_layout(BackboneDepth depth,
                                           int64_t base_channels = 64);

struct DiscriminatorConfig {
  int64_t num_classes = 40;
  BackboneDepth depth = BackboneDepth::kMiddle;
  HeadKind head = HeadKind::kPyramidPooling;
  int64_t input_channels = 3;  // 4 when the discriminator also sees depth
  int64_t base_channels = 64;
  std::vector<int64_t> pool_grids = {1, 2, 3, 6};
};

/// Convolution whose weight is divided by a power-iteration estimate of its
/// largest singular value. One iteration runs per forward pass in training
/// mode; evaluation mode reuses the stored vectors.
class SNConv2dImpl : public torch::nn::Module {
 public:
  SNConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t padding = 0,
               bool bias = true);

  torch::Tensor forward(const torch::Tensor& x);

  /// Weight as used in the convolution (normalized with the current u, v).
  torch::Tensor normalized_weight() const;
  /// Runs `iterations` power-iteration steps on the raw weight.
  void power_iterate(int iterations);
  /// Iterates until the sigma estimate changes by less than a relative 1e-7
  /// (at most `max_iterations` steps). Used after (re)initializing weights.
  void warm_up(int max_iterations = 2000);

  torch::Tensor weight;
  torch::Tensor bias;
  torch::Tensor u;
  torch::Tensor v;
  int64_t padding;
};
TORCH_MODULE(SNConv2d);

struct DiscriminatorOutput {
  torch::Tensor logits;             // B x (N+1) x H x W, pre-softmax
  std::vector<torch::Tensor> taps;  // one per backbone stage, shallow -> deep
};

class BackboneImpl : public torch::nn::Module {
 public:
  BackboneImpl(BackboneDepth depth, int64_t input_channels,
               int64_t base_channels);

  std::vector<torch::Tensor> forward(const torch::Tensor& x);

  /// Flat list of layers, e.g. "ConvBlock-64", "MaxPool2d", ...
  std::vector<std::string> layer_manifest() const;
  std::vector<int64_t> tap_channels() const;
  const std::vector<BackboneStage>& layout() const { return layout_; }

  std::vector<std::vector<SNConv2d>> stages;

 private:
  std::vector<BackboneStage> layout_;
  int64_t input_channels_;
};
TORCH_MODULE(Backbone);

/// Per-pixel classifier over backbone taps; returns logits at `out_size`.
class SegmentationHead : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const std::vector<torch::Tensor>& taps,
                                std::vector<int64_t> out_size) = 0;
};

/// 1x1 classifier on the deepest tap, bilinearly upsampled.
class UpsampleHeadImpl : public SegmentationHead {
 public:
  UpsampleHeadImpl(int64_t deep_channels, int64_t num_outputs);
  torch::Tensor forward(const std::vector<torch::Tensor>& taps,
                        std::vector<int64_t> out_size) override;

  SNConv2d classifier{nullptr};
};

/// Pyramid pooling: average pools on several grids, 1x1 reductions,
/// upsampled and fused with the deepest tap by a 3x3 convolution, then
/// classified and upsampled.
class PyramidPoolingHeadImpl : public SegmentationHead {
 public:
  PyramidPoolingHeadImpl(int64_t deep_channels, int64_t num_outputs,
                         std::vector<int64_t> grids);
  torch::Tensor forward(const std::vector<torch::Tensor>& taps,
                        std::vector<int64_t> out_size) override;

  std::vector<int64_t> grids;
  std::vector<SNConv2d> reduce;
  SNConv2d fuse{nullptr};
  SNConv2d classifier{nullptr};
};

/// U-Net decoder: nearest upsampling, concatenation with each shallower tap,
/// 3x3 convolution; classified at the resolution of the first tap.
class UNetHeadImpl : public SegmentationHead {
 public:
  UNetHeadImpl(const std::vector<int64_t>& tap_channels, int64_t num_outputs);
  torch::Tensor forward(const std::vector<torch::Tensor>& taps,
                        std::vector<int64_t> out_size) override;

  std::vector<SNConv2d> merge;  // merge[i] produces tap i's width
  SNConv2d classifier{nullptr};
};

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(DiscriminatorConfig config);

  DiscriminatorOutput forward(const torch::Tensor& image);

  const DiscriminatorConfig& config() const { return config_; }
  int64_t num_outputs() const { return config_.num_classes + 1; }
  /// All spectrally normalized convolutions, backbone first.
  std::vector<SNConv2dImpl*> sn_convs();

  Backbone backbone{nullptr};
  std::shared_ptr<SegmentationHead> head;

 private:
  DiscriminatorConfig config_;
};
TORCH_MODULE(Discriminator);

/// Weights ~ N(0, 0.02), biases 0, then a converged power-iteration warm-up
/// per spectrally normalized convolution.
void init_discriminator_weights(DiscriminatorImpl& discriminator);

/// Largest singular value of a convolution weight reshaped to out x (in*k*k),
/// computed by SVD (independent of the vectors stored in the layer).
double top_singular_value(const torch::Tensor& weight);

}  // namespace scmis
