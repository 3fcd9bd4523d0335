#pragma once

#include <torch/torch.h>

#include <Eigen/Dense>

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "scmis/dataio.hpp"

namespace scmis::metrics {

/// Gaussian fit of a feature set: mean, unbiased covariance, sample count.
struct FeatureStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd cov;
  int64_t n = 0;
};

/// Rows of `features` are samples. Requires at least 2 rows.
FeatureStats feature_stats(const Eigen::MatrixXd& features);

/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)). Covariances are
/// symmetrized, the square root trace comes from the eigenvalues of S1 S2
/// floored at 0, and the result is clipped at 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// Maps one image (3 x H x W in [-1, 1]) to a feature vector.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual Eigen::VectorXd extract(const torch::Tensor& rgb) = 0;
};

/// Toy extractor: the mean over all pixels and channels (d = 1).
class MeanPixelExtractor final : public FeatureExtractor {
 public:
  Eigen::VectorXd extract(const torch::Tensor& rgb) override;
};

/// Serialized TorchScript image classifier returning pooled features. Inputs
/// are resized to `input_size` and rescaled from [-1, 1] to ImageNet
/// normalization before the forward pass.
class TorchScriptExtractor final : public FeatureExtractor {
 public:
  explicit TorchScriptExtractor(const std::filesystem::path& weights,
                                int64_t input_size = 299);
  ~TorchScriptExtractor() override;
  Eigen::VectorXd extract(const torch::Tensor& rgb) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int64_t input_size_;
};

/// Resolves an extractor weights path: as given if it exists, otherwise
/// under $SCMIS_CACHE. Throws DataError if neither exists.
std::filesystem::path resolve_weights(const std::filesystem::path& weights);

double fid(const std::vector<torch::Tensor>& real,
           const std::vector<torch::Tensor>& fake, FeatureExtractor& extractor);

struct DepthMetrics {
  double abs_rel = 0;
  double rmse = 0;
  double sq_rel = 0;
};

/// Eigen-protocol errors in meters over pixels valid in both maps:
///   AbsRel = mean |p - g| / g, RMSE = sqrt(mean (p - g)^2),
///   SqRel = mean (p - g)^2 / g.
DepthMetrics depth_metrics(const DepthMap& pred, const DepthMap& gt);

/// Same, on meter-valued tensors and an explicit validity mask.
DepthMetrics depth_metrics(const torch::Tensor& pred_m, const torch::Tensor& gt_m,
                           const torch::Tensor& valid);

/// Pools errors over every valid pixel of several image pairs.
class DepthAccumulator {
 public:
  void add(const DepthMap& pred, const DepthMap& gt);
  void add(const torch::Tensor& pred_m, const torch::Tensor& gt_m,
           const torch::Tensor& valid);
  DepthMetrics result() const;
  int64_t pixels() const { return count_; }

 private:
  double abs_ = 0, sq_ = 0, sq_rel_ = 0;
  int64_t count_ = 0;
};

using ConfusionMatrix = Eigen::Matrix<int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Adds (gt row, prediction column) counts; VOID ground truth is skipped.
void accumulate_confusion(ConfusionMatrix& conf, const LabelMap& pred,
                          const LabelMap& gt);

/// Mean IoU over classes with non-zero union. Throws on an all-zero matrix.
double miou(const ConfusionMatrix& conf);

/// External RGB-D semantic segmenter.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual LabelMap segment(const std::string& name, const RGBImage& rgb,
                           const DepthMap& depth) = 0;
};

/// Reads `<dir>/<name>.png` written by an external segmentation run.
class PrecomputedSegmenter final : public Segmenter {
 public:
  PrecomputedSegmenter(std::filesystem::path dir, int64_t num_classes);
  LabelMap segment(const std::string& name, const RGBImage& rgb,
                   const DepthMap& depth) override;

 private:
  std::filesystem::path dir_;
  int64_t num_classes_;
};

}  // namespace scmis::metrics
