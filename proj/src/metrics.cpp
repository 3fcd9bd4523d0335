#include "scmis/metrics.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <torch/script.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdlib>

#include "scmis/errors.hpp"

namespace scmis::metrics {
namespace {

void require_symmetric(const Eigen::MatrixXd& m, const char* which) {
  const double scale = 1.0 + m.cwiseAbs().maxCoeff();
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale) {
    throw ContractViolation(fmt::format("frechet_distance: {} covariance is not symmetric",
                                        which));
  }
}

Eigen::VectorXd to_eigen(const torch::Tensor& t) {
  auto flat = t.detach().to(torch::kCPU, torch::kFloat64).contiguous().flatten();
  return Eigen::Map<const Eigen::VectorXd>(flat.data_ptr<double>(), flat.numel());
}

FeatureStats stats_of(const std::vector<torch::Tensor>& images, FeatureExtractor& ex,
                      const char* which) {
  if (images.size() < 2) {
    throw ContractViolation(fmt::format("fid: {} set needs at least 2 images, got {}",
                                        which, images.size()));
  }
  Eigen::MatrixXd features;
  for (size_t i = 0; i < images.size(); ++i) {
    Eigen::VectorXd f = ex.extract(images[i]);
    if (i == 0) features.resize(static_cast<Eigen::Index>(images.size()), f.size());
    if (f.size() != features.cols()) {
      throw ContractViolation("fid: extractor returned inconsistent dimensions");
    }
    features.row(static_cast<Eigen::Index>(i)) = f.transpose();
  }
  return feature_stats(features);
}

torch::Tensor to_double(const torch::Tensor& t) {
  return t.detach().to(torch::kCPU, torch::kFloat64);
}

}  // namespace

FeatureStats feature_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) {
    throw ContractViolation("feature_stats: need at least 2 samples");
  }
  FeatureStats s;
  s.n = features.rows();
  s.mu = features.colwise().mean().transpose();
  Eigen::MatrixXd centered = features.rowwise() - s.mu.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(s.n - 1);
  return s;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mu.size() != b.mu.size() || a.cov.rows() != a.mu.size() ||
      b.cov.rows() != b.mu.size()) {
    throw ContractViolation("frechet_distance: dimension mismatch");
  }
  require_symmetric(a.cov, "first");
  require_symmetric(b.cov, "second");
  const Eigen::MatrixXd s1 = 0.5 * (a.cov + a.cov.transpose());
  const Eigen::MatrixXd s2 = 0.5 * (b.cov + b.cov.transpose());
  Eigen::EigenSolver<Eigen::MatrixXd> solver(s1 * s2, /*computeEigenvectors=*/false);
  double tr_sqrt = 0;
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
    tr_sqrt += std::sqrt(std::max(0.0, solver.eigenvalues()[i].real()));
  }
  const double d = (a.mu - b.mu).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

Eigen::VectorXd MeanPixelExtractor::extract(const torch::Tensor& rgb) {
  Eigen::VectorXd out(1);
  out[0] = rgb.detach().to(torch::kFloat64).mean().item<double>();
  return out;
}

struct TorchScriptExtractor::Impl {
  torch::jit::script::Module module;
};

TorchScriptExtractor::TorchScriptExtractor(const std::filesystem::path& weights,
                                           int64_t input_size)
    : impl_(std::make_unique<Impl>()), input_size_(input_size) {
  try {
    impl_->module = torch::jit::load(weights.string());
  } catch (const c10::Error& e) {
    throw DataError(fmt::format("cannot load feature extractor {}: {}", weights.string(),
                                e.what_without_backtrace()));
  }
  impl_->module.eval();
}

TorchScriptExtractor::~TorchScriptExtractor() = default;

Eigen::VectorXd TorchScriptExtractor::extract(const torch::Tensor& rgb) {
  torch::NoGradGuard no_grad;
  auto x = rgb.detach().to(torch::kFloat32).unsqueeze(0);
  x = torch::nn::functional::interpolate(
      x, torch::nn::functional::InterpolateFuncOptions()
             .size(std::vector<int64_t>{input_size_, input_size_})
             .mode(torch::kBilinear)
             .align_corners(false));
  const auto mean = torch::tensor({0.485, 0.456, 0.406}, torch::kFloat32).view({1, 3, 1, 1});
  const auto std = torch::tensor({0.229, 0.224, 0.225}, torch::kFloat32).view({1, 3, 1, 1});
  x = ((x + 1.0) / 2.0 - mean) / std;
  auto out = impl_->module.forward({x}).toTensor();
  return to_eigen(out);
}

std::filesystem::path resolve_weights(const std::filesystem::path& weights) {
  if (std::filesystem::exists(weights)) return weights;
  if (const char* cache = std::getenv("SCMIS_CACHE")) {
    auto candidate = std::filesystem::path(cache) / weights.filename();
    if (std::filesystem::exists(candidate)) return candidate;
  }
  throw DataError("feature extractor weights not found: " + weights.string() +
                  " (also looked in $SCMIS_CACHE)");
}

double fid(const std::vector<torch::Tensor>& real,
           const std::vector<torch::Tensor>& fake, FeatureExtractor& extractor) {
  const auto a = stats_of(real, extractor, "real");
  const auto b = stats_of(fake, extractor, "fake");
  return frechet_distance(a, b);
}

DepthMetrics depth_metrics(const DepthMap& pred, const DepthMap& gt) {
  return depth_metrics(pred.meters(), gt.meters(),
                       pred.validity().logical_and(gt.validity()));
}

DepthMetrics depth_metrics(const torch::Tensor& pred_m, const torch::Tensor& gt_m,
                           const torch::Tensor& valid) {
  DepthAccumulator acc;
  acc.add(pred_m, gt_m, valid);
  return acc.result();
}

void DepthAccumulator::add(const DepthMap& pred, const DepthMap& gt) {
  add(pred.meters(), gt.meters(), pred.validity().logical_and(gt.validity()));
}

void DepthAccumulator::add(const torch::Tensor& pred_m, const torch::Tensor& gt_m,
                           const torch::Tensor& valid) {
  if (pred_m.sizes() != gt_m.sizes() || valid.sizes() != gt_m.sizes()) {
    throw ContractViolation("depth_metrics: prediction, ground truth and mask shapes differ");
  }
  auto mask = valid.to(torch::kBool);
  auto p = to_double(pred_m).masked_select(mask);
  auto g = to_double(gt_m).masked_select(mask);
  if (g.numel() > 0 && !g.gt(0).all().item<bool>()) {
    throw ContractViolation("depth_metrics: ground truth must be positive on valid pixels");
  }
  auto diff = p - g;
  abs_ += (diff.abs() / g).sum().item<double>();
  sq_ += diff.pow(2).sum().item<double>();
  sq_rel_ += (diff.pow(2) / g).sum().item<double>();
  count_ += g.numel();
}

DepthMetrics DepthAccumulator::result() const {
  if (count_ == 0) throw DataError("depth_metrics: no valid pixels");
  const double n = static_cast<double>(count_);
  return {abs_ / n, std::sqrt(sq_ / n), sq_rel_ / n};
}

void accumulate_confusion(ConfusionMatrix& conf, const LabelMap& pred,
                          const LabelMap& gt) {
  const int64_t n = gt.num_classes();
  if (conf.rows() != n || conf.cols() != n) {
    throw ContractViolation(fmt::format("confusion matrix is {}x{}, labels have {} classes",
                                        conf.rows(), conf.cols(), n));
  }
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw ContractViolation("accumulate_confusion: prediction and ground truth sizes differ");
  }
  auto g = gt.classes().flatten();
  auto p = pred.classes().flatten();
  auto keep = g.ne(kVoidLabel).logical_and(p.ne(kVoidLabel));
  auto idx = g.masked_select(keep) * n + p.masked_select(keep);
  auto counts = torch::bincount(idx, {}, n * n).contiguous();
  const auto* c = counts.data_ptr<int64_t>();
  for (int64_t r = 0; r < n; ++r) {
    for (int64_t k = 0; k < n; ++k) conf(r, k) += c[r * n + k];
  }
}

double miou(const ConfusionMatrix& conf) {
  if (conf.rows() != conf.cols() || conf.rows() == 0) {
    throw ContractViolation("miou: confusion matrix must be square and non-empty");
  }
  if ((conf.array() < 0).any()) {
    throw ContractViolation("miou: negative counts");
  }
  double sum = 0;
  int64_t classes = 0;
  for (Eigen::Index c = 0; c < conf.rows(); ++c) {
    const int64_t tp = conf(c, c);
    const int64_t uni = conf.row(c).sum() + conf.col(c).sum() - tp;
    if (uni == 0) continue;
    sum += static_cast<double>(tp) / static_cast<double>(uni);
    ++classes;
  }
  if (classes == 0) throw ContractViolation("miou: confusion matrix is all zero");
  return sum / static_cast<double>(classes);
}

PrecomputedSegmenter::PrecomputedSegmenter(std::filesystem::path dir, int64_t num_classes)
    : dir_(std::move(dir)), num_classes_(num_classes) {}

LabelMap PrecomputedSegmenter::segment(const std::string& name, const RGBImage& rgb,
                                       const DepthMap&) {
  return dataio::read_label(dir_ / (name + ".png"), {rgb.height(), rgb.width()},
                            num_classes_);
}

}  // namespace scmis::metrics
