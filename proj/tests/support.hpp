#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "scmis/dataio.hpp"
#include "scmis/trainer.hpp"

namespace scmis::fixtures {

/// Directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

/// Label map built from horizontal bands of random classes, with a VOID
/// patch in one corner when `with_void`.
LabelMap random_label(int64_t h, int64_t w, int64_t num_classes, std::mt19937_64& rng,
                      bool with_void = true);

/// Smooth synthetic sample whose color and depth depend on the label.
Sample synthetic_sample(const std::string& name, const LabelMap& label,
                        double max_depth_m, std::mt19937_64& rng);

/// B x H x W int64 labels drawn uniformly per pixel from [0, n), plus VOID
/// as an extra outcome when `with_void`.
torch::Tensor random_label_batch(int64_t b, int64_t h, int64_t w, int64_t n,
                                 std::mt19937_64& rng, bool with_void);

/// Standard normal double tensor drawn from `rng`.
torch::Tensor randn64(std::vector<int64_t> shape, std::mt19937_64& rng);

/// Class weights by explicit pixel counting, one map at a time.
std::vector<double> brute_force_class_weights(const torch::Tensor& labels, int64_t n);

/// Writes `count` synthetic triples into root/{rgb,depth,label}.
void write_synthetic_dataset(const std::filesystem::path& root, int64_t count,
                             ImageSize size, int64_t num_classes, uint64_t seed);

/// Generator with small widths for fast CPU tests at `size`.
GeneratorConfig small_generator(int64_t num_classes, ImageSize size);

/// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
/// between the autograd gradient of scalar `f` at `x` and central finite
/// differences with the given step. `x` must be double precision.
double gradient_rel_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                          const torch::Tensor& x, double step = 1e-3);

/// Model and training configuration of the overfit smoke run.
ModelConfig smoke_model(int64_t num_classes);
TrainConfig smoke_train(uint64_t seed, int64_t max_steps);

}  // namespace scmis::fixtures
