#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "scmis/dataio.hpp"
#include "scmis/generator.hpp"

namespace scmis::mixer {

enum class Modality { kDepth, kRGB, kRGBD };

Modality parse_modality(const std::string& name);
std::string to_string(Modality modality);

struct MixSpec {
  double ratio = 0.5;  // fraction of present classes to replace, in [0, 1]
  Modality modality = Modality::kRGBD;
  uint64_t seed = 0;

  void validate() const;
};

/// round(ratio * C), at least 1 when ratio > 0 and C >= 1.
int64_t classes_to_replace(double ratio, int64_t present);

/// k of `present` drawn uniformly without replacement; returned sorted.
std::vector<int64_t> choose_classes(const std::vector<int64_t>& present, double ratio,
                                    std::mt19937_64& rng);

struct MixResult {
  RGBImage rgb;
  DepthMap depth;
  LabelMap label;
  std::vector<int64_t> chosen;
};

/// Replaces the pixels of the chosen classes with generated ones in the
/// selected modalities. VOID pixels are never replaced; replaced depth pixels
/// become valid; the label map is returned unchanged.
MixResult mix_sample(const RGBImage& real_rgb, const DepthMap& real_depth,
                     const GeneratedPair& generated, const LabelMap& label,
                     double ratio, Modality modality, std::mt19937_64& rng);

/// Same with an explicit class selection.
MixResult mix_with_classes(const RGBImage& real_rgb, const DepthMap& real_depth,
                           const GeneratedPair& generated, const LabelMap& label,
                           const std::vector<int64_t>& chosen, Modality modality);

struct MixReport {
  nlohmann::json manifest;
  int64_t written = 0;
  int64_t failures = 0;
};

/// Generates a pair for every sample (fresh per-sample noise), mixes it per
/// `spec`, and writes `out_root/{rgb,depth,label}/<name>.png` plus
/// `out_root/manifest.json`. Per-file failures are recorded in the manifest
/// and skipped.
MixReport mix_dataset(const DatasetIndex& index, const DataOptions& options,
                      GeneratorImpl& generator, const MixSpec& spec,
                      const std::filesystem::path& out_root);

}  // namespace scmis::mixer
