#include "scmis/mixer.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "scmis/errors.hpp"

namespace scmis::mixer {
namespace {

bool mixes_rgb(Modality m) { return m != Modality::kDepth; }
bool mixes_depth(Modality m) { return m != Modality::kRGB; }

}  // namespace

Modality parse_modality(const std::string& name) {
  if (name == "depth") return Modality::kDepth;
  if (name == "rgb") return Modality::kRGB;
  if (name == "rgbd") return Modality::kRGBD;
  throw ConfigError("unknown modality '" + name + "' (expected depth|rgb|rgbd)");
}

std::string to_string(Modality modality) {
  switch (modality) {
    case Modality::kDepth: return "depth";
    case Modality::kRGB: return "rgb";
    case Modality::kRGBD: return "rgbd";
  }
  return "?";
}

void MixSpec::validate() const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw ConfigError(fmt::format("mix ratio {} is outside [0, 1]", ratio));
  }
}

int64_t classes_to_replace(double ratio, int64_t present) {
  if (present <= 0 || ratio <= 0) return 0;
  auto k = static_cast<int64_t>(std::round(ratio * static_cast<double>(present)));
  return std::clamp<int64_t>(k, 1, present);
}

std::vector<int64_t> choose_classes(const std::vector<int64_t>& present, double ratio,
                                    std::mt19937_64& rng) {
  const auto k = classes_to_replace(ratio, static_cast<int64_t>(present.size()));
  std::vector<int64_t> pool = present;
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (int64_t i = 0; i < k; ++i) {
    const uint64_t span = pool.size() - static_cast<uint64_t>(i);
    std::swap(pool[i], pool[i + static_cast<int64_t>(rng() % span)]);
  }
  pool.resize(static_cast<size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

MixResult mix_with_classes(const RGBImage& real_rgb, const DepthMap& real_depth,
                           const GeneratedPair& generated, const LabelMap& label,
                           const std::vector<int64_t>& chosen, Modality modality) {
  const int64_t h = label.height(), w = label.width();
  for (auto [gh, gw] : {std::pair{generated.rgb.height(), generated.rgb.width()},
                        std::pair{generated.depth.height(), generated.depth.width()},
                        std::pair{real_rgb.height(), real_rgb.width()},
                        std::pair{real_depth.height(), real_depth.width()}}) {
    if (gh != h || gw != w) {
      throw ContractViolation(fmt::format(
          "mix_sample: image of {}x{} does not match label map {}x{}", gh, gw, h, w));
    }
  }
  auto table = torch::zeros({kVoidLabel + 1}, torch::kBool);
  for (int64_t c : chosen) {
    if (c < 0 || c >= label.num_classes()) {
      throw ContractViolation(fmt::format("mix_sample: class {} out of range", c));
    }
    table[c] = true;
  }
  const auto& classes = label.classes();
  auto mask = table.index_select(0, classes.flatten()).view_as(classes);

  auto rgb = real_rgb.values();
  if (mixes_rgb(modality)) {
    rgb = torch::where(mask.unsqueeze(0), generated.rgb.values(), real_rgb.values());
  }
  auto depth_values = real_depth.values();
  auto validity = real_depth.validity();
  if (mixes_depth(modality)) {
    depth_values = torch::where(mask.unsqueeze(0), generated.depth.values(),
                                real_depth.values());
    validity = validity.logical_or(mask);
  }
  return {RGBImage(rgb), DepthMap(depth_values, validity, real_depth.max_depth_m()),
          label, chosen};
}

MixResult mix_sample(const RGBImage& real_rgb, const DepthMap& real_depth,
                     const GeneratedPair& generated, const LabelMap& label,
                     double ratio, Modality modality, std::mt19937_64& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw ContractViolation(fmt::format("mix_sample: ratio {} outside [0, 1]", ratio));
  }
  auto chosen = choose_classes(label.present_classes(), ratio, rng);
  return mix_with_classes(real_rgb, real_depth, generated, label, chosen, modality);
}

MixReport mix_dataset(const DatasetIndex& index, const DataOptions& options,
                      GeneratorImpl& generator, const MixSpec& spec,
                      const std::filesystem::path& out_root) {
  spec.validate();
  namespace fs = std::filesystem;
  generator.eval();
  MixReport report;
  nlohmann::json samples = nlohmann::json::array();
  nlohmann::json failures = nlohmann::json::array();
  for (const char* dir : {"rgb", "depth", "label"}) fs::create_directories(out_root / dir);

  for (size_t i = 0; i < index.samples.size(); ++i) {
    const auto& files = index.samples[i];
    // Two independent streams per sample: noise and class choice.
    std::seed_seq seq{spec.seed, static_cast<uint64_t>(i)};
    std::array<uint64_t, 2> seeds{};
    seq.generate(seeds.begin(), seeds.end());
    try {
      const auto sample = dataio::load_sample(files, options);
      auto noise_rng = at::make_generator<at::CPUGeneratorImpl>(seeds[0]);
      const auto noise = dataio::sample_noise(noise_rng, sample.label.height(),
                                              sample.label.width());
      const auto generated = generator.generate(sample.label, noise, options.max_depth_m);
      std::mt19937_64 rng(seeds[1]);
      const auto mixed = mix_sample(sample.rgb, sample.depth, generated, sample.label,
                                    spec.ratio, spec.modality, rng);
      dataio::write_rgb(out_root / "rgb" / (files.name + ".png"), mixed.rgb);
      dataio::write_depth(out_root / "depth" / (files.name + ".png"), mixed.depth);
      dataio::write_label(out_root / "label" / (files.name + ".png"), mixed.label);
      samples.push_back({{"name", files.name},
                         {"present", sample.label.present_classes()},
                         {"chosen", mixed.chosen},
                         {"noise_seed", seeds[0]},
                         {"choice_seed", seeds[1]}});
      ++report.written;
    } catch (const DataError& e) {
      failures.push_back({{"name", files.name}, {"error", e.what()}});
      ++report.failures;
    }
  }
  report.manifest = {{"ratio", spec.ratio},
                     {"modality", to_string(spec.modality)},
                     {"seed", spec.seed},
                     {"samples", std::move(samples)},
                     {"failures", std::move(failures)}};
  std::ofstream out(out_root / "manifest.json", std::ios::trunc);
  out << report.manifest.dump(2) << '\n';
  if (!out) throw DataError("cannot write " + (out_root / "manifest.json").string());
  return report;
}

}  // namespace scmis::mixer
