#include "support.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <unistd.h>

namespace scmis::fixtures {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          fmt::format("scmis_{}_{}_{}", tag, ::getpid(), counter++);
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

LabelMap random_label(int64_t h, int64_t w, int64_t num_classes, std::mt19937_64& rng,
                      bool with_void) {
  auto classes = torch::empty({h, w}, torch::kInt64);
  auto acc = classes.accessor<int64_t, 2>();
  const int64_t bands = 1 + static_cast<int64_t>(rng() % 4);
  std::vector<int64_t> band_class(bands * 2);
  for (auto& c : band_class) c = static_cast<int64_t>(rng() % num_classes);
  const int64_t split = w / 2 + static_cast<int64_t>(rng() % std::max<int64_t>(1, w / 4));
  for (int64_t y = 0; y < h; ++y) {
    const int64_t band = y * bands / h;
    for (int64_t x = 0; x < w; ++x) acc[y][x] = band_class[band * 2 + (x < split ? 0 : 1)];
  }
  if (with_void) {
    for (int64_t y = 0; y < std::max<int64_t>(1, h / 8); ++y) {
      for (int64_t x = 0; x < std::max<int64_t>(1, w / 8); ++x) acc[y][x] = kVoidLabel;
    }
  }
  return LabelMap(classes, num_classes);
}

Sample synthetic_sample(const std::string& name, const LabelMap& label,
                        double max_depth_m, std::mt19937_64& rng) {
  const int64_t h = label.height(), w = label.width();
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  auto palette = torch::empty({kVoidLabel + 1, 3});
  auto depth_of = torch::empty({kVoidLabel + 1});
  for (int64_t c = 0; c <= kVoidLabel; ++c) {
    for (int k = 0; k < 3; ++k) palette[c][k] = std::cos(0.7 * c + 2.1 * k) * 0.7;
    depth_of[c] = 1000.0 + 700.0 * static_cast<double>(c % 9);
  }
  auto flat = label.classes().flatten();
  auto rgb = palette.index_select(0, flat).t().reshape({3, h, w});
  rgb = (rgb + 0.05 * u(rng)).clamp(-1.0, 1.0);
  auto ramp = torch::linspace(0, 400, w).expand({h, w});
  auto mm = (depth_of.index_select(0, flat).view({h, w}) + ramp).round().to(torch::kInt32);
  // A few missing depth readings.
  mm.index_put_({0, torch::indexing::Slice()}, 0);
  return {name, RGBImage(rgb.to(torch::kFloat32)), dataio::normalize_depth(mm, max_depth_m),
          label};
}

void write_synthetic_dataset(const std::filesystem::path& root, int64_t count,
                             ImageSize size, int64_t num_classes, uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (int64_t i = 0; i < count; ++i) {
    const auto name = fmt::format("{:04d}", i);
    const auto label = random_label(size.height, size.width, num_classes, rng);
    const auto s = synthetic_sample(name, label, 10.0, rng);
    dataio::write_rgb(root / "rgb" / (name + ".png"), s.rgb);
    dataio::write_depth(root / "depth" / (name + ".png"), s.depth);
    dataio::write_label(root / "label" / (name + ".png"), s.label);
  }
}

double gradient_rel_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                          const torch::Tensor& x, double step) {
  auto at = x.detach().clone().requires_grad_(true);
  auto analytic = torch::autograd::grad({f(at)}, {at})[0].detach().flatten();

  torch::NoGradGuard no_grad;
  auto base = x.detach().clone().flatten();
  auto numeric = torch::empty_like(base);
  for (int64_t i = 0; i < base.numel(); ++i) {
    auto plus = base.clone();
    auto minus = base.clone();
    plus[i] += step;
    minus[i] -= step;
    const double fp = f(plus.view_as(x)).item<double>();
    const double fm = f(minus.view_as(x)).item<double>();
    numeric[i] = (fp - fm) / (2.0 * step);
  }
  const double scale = std::max({analytic.norm().item<double>(),
                                 numeric.norm().item<double>(), 1e-12});
  return (analytic - numeric).norm().item<double>() / scale;
}

GeneratorConfig small_generator(int64_t num_classes, ImageSize size) {
  GeneratorConfig g;
  g.num_classes = num_classes;
  g.stem_channels = 8;
  g.encoder_channels = 8;
  g.decoder_channels = {32, 32, 16, 16, 8, 8};
  g.spade_hidden = 8;
  g.image_size = size;
  return g;
}

ModelConfig smoke_model(int64_t num_classes) {
  ModelConfig m;
  m.generator = small_generator(num_classes, {64, 128});
  m.generator.stem_channels = 16;
  m.generator.encoder_channels = 16;
  m.generator.decoder_channels = {64, 64, 32, 32, 16, 16};
  m.generator.spade_hidden = 16;
  m.discriminator.num_classes = num_classes;
  m.discriminator.depth = BackboneDepth::kLite;
  m.discriminator.head = HeadKind::kPyramidPooling;
  m.discriminator.base_channels = 16;
  return m;
}

TrainConfig smoke_train(uint64_t seed, int64_t max_steps) {
  TrainConfig t;
  t.batch_size = 2;
  t.max_steps = max_steps;
  t.seed = seed;
  return t;
}

torch::Tensor random_label_batch(int64_t b, int64_t h, int64_t w, int64_t n,
                                 std::mt19937_64& rng, bool with_void) {
  auto t = torch::empty({b, h, w}, torch::kInt64);
  auto acc = t.accessor<int64_t, 3>();
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const auto r = rng() % static_cast<uint64_t>(n + (with_void ? 1 : 0));
        acc[i][y][x] = r == static_cast<uint64_t>(n) ? kVoidLabel : static_cast<int64_t>(r);
      }
    }
  }
  return t;
}

torch::Tensor randn64(std::vector<int64_t> shape, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  auto t = torch::empty(shape, torch::kFloat64);
  auto* p = t.data_ptr<double>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = nd(rng);
  return t;
}

std::vector<double> brute_force_class_weights(const torch::Tensor& labels, int64_t n) {
  const int64_t b = labels.size(0), h = labels.size(1), w = labels.size(2);
  auto acc = labels.accessor<int64_t, 3>();
  std::vector<double> sum(n, 0.0), maps(n, 0.0);
  for (int64_t i = 0; i < b; ++i) {
    std::vector<int64_t> count(n, 0);
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        if (acc[i][y][x] != kVoidLabel) ++count[acc[i][y][x]];
      }
    }
    for (int64_t c = 0; c < n; ++c) {
      if (count[c] == 0) continue;
      sum[c] += static_cast<double>(h * w) / static_cast<double>(count[c]);
      maps[c] += 1.0;
    }
  }
  std::vector<double> alpha(n, 0.0);
  for (int64_t c = 0; c < n; ++c) alpha[c] = maps[c] > 0 ? sum[c] / maps[c] : 0.0;
  return alpha;
}

}  // namespace scmis::fixtures
