#include "scmis/dataio.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <array>
#include <random>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "scmis/errors.hpp"

namespace fs = std::filesystem;

namespace scmis {

LabelMap::LabelMap(torch::Tensor classes, int64_t num_classes)
    : classes_(std::move(classes)), num_classes_(num_classes) {
  if (num_classes_ <= 0 || num_classes_ >= kVoidLabel) {
    throw ContractViolation(
        fmt::format("label map: num_classes must be in [1, {}), got {}",
                    kVoidLabel, num_classes_));
  }
  if (classes_.dim() != 2 || classes_.size(0) <= 0 || classes_.size(1) <= 0) {
    throw ContractViolation("label map: expected a non-empty H x W grid");
  }
  classes_ = classes_.to(torch::kInt64).contiguous();
  auto bad = classes_.lt(0).logical_or(
      classes_.ge(num_classes_).logical_and(classes_.ne(kVoidLabel)));
  if (bad.any().item<bool>()) {
    auto value = classes_.masked_select(bad)[0].item<int64_t>();
    throw ContractViolation(fmt::format(
        "label map: value {} is neither a class < {} nor VOID", value,
        num_classes_));
  }
}

std::vector<int64_t> LabelMap::present_classes() const {
  auto counts = torch::bincount(classes_.flatten(), {}, kVoidLabel + 1);
  auto acc = counts.accessor<int64_t, 1>();
  std::vector<int64_t> out;
  for (int64_t c = 0; c < num_classes_; ++c) {
    if (acc[c] > 0) out.push_back(c);
  }
  return out;
}

RGBImage::RGBImage(torch::Tensor values) : values_(std::move(values)) {
  if (values_.dim() != 3 || values_.size(0) != 3) {
    throw ContractViolation("rgb image: expected a 3 x H x W tensor");
  }
  values_ = values_.to(torch::kFloat32);
}

DepthMap::DepthMap(torch::Tensor values, torch::Tensor validity,
                   double max_depth_m)
    : values_(std::move(values)),
      validity_(std::move(validity)),
      max_depth_m_(max_depth_m) {
  if (values_.dim() != 3 || values_.size(0) != 1) {
    throw ContractViolation("depth map: expected a 1 x H x W tensor");
  }
  if (validity_.dim() != 2 || validity_.size(0) != values_.size(1) ||
      validity_.size(1) != values_.size(2)) {
    throw ContractViolation("depth map: validity must be H x W");
  }
  if (!(max_depth_m_ > 0)) {
    throw ContractViolation("depth map: max_depth_m must be positive");
  }
  values_ = values_.to(torch::kFloat32);
  validity_ = validity_.to(torch::kBool);
}

torch::Tensor DepthMap::meters() const {
  auto m = (values_[0].to(torch::kFloat64) + 1.0) * 0.5 * max_depth_m_;
  return m.masked_fill(validity_.logical_not(), 0.0);
}

NoiseTensor::NoiseTensor(torch::Tensor values) : values_(std::move(values)) {
  if (values_.dim() != 3 || values_.size(0) != kNoiseChannels) {
    throw ContractViolation(fmt::format(
        "noise: expected {} x H x W, got {}", kNoiseChannels,
        fmt::join(values_.sizes(), "x")));
  }
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  throw ConfigError("unknown split '" + name + "' (expected train|val)");
}

std::string to_string(Split split) {
  return split == Split::kTrain ? "train" : "val";
}

namespace dataio {
namespace {

constexpr std::array<const char*, 3> kSubdirs = {"rgb", "depth", "label"};

std::set<std::string> png_stems(const fs::path& dir) {
  std::set<std::string> stems;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      stems.insert(entry.path().stem().string());
    }
  }
  return stems;
}

cv::Mat read_mat(const fs::path& path, int flags) {
  cv::Mat mat = cv::imread(path.string(), flags);
  if (mat.empty()) {
    throw DataError("cannot read image: " + path.string());
  }
  return mat;
}

cv::Mat resize_to(const cv::Mat& mat, ImageSize size, int interpolation) {
  if (size.height <= 0 || size.width <= 0) return mat;
  if (mat.rows == size.height && mat.cols == size.width) return mat;
  cv::Mat out;
  cv::resize(mat, out,
             cv::Size(static_cast<int>(size.width),
                      static_cast<int>(size.height)),
             0, 0, interpolation);
  return out;
}

void write_mat(const fs::path& path, const cv::Mat& mat) {
  bool ok = false;
  try {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    ok = cv::imwrite(path.string(), mat);
  } catch (const cv::Exception& e) {
    throw DataError("cannot write image " + path.string() + ": " + e.what());
  } catch (const fs::filesystem_error& e) {
    throw DataError("cannot write image " + path.string() + ": " + e.what());
  }
  if (!ok) throw DataError("cannot write image: " + path.string());
}

}  // namespace

DatasetIndex load_dataset(const fs::path& root, Split split,
                          int64_t num_classes) {
  fs::path base = root;
  if (fs::is_directory(root / to_string(split))) base = root / to_string(split);

  std::array<std::set<std::string>, 3> stems;
  for (size_t d = 0; d < kSubdirs.size(); ++d) {
    auto dir = base / kSubdirs[d];
    if (!fs::is_directory(dir)) {
      throw DataError("missing directory: " + dir.string());
    }
    stems[d] = png_stems(dir);
  }

  std::set<std::string> all;
  for (const auto& s : stems) all.insert(s.begin(), s.end());
  for (const auto& name : all) {
    for (size_t d = 0; d < kSubdirs.size(); ++d) {
      if (stems[d].count(name)) continue;
      // Report an existing member of the incomplete triple.
      for (size_t e = 0; e < kSubdirs.size(); ++e) {
        if (stems[e].count(name)) {
          auto orphan = base / kSubdirs[e] / (name + ".png");
          throw DataError(fmt::format("orphan file: {} has no {}/{}.png",
                                      orphan.string(), kSubdirs[d], name));
        }
      }
    }
  }
  if (all.empty()) {
    throw DataError("empty split: no aligned samples under " + base.string());
  }

  DatasetIndex index;
  index.root = root;
  index.split = split;
  index.num_classes = num_classes;
  for (const auto& name : all) {  // std::set iterates in sorted order
    index.samples.push_back({name, base / "rgb" / (name + ".png"),
                             base / "depth" / (name + ".png"),
                             base / "label" / (name + ".png")});
  }
  return index;
}

torch::Tensor encode_label(const LabelMap& label) {
  return encode_labels(label.classes().unsqueeze(0), label.num_classes())[0];
}

torch::Tensor encode_labels(const torch::Tensor& labels, int64_t num_classes) {
  if (labels.dim() != 3) {
    throw ContractViolation("encode_labels: expected B x H x W labels");
  }
  auto valid = labels.ne(kVoidLabel);
  auto safe = labels.masked_fill(valid.logical_not(), 0).to(torch::kInt64);
  auto onehot = torch::one_hot(safe, num_classes)
                    .permute({0, 3, 1, 2})
                    .to(torch::kFloat32);
  return (onehot * valid.unsqueeze(1)).contiguous();
}

LabelMap decode_label(const torch::Tensor& onehot) {
  if (onehot.dim() != 3) {
    throw ContractViolation("decode_label: expected N x H x W");
  }
  auto [best, arg] = onehot.max(0);
  auto classes = arg.masked_fill(best.le(0), kVoidLabel);
  return LabelMap(classes, onehot.size(0));
}

NoiseTensor sample_noise(at::Generator& rng, int64_t height, int64_t width) {
  if (height <= 0 || width <= 0) {
    throw ContractViolation("sample_noise: H and W must be positive");
  }
  return NoiseTensor(torch::randn({kNoiseChannels, height, width}, rng,
                                  torch::TensorOptions(torch::kFloat32)));
}

torch::Tensor sample_noise_batch(at::Generator& rng, int64_t batch,
                                 int64_t height, int64_t width) {
  std::vector<torch::Tensor> parts;
  parts.reserve(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    parts.push_back(sample_noise(rng, height, width).values());
  }
  return torch::stack(parts);
}

DepthMap normalize_depth(const torch::Tensor& raw_mm, double max_depth_m) {
  if (!(max_depth_m > 0)) {
    throw ContractViolation("normalize_depth: max_depth_m must be positive");
  }
  if (raw_mm.dim() != 2) {
    throw ContractViolation("normalize_depth: expected an H x W grid");
  }
  auto raw = raw_mm.to(torch::kFloat64);
  auto valid = raw.gt(0);
  auto meters = (raw / 1000.0).clamp_max(max_depth_m);
  auto values = (meters * (2.0 / max_depth_m) - 1.0)
                    .masked_fill(valid.logical_not(), -1.0)
                    .to(torch::kFloat32);
  return DepthMap(values.unsqueeze(0), valid, max_depth_m);
}

torch::Tensor depth_to_millimeters(const DepthMap& depth) {
  auto mm = (depth.meters() * 1000.0).round().clamp(0, 65535);
  return mm.masked_fill(depth.validity().logical_not(), 0).to(torch::kInt32);
}

RGBImage read_rgb(const fs::path& path, ImageSize size) {
  cv::Mat bgr = read_mat(path, cv::IMREAD_COLOR);
  bgr = resize_to(bgr, size, cv::INTER_LINEAR);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat32);
  return RGBImage(t / 127.5 - 1.0);
}

DepthMap read_depth(const fs::path& path, ImageSize size, double max_depth_m) {
  cv::Mat mat = read_mat(path, cv::IMREAD_UNCHANGED);
  if (mat.type() != CV_16UC1) {
    throw DataError("depth image is not 16-bit single channel: " +
                    path.string());
  }
  mat = resize_to(mat, size, cv::INTER_NEAREST);
  auto raw = torch::from_blob(mat.data, {mat.rows, mat.cols}, torch::kUInt16)
                 .to(torch::kInt32);
  return normalize_depth(raw, max_depth_m);
}

LabelMap read_label(const fs::path& path, ImageSize size,
                    int64_t num_classes) {
  cv::Mat mat = read_mat(path, cv::IMREAD_UNCHANGED);
  if (mat.type() != CV_8UC1) {
    throw DataError("label image is not 8-bit single channel: " +
                    path.string());
  }
  mat = resize_to(mat, size, cv::INTER_NEAREST);
  auto t = torch::from_blob(mat.data, {mat.rows, mat.cols}, torch::kUInt8)
               .to(torch::kInt64);
  try {
    return LabelMap(t, num_classes);
  } catch (const ContractViolation& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_rgb(const fs::path& path, const RGBImage& rgb) {
  auto bytes = ((rgb.values() + 1.0) * 127.5)
                   .round()
                   .clamp(0, 255)
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
  cv::Mat view(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)),
               CV_8UC3, bytes.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(view, bgr, cv::COLOR_RGB2BGR);
  write_mat(path, bgr);
}

void write_depth(const fs::path& path, const DepthMap& depth) {
  auto mm = depth_to_millimeters(depth).to(torch::kInt32).contiguous();
  cv::Mat mat(static_cast<int>(mm.size(0)), static_cast<int>(mm.size(1)),
              CV_16UC1);
  auto acc = mm.accessor<int32_t, 2>();
  for (int r = 0; r < mat.rows; ++r) {
    auto* row = mat.ptr<uint16_t>(r);
    for (int c = 0; c < mat.cols; ++c) row[c] = static_cast<uint16_t>(acc[r][c]);
  }
  write_mat(path, mat);
}

void write_label(const fs::path& path, const LabelMap& label) {
  auto bytes = label.classes().to(torch::kUInt8).contiguous();
  cv::Mat view(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)),
               CV_8UC1, bytes.data_ptr());
  write_mat(path, view.clone());
}

Sample load_sample(const SampleFiles& files, const DataOptions& options) {
  return Sample{files.name, read_rgb(files.rgb, options.size),
                read_depth(files.depth, options.size, options.max_depth_m),
                read_label(files.label, options.size, options.num_classes)};
}

Batch collate(std::span<const Sample> samples) {
  if (samples.empty()) throw ContractViolation("collate: empty batch");
  std::vector<torch::Tensor> rgb, depth, valid, labels;
  for (const auto& s : samples) {
    rgb.push_back(s.rgb.values());
    depth.push_back(s.depth.values());
    valid.push_back(s.depth.validity());
    labels.push_back(s.label.classes());
  }
  Batch batch;
  batch.rgb = torch::stack(rgb);
  batch.depth = torch::stack(depth);
  batch.validity = torch::stack(valid);
  batch.labels = torch::stack(labels);
  batch.num_classes = samples.front().label.num_classes();
  batch.max_depth_m = samples.front().depth.max_depth_m();
  return batch;
}

std::vector<size_t> epoch_order(size_t n, uint64_t seed, uint64_t epoch) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(epoch),
                    static_cast<uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  // Fisher-Yates with raw engine output so the order does not depend on the
  // standard library's distribution implementations.
  for (size_t i = n; i > 1; --i) {
    size_t j = static_cast<size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

}  // namespace dataio

DiskDataset::DiskDataset(DatasetIndex index, DataOptions options)
    : index_(std::move(index)), options_(options) {
  options_.num_classes = index_.num_classes;
}

Sample DiskDataset::get(size_t i) const {
  return dataio::load_sample(index_.samples.at(i), options_);
}

InMemoryDataset::InMemoryDataset(std::vector<Sample> samples)
    : samples_(std::move(samples)) {
  if (samples_.empty()) throw DataError("empty split: in-memory dataset");
}

std::vector<size_t> batch_indices(size_t dataset_size, size_t batch_size,
                                  uint64_t seed, uint64_t step) {
  if (dataset_size == 0 || batch_size == 0) {
    throw ContractViolation("batch_indices: empty dataset or batch");
  }
  std::vector<size_t> out;
  out.reserve(batch_size);
  uint64_t cached_epoch = UINT64_MAX;
  std::vector<size_t> order;
  for (size_t j = 0; j < batch_size; ++j) {
    uint64_t pos = step * batch_size + j;
    uint64_t epoch = pos / dataset_size;
    if (epoch != cached_epoch) {
      order = dataio::epoch_order(dataset_size, seed, epoch);
      cached_epoch = epoch;
    }
    out.push_back(order[pos % dataset_size]);
  }
  return out;
}

BatchStream::BatchStream(const SampleSource& source, size_t batch_size,
                         uint64_t seed, uint64_t first_step, int workers,
                         size_t capacity)
    : source_(source),
      batch_size_(batch_size),
      seed_(seed),
      next_step_(first_step),
      capacity_(std::max<size_t>(capacity, 1)),
      claim_step_(first_step) {
  for (int w = 0; w < workers; ++w) workers_.emplace_back([this] { work(); });
}

BatchStream::~BatchStream() {
  {
    std::lock_guard lock(mutex_);
    stop_ = true;
  }
  space_.notify_all();
  for (auto& t : workers_) t.join();
}

Batch BatchStream::make_batch(uint64_t step) const {
  std::vector<Sample> samples;
  for (size_t i : batch_indices(source_.size(), batch_size_, seed_, step)) {
    samples.push_back(source_.get(i));
  }
  return dataio::collate(samples);
}

void BatchStream::work() {
  while (true) {
    uint64_t step;
    {
      std::unique_lock lock(mutex_);
      space_.wait(lock, [&] {
        return stop_ || claim_step_ < next_step_ + capacity_;
      });
      if (stop_) return;
      step = claim_step_++;
    }
    try {
      Batch batch = make_batch(step);
      std::lock_guard lock(mutex_);
      ready_.emplace(step, std::move(batch));
    } catch (...) {
      std::lock_guard lock(mutex_);
      failures_.emplace(step, std::current_exception());
    }
    ready_cv_.notify_all();
  }
}

Batch BatchStream::next() {
  if (workers_.empty()) return make_batch(next_step_++);
  std::unique_lock lock(mutex_);
  ready_cv_.wait(lock, [&] {
    return ready_.count(next_step_) || failures_.count(next_step_);
  });
  if (auto f = failures_.find(next_step_); f != failures_.end()) {
    std::rethrow_exception(f->second);
  }
  auto node = ready_.extract(next_step_);
  ++next_step_;
  lock.unlock();
  space_.notify_all();
  return std::move(node.mapped());
}

}  // namespace scmis
