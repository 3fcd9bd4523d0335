#pragma once

#include <torch/torch.h>

#include <condition_variable>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace scmis {

// Label value marking unlabeled pixels, both on disk and in memory.
inline constexpr int64_t kVoidLabel = 255;
inline constexpr int64_t kNoiseChannels = 64;

struct ImageSize {
  int64_t height = 256;
  int64_t width = 512;

  bool operator==(const ImageSize&) const = default;
};

/// Per-pixel semantic classes. Stored as an int64 H x W tensor whose values
/// are in [0, num_classes) or kVoidLabel.
class LabelMap {
 public:
  LabelMap(torch::Tensor classes, int64_t num_classes);

  const torch::Tensor& classes() const { return classes_; }
  int64_t num_classes() const { return num_classes_; }
  int64_t height() const { return classes_.size(0); }
  int64_t width() const { return classes_.size(1); }

  /// Sorted non-VOID class ids that occur in the map.
  std::vector<int64_t> present_classes() const;

 private:
  torch::Tensor classes_;
  int64_t num_classes_;
};

/// 3 x H x W float image in [-1, 1].
class RGBImage {
 public:
  explicit RGBImage(torch::Tensor values);

  const torch::Tensor& values() const { return values_; }
  int64_t height() const { return values_.size(1); }
  int64_t width() const { return values_.size(2); }

 private:
  torch::Tensor values_;
};

/// 1 x H x W float depth in [-1, 1] with an H x W validity mask. Invalid
/// pixels hold -1.
class DepthMap {
 public:
  DepthMap(torch::Tensor values, torch::Tensor validity, double max_depth_m);

  const torch::Tensor& values() const { return values_; }
  const torch::Tensor& validity() const { return validity_; }
  double max_depth_m() const { return max_depth_m_; }
  int64_t height() const { return values_.size(1); }
  int64_t width() const { return values_.size(2); }

  /// Depth in meters, H x W double. Invalid pixels are 0.
  torch::Tensor meters() const;

 private:
  torch::Tensor values_;
  torch::Tensor validity_;
  double max_depth_m_;
};

/// kNoiseChannels x H x W standard normal noise.
class NoiseTensor {
 public:
  explicit NoiseTensor(torch::Tensor values);

  const torch::Tensor& values() const { return values_; }

 private:
  torch::Tensor values_;
};

enum class Split { kTrain, kVal };

Split parse_split(const std::string& name);
std::string to_string(Split split);

struct SampleFiles {
  std::string name;  // file stem shared by the triple
  std::filesystem::path rgb;
  std::filesystem::path depth;
  std::filesystem::path label;
};

struct DatasetIndex {
  std::filesystem::path root;
  Split split = Split::kTrain;
  int64_t num_classes = 0;
  std::vector<SampleFiles> samples;
};

struct DataOptions {
  ImageSize size;
  double max_depth_m = 10.0;
  int64_t num_classes = 40;
};

struct Sample {
  std::string name;
  RGBImage rgb;
  DepthMap depth;
  LabelMap label;
};

/// Stacked training batch.
struct Batch {
  torch::Tensor rgb;       // B x 3 x H x W
  torch::Tensor depth;     // B x 1 x H x W
  torch::Tensor validity;  // B x H x W (bool)
  torch::Tensor labels;    // B x H x W (int64, kVoidLabel for unlabeled)
  int64_t num_classes = 0;
  double max_depth_m = 10.0;

  int64_t size() const { return labels.size(0); }
};

namespace dataio {

/// Indexes `root/{rgb,depth,label}/<name>.png`. If `root/<split>` exists the
/// triple directories are looked up there instead.
DatasetIndex load_dataset(const std::filesystem::path& root, Split split,
                          int64_t num_classes);

/// One-hot N x H x W float encoding; VOID pixels are zero in every channel.
torch::Tensor encode_label(const LabelMap& label);

/// Batched one-hot: B x H x W int64 -> B x N x H x W float.
torch::Tensor encode_labels(const torch::Tensor& labels, int64_t num_classes);

/// Argmax over channels; pixels whose channels are all zero become VOID.
LabelMap decode_label(const torch::Tensor& onehot);

NoiseTensor sample_noise(at::Generator& rng, int64_t height, int64_t width);

/// B x 64 x H x W; sample b equals the b-th consecutive sample_noise draw.
torch::Tensor sample_noise_batch(at::Generator& rng, int64_t batch,
                                 int64_t height, int64_t width);

/// `raw_mm` is an integer H x W grid in millimeters; 0 marks missing depth.
DepthMap normalize_depth(const torch::Tensor& raw_mm, double max_depth_m);

/// Inverse of normalize_depth, rounded to integer millimeters (int32 H x W).
/// Invalid pixels become 0.
torch::Tensor depth_to_millimeters(const DepthMap& depth);

/// Readers resample to `size`; a size of {0, 0} keeps the file's resolution.
RGBImage read_rgb(const std::filesystem::path& path, ImageSize size);
DepthMap read_depth(const std::filesystem::path& path, ImageSize size,
                    double max_depth_m);
LabelMap read_label(const std::filesystem::path& path, ImageSize size,
                    int64_t num_classes);

void write_rgb(const std::filesystem::path& path, const RGBImage& rgb);
/// 16-bit PNG in millimeters.
void write_depth(const std::filesystem::path& path, const DepthMap& depth);
void write_label(const std::filesystem::path& path, const LabelMap& label);

Sample load_sample(const SampleFiles& files, const DataOptions& options);

Batch collate(std::span<const Sample> samples);

/// Deterministic permutation of [0, n) for a given (seed, epoch).
std::vector<size_t> epoch_order(size_t n, uint64_t seed, uint64_t epoch);

}  // namespace dataio

/// Random-access sample provider feeding the trainer. Implementations are
/// immutable after construction and may be read from several threads.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual size_t size() const = 0;
  virtual Sample get(size_t i) const = 0;
};

class DiskDataset final : public SampleSource {
 public:
  DiskDataset(DatasetIndex index, DataOptions options);

  size_t size() const override { return index_.samples.size(); }
  Sample get(size_t i) const override;
  const DatasetIndex& index() const { return index_; }
  const DataOptions& options() const { return options_; }

 private:
  DatasetIndex index_;
  DataOptions options_;
};

class InMemoryDataset final : public SampleSource {
 public:
  explicit InMemoryDataset(std::vector<Sample> samples);

  size_t size() const override { return samples_.size(); }
  Sample get(size_t i) const override { return samples_.at(i); }

 private:
  std::vector<Sample> samples_;
};

/// Indices of the samples forming the batch of a given training step. A step
/// covers positions [step * B, (step + 1) * B) of the concatenated epoch orders.
std::vector<size_t> batch_indices(size_t dataset_size, size_t batch_size,
                                  uint64_t seed, uint64_t step);

/// Produces batches for consecutive steps starting at `first_step`. With
/// `workers == 0` batches are decoded on the calling thread; otherwise worker
/// threads decode ahead into a bounded buffer. The batch sequence is the same
/// in both modes.
class BatchStream {
 public:
  BatchStream(const SampleSource& source, size_t batch_size, uint64_t seed,
              uint64_t first_step, int workers, size_t capacity = 4);
  ~BatchStream();

  BatchStream(const BatchStream&) = delete;
  BatchStream& operator=(const BatchStream&) = delete;

  Batch next();

 private:
  Batch make_batch(uint64_t step) const;
  void work();

  const SampleSource& source_;
  size_t batch_size_;
  uint64_t seed_;
  uint64_t next_step_;
  size_t capacity_;

  std::mutex mutex_;
  std::condition_variable space_;
  std::condition_variable ready_cv_;
  std::map<uint64_t, Batch> ready_;
  std::map<uint64_t, std::exception_ptr> failures_;
  uint64_t claim_step_;
  bool stop_ = false;
  std::vector<std::thread> workers_;
};

}  // namespace scmis
