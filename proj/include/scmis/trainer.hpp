#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "scmis/checkpoint.hpp"
#include "scmis/dataio.hpp"
#include "scmis/discriminator.hpp"
#include "scmis/generator.hpp"
#include "scmis/losses.hpp"

namespace scmis {

enum class ClassWeightMode { kBatch, kDataset };

struct TrainConfig {
  double lr_g = 1e-4;
  double lr_d = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double ema_decay = 0.9999;
  int64_t batch_size = 8;
  int64_t max_steps = 0;
  uint64_t seed = 0;
  losses::LossWeights loss_weights;
  // Let the adaptive perceptual loss also train the discriminator backbone.
  bool ap_updates_disc = false;
  ClassWeightMode class_weights = ClassWeightMode::kBatch;

  /// Learning rates must be >= 0 here so a frozen (lr = 0) run is expressible.
  void validate() const;
};

struct ModelConfig {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  double max_depth_m = 10.0;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct StepStats {
  int64_t step = 0;  // 1-based index of the completed step
  double d_adversarial = 0;
  double labelmix = 0;
  double d_total = 0;
  double g_adversarial = 0;
  double perceptual = 0;
  double depth_l1 = 0;
  double g_total = 0;
  bool depth_empty = false;

  bool operator==(const StepStats&) const = default;
};

/// CSV header matching format_csv_row.
std::string csv_header();
/// Values printed with round-trip precision so equal logs mean equal bits.
std::string format_csv_row(const StepStats& stats);
nlohmann::json to_json(const StepStats& stats);

/// ema <- decay * ema + (1 - decay) * params, elementwise and in place.
void ema_update(std::vector<torch::Tensor>& ema,
                const std::vector<torch::Tensor>& params, double decay);
/// Module form: parameters are averaged, buffers copied.
void ema_update(torch::nn::Module& ema, const torch::nn::Module& params,
                double decay);

/// Dataset-wide inverse class frequencies, accumulated per map exactly like
/// losses::class_weights.
losses::ClassWeights dataset_class_weights(const SampleSource& source,
                                           int64_t num_classes);

/// Owns the training state: generator, discriminator, EMA generator, both
/// Adam optimizers, the noise and mixing RNGs and the step counter.
class Trainer {
 public:
  Trainer(ModelConfig model, TrainConfig train);

  StepStats train_step(const Batch& batch);

  int64_t step() const { return step_; }
  const ModelConfig& model_config() const { return model_; }
  const TrainConfig& train_config() const { return train_; }

  Generator& generator() { return generator_; }
  Discriminator& discriminator() { return discriminator_; }
  Generator& ema() { return ema_; }

  void set_class_weights(losses::ClassWeights weights);

  /// Free-form metadata stored with every checkpoint (e.g. the run config).
  void set_checkpoint_meta(nlohmann::json meta) { extra_meta_ = std::move(meta); }

  checkpoint::Container to_container() const;
  /// Restores every field, including the run seed that orders the remaining
  /// batches. The model layout must match the container.
  void load_container(const checkpoint::Container& container);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  torch::Tensor disc_input(const torch::Tensor& rgb, const torch::Tensor& depth) const;

  ModelConfig model_;
  TrainConfig train_;
  Generator generator_{nullptr};
  Discriminator discriminator_{nullptr};
  Generator ema_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  at::Generator noise_rng_;
  std::mt19937_64 mix_rng_;
  int64_t step_ = 0;
  std::optional<losses::ClassWeights> fixed_weights_;
  nlohmann::json extra_meta_ = nlohmann::json::object();
};

/// Rebuilds a generator from a checkpoint written by Trainer::save. `ema`
/// selects the shadow weights; the generator is returned in eval mode.
Generator load_generator(const checkpoint::Container& container, bool ema = true);
Discriminator load_discriminator(const checkpoint::Container& container);

/// Initializes the backbone from a container holding `backbone/<name>` arrays
/// (written with checkpoint::module_arrays(*d->backbone, "backbone")). Power
/// iteration vectors are re-warmed for the loaded weights.
void load_pretrained_backbone(DiscriminatorImpl& discriminator,
                              const std::filesystem::path& path);

struct TrainLoopOptions {
  std::filesystem::path out_dir;
  std::filesystem::path loss_csv;    // empty: no CSV
  std::filesystem::path loss_jsonl;  // empty: no JSONL
  int64_t ckpt_every = 0;            // 0: only the final checkpoint
  int workers = 0;
  std::function<void(const StepStats&)> on_step;
};

/// Runs steps until `train.max_steps`, appending to the loss logs and writing
/// `ckpt_<step>.scmis` plus `latest.scmis` into out_dir. Non-finite losses
/// abort with a NumericError naming the step and component.
void run_training(Trainer& trainer, const SampleSource& source,
                  const TrainLoopOptions& options);

}  // namespace scmis
