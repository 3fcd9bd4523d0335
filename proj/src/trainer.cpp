#include "scmis/trainer.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "scmis/errors.hpp"

namespace scmis {
namespace {

using checkpoint::Container;
using checkpoint::NamedArray;

constexpr const char* kStateKind = "scmis-train-state";

std::vector<std::pair<std::string, torch::Tensor>> named_params(
    const torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : m.named_parameters(true)) out.emplace_back(p.key(), p.value());
  return out;
}

void copy_module(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard no_grad;
  auto d = dst.named_parameters(true);
  auto s = src.named_parameters(true);
  for (const auto& p : s) d[p.key()].copy_(p.value());
  auto db = dst.named_buffers(true);
  for (const auto& b : src.named_buffers(true)) db[b.key()].copy_(b.value());
}

void append_optimizer(std::vector<NamedArray>& out, const std::string& prefix,
                      const torch::optim::Adam& opt, const torch::nn::Module& m) {
  const auto& state = opt.state();
  for (const auto& [name, p] : named_params(m)) {
    auto it = state.find(p.unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    const std::string base = prefix + "/" + name;
    out.push_back({base + "/step", torch::tensor({s.step()}, torch::kInt64)});
    out.push_back({base + "/exp_avg", s.exp_avg().clone()});
    out.push_back({base + "/exp_avg_sq", s.exp_avg_sq().clone()});
  }
}

void restore_optimizer(torch::optim::Adam& opt, const std::string& prefix,
                       const torch::nn::Module& m, const Container& c) {
  auto& state = opt.state();
  state.clear();
  for (const auto& [name, p] : named_params(m)) {
    const std::string base = prefix + "/" + name;
    const auto* step = c.find(base + "/step");
    if (step == nullptr) continue;
    const auto* avg = c.find(base + "/exp_avg");
    const auto* avg_sq = c.find(base + "/exp_avg_sq");
    if (avg == nullptr || avg_sq == nullptr) {
      throw CheckpointError(CheckpointError::Kind::kShapeManifest,
                            "checkpoint shape manifest: incomplete optimizer state for " + base);
    }
    for (const auto* a : {avg, avg_sq}) {
      if (a->tensor.sizes() != p.sizes()) {
        throw CheckpointError(
            CheckpointError::Kind::kShapeManifest,
            fmt::format("checkpoint shape manifest: array {} is [{}], model expects [{}]",
                        a->name, fmt::join(a->tensor.sizes(), ","),
                        fmt::join(p.sizes(), ",")));
      }
    }
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(step->tensor.item<int64_t>());
    s->exp_avg(avg->tensor.clone());
    s->exp_avg_sq(avg_sq->tensor.clone());
    state[p.unsafeGetTensorImpl()] = std::move(s);
  }
}

std::unique_ptr<torch::optim::Adam> make_adam(torch::nn::Module& m, double lr,
                                              const TrainConfig& t) {
  return std::make_unique<torch::optim::Adam>(
      m.parameters(),
      torch::optim::AdamOptions(lr).betas(std::make_tuple(t.beta1, t.beta2)));
}

nlohmann::json train_json(const TrainConfig& t) {
  return {{"lr_g", t.lr_g},
          {"lr_d", t.lr_d},
          {"adam_betas", {t.beta1, t.beta2}},
          {"ema_decay", t.ema_decay},
          {"batch_size", t.batch_size},
          {"max_steps", t.max_steps},
          {"seed", t.seed},
          {"w_adv", t.loss_weights.adversarial},
          {"w_ap", t.loss_weights.perceptual},
          {"w_depth", t.loss_weights.depth},
          {"w_lm", t.loss_weights.labelmix},
          {"ap_updates_disc", t.ap_updates_disc},
          {"class_weights", t.class_weights == ClassWeightMode::kBatch ? "batch" : "dataset"}};
}

void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters(true)) p.set_requires_grad(on);
}

std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_g >= 0) || !(lr_d >= 0)) {
    throw ConfigError("train: learning rates must be non-negative");
  }
  if (!(ema_decay >= 0 && ema_decay < 1)) {
    throw ConfigError("train.ema_decay must be in [0, 1)");
  }
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("train.adam_betas must be in [0, 1)");
  }
  if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (max_steps < 0) throw ConfigError("train.max_steps must be non-negative");
}

nlohmann::json to_json(const ModelConfig& c) {
  const auto& g = c.generator;
  const auto& d = c.discriminator;
  return {{"generator",
           {{"num_classes", g.num_classes},
            {"noise_channels", g.noise_channels},
            {"stem_channels", g.stem_channels},
            {"encoder_channels", g.encoder_channels},
            {"decoder_channels", g.decoder_channels},
            {"spade_hidden", g.spade_hidden},
            {"out_channels_appearance", g.out_channels_appearance},
            {"out_channels_geometry", g.out_channels_geometry},
            {"image_size", {g.image_size.height, g.image_size.width}},
            {"eps", g.eps},
            {"bn_momentum", g.bn_momentum}}},
          {"discriminator",
           {{"num_classes", d.num_classes},
            {"depth", to_string(d.depth)},
            {"head", to_string(d.head)},
            {"input_channels", d.input_channels},
            {"base_channels", d.base_channels},
            {"pool_grids", d.pool_grids}}},
          {"max_depth_m", c.max_depth_m}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    const auto& g = j.at("generator");
    c.generator.num_classes = g.at("num_classes");
    c.generator.noise_channels = g.at("noise_channels");
    c.generator.stem_channels = g.at("stem_channels");
    c.generator.encoder_channels = g.at("encoder_channels");
    c.generator.decoder_channels = g.at("decoder_channels").get<std::vector<int64_t>>();
    c.generator.spade_hidden = g.at("spade_hidden");
    c.generator.out_channels_appearance = g.at("out_channels_appearance");
    c.generator.out_channels_geometry = g.at("out_channels_geometry");
    c.generator.image_size = {g.at("image_size").at(0), g.at("image_size").at(1)};
    c.generator.eps = g.at("eps");
    c.generator.bn_momentum = g.at("bn_momentum");
    const auto& d = j.at("discriminator");
    c.discriminator.num_classes = d.at("num_classes");
    c.discriminator.depth = parse_backbone_depth(d.at("depth"));
    c.discriminator.head = parse_head_kind(d.at("head"));
    c.discriminator.input_channels = d.at("input_channels");
    c.discriminator.base_channels = d.at("base_channels");
    c.discriminator.pool_grids = d.at("pool_grids").get<std::vector<int64_t>>();
    c.max_depth_m = j.at("max_depth_m");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt,
                          std::string("checkpoint: bad model config: ") + e.what());
  }
  return c;
}

std::string csv_header() {
  return "step,d_adversarial,labelmix,d_total,g_adversarial,perceptual,depth_l1,g_total";
}

std::string format_csv_row(const StepStats& s) {
  return fmt::format("{},{},{},{},{},{},{},{}", s.step, fmt_double(s.d_adversarial),
                     fmt_double(s.labelmix), fmt_double(s.d_total),
                     fmt_double(s.g_adversarial), fmt_double(s.perceptual),
                     fmt_double(s.depth_l1), fmt_double(s.g_total));
}

nlohmann::json to_json(const StepStats& s) {
  return {{"step", s.step},
          {"d_adversarial", s.d_adversarial},
          {"labelmix", s.labelmix},
          {"d_total", s.d_total},
          {"g_adversarial", s.g_adversarial},
          {"perceptual", s.perceptual},
          {"depth_l1", s.depth_l1},
          {"g_total", s.g_total},
          {"depth_empty", s.depth_empty}};
}

void ema_update(std::vector<torch::Tensor>& ema,
                const std::vector<torch::Tensor>& params, double decay) {
  if (ema.size() != params.size()) {
    throw ContractViolation(fmt::format("ema_update: {} shadow tensors for {} parameters",
                                        ema.size(), params.size()));
  }
  for (size_t i = 0; i < ema.size(); ++i) {
    if (ema[i].sizes() != params[i].sizes()) {
      throw ContractViolation(fmt::format("ema_update: tensor {} shape [{}] vs [{}]", i,
                                          fmt::join(ema[i].sizes(), ","),
                                          fmt::join(params[i].sizes(), ",")));
    }
  }
  torch::NoGradGuard no_grad;
  for (size_t i = 0; i < ema.size(); ++i) {
    ema[i].mul_(decay).add_(params[i].detach(), 1.0 - decay);
  }
}

void ema_update(torch::nn::Module& ema, const torch::nn::Module& params,
                double decay) {
  auto shadow = ema.parameters(true);
  ema_update(shadow, params.parameters(true), decay);
  torch::NoGradGuard no_grad;
  auto dst = ema.buffers(true);
  auto src = params.buffers(true);
  if (dst.size() != src.size()) {
    throw ContractViolation("ema_update: buffer count mismatch");
  }
  for (size_t i = 0; i < dst.size(); ++i) dst[i].copy_(src[i]);
}

losses::ClassWeights dataset_class_weights(const SampleSource& source,
                                           int64_t num_classes) {
  auto sum = torch::zeros({num_classes}, torch::kFloat64);
  auto maps = torch::zeros({num_classes}, torch::kFloat64);
  for (size_t i = 0; i < source.size(); ++i) {
    const auto label = source.get(i).label.classes();
    const double pixels = static_cast<double>(label.numel());
    auto counts = torch::bincount(label.flatten(), {}, kVoidLabel + 1)
                      .slice(0, 0, num_classes)
                      .to(torch::kFloat64);
    auto present = counts.gt(0);
    sum += torch::where(present, pixels / counts, torch::zeros_like(counts));
    maps += present.to(torch::kFloat64);
  }
  return {torch::where(maps.gt(0), sum / maps.clamp_min(1.0), torch::zeros_like(sum))};
}

Trainer::Trainer(ModelConfig model, TrainConfig train)
    : model_(std::move(model)),
      train_(std::move(train)),
      noise_rng_(at::make_generator<at::CPUGeneratorImpl>(train_.seed)) {
  model_.generator.validate();
  train_.validate();
  if (model_.generator.num_classes != model_.discriminator.num_classes) {
    throw ConfigError(fmt::format("generator has {} classes, discriminator {}",
                                  model_.generator.num_classes,
                                  model_.discriminator.num_classes));
  }
  std::seed_seq seq{train_.seed, uint64_t{0x6d6978}};
  mix_rng_.seed(seq);

  torch::manual_seed(train_.seed);
  generator_ = Generator(model_.generator);
  discriminator_ = Discriminator(model_.discriminator);
  ema_ = Generator(model_.generator);
  copy_module(*ema_, *generator_);
  ema_->eval();
  set_requires_grad(*ema_, false);

  opt_g_ = make_adam(*generator_, train_.lr_g, train_);
  opt_d_ = make_adam(*discriminator_, train_.lr_d, train_);
}

void Trainer::set_class_weights(losses::ClassWeights weights) {
  if (weights.alpha.numel() != model_.generator.num_classes) {
    throw ContractViolation("set_class_weights: wrong number of classes");
  }
  fixed_weights_ = std::move(weights);
}

torch::Tensor Trainer::disc_input(const torch::Tensor& rgb,
                                  const torch::Tensor& depth) const {
  if (model_.discriminator.input_channels == 4) return torch::cat({rgb, depth}, 1);
  return rgb;
}

StepStats Trainer::train_step(const Batch& batch) {
  const int64_t n = model_.generator.num_classes;
  if (batch.num_classes != n) {
    throw ContractViolation(fmt::format("batch has {} classes, model {}",
                                        batch.num_classes, n));
  }
  const int64_t b = batch.size();
  const int64_t h = batch.labels.size(1);
  const int64_t w = batch.labels.size(2);
  StepStats stats;
  stats.step = step_ + 1;
  const auto& lw = train_.loss_weights;

  try {
    const auto onehot = dataio::encode_labels(batch.labels, n);
    const auto weights =
        fixed_weights_ ? *fixed_weights_ : losses::class_weights(batch.labels, n);
    const auto real = disc_input(batch.rgb, batch.depth);
    generator_->train();
    discriminator_->train();

    // Discriminator phase. Real, fake and mixed inputs share one forward pass;
    // the discriminator has no batch statistics, so this equals three passes.
    torch::Tensor fake;
    {
      torch::NoGradGuard no_grad;
      auto noise = dataio::sample_noise_batch(noise_rng_, b, h, w);
      auto out = generator_->forward(onehot, noise);
      fake = disc_input(out.rgb, out.depth);
    }
    const auto mask = losses::labelmix_masks(batch.labels, n, mix_rng_);
    const auto mixed = losses::labelmix(real, fake, mask);
    auto logits = discriminator_->forward(torch::cat({real, fake, mixed})).logits.chunk(3);
    auto d_adv = losses::d_adversarial_loss(logits[0], batch.labels, logits[1], weights);
    auto lm = losses::labelmix_consistency_from_logits(logits[2], logits[0], logits[1], mask);
    auto d_total = losses::discriminator_total(d_adv, lm, lw);
    opt_d_->zero_grad();
    d_total.backward();
    opt_d_->step();
    stats.d_adversarial = d_adv.item<double>();
    stats.labelmix = lm.item<double>();
    stats.d_total = d_total.item<double>();

    // Generator phase.
    set_requires_grad(*discriminator_, train_.ap_updates_disc);
    auto noise = dataio::sample_noise_batch(noise_rng_, b, h, w);
    auto out = generator_->forward(onehot, noise);
    auto d_out = discriminator_->forward(torch::cat({disc_input(out.rgb, out.depth), real}));
    std::vector<torch::Tensor> fake_taps, real_taps;
    for (const auto& t : d_out.taps) {
      auto parts = t.chunk(2);
      fake_taps.push_back(parts[0]);
      real_taps.push_back(parts[1]);
    }
    auto fake_logits = d_out.logits.chunk(2)[0];
    auto g_adv = losses::g_adversarial_loss(fake_logits, batch.labels, weights);
    auto ap = losses::adaptive_perceptual_loss(real_taps, fake_taps);
    auto depth = losses::depth_l1_loss(out.depth, batch.depth, batch.validity);
    auto g_total = losses::generator_total(g_adv, ap, depth.value, lw);
    opt_g_->zero_grad();
    if (train_.ap_updates_disc) {
      g_total.backward({}, /*retain_graph=*/true, false, generator_->parameters());
      opt_d_->zero_grad();
      (lw.perceptual * ap).backward({}, false, false, discriminator_->parameters());
      opt_d_->step();
    } else {
      g_total.backward();
    }
    opt_g_->step();
    set_requires_grad(*discriminator_, true);
    stats.g_adversarial = g_adv.item<double>();
    stats.perceptual = ap.item<double>();
    stats.depth_l1 = depth.value.item<double>();
    stats.depth_empty = depth.empty;
    stats.g_total = g_total.item<double>();
  } catch (const NumericError& e) {
    set_requires_grad(*discriminator_, true);
    throw NumericError(fmt::format("step {}: {}", stats.step, e.what()));
  }

  ema_update(*ema_, *generator_, train_.ema_decay);
  ++step_;
  return stats;
}

Container Trainer::to_container() const {
  Container c;
  std::ostringstream mix_state;
  mix_state << mix_rng_;
  c.meta = {{"kind", kStateKind},
            {"step", step_},
            {"model", to_json(model_)},
            {"train", train_json(train_)},
            {"mix_rng", mix_state.str()},
            {"extra", extra_meta_}};
  auto append = [&c](std::vector<NamedArray> arrays) {
    for (auto& a : arrays) c.arrays.push_back(std::move(a));
  };
  append(checkpoint::module_arrays(*generator_, "generator"));
  append(checkpoint::module_arrays(*discriminator_, "discriminator"));
  append(checkpoint::module_arrays(*ema_, "ema"));
  {
    at::Generator gen = noise_rng_;
    std::lock_guard<std::mutex> lock(gen.mutex());
    c.arrays.push_back({"rng/noise", gen.get_state()});
  }
  if (fixed_weights_) c.arrays.push_back({"class_weights/alpha", fixed_weights_->alpha});
  append_optimizer(c.arrays, "opt_g", *opt_g_, *generator_);
  append_optimizer(c.arrays, "opt_d", *opt_d_, *discriminator_);
  return c;
}

void Trainer::load_container(const Container& c) {
  if (!c.meta.contains("kind") || c.meta["kind"] != kStateKind) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt,
                          "checkpoint: not a training state");
  }
  // Validate everything first so a rejected file leaves the state untouched.
  checkpoint::check_module_arrays(*generator_, c, "generator");
  checkpoint::check_module_arrays(*discriminator_, c, "discriminator");
  checkpoint::check_module_arrays(*ema_, c, "ema");
  const auto* rng = c.find("rng/noise");
  if (rng == nullptr) {
    throw CheckpointError(CheckpointError::Kind::kShapeManifest,
                          "checkpoint shape manifest: missing array rng/noise");
  }
  // The remaining data order is derived from the seed of the saved run.
  const auto seed = c.meta.at("train").at("seed").get<uint64_t>();
  checkpoint::load_module_arrays(*generator_, c, "generator");
  checkpoint::load_module_arrays(*discriminator_, c, "discriminator");
  checkpoint::load_module_arrays(*ema_, c, "ema");
  {
    std::lock_guard<std::mutex> lock(noise_rng_.mutex());
    noise_rng_.set_state(rng->tensor);
  }
  std::istringstream mix_state(c.meta.at("mix_rng").get<std::string>());
  mix_state >> mix_rng_;
  if (const auto* alpha = c.find("class_weights/alpha")) {
    fixed_weights_ = losses::ClassWeights{alpha->tensor.clone()};
  }
  restore_optimizer(*opt_g_, "opt_g", *generator_, c);
  restore_optimizer(*opt_d_, "opt_d", *discriminator_, c);
  step_ = c.meta.at("step").get<int64_t>();
  train_.seed = seed;
  if (c.meta.contains("extra")) extra_meta_ = c.meta["extra"];
}

void Trainer::save(const std::filesystem::path& path) const {
  checkpoint::write_file(path, to_container());
}

void Trainer::load(const std::filesystem::path& path) {
  load_container(checkpoint::read_file(path));
}

Generator load_generator(const Container& c, bool ema) {
  if (!c.meta.contains("model")) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt,
                          "checkpoint: no model configuration");
  }
  const auto model = model_config_from_json(c.meta["model"]);
  Generator g(model.generator);
  checkpoint::load_module_arrays(*g, c, ema ? "ema" : "generator");
  g->eval();
  return g;
}

Discriminator load_discriminator(const Container& c) {
  if (!c.meta.contains("model")) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt,
                          "checkpoint: no model configuration");
  }
  const auto model = model_config_from_json(c.meta["model"]);
  Discriminator d(model.discriminator);
  checkpoint::load_module_arrays(*d, c, "discriminator");
  d->eval();
  return d;
}

void load_pretrained_backbone(DiscriminatorImpl& discriminator,
                              const std::filesystem::path& path) {
  checkpoint::load_module_arrays(*discriminator.backbone, checkpoint::read_file(path),
                                 "backbone");
  for (auto& stage : discriminator.backbone->stages) {
    for (auto& conv : stage) conv->warm_up();
  }
}

void run_training(Trainer& trainer, const SampleSource& source,
                  const TrainLoopOptions& options) {
  const auto& cfg = trainer.train_config();
  if (source.size() == 0) throw DataError("training set is empty");
  std::ofstream csv, jsonl;
  const bool resume = trainer.step() > 0;
  if (!options.loss_csv.empty()) {
    if (options.loss_csv.has_parent_path()) {
      std::filesystem::create_directories(options.loss_csv.parent_path());
    }
    csv.open(options.loss_csv, resume ? std::ios::app : std::ios::trunc);
    if (!csv) throw DataError("cannot open loss log " + options.loss_csv.string());
    if (!resume) csv << csv_header() << '\n';
  }
  if (!options.loss_jsonl.empty()) {
    jsonl.open(options.loss_jsonl, resume ? std::ios::app : std::ios::trunc);
    if (!jsonl) throw DataError("cannot open loss log " + options.loss_jsonl.string());
  }
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

  BatchStream stream(source, static_cast<size_t>(cfg.batch_size), cfg.seed,
                     static_cast<uint64_t>(trainer.step()), options.workers);
  while (trainer.step() < cfg.max_steps) {
    const auto stats = trainer.train_step(stream.next());
    if (csv.is_open()) csv << format_csv_row(stats) << '\n' << std::flush;
    if (jsonl.is_open()) jsonl << to_json(stats).dump() << '\n' << std::flush;
    if (options.on_step) options.on_step(stats);
    if (!options.out_dir.empty() && options.ckpt_every > 0 &&
        stats.step % options.ckpt_every == 0) {
      trainer.save(options.out_dir / fmt::format("ckpt_{}.scmis", stats.step));
    }
  }
  if (!options.out_dir.empty()) trainer.save(options.out_dir / "latest.scmis");
}

}  // namespace scmis
