#include "scmis/cli.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <json.hpp>

#include "scmis/checkpoint.hpp"
#include "scmis/config.hpp"
#include "scmis/errors.hpp"
#include "scmis/metrics.hpp"
#include "scmis/mixer.hpp"
#include "scmis/trainer.hpp"

namespace scmis::cli {
namespace {

namespace fs = std::filesystem;

std::vector<fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("missing directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string resume;
  std::string dump_config;
  std::string loss_breakdown;
};

int run_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg;
  if (!a.config.empty()) cfg.merge_yaml_file(a.config);
  for (const auto& o : a.overrides) cfg.set_override(o);
  if (!a.dump_config.empty()) {
    std::ofstream f(a.dump_config, std::ios::trunc);
    f << cfg.dump_yaml();
    if (!f) throw DataError("cannot write " + a.dump_config);
    out << "wrote " << a.dump_config << '\n';
    return kExitOk;
  }
  cfg.require({"data.root", "train.max_steps"});
  const auto model = cfg.model_config();
  const auto train = cfg.train_config();
  const auto data = cfg.data_options();

  auto index = dataio::load_dataset(cfg.get_string("data.root"),
                                    parse_split(cfg.get_string("data.split")),
                                    data.num_classes);
  DiskDataset dataset(std::move(index), data);

  Trainer trainer(model, train);
  if (cfg.get_string("disc.init") == "pretrained") {
    load_pretrained_backbone(*trainer.discriminator(), cfg.get_string("disc.weights"));
  }
  trainer.set_checkpoint_meta({{"run_config", cfg.to_json()}});
  if (!a.resume.empty()) trainer.load(a.resume);
  if (train.class_weights == ClassWeightMode::kDataset && a.resume.empty()) {
    trainer.set_class_weights(dataset_class_weights(dataset, data.num_classes));
  }

  TrainLoopOptions opts;
  opts.out_dir = cfg.get_string("train.out_dir");
  opts.loss_csv = !a.loss_breakdown.empty()            ? fs::path(a.loss_breakdown)
                  : !cfg.get_string("train.loss_log").empty()
                      ? fs::path(cfg.get_string("train.loss_log"))
                      : opts.out_dir / "losses.csv";
  opts.loss_jsonl = opts.out_dir / "losses.jsonl";
  opts.ckpt_every = cfg.get_int("train.ckpt_every");
  opts.workers = static_cast<int>(cfg.get_int("data.workers"));
  run_training(trainer, dataset, opts);
  out << fmt::format("trained to step {}; checkpoint {}\n", trainer.step(),
                     (opts.out_dir / "latest.scmis").string());
  return kExitOk;
}

struct GenerateArgs {
  std::string ckpt, label, out, dump_taps;
  uint64_t seed = 0;
  bool raw = false;
};

int run_generate(const GenerateArgs& a, std::ostream& out) {
  const auto container = checkpoint::read_file(a.ckpt);
  const auto model = model_config_from_json(container.meta.at("model"));
  auto generator = load_generator(container, !a.raw);
  const auto label = dataio::read_label(a.label, model.generator.image_size,
                                        model.generator.num_classes);
  auto rng = at::make_generator<at::CPUGeneratorImpl>(a.seed);
  const auto noise = dataio::sample_noise(rng, label.height(), label.width());
  const auto pair = generator->generate(label, noise, model.max_depth_m);
  fs::create_directories(a.out);
  dataio::write_rgb(fs::path(a.out) / "rgb.png", pair.rgb);
  dataio::write_depth(fs::path(a.out) / "depth.png", pair.depth);
  if (!a.dump_taps.empty()) {
    auto disc = load_discriminator(container);
    torch::NoGradGuard no_grad;
    auto input = pair.rgb.values().unsqueeze(0);
    if (model.discriminator.input_channels == 4) {
      input = torch::cat({input, pair.depth.values().unsqueeze(0)}, 1);
    }
    const auto d_out = disc->forward(input);
    checkpoint::Container taps;
    taps.meta = {{"kind", "scmis-taps"}, {"seed", a.seed}, {"label", a.label}};
    for (size_t i = 0; i < d_out.taps.size(); ++i) {
      taps.arrays.push_back({fmt::format("tap{}", i), d_out.taps[i][0]});
    }
    taps.arrays.push_back({"logits", d_out.logits[0]});
    checkpoint::write_file(a.dump_taps, taps);
  }
  out << "wrote " << (fs::path(a.out) / "rgb.png").string() << " and "
      << (fs::path(a.out) / "depth.png").string() << '\n';
  return kExitOk;
}

struct MixArgs {
  std::string ckpt, data, out, modality = "rgbd", split = "train";
  double ratio = 0.5;
  uint64_t seed = 0;
};

int run_mix(const MixArgs& a, std::ostream& out, std::ostream& err) {
  mixer::MixSpec spec{a.ratio, mixer::parse_modality(a.modality), a.seed};
  spec.validate();
  const auto container = checkpoint::read_file(a.ckpt);
  const auto model = model_config_from_json(container.meta.at("model"));
  auto generator = load_generator(container, /*ema=*/true);
  const auto index =
      dataio::load_dataset(a.data, parse_split(a.split), model.generator.num_classes);
  DataOptions options{model.generator.image_size, model.max_depth_m,
                      model.generator.num_classes};
  const auto report = mixer::mix_dataset(index, options, *generator, spec, a.out);
  out << fmt::format("mixed {} samples into {} ({} failed)\n", report.written, a.out,
                     report.failures);
  if (report.failures > 0) {
    for (const auto& f : report.manifest["failures"]) {
      err << fmt::format("failed: {}: {}\n", f["name"].get<std::string>(),
                         f["error"].get<std::string>());
    }
    return kExitRuntime;
  }
  return kExitOk;
}

struct FidArgs {
  std::string real, fake, weights, extractor = "torchscript";
};

int run_fid(const FidArgs& a, std::ostream& out) {
  auto load = [](const fs::path& dir) {
    std::vector<torch::Tensor> images;
    for (const auto& p : list_pngs(dir)) {
      images.push_back(dataio::read_rgb(p, {0, 0}).values());
    }
    return images;
  };
  const auto real = load(a.real);
  const auto fake = load(a.fake);
  std::unique_ptr<metrics::FeatureExtractor> extractor;
  if (a.extractor == "mean") {
    extractor = std::make_unique<metrics::MeanPixelExtractor>();
  } else if (a.extractor == "torchscript") {
    if (a.weights.empty()) throw ConfigError("eval fid: --weights is required");
    extractor = std::make_unique<metrics::TorchScriptExtractor>(
        metrics::resolve_weights(a.weights));
  } else {
    throw ConfigError("eval fid: unknown extractor '" + a.extractor + "'");
  }
  const double value = metrics::fid(real, fake, *extractor);
  out << nlohmann::json{{"fid", value}, {"real", real.size()}, {"fake", fake.size()}}.dump()
      << '\n';
  return kExitOk;
}

struct DepthArgs {
  std::string pred, gt;
  double max_depth = 10.0;
};

int run_depth(const DepthArgs& a, std::ostream& out) {
  metrics::DepthAccumulator acc;
  size_t images = 0;
  for (const auto& g : list_pngs(a.gt)) {
    const auto p = fs::path(a.pred) / g.filename();
    const auto gt = dataio::read_depth(g, {0, 0}, a.max_depth);
    const auto pred = dataio::read_depth(p, {gt.height(), gt.width()}, a.max_depth);
    acc.add(pred, gt);
    ++images;
  }
  const auto m = acc.result();
  out << nlohmann::json{{"abs_rel", m.abs_rel}, {"rmse", m.rmse}, {"sq_rel", m.sq_rel},
                        {"images", images}, {"pixels", acc.pixels()}}
             .dump()
      << '\n';
  return kExitOk;
}

struct MiouArgs {
  std::string pred, gt;
  int64_t classes = 40;
};

int run_miou(const MiouArgs& a, std::ostream& out) {
  if (a.classes <= 0) throw ConfigError("eval miou: --classes must be positive");
  metrics::ConfusionMatrix conf = metrics::ConfusionMatrix::Zero(a.classes, a.classes);
  size_t images = 0;
  for (const auto& g : list_pngs(a.gt)) {
    const auto gt = dataio::read_label(g, {0, 0}, a.classes);
    metrics::PrecomputedSegmenter segmenter(a.pred, a.classes);
    const RGBImage blank(torch::zeros({3, gt.height(), gt.width()}));
    const DepthMap none(torch::full({1, gt.height(), gt.width()}, -1.0),
                        torch::zeros({gt.height(), gt.width()}, torch::kBool), 10.0);
    metrics::accumulate_confusion(conf, segmenter.segment(g.stem().string(), blank, none),
                                  gt);
    ++images;
  }
  out << nlohmann::json{{"miou", metrics::miou(conf)}, {"images", images}}.dump() << '\n';
  return kExitOk;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semantic RGB-D image synthesis: training, generation, mixing, evaluation",
               "scmis"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train the generator and discriminator");
  train->add_option("--config", train_args.config, "YAML configuration file")
      ->check(CLI::ExistingFile);
  train->add_option("--set", train_args.overrides, "Override a config key (key=value)");
  train->add_option("--resume", train_args.resume, "Resume from a checkpoint")
      ->check(CLI::ExistingFile);
  train->add_option("--dump-config", train_args.dump_config,
                    "Write the merged configuration and exit");
  train->add_option("--dump-loss-breakdown", train_args.loss_breakdown,
                    "Write per-step loss components to this CSV");

  GenerateArgs gen_args;
  auto* gen = app.add_subcommand("generate", "Generate an RGB-D pair from a label map");
  gen->add_option("--ckpt", gen_args.ckpt, "Training checkpoint")->required();
  gen->add_option("--label", gen_args.label, "Label PNG")->required();
  gen->add_option("--seed", gen_args.seed, "Noise seed");
  gen->add_option("--out", gen_args.out, "Output directory")->required();
  gen->add_flag("--raw-weights", gen_args.raw, "Use the raw instead of the EMA generator");
  gen->add_option("--dump-taps", gen_args.dump_taps,
                  "Write discriminator features of the generated image");

  MixArgs mix_args;
  auto* mix = app.add_subcommand("mix", "Mix real and generated images class-wise");
  mix->add_option("--ckpt", mix_args.ckpt, "Training checkpoint")->required();
  mix->add_option("--data", mix_args.data, "Dataset root")->required();
  mix->add_option("--split", mix_args.split, "train | val");
  mix->add_option("--ratio", mix_args.ratio, "Fraction of present classes to replace")
      ->check(CLI::Range(0.0, 1.0));
  mix->add_option("--modality", mix_args.modality, "depth | rgb | rgbd");
  mix->add_option("--out", mix_args.out, "Output root")->required();
  mix->add_option("--seed", mix_args.seed, "Selection and noise seed");

  auto* eval = app.add_subcommand("eval", "Evaluate generated data");
  eval->require_subcommand(1);
  FidArgs fid_args;
  auto* fid = eval->add_subcommand("fid", "Frechet distance between two image folders");
  fid->add_option("--real", fid_args.real, "Real images")->required();
  fid->add_option("--fake", fid_args.fake, "Generated images")->required();
  fid->add_option("--weights", fid_args.weights, "TorchScript feature extractor");
  fid->add_option("--extractor", fid_args.extractor, "torchscript | mean");
  DepthArgs depth_args;
  auto* depth = eval->add_subcommand("depth", "AbsRel, RMSE and SqRel in meters");
  depth->add_option("--pred", depth_args.pred, "Predicted depth PNGs")->required();
  depth->add_option("--gt", depth_args.gt, "Ground-truth depth PNGs")->required();
  depth->add_option("--max-depth", depth_args.max_depth, "Depth clamp in meters");
  MiouArgs miou_args;
  auto* miou = eval->add_subcommand("miou", "Mean IoU of predicted label maps");
  miou->add_option("--pred", miou_args.pred, "Predicted label PNGs")->required();
  miou->add_option("--gt", miou_args.gt, "Ground-truth label PNGs")->required();
  miou->add_option("--classes", miou_args.classes, "Number of classes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (train->parsed()) return run_train(train_args, out);
    if (gen->parsed()) return run_generate(gen_args, out);
    if (mix->parsed()) return run_mix(mix_args, out, err);
    if (fid->parsed()) return run_fid(fid_args, out);
    if (depth->parsed()) return run_depth(depth_args, out);
    if (miou->parsed()) return run_miou(miou_args, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ContractViolation& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  err << app.help();
  return kExitValidation;
}

}  // namespace scmis::cli
