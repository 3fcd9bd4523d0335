#include "scmis/config.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <yaml-cpp/yaml.h>

#include "scmis/errors.hpp"

namespace scmis {
namespace {

using json = nlohmann::json;

std::vector<KeySpec> build_schema() {
  return {
      {"data.root", ValueType::kString, nullptr,
       "dataset root holding rgb/, depth/, label/ (or <split>/ subfolders)"},
      {"data.split", ValueType::kString, "train", "train | val"},
      {"data.num_classes", ValueType::kInt, 40, "semantic classes N, VOID excluded"},
      {"data.max_depth_m", ValueType::kDouble, 10.0, "depth clamp in meters"},
      {"data.size", ValueType::kIntList, json::array({256, 512}), "[height, width]"},
      {"data.workers", ValueType::kInt, 0, "decoding threads; 0 decodes on the training thread"},
      {"gen.stem_channels", ValueType::kInt, 32, "encoder stem width"},
      {"gen.encoder_channels", ValueType::kInt, 64, "encoder pyramid width"},
      {"gen.decoder_channels", ValueType::kIntList,
       json::array({1024, 1024, 512, 256, 128, 64}), "decoder widths up0 .. up5"},
      {"gen.spade_hidden", ValueType::kInt, 128, "SPADE shared conv width"},
      {"gen.eps", ValueType::kDouble, 1e-5, "normalization epsilon"},
      {"gen.bn_momentum", ValueType::kDouble, 0.1, "running statistics momentum"},
      {"disc.depth", ValueType::kString, "middle", "lite | shallow | middle | deep"},
      {"disc.head", ValueType::kString, "pp", "upsample | pp | unet"},
      {"disc.input", ValueType::kString, "rgb", "rgb | rgbd"},
      {"disc.base_channels", ValueType::kInt, 64, "backbone stem width"},
      {"disc.init", ValueType::kString, "scratch", "scratch | pretrained"},
      {"disc.weights", ValueType::kString, "", "backbone weights for disc.init=pretrained"},
      {"loss.w_adv", ValueType::kDouble, 1.0, "adversarial weight"},
      {"loss.w_ap", ValueType::kDouble, 1.0, "adaptive perceptual weight"},
      {"loss.w_depth", ValueType::kDouble, 1.0, "depth L1 weight"},
      {"loss.w_lm", ValueType::kDouble, 1.0, "LabelMix consistency weight"},
      {"loss.ap_updates_disc", ValueType::kBool, false,
       "perceptual loss also trains the discriminator"},
      {"loss.class_weights", ValueType::kString, "batch", "batch | dataset"},
      {"train.lr_g", ValueType::kDouble, 1e-4, "generator learning rate"},
      {"train.lr_d", ValueType::kDouble, 2e-4, "discriminator learning rate"},
      {"train.adam_betas", ValueType::kDoubleList, json::array({0.0, 0.999}), "Adam betas"},
      {"train.ema_decay", ValueType::kDouble, 0.9999, "generator EMA decay"},
      {"train.batch_size", ValueType::kInt, 8, "samples per step"},
      {"train.max_steps", ValueType::kInt, nullptr, "number of steps (required)"},
      {"train.seed", ValueType::kInt, 0, "seed for init, noise, shuffling and mixing"},
      {"train.ckpt_every", ValueType::kInt, 1000, "checkpoint period in steps; 0 disables"},
      {"train.out_dir", ValueType::kString, "runs/scmis", "checkpoints and logs"},
      {"train.loss_log", ValueType::kString, "",
       "loss CSV; empty means <out_dir>/losses.csv"},
  };
}

const char* type_name(ValueType t) {
  switch (t) {
    case ValueType::kString: return "string";
    case ValueType::kInt: return "integer";
    case ValueType::kDouble: return "number";
    case ValueType::kBool: return "boolean";
    case ValueType::kIntList: return "list of integers";
    case ValueType::kDoubleList: return "list of numbers";
  }
  return "?";
}

json convert(const KeySpec& spec, const YAML::Node& node) {
  if (node.IsNull()) return nullptr;
  try {
    switch (spec.type) {
      case ValueType::kString:
        if (!node.IsScalar()) break;
        return node.as<std::string>();
      case ValueType::kInt:
        if (!node.IsScalar()) break;
        return node.as<int64_t>();
      case ValueType::kDouble:
        if (!node.IsScalar()) break;
        return node.as<double>();
      case ValueType::kBool:
        if (!node.IsScalar()) break;
        return node.as<bool>();
      case ValueType::kIntList:
        if (!node.IsSequence()) break;
        return node.as<std::vector<int64_t>>();
      case ValueType::kDoubleList:
        if (!node.IsSequence()) break;
        return node.as<std::vector<double>>();
    }
  } catch (const YAML::Exception&) {
  }
  throw ConfigError(fmt::format("config key {}: expected {}", spec.key, type_name(spec.type)));
}

void walk(const YAML::Node& node, const std::string& prefix,
          std::vector<std::pair<std::string, YAML::Node>>& out) {
  for (const auto& kv : node) {
    const std::string key =
        prefix.empty() ? kv.first.as<std::string>() : prefix + "." + kv.first.as<std::string>();
    if (kv.second.IsMap()) {
      walk(kv.second, key, out);
    } else {
      out.emplace_back(key, kv.second);
    }
  }
}

std::string format_double(double v) {
  std::string s = fmt::format("{}", v);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string format_scalar(const json& v) {
  if (v.is_null()) return "~";
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) return format_double(v.get<double>());
  if (v.is_number_integer()) return std::to_string(v.get<int64_t>());
  // JSON string literals are valid double-quoted YAML scalars.
  if (v.is_string()) return v.dump();
  throw ConfigError("cannot format config value " + v.dump());
}

std::string format_value(const KeySpec& spec, const json& v) {
  if (!v.is_array()) return format_scalar(v);
  std::vector<std::string> items;
  for (const auto& item : v) {
    items.push_back(spec.type == ValueType::kDoubleList ? format_double(item.get<double>())
                                                        : format_scalar(item));
  }
  return fmt::format("[{}]", fmt::join(items, ", "));
}

}  // namespace

const std::vector<KeySpec>& RunConfig::schema() {
  static const std::vector<KeySpec> kSchema = build_schema();
  return kSchema;
}

const KeySpec& RunConfig::spec(const std::string& key) {
  for (const auto& s : schema()) {
    if (s.key == key) return s;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig::RunConfig() {
  for (const auto& s : schema()) values_[s.key] = s.default_value;
}

void RunConfig::merge_yaml_file(const std::filesystem::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::BadFile&) {
    throw ConfigError("cannot read config file " + path.string());
  } catch (const YAML::Exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  if (root.IsNull()) return;
  if (!root.IsMap()) throw ConfigError(path.string() + ": expected a mapping");
  std::vector<std::pair<std::string, YAML::Node>> leaves;
  walk(root, "", leaves);
  for (const auto& [key, node] : leaves) values_[key] = convert(spec(key), node);
}

void RunConfig::merge_yaml(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (root.IsNull()) return;
  if (!root.IsMap()) throw ConfigError("config: expected a mapping");
  std::vector<std::pair<std::string, YAML::Node>> leaves;
  walk(root, "", leaves);
  for (const auto& [key, node] : leaves) values_[key] = convert(spec(key), node);
}

void RunConfig::set_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const auto& s = spec(key);
  YAML::Node node;
  try {
    node = YAML::Load(assignment.substr(eq + 1));
  } catch (const YAML::Exception&) {
    throw ConfigError(fmt::format("config key {}: expected {}", key, type_name(s.type)));
  }
  values_[key] = convert(s, node);
}

void RunConfig::set(const std::string& key, json value) {
  const auto& s = spec(key);
  values_[key] = convert(s, YAML::Load(value.is_null() ? "~" : value.dump()));
}

bool RunConfig::has(const std::string& key) const {
  spec(key);
  return !values_.at(key).is_null();
}

const json& RunConfig::get(const std::string& key) const {
  spec(key);
  const auto& v = values_.at(key);
  if (v.is_null()) throw ConfigError("missing required config key " + key);
  return v;
}

std::string RunConfig::get_string(const std::string& key) const {
  return get(key).get<std::string>();
}
int64_t RunConfig::get_int(const std::string& key) const { return get(key).get<int64_t>(); }
double RunConfig::get_double(const std::string& key) const { return get(key).get<double>(); }
bool RunConfig::get_bool(const std::string& key) const { return get(key).get<bool>(); }
std::vector<int64_t> RunConfig::get_int_list(const std::string& key) const {
  return get(key).get<std::vector<int64_t>>();
}
std::vector<double> RunConfig::get_double_list(const std::string& key) const {
  return get(key).get<std::vector<double>>();
}

void RunConfig::require(const std::vector<std::string>& keys) const {
  for (const auto& k : keys) get(k);
}

std::string RunConfig::dump_yaml() const {
  std::string out;
  std::string section;
  for (const auto& s : schema()) {
    const auto dot = s.key.find('.');
    const auto head = s.key.substr(0, dot);
    if (head != section) {
      if (!section.empty()) out += "\n";
      out += head + ":\n";
      section = head;
    }
    out += fmt::format("  {}: {}  # {}\n", s.key.substr(dot + 1),
                       format_value(s, values_.at(s.key)), s.doc);
  }
  return out;
}

json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& s : schema()) j[s.key] = values_.at(s.key);
  return j;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  const auto size = get_int_list("data.size");
  if (size.size() != 2) throw ConfigError("data.size must be [height, width]");
  const int64_t n = get_int("data.num_classes");
  auto& g = m.generator;
  g.num_classes = n;
  g.stem_channels = get_int("gen.stem_channels");
  g.encoder_channels = get_int("gen.encoder_channels");
  g.decoder_channels = get_int_list("gen.decoder_channels");
  g.spade_hidden = get_int("gen.spade_hidden");
  g.eps = get_double("gen.eps");
  g.bn_momentum = get_double("gen.bn_momentum");
  g.image_size = {size[0], size[1]};
  g.validate();
  auto& d = m.discriminator;
  d.num_classes = n;
  d.depth = parse_backbone_depth(get_string("disc.depth"));
  d.head = parse_head_kind(get_string("disc.head"));
  const auto input = get_string("disc.input");
  if (input != "rgb" && input != "rgbd") {
    throw ConfigError("disc.input must be rgb or rgbd, got '" + input + "'");
  }
  d.input_channels = input == "rgbd" ? 4 : 3;
  d.base_channels = get_int("disc.base_channels");
  if (d.base_channels <= 0 || d.base_channels % 4) {
    throw ConfigError("disc.base_channels must be a positive multiple of 4");
  }
  const auto init = get_string("disc.init");
  if (init != "scratch" && init != "pretrained") {
    throw ConfigError("disc.init must be scratch or pretrained, got '" + init + "'");
  }
  if (init == "pretrained" && get_string("disc.weights").empty()) {
    throw ConfigError("disc.init=pretrained requires disc.weights");
  }
  m.max_depth_m = get_double("data.max_depth_m");
  if (!(m.max_depth_m > 0)) throw ConfigError("data.max_depth_m must be positive");
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.lr_g = get_double("train.lr_g");
  t.lr_d = get_double("train.lr_d");
  const auto betas = get_double_list("train.adam_betas");
  if (betas.size() != 2) throw ConfigError("train.adam_betas must have two entries");
  t.beta1 = betas[0];
  t.beta2 = betas[1];
  t.ema_decay = get_double("train.ema_decay");
  t.batch_size = get_int("train.batch_size");
  t.max_steps = get_int("train.max_steps");
  t.seed = static_cast<uint64_t>(get_int("train.seed"));
  t.loss_weights = {get_double("loss.w_adv"), get_double("loss.w_ap"),
                    get_double("loss.w_depth"), get_double("loss.w_lm")};
  t.ap_updates_disc = get_bool("loss.ap_updates_disc");
  const auto mode = get_string("loss.class_weights");
  if (mode == "batch") {
    t.class_weights = ClassWeightMode::kBatch;
  } else if (mode == "dataset") {
    t.class_weights = ClassWeightMode::kDataset;
  } else {
    throw ConfigError("loss.class_weights must be batch or dataset, got '" + mode + "'");
  }
  if (get_int("train.ckpt_every") < 0) throw ConfigError("train.ckpt_every must be >= 0");
  t.validate();
  return t;
}

DataOptions RunConfig::data_options() const {
  DataOptions o;
  const auto size = get_int_list("data.size");
  if (size.size() != 2) throw ConfigError("data.size must be [height, width]");
  o.size = {size[0], size[1]};
  o.max_depth_m = get_double("data.max_depth_m");
  o.num_classes = get_int("data.num_classes");
  return o;
}

}  // namespace scmis
