#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "scmis/dataio.hpp"
#include "scmis/trainer.hpp"

namespace scmis {

enum class ValueType { kString, kInt, kDouble, kBool, kIntList, kDoubleList };

struct KeySpec {
  std::string key;  // dotted, e.g. "train.lr_g"
  ValueType type;
  nlohmann::json default_value;  // null: no default
  std::string doc;
};

/// Flat key-value configuration. Layers: schema defaults, then a YAML file,
/// then `key=value` overrides. Keys outside the schema are rejected.
class RunConfig {
 public:
  static const std::vector<KeySpec>& schema();
  static const KeySpec& spec(const std::string& key);

  RunConfig();

  void merge_yaml_file(const std::filesystem::path& path);
  void merge_yaml(const std::string& text);
  /// "key=value"; value is parsed as YAML (so lists use [a, b]).
  void set_override(const std::string& assignment);
  void set(const std::string& key, nlohmann::json value);

  bool has(const std::string& key) const;  // non-null
  const nlohmann::json& get(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int64_t> get_int_list(const std::string& key) const;
  std::vector<double> get_double_list(const std::string& key) const;

  /// Throws ConfigError naming the first listed key that has no value.
  void require(const std::vector<std::string>& keys) const;

  /// YAML document, one section per key prefix, keys in schema order.
  std::string dump_yaml() const;
  nlohmann::json to_json() const;

  bool operator==(const RunConfig& other) const { return values_ == other.values_; }

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  DataOptions data_options() const;

 private:
  std::map<std::string, nlohmann::json> values_;
};

}  // namespace scmis
