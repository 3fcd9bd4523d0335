#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace scmis::checkpoint {

// Single-file container:
//   magic "SCMISCKP" | u32 format version | u64 manifest length |
//   manifest (JSON) | raw little-endian array payload
// The manifest lists every array as {name, dtype, shape, offset, nbytes} and
// carries a FNV-1a checksum of the payload plus free-form metadata.
inline constexpr uint32_t kFormatVersion = 1;

struct NamedArray {
  std::string name;
  torch::Tensor tensor;
};

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  /// nullptr when absent.
  const NamedArray* find(const std::string& name) const;
};

std::string serialize(const Container& container);
Container deserialize(const std::string& bytes);

void write_file(const std::filesystem::path& path, const Container& container);
Container read_file(const std::filesystem::path& path);

/// Parameters then buffers of `module`, in registration order, with names
/// prefixed by `prefix + "/"`.
std::vector<NamedArray> module_arrays(const torch::nn::Module& module,
                                      const std::string& prefix);

/// Copies arrays named `prefix/<name>` into the module's parameters and
/// buffers. Names, order and shapes must match exactly; the first mismatch
/// raises a kShapeManifest error naming the array.
void load_module_arrays(torch::nn::Module& module, const Container& container,
                        const std::string& prefix);

/// Validation half of load_module_arrays; the module is not modified.
void check_module_arrays(const torch::nn::Module& module, const Container& container,
                         const std::string& prefix);

}  // namespace scmis::checkpoint
