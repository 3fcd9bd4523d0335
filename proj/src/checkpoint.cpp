#include "scmis/checkpoint.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "scmis/errors.hpp"

namespace scmis::checkpoint {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in native little-endian order");

constexpr char kMagic[8] = {'S', 'C', 'M', 'I', 'S', 'C', 'K', 'P'};

using Kind = CheckpointError::Kind;

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kInt32: return "int32";
    case torch::kUInt8: return "uint8";
    case torch::kBool: return "bool";
    default:
      throw ContractViolation(fmt::format("checkpoint: unsupported dtype {}",
                                          c10::toString(t)));
  }
}

torch::ScalarType dtype_from_name(const std::string& name) {
  if (name == "float32") return torch::kFloat32;
  if (name == "float64") return torch::kFloat64;
  if (name == "int64") return torch::kInt64;
  if (name == "int32") return torch::kInt32;
  if (name == "uint8") return torch::kUInt8;
  if (name == "bool") return torch::kBool;
  throw CheckpointError(Kind::kCorrupt, "checkpoint: unknown dtype " + name);
}

uint64_t fnv1a(const char* data, size_t n) {
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) {
    throw CheckpointError(Kind::kCorrupt, "checkpoint: truncated header");
  }
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

std::string shape_string(c10::IntArrayRef shape) {
  return fmt::format("[{}]", fmt::join(shape, ","));
}

}  // namespace

const NamedArray* Container::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

std::string serialize(const Container& container) {
  std::string payload;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& a : container.arrays) {
    auto t = a.tensor.detach().to(torch::kCPU).contiguous();
    const size_t nbytes = t.numel() * t.element_size();
    entries.push_back({{"name", a.name},
                       {"dtype", dtype_name(t.scalar_type())},
                       {"shape", t.sizes().vec()},
                       {"offset", payload.size()},
                       {"nbytes", nbytes}});
    payload.append(static_cast<const char*>(t.data_ptr()), nbytes);
  }
  nlohmann::json manifest = {{"version", kFormatVersion},
                             {"arrays", std::move(entries)},
                             {"payload_bytes", payload.size()},
                             {"payload_fnv1a", fnv1a(payload.data(), payload.size())},
                             {"meta", container.meta}};
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kFormatVersion);
  put<uint64_t>(out, text.size());
  out += text;
  out += payload;
  return out;
}

Container deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(Kind::kCorrupt, "checkpoint: bad magic");
  }
  size_t pos = sizeof(kMagic);
  const auto version = take<uint32_t>(bytes, pos);
  if (version != kFormatVersion) {
    throw CheckpointError(Kind::kVersion,
                          fmt::format("checkpoint: format version {} (expected {})",
                                      version, kFormatVersion));
  }
  const auto manifest_len = take<uint64_t>(bytes, pos);
  if (manifest_len > bytes.size() - pos) {
    throw CheckpointError(Kind::kCorrupt, "checkpoint: truncated manifest");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(pos, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kCorrupt,
                          std::string("checkpoint: unreadable manifest: ") + e.what());
  }
  pos += manifest_len;

  Container container;
  try {
    if (manifest.at("version").get<uint32_t>() != kFormatVersion) {
      throw CheckpointError(Kind::kVersion, "checkpoint: manifest version mismatch");
    }
    const auto payload_bytes = manifest.at("payload_bytes").get<size_t>();
    if (bytes.size() - pos != payload_bytes) {
      throw CheckpointError(Kind::kCorrupt,
                            fmt::format("checkpoint: payload is {} bytes, manifest says {}",
                                        bytes.size() - pos, payload_bytes));
    }
    const char* payload = bytes.data() + pos;
    if (fnv1a(payload, payload_bytes) != manifest.at("payload_fnv1a").get<uint64_t>()) {
      throw CheckpointError(Kind::kCorrupt, "checkpoint: payload checksum mismatch");
    }
    container.meta = manifest.at("meta");
    for (const auto& e : manifest.at("arrays")) {
      const auto dtype = dtype_from_name(e.at("dtype").get<std::string>());
      const auto shape = e.at("shape").get<std::vector<int64_t>>();
      const auto offset = e.at("offset").get<size_t>();
      const auto nbytes = e.at("nbytes").get<size_t>();
      auto t = torch::empty(shape, torch::TensorOptions(dtype));
      if (offset + nbytes > payload_bytes ||
          nbytes != static_cast<size_t>(t.numel() * t.element_size())) {
        throw CheckpointError(Kind::kCorrupt,
                              "checkpoint: array extent out of range for " +
                                  e.at("name").get<std::string>());
      }
      std::memcpy(t.data_ptr(), payload + offset, nbytes);
      container.arrays.push_back({e.at("name").get<std::string>(), t});
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kCorrupt,
                          std::string("checkpoint: malformed manifest: ") + e.what());
  }
  return container;
}

void write_file(const std::filesystem::path& path, const Container& container) {
  const auto bytes = serialize(container);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw CheckpointError(Kind::kIo, "checkpoint: cannot write " + path.string());
  }
}

Container read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(Kind::kIo, "checkpoint: cannot open " + path.string());
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

std::vector<NamedArray> module_arrays(const torch::nn::Module& module,
                                      const std::string& prefix) {
  std::vector<NamedArray> out;
  for (const auto& p : module.named_parameters(/*recurse=*/true)) {
    out.push_back({prefix + "/" + p.key(), p.value().detach().clone()});
  }
  for (const auto& b : module.named_buffers(/*recurse=*/true)) {
    out.push_back({prefix + "/" + b.key(), b.value().detach().clone()});
  }
  return out;
}

namespace {

using Target = std::pair<std::string, torch::Tensor>;

// Matches the module's parameters and buffers to stored arrays, throwing on
// the first mismatch.
std::vector<std::pair<torch::Tensor, const NamedArray*>> match_arrays(
    const torch::nn::Module& module, const Container& container, const std::string& prefix) {
  std::vector<Target> targets;
  for (const auto& p : module.named_parameters(true)) {
    targets.emplace_back(prefix + "/" + p.key(), p.value());
  }
  for (const auto& b : module.named_buffers(true)) {
    targets.emplace_back(prefix + "/" + b.key(), b.value());
  }

  std::vector<const NamedArray*> stored;
  for (const auto& a : container.arrays) {
    if (a.name.rfind(prefix + "/", 0) == 0) stored.push_back(&a);
  }

  std::vector<std::pair<torch::Tensor, const NamedArray*>> out;
  const size_t n = std::max(targets.size(), stored.size());
  for (size_t i = 0; i < n; ++i) {
    if (i >= stored.size()) {
      throw CheckpointError(Kind::kShapeManifest,
                            "checkpoint shape manifest: missing array " + targets[i].first);
    }
    if (i >= targets.size()) {
      throw CheckpointError(Kind::kShapeManifest,
                            "checkpoint shape manifest: unexpected array " + stored[i]->name);
    }
    const auto& [name, target] = targets[i];
    const auto& src = stored[i]->tensor;
    if (stored[i]->name != name) {
      throw CheckpointError(Kind::kShapeManifest,
                            fmt::format("checkpoint shape manifest: expected array {}, found {}",
                                        name, stored[i]->name));
    }
    if (src.sizes() != target.sizes() || src.scalar_type() != target.scalar_type()) {
      throw CheckpointError(
          Kind::kShapeManifest,
          fmt::format("checkpoint shape manifest: array {} is {} {}, model expects {} {}",
                      name, dtype_name(src.scalar_type()), shape_string(src.sizes()),
                      dtype_name(target.scalar_type()), shape_string(target.sizes())));
    }
    out.emplace_back(target, stored[i]);
  }
  return out;
}

}  // namespace

void check_module_arrays(const torch::nn::Module& module, const Container& container,
                         const std::string& prefix) {
  match_arrays(module, container, prefix);
}

void load_module_arrays(torch::nn::Module& module, const Container& container,
                        const std::string& prefix) {
  const auto matched = match_arrays(module, container, prefix);
  torch::NoGradGuard no_grad;
  for (const auto& [target, stored] : matched) {
    auto dst = target;
    dst.copy_(stored->tensor);
  }
}

}  // namespace scmis::checkpoint
