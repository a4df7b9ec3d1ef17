#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lengen/model.hpp"

namespace lengen {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::string_view kMagic = "LENGEN-CHECKPOINT";

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& in, const std::filesystem::path& path) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw CheckpointCorruptError("checkpoint " + path.string() + ": truncated body");
  }
  return v;
}

template <typename T>
constexpr std::string_view dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

struct Header {
  std::string dtype;
  KeyValues kv;
};

Header read_header(std::istream& in, const std::filesystem::path& path) {
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw CheckpointCorruptError("checkpoint " + path.string() + ": bad magic");
  }
  if (!std::getline(in, line) || !line.starts_with("version ")) {
    throw CheckpointCorruptError("checkpoint " + path.string() + ": missing version");
  }
  int version = 0;
  try {
    version = std::stoi(line.substr(8));
  } catch (const std::exception&) {
    throw CheckpointCorruptError("checkpoint " + path.string() + ": bad version line");
  }
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint " + path.string() + ": version " +
                                 std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  }
  Header h;
  if (!std::getline(in, line) || !line.starts_with("dtype ")) {
    throw CheckpointCorruptError("checkpoint " + path.string() + ": missing dtype");
  }
  h.dtype = line.substr(6);
  if (h.dtype != "f32" && h.dtype != "f64") {
    throw CheckpointCorruptError("checkpoint " + path.string() + ": unknown dtype " + h.dtype);
  }
  for (;;) {
    if (!std::getline(in, line)) {
      throw CheckpointCorruptError("checkpoint " + path.string() + ": truncated header");
    }
    if (line == "end") break;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw CheckpointCorruptError("checkpoint " + path.string() + ": bad header line '" +
                                   line + "'");
    }
    h.kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path,
                     const KeyValues& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << kMagic << '\n'
      << "version " << kCheckpointVersion << '\n'
      << "dtype " << dtype_name<T>() << '\n';
  for (const auto& [k, v] : model.config().to_kv()) out << k << '=' << v << '\n';
  for (const auto& [k, v] : metadata) {
    if (k.starts_with("model.")) {
      throw std::invalid_argument("checkpoint metadata may not use the model. prefix");
    }
    out << k << '=' << v << '\n';
  }
  out << "end\n";
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.shape.size()));
    for (auto dim : p.tensor.shape) put<std::uint64_t>(out, dim);
    out.write(reinterpret_cast<const char*>(p.tensor.data.data()),
              static_cast<std::streamsize>(p.tensor.size() * sizeof(T)));
  }
  if (!out) throw std::runtime_error("write failed for checkpoint " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Header h = read_header(in, path);

  KeyValues model_kv, meta;
  for (auto& [k, v] : h.kv) (k.starts_with("model.") ? model_kv : meta)[k] = v;
  ModelConfig config;
  try {
    config = ModelConfig::from_kv(model_kv);
  } catch (const std::exception& e) {
    throw CheckpointCorruptError("checkpoint " + path.string() + ": " + e.what());
  }
  if (config.vocab != vocab::kSize) {
    throw CheckpointShapeError("checkpoint " + path.string() + ": vocabulary size " +
                               std::to_string(config.vocab) + ", expected " +
                               std::to_string(vocab::kSize));
  }
  Checkpoint<T> ck{Model<T>::init(config, 0), std::move(meta)};
  auto& params = ck.model.params();

  const auto count = get<std::uint32_t>(in, path);
  if (count != params.size()) {
    throw CheckpointShapeError("checkpoint " + path.string() + ": " + std::to_string(count) +
                               " tensors, configuration implies " +
                               std::to_string(params.size()));
  }
  const bool f64 = h.dtype == "f64";
  for (auto& p : params) {
    const auto name_len = get<std::uint32_t>(in, path);
    if (name_len > 4096) throw CheckpointCorruptError("checkpoint " + path.string() + ": bad name");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) {
      throw CheckpointCorruptError("checkpoint " + path.string() + ": truncated body");
    }
    if (name != p.name) {
      throw CheckpointShapeError("checkpoint " + path.string() + ": tensor '" + name +
                                 "' where '" + p.name + "' was expected");
    }
    const auto ndim = get<std::uint32_t>(in, path);
    if (ndim > 8) throw CheckpointCorruptError("checkpoint " + path.string() + ": bad rank");
    Shape shape(ndim);
    for (auto& dim : shape) dim = get<std::uint64_t>(in, path);
    if (shape != p.tensor.shape) {
      throw CheckpointShapeError("checkpoint " + path.string() + ": tensor " + name +
                                 " has shape " + shape_str(shape) + ", expected " +
                                 shape_str(p.tensor.shape));
    }
    for (auto& v : p.tensor.data) {
      v = f64 ? static_cast<T>(get<double>(in, path)) : static_cast<T>(get<float>(in, path));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointCorruptError("checkpoint " + path.string() + ": trailing bytes");
  }
  return ck;
}

KeyValues read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Header h = read_header(in, path);
  h.kv["dtype"] = h.dtype;
  return h.kv;
}

template void save_checkpoint(const Model<float>&, const std::filesystem::path&,
                              const KeyValues&);
template void save_checkpoint(const Model<double>&, const std::filesystem::path&,
                              const KeyValues&);
template Checkpoint<float> load_checkpoint(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint(const std::filesystem::path&);

}  // namespace lengen
