#include "indiclm/lm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "indiclm/common/error.hpp"

namespace indiclm::lm {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'P', 'L', 'M', 'F'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <typename T>
  T get(const char* what) {
    T v;
    read(&v, sizeof(T), what);
    return v;
  }
  void read(void* p, std::size_t n, const char* what) {
    if (n > in_.size() - pos_) throw FormatError(fmt::format("checkpoint truncated while reading {}", what));
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t TensorRecord::numel() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

const TensorRecord* CheckpointFile::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string encode_checkpoint(const CheckpointFile& file) {
  bool mixed = false;
  for (const auto& t : file.tensors) mixed |= t.precision != Precision::f32;
  const std::uint32_t version = mixed ? kCheckpointVersionMixed : kCheckpointVersionF32;
  Writer w;
  w.bytes(kMagic, 4);
  w.put(version);
  const std::string meta = file.meta.dump();
  w.put(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());
  w.put(static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    if (t.name.size() > 0xFFFF || t.dims.size() > 0xFF) throw std::invalid_argument("tensor name or rank too large");
    w.put(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.put(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.put(static_cast<std::uint64_t>(d));
    if (version >= kCheckpointVersionMixed) w.put(static_cast<std::uint8_t>(t.precision));
    const std::uint64_t n = t.numel();
    if (t.precision == Precision::f32) {
      if (t.f32.size() != n) throw std::invalid_argument(fmt::format("tensor {} payload size mismatch", t.name));
      w.bytes(t.f32.data(), n * sizeof(float));
    } else {
      const std::uint64_t rows = t.dims.empty() ? 1 : t.dims[0];
      if (t.i8.size() != n || t.scales.size() != rows)
        throw std::invalid_argument(fmt::format("tensor {} payload size mismatch", t.name));
      w.bytes(t.i8.data(), n);
      w.bytes(t.scales.data(), rows * sizeof(float));
    }
  }
  return w.take();
}

CheckpointFile decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a model checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersionF32 && version != kCheckpointVersionMixed)
    throw FormatError(fmt::format("unsupported checkpoint version {}", version));
  CheckpointFile file;
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  std::string meta(meta_len, '\0');
  r.read(meta.data(), meta_len, "metadata");
  try {
    file.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad checkpoint metadata: {}", e.what()));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    t.name.resize(name_len);
    r.read(t.name.data(), name_len, "tensor name");
    const auto ndims = r.get<std::uint8_t>("tensor rank");
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < ndims; ++k) {
      t.dims.push_back(r.get<std::uint64_t>("tensor dims"));
      if (t.dims.back() != 0 && n > (std::uint64_t{1} << 40) / t.dims.back())
        throw FormatError(fmt::format("tensor {} is implausibly large", t.name));
      n *= t.dims.back();
    }
    if (version >= kCheckpointVersionMixed) {
      const auto p = r.get<std::uint8_t>("tensor precision");
      if (p > 1) throw FormatError(fmt::format("tensor {} has unknown precision tag {}", t.name, p));
      t.precision = static_cast<Precision>(p);
    }
    if (n > bytes.size()) throw FormatError(fmt::format("checkpoint truncated inside tensor {}", t.name));
    if (t.precision == Precision::f32) {
      t.f32.resize(n);
      r.read(t.f32.data(), n * sizeof(float), t.name.c_str());
    } else {
      const std::uint64_t rows = t.dims.empty() ? 1 : t.dims[0];
      t.i8.resize(n);
      r.read(t.i8.data(), n, t.name.c_str());
      t.scales.resize(rows);
      r.read(t.scales.data(), rows * sizeof(float), t.name.c_str());
    }
    file.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor");
  return file;
}

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
  const std::string bytes = encode_checkpoint(file);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error(fmt::format("short write to {}", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

CheckpointFile to_checkpoint(const Parameters& params) {
  CheckpointFile file;
  file.meta["config"] = params.config.to_json();
  for (const auto& t : params.tensors) {
    TensorRecord r;
    r.name = t.name;
    r.dims.assign(t.shape.begin(), t.shape.end());
    r.f32 = t.data;
    file.tensors.push_back(std::move(r));
  }
  return file;
}

Parameters parameters_from_checkpoint(const CheckpointFile& file) {
  if (!file.meta.contains("config")) throw FormatError("checkpoint has no model config");
  ModelConfig config;
  try {
    config = ModelConfig::from_json(file.meta.at("config"));
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(fmt::format("bad model config in checkpoint: {}", e.what()));
  }
  Parameters p = allocate_parameters<float>(config);
  for (auto& t : p.tensors) {
    const TensorRecord* r = file.find(t.name);
    if (!r) throw FormatError(fmt::format("checkpoint is missing tensor {}", t.name));
    if (!std::equal(r->dims.begin(), r->dims.end(), t.shape.begin(), t.shape.end()))
      throw FormatError(fmt::format("tensor {} has shape [{}], expected [{}]", t.name, fmt::join(r->dims, ","),
                                    fmt::join(t.shape, ",")));
    if (r->precision != Precision::f32)
      throw FormatError(fmt::format("tensor {} is quantized; load it as a quantized model", t.name));
    t.data = r->f32;
  }
  return p;
}

void save_model(const std::filesystem::path& path, const Parameters& params) {
  write_checkpoint_file(path, to_checkpoint(params));
}

Parameters load_model(const std::filesystem::path& path) { return parameters_from_checkpoint(read_checkpoint_file(path)); }

}  // namespace indiclm::lm
