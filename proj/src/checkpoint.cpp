#include "xraysep/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "xraysep/image_io.hpp"

namespace xraysep {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path)
      : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw DataError("cannot write " + path.string());
  }
  template <typename I>
  void scalar(I v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(I));
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void string(const std::string& s) {
    scalar(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void finish() {
    out_.flush();
    if (!out_) throw DataError("write failed: " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("cannot open " + path.string());
  }
  template <typename I>
  I scalar() {
    I v{};
    bytes(&v, sizeof(I));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw DataError("truncated checkpoint " + path_.string());
  }
  std::string string() {
    const auto n = scalar<std::uint32_t>();
    if (n > (1u << 16)) throw DataError("corrupt name in " + path_.string());
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

template <typename T>
void write_tensor(Writer& w, const Tensor<T>& t) {
  w.scalar(static_cast<std::uint8_t>(sizeof(T)));
  w.scalar(static_cast<std::uint32_t>(t.rank()));
  for (const auto d : t.shape()) w.scalar(static_cast<std::uint64_t>(d));
  w.bytes(t.raw(), t.size() * sizeof(T));
}

template <typename T>
Tensor<T> read_payload(Reader& r, std::uint32_t rank) {
  Shape shape(rank);
  for (auto& d : shape) d = r.scalar<std::uint64_t>();
  Tensor<T> t(shape);
  r.bytes(t.raw(), t.size() * sizeof(T));
  return t;
}

const Tensor<float>& as_float(const Archive& a, const std::string& name) {
  const auto* t = std::get_if<Tensor<float>>(&a.get(name));
  if (!t) throw DataError("checkpoint entry " + name + " is not float32");
  return *t;
}

void copy_into(const Archive& a, const NamedTensor<float>& slot) {
  const Tensor<float>& src = as_float(a, slot.name);
  if (src.shape() != slot.tensor->shape()) {
    throw DataError("checkpoint entry " + slot.name + " has shape " +
                    shape_to_string(src.shape()) + ", expected " +
                    shape_to_string(slot.tensor->shape()));
  }
  *slot.tensor = src;
}

}  // namespace

void Archive::set_meta(const std::string& name, std::int64_t value) {
  for (auto& [k, v] : meta) {
    if (k == name) {
      v = value;
      return;
    }
  }
  meta.emplace_back(name, value);
}

std::int64_t Archive::get_meta(const std::string& name) const {
  for (const auto& [k, v] : meta) {
    if (k == name) return v;
  }
  throw DataError("checkpoint has no metadata field " + name);
}

bool Archive::has_meta(const std::string& name) const {
  return std::any_of(meta.begin(), meta.end(),
                     [&](const auto& e) { return e.first == name; });
}

void Archive::put(const std::string& name, Entry tensor) {
  for (auto& [k, v] : tensors) {
    if (k == name) {
      v = std::move(tensor);
      return;
    }
  }
  tensors.emplace_back(name, std::move(tensor));
}

const Archive::Entry& Archive::get(const std::string& name) const {
  for (const auto& [k, v] : tensors) {
    if (k == name) return v;
  }
  throw DataError("checkpoint has no tensor " + name);
}

bool Archive::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(),
                     [&](const auto& e) { return e.first == name; });
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  Writer w(path);
  w.bytes(Archive::kMagic, sizeof(Archive::kMagic));
  w.scalar(Archive::kVersion);
  w.scalar(static_cast<std::uint32_t>(archive.meta.size()));
  for (const auto& [name, value] : archive.meta) {
    w.string(name);
    w.scalar(value);
  }
  w.scalar(static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, entry] : archive.tensors) {
    w.string(name);
    std::visit([&](const auto& t) { write_tensor(w, t); }, entry);
  }
  w.finish();
}

Archive load_archive(const std::filesystem::path& path) {
  Reader r(path);
  char magic[sizeof(Archive::kMagic)];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, Archive::kMagic, sizeof(magic)) != 0) {
    throw DataError(path.string() + " is not an xraysep checkpoint");
  }
  const auto version = r.scalar<std::uint32_t>();
  if (version != Archive::kVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " +
                    std::to_string(version));
  }
  Archive archive;
  const auto meta_count = r.scalar<std::uint32_t>();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string name = r.string();
    archive.meta.emplace_back(std::move(name), r.scalar<std::int64_t>());
  }
  const auto tensor_count = r.scalar<std::uint32_t>();
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    std::string name = r.string();
    const auto dtype = r.scalar<std::uint8_t>();
    const auto rank = r.scalar<std::uint32_t>();
    if (rank > 8) throw DataError("corrupt tensor rank in " + path.string());
    if (dtype == 4) {
      archive.tensors.emplace_back(std::move(name), read_payload<float>(r, rank));
    } else if (dtype == 8) {
      archive.tensors.emplace_back(std::move(name),
                                   read_payload<double>(r, rank));
    } else {
      throw DataError("unknown dtype in " + path.string());
    }
  }
  return archive;
}

void store_model(Archive& archive, const ModelWeights<float>& weights) {
  auto& w = const_cast<ModelWeights<float>&>(weights);
  archive.set_meta("model.width", static_cast<std::int64_t>(w.config.width));
  archive.set_meta("model.baseline_width",
                   static_cast<std::int64_t>(w.config.baseline_width));
  archive.set_meta("model.head", static_cast<std::int64_t>(w.config.head));
  archive.put("model.batch_norm",
              Tensor<double>(Shape{2}, {w.config.batch_norm.eps,
                                        w.config.batch_norm.momentum}));
  for (const auto& p : w.parameters()) archive.put(p.name, *p.tensor);
  for (const auto& b : w.buffers()) archive.put(b.name, *b.tensor);
}

namespace {

ModelConfig restore_config(const Archive& archive) {
  ModelConfig config;
  config.width = static_cast<std::size_t>(archive.get_meta("model.width"));
  config.baseline_width =
      static_cast<std::size_t>(archive.get_meta("model.baseline_width"));
  const auto head = archive.get_meta("model.head");
  if (head != static_cast<std::int64_t>(DecoderHead::bn_relu) &&
      head != static_cast<std::int64_t>(DecoderHead::linear)) {
    throw DataError("checkpoint has unknown decoder head");
  }
  config.head = static_cast<DecoderHead>(head);
  if (archive.has("model.batch_norm")) {
    const auto* bn = std::get_if<Tensor<double>>(&archive.get("model.batch_norm"));
    if (!bn || bn->size() != 2) throw DataError("corrupt batch-norm options");
    config.batch_norm = {(*bn)[0], (*bn)[1]};
  }
  return config;
}

}  // namespace

ModelWeights<float> restore_model(const Archive& archive) {
  ModelWeights<float> w = init_weights<float>(0, restore_config(archive));
  for (const auto& p : w.parameters()) copy_into(archive, p);
  for (const auto& b : w.buffers()) copy_into(archive, b);
  return w;
}

void store_baseline(Archive& archive, const BaselineModel<float>& model) {
  auto& m = const_cast<BaselineModel<float>&>(model);
  archive.set_meta("model.width", static_cast<std::int64_t>(m.config.width));
  archive.set_meta("model.baseline_width",
                   static_cast<std::int64_t>(m.config.baseline_width));
  archive.set_meta("model.head", static_cast<std::int64_t>(m.config.head));
  for (const auto& p : m.parameters()) archive.put(p.name, *p.tensor);
}

BaselineModel<float> restore_baseline(const Archive& archive) {
  BaselineModel<float> m = init_baseline<float>(0, restore_config(archive));
  for (const auto& p : m.parameters()) copy_into(archive, p);
  return m;
}

void save_model(const std::filesystem::path& path,
                const ModelWeights<float>& weights) {
  Archive archive;
  store_model(archive, weights);
  save_archive(path, archive);
}

ModelWeights<float> load_model(const std::filesystem::path& path) {
  return restore_model(load_archive(path));
}

}  // namespace xraysep
