#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "xraysep/adam.hpp"
#include "xraysep/losses.hpp"
#include "xraysep/model.hpp"

namespace xraysep {

/// Versioned binary container of named tensors and integer metadata.
///
/// Layout (all integers little-endian):
///   magic        8 bytes  "XRSEPCK\0"
///   version      u32      currently 1
///   meta_count   u32
///   meta entries u32 name length, name bytes, i64 value
///   tensor_count u32
///   tensors      u32 name length, name bytes,
///                u8 dtype (4 = float32, 8 = float64), u32 rank,
///                u64 dims[rank], raw IEEE-754 data in row-major order
///
/// Entries keep insertion order, so equal archives serialize to equal bytes.
struct Archive {
  static constexpr char kMagic[8] = {'X', 'R', 'S', 'E', 'P', 'C', 'K', '\0'};
  static constexpr std::uint32_t kVersion = 1;

  using Entry = std::variant<Tensor<float>, Tensor<double>>;

  std::vector<std::pair<std::string, std::int64_t>> meta;
  std::vector<std::pair<std::string, Entry>> tensors;

  void set_meta(const std::string& name, std::int64_t value);
  std::int64_t get_meta(const std::string& name) const;
  bool has_meta(const std::string& name) const;

  void put(const std::string& name, Entry tensor);
  const Entry& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

/// Model weights, BN statistics and architecture settings.
void store_model(Archive& archive, const ModelWeights<float>& weights);
ModelWeights<float> restore_model(const Archive& archive);

void store_baseline(Archive& archive, const BaselineModel<float>& model);
BaselineModel<float> restore_baseline(const Archive& archive);

void save_model(const std::filesystem::path& path,
                const ModelWeights<float>& weights);
ModelWeights<float> load_model(const std::filesystem::path& path);

}  // namespace xraysep
