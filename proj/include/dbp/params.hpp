#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dbp/tensor.hpp"

namespace dbp {

// Named trainable leaves in registration order.
class ParamStore {
 public:
  // Registers t as a requires_grad leaf under a unique name.
  Tensor add(const std::string& name, Tensor t);
  Tensor uniform(const std::string& name, Shape shape, double bound, std::mt19937_64& rng);
  Tensor zeros(const std::string& name, Shape shape);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  void zero_grad();
  std::size_t total_numel() const;
  // FNV-1a over names, shapes and raw value bytes.
  std::uint64_t fingerprint() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr char kCheckpointMagic[4] = {'D', 'B', 'P', '1'};

// Binary DBP1 container: magic, u32 count, then per parameter
// u32 name length, name bytes, u32 rank, u64 extents, f64 row-major values.
// Writes to a sibling temp file and renames it into place.
void save_checkpoint(const ParamStore& params, const std::filesystem::path& path);

// Overwrites values of every parameter in params from path. Missing names,
// extra names or shape disagreements throw std::runtime_error.
void load_checkpoint(ParamStore& params, const std::filesystem::path& path);

}  // namespace dbp
