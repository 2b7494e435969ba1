#include "dbp/params.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dbp {

Tensor ParamStore::add(const std::string& name, Tensor t) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  t.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::uniform(const std::string& name, Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return add(name, Tensor::from(std::move(shape), std::move(v)));
}

Tensor ParamStore::zeros(const std::string& name, Shape shape) { return add(name, Tensor::zeros(std::move(shape))); }

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return entries_[it->second].second;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

std::size_t ParamStore::total_numel() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

std::uint64_t ParamStore::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : entries_) {
    mix(name.data(), name.size());
    for (std::size_t d : t.shape()) mix(&d, sizeof d);
    mix(t.data().data(), t.numel() * sizeof(double));
  }
  return h;
}

namespace {

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get_raw(std::ifstream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error("checkpoint " + path.string() + ": truncated");
  }
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const std::filesystem::path& path) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp.string() + " for writing");
    os.write(kCheckpointMagic, 4);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params.entries()) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void load_checkpoint(ParamStore& params, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("checkpoint " + path.string() + ": bad magic (expected DBP1)");
  }
  const auto count = get_raw<std::uint32_t>(is, path);
  if (count != params.size()) {
    throw std::runtime_error("checkpoint " + path.string() + ": holds " + std::to_string(count) +
                             " parameters, model expects " + std::to_string(params.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_raw<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("checkpoint " + path.string() + ": truncated");
    const auto rank = get_raw<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get_raw<std::uint64_t>(is, path));
    if (!params.contains(name)) {
      throw std::runtime_error("checkpoint " + path.string() + ": unknown parameter '" + name + "'");
    }
    Tensor t = params.get(name);
    if (t.shape() != shape) {
      throw std::runtime_error("checkpoint " + path.string() + ": parameter '" + name + "' has shape " +
                               shape_str(shape) + ", model expects " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    if (!is.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)))) {
      throw std::runtime_error("checkpoint " + path.string() + ": truncated data for '" + name + "'");
    }
  }
}

}  // namespace dbp
