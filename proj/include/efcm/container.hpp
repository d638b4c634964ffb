#pragma once

#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "efcm/tensor.hpp"

// Portable array container: a JSON manifest (named arrays with shape, dtype
// and byte offset) next to a raw little-endian blob. Used for checkpoints and
// feature stores. Files are written as <stem>.json + <stem>.bin.

namespace efcm {

class ArrayContainer {
 public:
  struct Entry {
    std::string dtype;
    std::vector<size_t> shape;
    size_t offset = 0;
    size_t nbytes = 0;
  };

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    detail::require(!name.empty(), "container: empty array name");
    detail::require(!entries_.count(name), "container: duplicate array name: " + name);
    Entry e;
    e.dtype = Tensor<T>::dtype_name();
    e.shape = t.shape();
    e.offset = blob_.size();
    e.nbytes = t.size() * sizeof(T);
    blob_.resize(e.offset + e.nbytes);
    std::memcpy(blob_.data() + e.offset, t.data(), e.nbytes);
    order_.push_back(name);
    entries_[name] = std::move(e);
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    detail::require(it != entries_.end(), "container: no such array: " + name);
    return it->second;
  }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const Entry& e = entry(name);
    detail::require(e.dtype == Tensor<T>::dtype_name(),
                    "container: dtype mismatch for " + name + " (stored " + e.dtype + ")");
    Tensor<T> t(e.shape);
    detail::require(e.offset + e.nbytes <= blob_.size(), "container: blob truncated");
    std::memcpy(t.data(), blob_.data() + e.offset, e.nbytes);
    return t;
  }

  /// Fetch with dtype conversion (f32 checkpoint into an f64 model and back).
  template <typename T>
  Tensor<T> get_as(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.dtype == Tensor<T>::dtype_name()) return get<T>(name);
    if (e.dtype == "f32") return get<float>(name).template cast<T>();
    if (e.dtype == "f64") return get<double>(name).template cast<T>();
    throw std::invalid_argument("container: unknown dtype " + e.dtype);
  }

  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  void save(const std::filesystem::path& stem) const {
    nlohmann::json manifest;
    manifest["format"] = "efcm-arrays";
    manifest["version"] = 1;
    manifest["byte_order"] = "little";
    manifest["blob"] = stem.filename().string() + ".bin";
    nlohmann::json arrays = nlohmann::json::array();
    for (const auto& name : order_) {
      const Entry& e = entries_.at(name);
      arrays.push_back({{"name", name},
                        {"dtype", e.dtype},
                        {"shape", e.shape},
                        {"offset", e.offset},
                        {"nbytes", e.nbytes}});
    }
    manifest["arrays"] = std::move(arrays);
    manifest["metadata"] = metadata_;
    std::filesystem::create_directories(stem.parent_path().empty() ? "." : stem.parent_path());
    {
      std::ofstream js(stem.string() + ".json", std::ios::trunc);
      detail::require(js.good(), "container: cannot write " + stem.string() + ".json");
      js << manifest.dump(2) << "\n";
    }
    {
      std::ofstream bs(stem.string() + ".bin", std::ios::trunc | std::ios::binary);
      detail::require(bs.good(), "container: cannot write " + stem.string() + ".bin");
      bs.write(reinterpret_cast<const char*>(blob_.data()),
               static_cast<std::streamsize>(blob_.size()));
    }
  }

  static ArrayContainer load(const std::filesystem::path& stem) {
    std::ifstream js(stem.string() + ".json");
    detail::require(js.good(), "container: cannot open " + stem.string() + ".json");
    nlohmann::json manifest = nlohmann::json::parse(js);
    detail::require(manifest.value("format", "") == "efcm-arrays",
                    "container: not an array container manifest");
    ArrayContainer c;
    std::filesystem::path blob_path = stem.parent_path() / manifest.at("blob").get<std::string>();
    std::ifstream bs(blob_path, std::ios::binary);
    detail::require(bs.good(), "container: cannot open " + blob_path.string());
    c.blob_.assign(std::istreambuf_iterator<char>(bs), std::istreambuf_iterator<char>());
    for (const auto& a : manifest.at("arrays")) {
      Entry e;
      e.dtype = a.at("dtype").get<std::string>();
      e.shape = a.at("shape").get<std::vector<size_t>>();
      e.offset = a.at("offset").get<size_t>();
      e.nbytes = a.at("nbytes").get<size_t>();
      const std::string name = a.at("name").get<std::string>();
      c.order_.push_back(name);
      c.entries_[name] = std::move(e);
    }
    if (manifest.contains("metadata")) c.metadata_ = manifest.at("metadata");
    return c;
  }

 private:
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
  std::vector<uint8_t> blob_;
  nlohmann::json metadata_;
};

}  // namespace efcm
