#pragma once

#include <unordered_map>

#include "efcm/container.hpp"
#include "efcm/tensor.hpp"

namespace efcm {

/// Named parameter set of one model. Entries keep insertion order (it is the
/// initialization-draw order, so a seed pins every weight). Buffers are
/// state that is not optimized (batch-norm running statistics).
template <typename T>
class ParamStore {
 public:
  struct Item {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
    bool buffer = false;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> value, bool trainable = true,
                 bool buffer = false) {
    detail::require(!index_.count(name), "params: duplicate name: " + name);
    index_[name] = items_.size();
    items_.push_back(Item{name, std::move(value), trainable && !buffer, buffer});
    return items_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    detail::require(it != index_.end(), "params: no such parameter: " + name);
    return items_[it->second].value;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    detail::require(it != index_.end(), "params: no such parameter: " + name);
    return items_[it->second].value;
  }

  const Item& item(const std::string& name) const { return items_[index_.at(name)]; }
  std::vector<Item>& items() { return items_; }
  const std::vector<Item>& items() const { return items_; }

  bool trainable(const std::string& name) const { return items_[index_.at(name)].trainable; }

  void set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& it : items_)
      if (!it.buffer && it.name.rfind(prefix, 0) == 0) it.trainable = trainable;
  }

  /// Parameter count; buffers are excluded, frozen parameters are included.
  size_t total_params() const {
    size_t n = 0;
    for (const auto& it : items_)
      if (!it.buffer) n += it.value.size();
    return n;
  }

  uint64_t hash(const std::string& name) const {
    return items_[index_.at(name)].value.content_hash();
  }

  /// Per-parameter content hashes, used by the strategy freezing audits.
  std::unordered_map<std::string, uint64_t> hash_all() const {
    std::unordered_map<std::string, uint64_t> h;
    for (const auto& it : items_) h[it.name] = it.value.content_hash();
    return h;
  }

  void to_container(ArrayContainer& c, const std::string& prefix = "") const {
    nlohmann::json flags;
    for (const auto& it : items_) {
      c.put(prefix + it.name, it.value);
      flags[it.name] = {{"trainable", it.trainable}, {"buffer", it.buffer}};
    }
    c.metadata()[prefix.empty() ? "params" : prefix + "params"] = std::move(flags);
  }

  static ParamStore from_container(const ArrayContainer& c, const std::string& prefix = "") {
    ParamStore ps;
    const auto& flags = c.metadata().at(prefix.empty() ? "params" : prefix + "params");
    for (const auto& name : c.names()) {
      if (!name.empty() && name.rfind(prefix, 0) == 0) {
        const std::string local = name.substr(prefix.size());
        if (!flags.contains(local)) continue;
        bool trainable = flags.at(local).value("trainable", true);
        bool buffer = flags.at(local).value("buffer", false);
        ps.add(local, c.get_as<T>(name), trainable, buffer);
        ps.items_.back().trainable = trainable;  // add() masks trainable for buffers
      }
    }
    return ps;
  }

  /// Overwrite values from another store (shape-checked), e.g. loading a
  /// checkpoint into a freshly initialized model.
  void load_values(const ParamStore& other) {
    for (auto& it : items_) {
      detail::require(other.has(it.name), "params: checkpoint missing " + it.name);
      const Tensor<T>& v = other.at(it.name);
      detail::require(v.same_shape(it.value), "params: shape mismatch for " + it.name);
      it.value = v;
    }
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& it : items_) {
      out.add(it.name, it.value.template cast<U>(), it.trainable, it.buffer);
      out.items().back().trainable = it.trainable;
    }
    return out;
  }

 private:
  std::vector<Item> items_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace efcm
