#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "cfbench/nn/autodiff.hpp"
#include "cfbench/nn/tensor.hpp"

namespace cfbench::nn {

using Json = nlohmann::ordered_json;

// Single-file checkpoint: fixed magic, JSON header (metadata + tensor table),
// then raw little-endian tensor payloads in table order.
struct Checkpoint {
  Json meta = Json::object();

  struct Entry {
    std::string name;
    std::string dtype;  // "f32" | "f64"
    Tensor<float> f32;
    Tensor<double> f64;
  };
  std::vector<Entry> entries;

  void put(const std::string& name, Tensor<float> t) {
    entries.push_back({name, "f32", std::move(t), {}});
  }
  void put(const std::string& name, Tensor<double> t) {
    entries.push_back({name, "f64", {}, std::move(t)});
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  const Tensor<float>& f32_at(const std::string& name) const;
  const Tensor<double>& f64_at(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Store / restore module parameters by their registered names.
template <typename T>
void put_params(Checkpoint& ck, const ParamList<T>& ps) {
  for (const Param<T>* p : ps) ck.put(p->name, p->value);
}

template <typename T>
void load_params(const Checkpoint& ck, const ParamList<T>& ps) {
  for (Param<T>* p : ps) {
    const Checkpoint::Entry* e = ck.find(p->name);
    if (!e) throw IoError("checkpoint is missing tensor '" + p->name + "'");
    const Tensor<T>* src = nullptr;
    if constexpr (std::is_same_v<T, float>) {
      if (e->dtype != "f32") throw IoError("tensor '" + p->name + "' has dtype " + e->dtype);
      src = &e->f32;
    } else {
      if (e->dtype != "f64") throw IoError("tensor '" + p->name + "' has dtype " + e->dtype);
      src = &e->f64;
    }
    if (!src->same_shape(p->value))
      throw IoError("tensor '" + p->name + "' shape mismatch in checkpoint");
    p->value = *src;
    p->grad = Tensor<T>(p->value.shape());
    p->m = Tensor<T>(p->value.shape());
    p->v = Tensor<T>(p->value.shape());
  }
}

}  // namespace cfbench::nn
