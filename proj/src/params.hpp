#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "tensor.hpp"

namespace tpd {

// Named trainable tensors in fixed registration order (checkpoints and the
// optimizer both iterate this order, keeping runs bit-reproducible).
struct ParamStore {
  struct Item {
    std::string name;
    std::string group;
    ad::Tensor tensor;
  };
  std::vector<Item> items;
  std::unordered_map<std::string, size_t> index;

  ad::Tensor add(const std::string& name, ad::Tensor t, const std::string& group = "main");
  ad::Tensor* find(const std::string& name);
  const ad::Tensor* find(const std::string& name) const;
  void zero_grads();
  int64_t total_elements() const;
  // FNV-1a over the exact value bytes of every parameter, in order.
  uint64_t value_checksum() const;
};

struct Adam {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::unordered_map<std::string, double> group_lr_mul;
  int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  void reset(const ParamStore& store);
  // One update from the accumulated grads (scaled by grad_scale); parameters
  // without grads are skipped. Does not clear grads.
  void step(ParamStore& store, double grad_scale = 1.0);
};

}  // namespace tpd
