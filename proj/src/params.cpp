#include "params.hpp"

#include <cmath>
#include <cstring>

namespace tpd {

ad::Tensor ParamStore::add(const std::string& name, ad::Tensor t, const std::string& group) {
  if (index.count(name)) throw ContractError("ParamStore: duplicate parameter '" + name + "'");
  t.set_requires_grad(true);
  index[name] = items.size();
  items.push_back({name, group, t});
  return t;
}

ad::Tensor* ParamStore::find(const std::string& name) {
  auto it = index.find(name);
  return it == index.end() ? nullptr : &items[it->second].tensor;
}

const ad::Tensor* ParamStore::find(const std::string& name) const {
  auto it = index.find(name);
  return it == index.end() ? nullptr : &items[it->second].tensor;
}

void ParamStore::zero_grads() {
  for (auto& it : items) it.tensor.zero_grad();
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& it : items) n += it.tensor.numel();
  return n;
}

uint64_t ParamStore::value_checksum() const {
  uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& it : items) {
    const auto& st = it.tensor.payload()->value;
    if (st.dt == ad::Scalar::F32)
      feed(st.f32.data(), st.f32.size() * sizeof(float));
    else
      feed(st.f64.data(), st.f64.size() * sizeof(double));
  }
  return h;
}

void Adam::reset(const ParamStore& store) {
  t = 0;
  m.assign(store.items.size(), {});
  v.assign(store.items.size(), {});
  for (size_t i = 0; i < store.items.size(); ++i) {
    size_t n = size_t(store.items[i].tensor.numel());
    m[i].assign(n, 0.0);
    v[i].assign(n, 0.0);
  }
}

void Adam::step(ParamStore& store, double grad_scale) {
  if (m.size() != store.items.size()) reset(store);
  ++t;
  double bc1 = 1.0 - std::pow(beta1, double(t));
  double bc2 = 1.0 - std::pow(beta2, double(t));
  for (size_t i = 0; i < store.items.size(); ++i) {
    auto& item = store.items[i];
    ad::Payload* p = item.tensor.payload();
    if (!p->grad) continue;
    double mul = 1.0;
    auto it = group_lr_mul.find(item.group);
    if (it != group_lr_mul.end()) mul = it->second;
    if (mul == 0.0) continue;
    size_t n = size_t(item.tensor.numel());
    for (size_t j = 0; j < n; ++j) {
      double g = p->grad->get(j) * grad_scale;
      m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
      v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
      double mhat = m[i][j] / bc1;
      double vhat = v[i][j] / bc2;
      double upd = lr * mul * mhat / (std::sqrt(vhat) + eps);
      p->value.set(j, p->value.get(j) - upd);
    }
  }
}

}  // namespace tpd
