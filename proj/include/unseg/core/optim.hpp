#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "unseg/core/tape.hpp"

namespace unseg {

/// Ordered collection of the parameters one optimizer updates. Order is
/// registration order and defines the checkpoint layout.
template <typename T>
class ParamRegistry {
 public:
  void add(Param<T>& p) {
    check(p.reg_index == -1, "param already registered: " + p.name);
    p.reg_index = static_cast<int>(items_.size());
    items_.push_back(&p);
  }

  std::size_t size() const { return items_.size(); }
  Param<T>& at(std::size_t i) { return *items_[i]; }
  const Param<T>& at(std::size_t i) const { return *items_[i]; }

  std::int64_t total_elems() const {
    std::int64_t n = 0;
    for (auto* p : items_) n += p->value.numel();
    return n;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<Param<T>*> items_;
};

/// Non-owning flat list of parameters; a sink for collect() when only
/// enumeration (serialization, counting) is needed.
template <typename T>
struct ParamList {
  std::vector<Param<T>*> items;
  void add(Param<T>& p) { items.push_back(&p); }

  std::int64_t total_elems() const {
    std::int64_t n = 0;
    for (auto* p : items) n += p->value.numel();
    return n;
  }
};

/// Per-registry gradient accumulator, index-aligned with the registry.
/// Gradients for parameters belonging to other registries are ignored.
template <typename T>
struct GradBuffer {
  const ParamRegistry<T>* reg = nullptr;
  std::vector<Tensor<T>> slots;

  explicit GradBuffer(const ParamRegistry<T>& r) : reg(&r) {
    slots.reserve(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) slots.emplace_back(Tensor<T>::zeros(r.at(i).value.dims));
  }

  void accumulate_from(Tape<T>& tape, T scale_factor) {
    tape.for_each_param_grad([&](Param<T>& p, const Tensor<T>& g) {
      if (p.reg_index >= 0 && p.reg_index < static_cast<int>(slots.size()) &&
          &reg->at(static_cast<std::size_t>(p.reg_index)) == &p)
        slots[static_cast<std::size_t>(p.reg_index)].add_scaled(g, scale_factor);
    });
  }

  void add(const GradBuffer& o, T scale_factor) {
    for (std::size_t i = 0; i < slots.size(); ++i) slots[i].add_scaled(o.slots[i], scale_factor);
  }

  void zero() {
    for (auto& s : slots) s.fill(T(0));
  }
};

/// Adam with bias correction. State is index-aligned with the registry and
/// serializes alongside model parameters for exact training resume.
template <typename T>
class Adam {
 public:
  T lr = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);

  explicit Adam(const ParamRegistry<T>& reg, T learning_rate = T(1e-4)) : lr(learning_rate) {
    m_.reserve(reg.size());
    v_.reserve(reg.size());
    for (std::size_t i = 0; i < reg.size(); ++i) {
      m_.emplace_back(Tensor<T>::zeros(reg.at(i).value.dims));
      v_.emplace_back(Tensor<T>::zeros(reg.at(i).value.dims));
    }
  }

  void step(ParamRegistry<T>& reg, const GradBuffer<T>& grads) {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(t_));
    for (std::size_t i = 0; i < reg.size(); ++i) {
      Tensor<T>& w = reg.at(i).value;
      const Tensor<T>& g = grads.slots[i];
      Tensor<T>&m = m_[i], &v = v_[i];
      for (std::int64_t j = 0; j < w.numel(); ++j) {
        m[j] = beta1 * m[j] + (T(1) - beta1) * g[j];
        v[j] = beta2 * v[j] + (T(1) - beta2) * g[j] * g[j];
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  std::int64_t steps() const { return t_; }

  // Exposed for training-state serialization.
  std::vector<Tensor<T>>& moment1() { return m_; }
  std::vector<Tensor<T>>& moment2() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::int64_t t_ = 0;
};

}  // namespace unseg
