#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

#include "unseg/core/optim.hpp"

namespace unseg {

/// Run fn(i) for i in [0, n) across `workers` threads. Work is claimed from a
/// shared counter; each index is processed exactly once.
inline void parallel_for(std::int64_t n, int workers, const std::function<void(std::int64_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::int64_t i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  const int k = static_cast<int>(std::min<std::int64_t>(workers, n));
  pool.reserve(static_cast<std::size_t>(k));
  for (int t = 0; t < k; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

/// One optimizer step's worth of gradients for a batch. Per-sample losses and
/// gradients are computed in parallel, then reduced in sample order, so the
/// result is bit-identical regardless of the worker count.
///
/// `forward` builds the per-sample graph and returns the scalar loss var.
template <typename T>
struct BatchResult {
  T mean_loss = 0;
  GradBuffer<T> grads;
  explicit BatchResult(const ParamRegistry<T>& reg) : grads(reg) {}
};

template <typename T, typename Forward>
BatchResult<T> batch_grads(ParamRegistry<T>& reg, const std::vector<std::int64_t>& samples, int workers,
                           Forward&& forward) {
  const std::int64_t b = static_cast<std::int64_t>(samples.size());
  std::vector<GradBuffer<T>> per_sample(static_cast<std::size_t>(b), GradBuffer<T>(reg));
  std::vector<T> losses(static_cast<std::size_t>(b), T(0));

  parallel_for(b, workers, [&](std::int64_t i) {
    Tape<T> tape;
    Var<T> loss = forward(tape, samples[static_cast<std::size_t>(i)]);
    losses[static_cast<std::size_t>(i)] = tape.value(loss)[0];
    tape.backward(loss);
    per_sample[static_cast<std::size_t>(i)].accumulate_from(tape, T(1));
  });

  BatchResult<T> out(reg);
  const T inv_b = T(1) / static_cast<T>(b);
  T loss_sum = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    loss_sum += losses[static_cast<std::size_t>(i)];
    out.grads.add(per_sample[static_cast<std::size_t>(i)], inv_b);
  }
  out.mean_loss = loss_sum * inv_b;
  return out;
}

}  // namespace unseg
