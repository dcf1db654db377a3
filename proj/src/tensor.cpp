#include "fam/tensor.hpp"

#include <atomic>

namespace fam {
namespace memory {
namespace {

std::atomic<std::int64_t> g_live_bytes{0};
std::atomic<std::int64_t> g_allocations{0};

}  // namespace

std::int64_t live_bytes() noexcept { return g_live_bytes.load(std::memory_order_relaxed); }
std::int64_t allocation_count() noexcept { return g_allocations.load(std::memory_order_relaxed); }

void record_allocate(std::size_t bytes) noexcept {
  g_live_bytes.fetch_add(static_cast<std::int64_t>(bytes), std::memory_order_relaxed);
  g_allocations.fetch_add(1, std::memory_order_relaxed);
}

void record_free(std::size_t bytes) noexcept {
  g_live_bytes.fetch_sub(static_cast<std::int64_t>(bytes), std::memory_order_relaxed);
}

}  // namespace memory

std::size_t element_count(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace fam
