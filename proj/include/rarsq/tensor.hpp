#pragma once
// Dense double tensor used for parameters and data batches. Row-major.

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "rarsq/rng.hpp"

namespace rarsq {

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> v;  // values; size always equals numel()
  std::vector<double> g;  // gradient; empty until first accumulation

  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shp, double fill = 0.0)
      : shape(std::move(shp)) {
    v.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor randn(std::vector<std::int64_t> shp, Rng& rng, double scale) {
    Tensor t(std::move(shp));
    for (auto& x : t.v) x = rng.normal() * scale;
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }

  std::int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::int64_t cols() const {
    return shape.size() < 2 ? 1 : numel() / shape[0];
  }

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), 0.0);
  }

  void zero_grad() {
    if (!g.empty()) std::fill(g.begin(), g.end(), 0.0);
  }
};

}  // namespace rarsq
