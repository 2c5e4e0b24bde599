#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "crpn/rng.hpp"
#include "crpn/tensor.hpp"

namespace crpn::test {

template <typename T>
void fill_uniform(Tensor4T<T>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.data) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
}

template <typename T>
void fill_uniform(OffsetFieldT<T>& o, Rng& rng, double lo, double hi) {
  for (auto& v : o.data) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
}

template <typename T>
double max_abs_diff(const Tensor4T<T>& a, const Tensor4T<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  }
  return m;
}

// max |a - f| over max(inf-norm(a), inf-norm(f)), the scale-free error used
// by every finite-difference comparison in the suite.
inline double rel_err(const std::vector<double>& a, const std::vector<double>& f) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - f[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(f[i])});
  }
  return diff / (scale + 1e-12);
}

// Central differences of a scalar function with respect to every entry of v.
inline std::vector<double> fd_grad(std::vector<double>& v,
                                   const std::function<double()>& f, double h = 1e-6) {
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    const double step = h * (1.0 + std::abs(keep));
    v[i] = keep + step;
    const double up = f();
    v[i] = keep - step;
    const double dn = f();
    v[i] = keep;
    g[i] = (up - dn) / (2.0 * step);
  }
  return g;
}

}  // namespace crpn::test
