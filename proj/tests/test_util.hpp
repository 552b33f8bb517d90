#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "prw/autodiff.hpp"
#include "prw/rng.hpp"
#include "prw/tensor.hpp"

namespace prw::testing {

inline Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
  Tensor t({rows, cols});
  for (auto& v : t.data) v = stddev * standard_normal(rng);
  return t;
}

// Plain triple-loop product used as an oracle for the Eigen-backed matmul.
inline Tensor loop_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

// Multi-head scaled dot-product attention with explicit loops; head h uses
// columns [h*dh, (h+1)*dh).
inline Tensor loop_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const std::size_t Lq = q.rows(), Lk = k.rows(), d = q.cols(), dh = d / heads;
  Tensor out({Lq, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < Lq; ++i) {
      std::vector<double> s(Lk);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < Lk; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q.at(i, h * dh + c) * k.at(j, h * dh + c);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) acc += s[j] / z * v.at(j, h * dh + c);
        out.at(i, h * dh + c) = acc;
      }
    }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

// Fresh scratch directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("prw_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace prw::testing
