#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

// Scalar kernels shared by the autodiff ops and the incremental decoder.
// Accumulation happens in double with one rounding to float per output, so
// masked-graph evaluation and physically-pruned decoding of the same sequence
// agree bitwise (a pruned entry contributes an exact 0.0 to the same sum).

namespace rlkv::detail {

inline double dot(const float* a, const float* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

// out[m,n] = a[m,k] @ b[k,n]
inline void matmul(const float* a, const float* b, float* out, int m, int k, int n) {
  std::vector<double> acc(static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) acc[static_cast<std::size_t>(j)] = 0.0;
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) acc[static_cast<std::size_t>(j)] += av * brow[j];
    }
    float* orow = out + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[static_cast<std::size_t>(j)]);
  }
}

// out[m,n] = a[m,k] @ b[n,k]^T  (rows of b are the right-hand columns)
inline void matmul_nt(const float* a, const float* b, float* out, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* orow = out + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      orow[j] = static_cast<float>(dot(arow, b + static_cast<std::size_t>(j) * k, k));
  }
}

// out[m,n] = a[k,m]^T @ b[k,n]
inline void matmul_tn(const float* a, const float* b, float* out, int m, int k, int n) {
  std::vector<double> acc(static_cast<std::size_t>(m) * n, 0.0);
  for (int p = 0; p < k; ++p) {
    const float* arow = a + static_cast<std::size_t>(p) * m;
    const float* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = arow[i];
      double* accrow = acc.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) accrow[j] += av * brow[j];
    }
  }
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m) * n; ++i)
    out[i] = static_cast<float>(acc[static_cast<std::size_t>(i)]);
}

// Softmax over one row, numerically stable. Entries at or below `floor` are
// treated as hard-masked: exp underflows to exactly 0 by construction.
inline void softmax_row(const float* x, float* out, int n) {
  float mx = x[0];
  for (int i = 1; i < n; ++i)
    if (x[i] > mx) mx = x[i];
  double sum = 0.0;
  std::vector<double> e(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double v = std::exp(static_cast<double>(x[i]) - static_cast<double>(mx));
    e[static_cast<std::size_t>(i)] = v;
    sum += v;
  }
  for (int i = 0; i < n; ++i)
    out[i] = static_cast<float>(e[static_cast<std::size_t>(i)] / sum);
}

// log(sum(exp(x))) over one row, stable
inline double logsumexp_row(const float* x, int n) {
  float mx = x[0];
  for (int i = 1; i < n; ++i)
    if (x[i] > mx) mx = x[i];
  double sum = 0.0;
  for (int i = 0; i < n; ++i)
    sum += std::exp(static_cast<double>(x[i]) - static_cast<double>(mx));
  return static_cast<double>(mx) + std::log(sum);
}

inline void layernorm_row(const float* x, const float* gain, const float* bias, float* out,
                          int n, float eps) {
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = x[i] - mean;
    var += d * d;
  }
  var /= n;
  double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
  for (int i = 0; i < n; ++i)
    out[i] = static_cast<float>((x[i] - mean) * inv * gain[i] + bias[i]);
}

inline float gelu_scalar(float x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  double xd = x;
  double inner = kC * (xd + 0.044715 * xd * xd * xd);
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(inner)));
}

inline float gelu_grad_scalar(float x) {
  constexpr double kC = 0.7978845608028654;
  double xd = x;
  double inner = kC * (xd + 0.044715 * xd * xd * xd);
  double t = std::tanh(inner);
  double di = kC * (1.0 + 3.0 * 0.044715 * xd * xd);
  return static_cast<float>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * di);
}

// In-place rotary rotation of one row (head_dim floats, consecutive pairs).
// dir=+1 applies the rotation, dir=-1 its inverse (the VJP).
inline void rope_row(float* row, const float* cos_tab, const float* sin_tab, int head_dim,
                     int dir) {
  for (int i = 0; i < head_dim / 2; ++i) {
    double c = cos_tab[i];
    double s = dir >= 0 ? sin_tab[i] : -static_cast<double>(sin_tab[i]);
    double x0 = row[2 * i];
    double x1 = row[2 * i + 1];
    row[2 * i] = static_cast<float>(x0 * c - x1 * s);
    row[2 * i + 1] = static_cast<float>(x0 * s + x1 * c);
  }
}

}  // namespace rlkv::detail
