#include "bdlab/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

namespace bdlab::kernels {

namespace {

constexpr int kRowBlock = 6;
constexpr int kDepthBlock = 256;

template <class T>
constexpr int col_block() {
  return 128 / static_cast<int>(sizeof(T));  // 32 floats or 16 doubles
}

// Accumulates a ROWS x COLS tile of A*B into registers, then stores it in C.
template <class T, int ROWS, int COLS>
inline void tile(int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool accumulate) {
  T acc[ROWS][COLS];
  for (int i = 0; i < ROWS; ++i) {
    for (int j = 0; j < COLS; ++j) {
      acc[i][j] = accumulate ? C[i * ldc + j] : T(0);
    }
  }
  for (int k = 0; k < K; ++k) {
    const T* b = B + static_cast<std::size_t>(k) * ldb;
    for (int i = 0; i < ROWS; ++i) {
      const T a = A[static_cast<std::size_t>(i) * lda + k];
#pragma omp simd
      for (int j = 0; j < COLS; ++j) {
        acc[i][j] += a * b[j];
      }
    }
  }
  for (int i = 0; i < ROWS; ++i) {
    for (int j = 0; j < COLS; ++j) {
      C[i * ldc + j] = acc[i][j];
    }
  }
}

// One horizontal strip of ROWS rows across all N columns.
template <class T, int ROWS>
void strip(int N, int K, const T* A, int lda, const T* B, T* C, bool accumulate) {
  constexpr int NB = col_block<T>();
  constexpr int NH = NB / 2;
  int j = 0;
  for (; j + NB <= N; j += NB) {
    tile<T, ROWS, NB>(K, A, lda, B + j, N, C + j, N, accumulate);
  }
  for (; j + NH <= N; j += NH) {
    tile<T, ROWS, NH>(K, A, lda, B + j, N, C + j, N, accumulate);
  }
  for (; j < N; ++j) {
    tile<T, ROWS, 1>(K, A, lda, B + j, N, C + j, N, accumulate);
  }
}

template <class T>
void strip_dispatch(int rows, int N, int K, const T* A, int lda, const T* B, T* C,
                    bool accumulate) {
  switch (rows) {
    case 6: strip<T, 6>(N, K, A, lda, B, C, accumulate); break;
    case 5: strip<T, 5>(N, K, A, lda, B, C, accumulate); break;
    case 4: strip<T, 4>(N, K, A, lda, B, C, accumulate); break;
    case 3: strip<T, 3>(N, K, A, lda, B, C, accumulate); break;
    case 2: strip<T, 2>(N, K, A, lda, B, C, accumulate); break;
    case 1: strip<T, 1>(N, K, A, lda, B, C, accumulate); break;
    default: break;
  }
}

template <class T>
void transpose(int rows, int cols, const T* src, T* dst) {
  constexpr int B = 32;
#pragma omp parallel for schedule(static)
  for (int r0 = 0; r0 < rows; r0 += B) {
    const int r1 = std::min(rows, r0 + B);
    for (int c0 = 0; c0 < cols; c0 += B) {
      const int c1 = std::min(cols, c0 + B);
      for (int r = r0; r < r1; ++r) {
        for (int c = c0; c < c1; ++c) {
          dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
        }
      }
    }
  }
}

template <class T>
std::vector<T>& scratch() {
  thread_local std::vector<T> buffer;
  return buffer;
}

// libm's expf/tanhf do not vectorize; this exp does (Cody-Waite reduction and
// the Cephes degree-6 polynomial, within a few ulp over the clamped range).
inline float exp_approx(float x) {
  x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
  const float n = __builtin_floorf(x * 1.44269504088896341f + 0.5f);
  float r = x - n * 0.693359375f;
  r = r + n * 2.12194440e-4f;
  float y = 1.9875691500e-4f;
  y = y * r + 1.3981999507e-3f;
  y = y * r + 8.3334519073e-3f;
  y = y * r + 4.1665795894e-2f;
  y = y * r + 1.6666665459e-1f;
  y = y * r + 5.0000001201e-1f;
  y = y * r * r + r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
  return y * std::bit_cast<float>(bits);
}

inline float fast_exp(float x) { return exp_approx(x); }
inline double fast_exp(double x) { return std::exp(x); }

inline float fast_tanh(float u) { return 1.0f - 2.0f / (exp_approx(2.0f * u) + 1.0f); }
inline double fast_tanh(double u) { return std::tanh(u); }

template <class T>
inline T gelu_value(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return T(0.5) * x * (T(1) + fast_tanh(k * (x + c * x * x * x)));
}

template <class T>
inline T gelu_slope(T x) {
  constexpr T k = T(0.7978845608028654);
  constexpr T c = T(0.044715);
  const T u = k * (x + c * x * x * x);
  const T t = fast_tanh(u);
  const T du = k * (T(1) + T(3) * c * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

constexpr std::size_t kChunk = 4096;

template <class T>
void gelu_chunk(std::size_t n, const T* __restrict x, T* __restrict y) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = gelu_value(x[i]);
  }
}

template <class T>
void gelu_slope_chunk(std::size_t n, const T* __restrict x, const T* __restrict dy,
                      T* __restrict dx) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) {
    dx[i] = dy[i] * gelu_slope(x[i]);
  }
}

std::vector<std::size_t> prob_offsets(std::span<const RowSpan> seqs, int n_heads) {
  std::vector<std::size_t> offsets(seqs.size() + 1, 0);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto L = static_cast<std::size_t>(seqs[s].length);
    offsets[s + 1] = offsets[s] + static_cast<std::size_t>(n_heads) * L * L;
  }
  return offsets;
}

}  // namespace

std::size_t attention_prob_size(std::span<const RowSpan> seqs, int n_heads) {
  return prob_offsets(seqs, n_heads).back();
}

template <class T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  if (M <= 0 || N <= 0) {
    return;
  }
  if (K <= 0) {
    if (!accumulate) {
      std::fill(C, C + static_cast<std::size_t>(M) * N, T(0));
    }
    return;
  }
  // K is cut into panels so the slice of B being streamed stays cache resident.
  const int blocks = (M + kRowBlock - 1) / kRowBlock;
  for (int k0 = 0; k0 < K; k0 += kDepthBlock) {
    const int kc = std::min(kDepthBlock, K - k0);
    const bool acc = accumulate || k0 > 0;
    const T* Bk = B + static_cast<std::size_t>(k0) * N;
#pragma omp parallel for schedule(static)
    for (int blk = 0; blk < blocks; ++blk) {
      const int i0 = blk * kRowBlock;
      const int rows = std::min(kRowBlock, M - i0);
      strip_dispatch<T>(rows, N, kc, A + static_cast<std::size_t>(i0) * K + k0, K, Bk,
                        C + static_cast<std::size_t>(i0) * N, acc);
    }
  }
}

template <class T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  auto& bt = scratch<T>();
  bt.resize(static_cast<std::size_t>(K) * N);
  transpose(N, K, B, bt.data());
  gemm_nn(M, N, K, A, bt.data(), C, accumulate);
}

template <class T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  auto& at = scratch<T>();
  at.resize(static_cast<std::size_t>(M) * K);
  transpose(K, M, A, at.data());
  gemm_nn(M, N, K, at.data(), B, C, accumulate);
}

template <class T>
void add_row_bias(int M, int N, const T* bias, T* Y) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    T* y = Y + static_cast<std::size_t>(i) * N;
#pragma omp simd
    for (int j = 0; j < N; ++j) {
      y[j] += bias[j];
    }
  }
}

template <class T>
void accumulate_column_sums(int M, int N, const T* dY, T* db) {
  constexpr int CB = 16;
  const int chunks = (N + CB - 1) / CB;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < chunks; ++c) {
    const int j0 = c * CB;
    const int j1 = std::min(N, j0 + CB);
    T acc[CB] = {};
    for (int i = 0; i < M; ++i) {
      const T* row = dY + static_cast<std::size_t>(i) * N;
      for (int j = j0; j < j1; ++j) {
        acc[j - j0] += row[j];
      }
    }
    for (int j = j0; j < j1; ++j) {
      db[j] += acc[j - j0];
    }
  }
}

template <class T>
void layernorm_forward(int M, int N, const T* x, const T* gain, const T* shift, T* y, T* mean,
                       T* rstd) {
  constexpr T eps = T(1e-5);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    const T* xi = x + static_cast<std::size_t>(i) * N;
    T* yi = y + static_cast<std::size_t>(i) * N;
    T m = 0;
    for (int j = 0; j < N; ++j) {
      m += xi[j];
    }
    m /= T(N);
    T v = 0;
    for (int j = 0; j < N; ++j) {
      const T d = xi[j] - m;
      v += d * d;
    }
    v /= T(N);
    const T s = T(1) / std::sqrt(v + eps);
    for (int j = 0; j < N; ++j) {
      yi[j] = (xi[j] - m) * s * gain[j] + shift[j];
    }
    mean[i] = m;
    rstd[i] = s;
  }
}

template <class T>
void layernorm_backward(int M, int N, const T* dy, const T* x, const T* gain, const T* mean,
                        const T* rstd, T* dx, T* dgain, T* dshift) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    const T* xi = x + static_cast<std::size_t>(i) * N;
    const T* dyi = dy + static_cast<std::size_t>(i) * N;
    T* dxi = dx + static_cast<std::size_t>(i) * N;
    const T m = mean[i];
    const T s = rstd[i];
    T sum_g = 0;
    T sum_gx = 0;
    for (int j = 0; j < N; ++j) {
      const T g = dyi[j] * gain[j];
      sum_g += g;
      sum_gx += g * (xi[j] - m) * s;
    }
    sum_g /= T(N);
    sum_gx /= T(N);
    for (int j = 0; j < N; ++j) {
      const T xhat = (xi[j] - m) * s;
      dxi[j] += s * (dyi[j] * gain[j] - sum_g - xhat * sum_gx);
    }
  }
  if (dgain == nullptr && dshift == nullptr) {
    return;
  }
  constexpr int CB = 16;
  const int chunks = (N + CB - 1) / CB;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < chunks; ++c) {
    const int j0 = c * CB;
    const int j1 = std::min(N, j0 + CB);
    T ag[CB] = {};
    T as[CB] = {};
    for (int i = 0; i < M; ++i) {
      const T* xi = x + static_cast<std::size_t>(i) * N;
      const T* dyi = dy + static_cast<std::size_t>(i) * N;
      for (int j = j0; j < j1; ++j) {
        ag[j - j0] += dyi[j] * (xi[j] - mean[i]) * rstd[i];
        as[j - j0] += dyi[j];
      }
    }
    for (int j = j0; j < j1; ++j) {
      if (dgain != nullptr) {
        dgain[j] += ag[j - j0];
      }
      if (dshift != nullptr) {
        dshift[j] += as[j - j0];
      }
    }
  }
}

template <class T>
void gelu_forward(std::size_t n, const T* x, T* y) {
  const auto chunks = static_cast<std::ptrdiff_t>((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::size_t lo = static_cast<std::size_t>(c) * kChunk;
    gelu_chunk(std::min(kChunk, n - lo), x + lo, y + lo);
  }
}

template <class T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  const auto chunks = static_cast<std::ptrdiff_t>((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::size_t lo = static_cast<std::size_t>(c) * kChunk;
    gelu_slope_chunk(std::min(kChunk, n - lo), x + lo, dy + lo, dx + lo);
  }
}

template <class T>
void log_softmax_rows(int M, int N, const T* logits, T* out) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < M; ++i) {
    const T* z = logits + static_cast<std::size_t>(i) * N;
    T* o = out + static_cast<std::size_t>(i) * N;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < N; ++j) {
      mx = std::max(mx, z[j]);
    }
    T sum = 0;
#pragma omp simd reduction(+ : sum)
    for (int j = 0; j < N; ++j) {
      sum += fast_exp(z[j] - mx);
    }
    const T lse = mx + std::log(sum);
    for (int j = 0; j < N; ++j) {
      o[j] = z[j] - lse;
    }
  }
}

template <class T>
void causal_attention_forward(std::span<const RowSpan> seqs, int n_heads, int head_dim,
                              const T* qkv, T* probs, T* out) {
  const auto offsets = prob_offsets(seqs, n_heads);
  const int C = n_heads * head_dim;
  const int stride = 3 * C;
  const T scale = T(1) / std::sqrt(T(head_dim));
  const int jobs = static_cast<int>(seqs.size()) * n_heads;
#pragma omp parallel for schedule(dynamic, 1)
  for (int job = 0; job < jobs; ++job) {
    const int s = job / n_heads;
    const int h = job % n_heads;
    const int L = seqs[s].length;
    const int base = seqs[s].offset;
    T* P = probs + offsets[s] + static_cast<std::size_t>(h) * L * L;
    for (int i = 0; i < L; ++i) {
      const T* q = qkv + static_cast<std::size_t>(base + i) * stride + h * head_dim;
      T* p = P + static_cast<std::size_t>(i) * L;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j <= i; ++j) {
        const T* k = qkv + static_cast<std::size_t>(base + j) * stride + C + h * head_dim;
        T dot = 0;
#pragma omp simd reduction(+ : dot)
        for (int d = 0; d < head_dim; ++d) {
          dot += q[d] * k[d];
        }
        p[j] = dot * scale;
        mx = std::max(mx, p[j]);
      }
      T sum = 0;
#pragma omp simd reduction(+ : sum)
      for (int j = 0; j <= i; ++j) {
        p[j] = fast_exp(p[j] - mx);
        sum += p[j];
      }
      const T inv = T(1) / sum;
      for (int j = 0; j <= i; ++j) {
        p[j] *= inv;
      }
      for (int j = i + 1; j < L; ++j) {
        p[j] = 0;
      }
      T* o = out + static_cast<std::size_t>(base + i) * C + h * head_dim;
      for (int d = 0; d < head_dim; ++d) {
        o[d] = 0;
      }
      for (int j = 0; j <= i; ++j) {
        const T* v = qkv + static_cast<std::size_t>(base + j) * stride + 2 * C + h * head_dim;
        const T pj = p[j];
#pragma omp simd
        for (int d = 0; d < head_dim; ++d) {
          o[d] += pj * v[d];
        }
      }
    }
  }
}

template <class T>
void causal_attention_backward(std::span<const RowSpan> seqs, int n_heads, int head_dim,
                               const T* qkv, const T* probs, const T* dout, T* dqkv) {
  const auto offsets = prob_offsets(seqs, n_heads);
  const int C = n_heads * head_dim;
  const int stride = 3 * C;
  const T scale = T(1) / std::sqrt(T(head_dim));
  const int jobs = static_cast<int>(seqs.size()) * n_heads;
#pragma omp parallel for schedule(dynamic, 1)
  for (int job = 0; job < jobs; ++job) {
    const int s = job / n_heads;
    const int h = job % n_heads;
    const int L = seqs[s].length;
    const int base = seqs[s].offset;
    const T* P = probs + offsets[s] + static_cast<std::size_t>(h) * L * L;
    auto row = [&](int r) { return static_cast<std::size_t>(base + r) * stride; };
    for (int i = 0; i < L; ++i) {
      for (int part = 0; part < 3; ++part) {
        T* d = dqkv + row(i) + part * C + h * head_dim;
        std::fill(d, d + head_dim, T(0));
      }
    }
    std::vector<T> dS(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
      const T* p = P + static_cast<std::size_t>(i) * L;
      const T* go = dout + static_cast<std::size_t>(base + i) * C + h * head_dim;
      T weighted = 0;
      for (int j = 0; j <= i; ++j) {
        const T* v = qkv + row(j) + 2 * C + h * head_dim;
        T dp = 0;
#pragma omp simd reduction(+ : dp)
        for (int d = 0; d < head_dim; ++d) {
          dp += go[d] * v[d];
        }
        dS[j] = dp;
        weighted += p[j] * dp;
        T* dv = dqkv + row(j) + 2 * C + h * head_dim;
        const T pj = p[j];
#pragma omp simd
        for (int d = 0; d < head_dim; ++d) {
          dv[d] += pj * go[d];
        }
      }
      const T* q = qkv + row(i) + h * head_dim;
      T* dq = dqkv + row(i) + h * head_dim;
      for (int j = 0; j <= i; ++j) {
        const T ds = p[j] * (dS[j] - weighted) * scale;
        const T* k = qkv + row(j) + C + h * head_dim;
        T* dk = dqkv + row(j) + C + h * head_dim;
#pragma omp simd
        for (int d = 0; d < head_dim; ++d) {
          dq[d] += ds * k[d];
          dk[d] += ds * q[d];
        }
      }
    }
  }
}

#define BDLAB_INSTANTIATE(T)                                                                     \
  template void gemm_nn<T>(int, int, int, const T*, const T*, T*, bool);                         \
  template void gemm_nt<T>(int, int, int, const T*, const T*, T*, bool);                         \
  template void gemm_tn<T>(int, int, int, const T*, const T*, T*, bool);                         \
  template void add_row_bias<T>(int, int, const T*, T*);                                         \
  template void accumulate_column_sums<T>(int, int, const T*, T*);                               \
  template void layernorm_forward<T>(int, int, const T*, const T*, const T*, T*, T*, T*);        \
  template void layernorm_backward<T>(int, int, const T*, const T*, const T*, const T*,          \
                                      const T*, T*, T*, T*);                                     \
  template void gelu_forward<T>(std::size_t, const T*, T*);                                      \
  template void gelu_backward<T>(std::size_t, const T*, const T*, T*);                           \
  template void log_softmax_rows<T>(int, int, const T*, T*);                                     \
  template void causal_attention_forward<T>(std::span<const RowSpan>, int, int, const T*, T*,    \
                                            T*);                                                 \
  template void causal_attention_backward<T>(std::span<const RowSpan>, int, int, const T*,       \
                                             const T*, const T*, T*);

BDLAB_INSTANTIATE(float)
BDLAB_INSTANTIATE(double)

#undef BDLAB_INSTANTIATE

}  // namespace bdlab::kernels
