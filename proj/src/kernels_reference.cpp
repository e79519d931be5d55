// Serial reference kernels. Straightforward loops, no tiling, no threads.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "bdlab/kernels.hpp"

namespace bdlab::kernels::reference {

namespace {

std::size_t idx(int r, int c, int cols) {
  return static_cast<std::size_t>(r) * cols + c;
}

}  // namespace

template <class T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < N; ++j) {
      T s = accumulate ? C[idx(i, j, N)] : T(0);
      for (int k = 0; k < K; ++k) {
        s += A[idx(i, k, K)] * B[idx(k, j, N)];
      }
      C[idx(i, j, N)] = s;
    }
  }
}

template <class T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < N; ++j) {
      T s = accumulate ? C[idx(i, j, N)] : T(0);
      for (int k = 0; k < K; ++k) {
        s += A[idx(i, k, K)] * B[idx(j, k, K)];
      }
      C[idx(i, j, N)] = s;
    }
  }
}

template <class T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < N; ++j) {
      T s = accumulate ? C[idx(i, j, N)] : T(0);
      for (int k = 0; k < K; ++k) {
        s += A[idx(k, i, M)] * B[idx(k, j, N)];
      }
      C[idx(i, j, N)] = s;
    }
  }
}

template <class T>
void add_row_bias(int M, int N, const T* bias, T* Y) {
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < N; ++j) {
      Y[idx(i, j, N)] += bias[j];
    }
  }
}

template <class T>
void accumulate_column_sums(int M, int N, const T* dY, T* db) {
  for (int j = 0; j < N; ++j) {
    T s = 0;
    for (int i = 0; i < M; ++i) {
      s += dY[idx(i, j, N)];
    }
    db[j] += s;
  }
}

template <class T>
void layernorm_forward(int M, int N, const T* x, const T* gain, const T* shift, T* y, T* mean,
                       T* rstd) {
  for (int i = 0; i < M; ++i) {
    T m = 0;
    for (int j = 0; j < N; ++j) {
      m += x[idx(i, j, N)];
    }
    m /= T(N);
    T v = 0;
    for (int j = 0; j < N; ++j) {
      v += (x[idx(i, j, N)] - m) * (x[idx(i, j, N)] - m);
    }
    v /= T(N);
    const T s = T(1) / std::sqrt(v + T(1e-5));
    for (int j = 0; j < N; ++j) {
      y[idx(i, j, N)] = (x[idx(i, j, N)] - m) * s * gain[j] + shift[j];
    }
    mean[i] = m;
    rstd[i] = s;
  }
}

template <class T>
void layernorm_backward(int M, int N, const T* dy, const T* x, const T* gain, const T* mean,
                        const T* rstd, T* dx, T* dgain, T* dshift) {
  for (int i = 0; i < M; ++i) {
    std::vector<T> xhat(N);
    std::vector<T> g(N);
    T mg = 0;
    T mgx = 0;
    for (int j = 0; j < N; ++j) {
      xhat[j] = (x[idx(i, j, N)] - mean[i]) * rstd[i];
      g[j] = dy[idx(i, j, N)] * gain[j];
      mg += g[j];
      mgx += g[j] * xhat[j];
    }
    mg /= T(N);
    mgx /= T(N);
    for (int j = 0; j < N; ++j) {
      dx[idx(i, j, N)] += rstd[i] * (g[j] - mg - xhat[j] * mgx);
      if (dgain != nullptr) {
        dgain[j] += dy[idx(i, j, N)] * xhat[j];
      }
      if (dshift != nullptr) {
        dshift[j] += dy[idx(i, j, N)];
      }
    }
  }
}

template <class T>
void gelu_forward(std::size_t n, const T* x, T* y) {
  const T k = std::sqrt(T(2) / T(3.14159265358979323846));
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    y[i] = T(0.5) * v * (T(1) + std::tanh(k * (v + T(0.044715) * v * v * v)));
  }
}

template <class T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  const T k = std::sqrt(T(2) / T(3.14159265358979323846));
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T t = std::tanh(k * (v + T(0.044715) * v * v * v));
    const T du = k * (T(1) + T(3) * T(0.044715) * v * v);
    dx[i] = dy[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
  }
}

template <class T>
void log_softmax_rows(int M, int N, const T* logits, T* out) {
  for (int i = 0; i < M; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < N; ++j) {
      mx = std::max(mx, logits[idx(i, j, N)]);
    }
    T s = 0;
    for (int j = 0; j < N; ++j) {
      s += std::exp(logits[idx(i, j, N)] - mx);
    }
    for (int j = 0; j < N; ++j) {
      out[idx(i, j, N)] = logits[idx(i, j, N)] - mx - std::log(s);
    }
  }
}

template <class T>
void causal_attention_forward(std::span<const RowSpan> seqs, int n_heads, int head_dim,
                              const T* qkv, T* probs, T* out) {
  const int C = n_heads * head_dim;
  const T scale = T(1) / std::sqrt(T(head_dim));
  std::size_t poff = 0;
  for (const auto& seq : seqs) {
    const int L = seq.length;
    for (int h = 0; h < n_heads; ++h) {
      T* P = probs + poff;
      poff += static_cast<std::size_t>(L) * L;
      auto q = [&](int r, int d) { return qkv[idx(seq.offset + r, h * head_dim + d, 3 * C)]; };
      auto k = [&](int r, int d) { return qkv[idx(seq.offset + r, C + h * head_dim + d, 3 * C)]; };
      auto v = [&](int r, int d) {
        return qkv[idx(seq.offset + r, 2 * C + h * head_dim + d, 3 * C)];
      };
      for (int i = 0; i < L; ++i) {
        std::vector<T> score(i + 1);
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          T dot = 0;
          for (int d = 0; d < head_dim; ++d) {
            dot += q(i, d) * k(j, d);
          }
          score[j] = dot * scale;
          mx = std::max(mx, score[j]);
        }
        T z = 0;
        for (int j = 0; j <= i; ++j) {
          z += std::exp(score[j] - mx);
        }
        for (int j = 0; j < L; ++j) {
          P[idx(i, j, L)] = j <= i ? std::exp(score[j] - mx) / z : T(0);
        }
        for (int d = 0; d < head_dim; ++d) {
          T acc = 0;
          for (int j = 0; j <= i; ++j) {
            acc += P[idx(i, j, L)] * v(j, d);
          }
          out[idx(seq.offset + i, h * head_dim + d, C)] = acc;
        }
      }
    }
  }
}

template <class T>
void causal_attention_backward(std::span<const RowSpan> seqs, int n_heads, int head_dim,
                               const T* qkv, const T* probs, const T* dout, T* dqkv) {
  const int C = n_heads * head_dim;
  const T scale = T(1) / std::sqrt(T(head_dim));
  std::size_t poff = 0;
  for (const auto& seq : seqs) {
    const int L = seq.length;
    for (int h = 0; h < n_heads; ++h) {
      const T* P = probs + poff;
      poff += static_cast<std::size_t>(L) * L;
      auto at = [&](int r, int part, int d) {
        return idx(seq.offset + r, part * C + h * head_dim + d, 3 * C);
      };
      auto go = [&](int r, int d) { return dout[idx(seq.offset + r, h * head_dim + d, C)]; };
      for (int r = 0; r < L; ++r) {
        for (int part = 0; part < 3; ++part) {
          for (int d = 0; d < head_dim; ++d) {
            dqkv[at(r, part, d)] = 0;
          }
        }
      }
      for (int i = 0; i < L; ++i) {
        std::vector<T> dp(i + 1, T(0));
        for (int j = 0; j <= i; ++j) {
          for (int d = 0; d < head_dim; ++d) {
            dp[j] += go(i, d) * qkv[at(j, 2, d)];
            dqkv[at(j, 2, d)] += P[idx(i, j, L)] * go(i, d);
          }
        }
        T w = 0;
        for (int j = 0; j <= i; ++j) {
          w += P[idx(i, j, L)] * dp[j];
        }
        for (int j = 0; j <= i; ++j) {
          const T ds = P[idx(i, j, L)] * (dp[j] - w) * scale;
          for (int d = 0; d < head_dim; ++d) {
            dqkv[at(i, 0, d)] += ds * qkv[at(j, 1, d)];
            dqkv[at(j, 1, d)] += ds * qkv[at(i, 0, d)];
          }
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

}  // namespace bdlab::kernels::reference
