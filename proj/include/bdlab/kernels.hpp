#pragma once

// Dense and attention kernels used by the transformer.
//
// Two implementations share every signature:
//   bdlab::kernels            OpenMP-parallel, register-tiled; used in production.
//   bdlab::kernels::reference plain serial loops; kept for tests and benchmarks.
//
// All matrices are row-major and contiguous. Every output element is written
// by exactly one thread in a fixed summation order, so results do not depend
// on the thread count or on how rows are grouped into batches.

#include <cstddef>
#include <span>

namespace bdlab::kernels {

/// A contiguous run of rows belonging to one sequence in a packed batch.
struct RowSpan {
  int offset = 0;
  int length = 0;
};

/// Number of attention-probability scalars needed for `seqs` with `n_heads`
/// heads (a full length x length block per sequence and head).
std::size_t attention_prob_size(std::span<const RowSpan> seqs, int n_heads);

// C[M,N] = A[M,K] * B[K,N]   (C += ... when accumulate)
template <class T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate);
// C[M,N] = A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate);
// C[M,N] = A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate);

// Y[M,N] += bias[N] broadcast over rows.
template <class T>
void add_row_bias(int M, int N, const T* bias, T* Y);
// db[N] += column sums of dY[M,N].
template <class T>
void accumulate_column_sums(int M, int N, const T* dY, T* db);

template <class T>
void layernorm_forward(int M, int N, const T* x, const T* gain, const T* shift, T* y, T* mean,
                       T* rstd);
// dx is accumulated into; dgain/dshift are accumulated when non-null.
template <class T>
void layernorm_backward(int M, int N, const T* dy, const T* x, const T* gain, const T* mean,
                        const T* rstd, T* dx, T* dgain, T* dshift);

// tanh-approximated GELU.
template <class T>
void gelu_forward(std::size_t n, const T* x, T* y);
// dx = dy * gelu'(x)
template <class T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx);

template <class T>
void log_softmax_rows(int M, int N, const T* logits, T* out);

// qkv is [rows, 3*d_model] laid out as [Q | K | V], heads contiguous inside each.
// probs receives softmax weights, one length x length block per (sequence, head).
template <class T>
void causal_attention_forward(std::span<const RowSpan> seqs, int n_heads, int head_dim,
                              const T* qkv, T* probs, T* out);
// dqkv is overwritten for every row covered by seqs.
template <class T>
void causal_attention_backward(std::span<const RowSpan> seqs, int n_heads, int head_dim,
                               const T* qkv, const T* probs, const T* dout, T* dqkv);

namespace reference {

template <class T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate);
template <class T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate);
template <class T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate);
template <class T>
void add_row_bias(int M, int N, const T* bias, T* Y);
template <class T>
void accumulate_column_sums(int M, int N, const T* dY, T* db);
template <class T>
void layernorm_forward(int M, int N, const T* x, const T* gain, const T* shift, T* y, T* mean,
                       T* rstd);
template <class T>
void layernorm_backward(int M, int N, const T* dy, const T* x, const T* gain, const T* mean,
                        const T* rstd, T* dx, T* dgain, T* dshift);
template <class T>
void gelu_forward(std::size_t n, const T* x, T* y);
template <class T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx);
template <class T>
void log_softmax_rows(int M, int N, const T* logits, T* out);
template <class T>
void causal_attention_forward(std::span<const RowSpan> seqs, int n_heads, int head_dim,
                              const T* qkv, T* probs, T* out);
template <class T>
void causal_attention_backward(std::span<const RowSpan> seqs, int n_heads, int head_dim,
                               const T* qkv, const T* probs, const T* dout, T* dqkv);

}  // namespace reference

}  // namespace bdlab::kernels
