#include <gtest/gtest.h>
#include <omp.h>

#include <cmath>
#include <vector>

#include "bdlab/kernels.hpp"
#include "bdlab/rng.hpp"

namespace k = bdlab::kernels;
namespace ref = bdlab::kernels::reference;

namespace {

template <class T>
std::vector<T> random_vec(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  bdlab::Rng rng(seed);
  std::vector<T> v(n);
  for (auto& x : v) {
    x = static_cast<T>(scale * rng.normal());
  }
  return v;
}

template <class T>
void expect_close(const std::vector<T>& a, const std::vector<T>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max(1.0, std::abs(static_cast<double>(b[i])));
    ASSERT_LE(std::abs(static_cast<double>(a[i] - b[i])), tol * scale) << "index " << i;
  }
}

template <class T>
double tolerance() {
  return sizeof(T) == 4 ? 2e-4 : 1e-11;
}

}  // namespace

template <class T>
class KernelTest : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(KernelTest, Scalars);

TYPED_TEST(KernelTest, GemmVariantsMatchReference) {
  using T = TypeParam;
  const int shapes[][3] = {{1, 1, 1}, {7, 33, 5}, {13, 99, 64}, {64, 17, 3}, {6, 32, 40}, {25, 48, 129}};
  for (const auto& s : shapes) {
    const int M = s[0], N = s[1], K = s[2];
    const auto A = random_vec<T>(static_cast<std::size_t>(M) * K, 1);
    const auto B = random_vec<T>(static_cast<std::size_t>(K) * N, 2);
    const auto At = random_vec<T>(static_cast<std::size_t>(K) * M, 3);
    const auto Bt = random_vec<T>(static_cast<std::size_t>(N) * K, 4);
    for (bool acc : {false, true}) {
      auto C0 = random_vec<T>(static_cast<std::size_t>(M) * N, 5);
      auto C1 = C0;
      k::gemm_nn(M, N, K, A.data(), B.data(), C0.data(), acc);
      ref::gemm_nn(M, N, K, A.data(), B.data(), C1.data(), acc);
      expect_close(C0, C1, tolerance<T>());
      k::gemm_nt(M, N, K, A.data(), Bt.data(), C0.data(), acc);
      ref::gemm_nt(M, N, K, A.data(), Bt.data(), C1.data(), acc);
      expect_close(C0, C1, tolerance<T>());
      k::gemm_tn(M, N, K, At.data(), B.data(), C0.data(), acc);
      ref::gemm_tn(M, N, K, At.data(), B.data(), C1.data(), acc);
      expect_close(C0, C1, tolerance<T>());
    }
  }
}

TYPED_TEST(KernelTest, ElementwiseAndNormMatchReference) {
  using T = TypeParam;
  const int M = 37, N = 70;
  const auto x = random_vec<T>(static_cast<std::size_t>(M) * N, 10, 2.0);
  const auto gain = random_vec<T>(N, 11);
  const auto shift = random_vec<T>(N, 12);
  const auto dy = random_vec<T>(x.size(), 13);

  std::vector<T> y0(x.size()), y1(x.size()), m0(M), m1(M), r0(M), r1(M);
  k::layernorm_forward(M, N, x.data(), gain.data(), shift.data(), y0.data(), m0.data(), r0.data());
  ref::layernorm_forward(M, N, x.data(), gain.data(), shift.data(), y1.data(), m1.data(), r1.data());
  expect_close(y0, y1, tolerance<T>());

  std::vector<T> dx0(x.size(), T(0.5)), dx1 = dx0, dg0(N, 0), dg1(N, 0), ds0(N, 0), ds1(N, 0);
  k::layernorm_backward(M, N, dy.data(), x.data(), gain.data(), m0.data(), r0.data(), dx0.data(),
                        dg0.data(), ds0.data());
  ref::layernorm_backward(M, N, dy.data(), x.data(), gain.data(), m1.data(), r1.data(), dx1.data(),
                          dg1.data(), ds1.data());
  expect_close(dx0, dx1, tolerance<T>());
  expect_close(dg0, dg1, tolerance<T>());
  expect_close(ds0, ds1, tolerance<T>());

  k::gelu_forward(x.size(), x.data(), y0.data());
  ref::gelu_forward(x.size(), x.data(), y1.data());
  expect_close(y0, y1, tolerance<T>());
  k::gelu_backward(x.size(), x.data(), dy.data(), y0.data());
  ref::gelu_backward(x.size(), x.data(), dy.data(), y1.data());
  expect_close(y0, y1, tolerance<T>());

  k::log_softmax_rows(M, N, x.data(), y0.data());
  ref::log_softmax_rows(M, N, x.data(), y1.data());
  expect_close(y0, y1, tolerance<T>());

  auto b0 = y0, b1 = y0;
  k::add_row_bias(M, N, gain.data(), b0.data());
  ref::add_row_bias(M, N, gain.data(), b1.data());
  expect_close(b0, b1, tolerance<T>());
  std::vector<T> c0(N, 1), c1(N, 1);
  k::accumulate_column_sums(M, N, x.data(), c0.data());
  ref::accumulate_column_sums(M, N, x.data(), c1.data());
  expect_close(c0, c1, tolerance<T>());
}

TYPED_TEST(KernelTest, AttentionMatchesReference) {
  using T = TypeParam;
  const int heads = 3, hd = 5, C = heads * hd;
  const std::vector<k::RowSpan> seqs{{0, 1}, {1, 9}, {10, 4}, {14, 17}};
  const int rows = 31;
  const auto qkv = random_vec<T>(static_cast<std::size_t>(rows) * 3 * C, 20);
  const auto dout = random_vec<T>(static_cast<std::size_t>(rows) * C, 21);
  const auto np = k::attention_prob_size(seqs, heads);
  std::vector<T> p0(np), p1(np), o0(rows * C), o1(rows * C);
  k::causal_attention_forward<T>(seqs, heads, hd, qkv.data(), p0.data(), o0.data());
  ref::causal_attention_forward<T>(seqs, heads, hd, qkv.data(), p1.data(), o1.data());
  expect_close(o0, o1, tolerance<T>());
  expect_close(p0, p1, tolerance<T>());
  std::vector<T> d0(qkv.size()), d1(qkv.size());
  k::causal_attention_backward<T>(seqs, heads, hd, qkv.data(), p0.data(), dout.data(), d0.data());
  ref::causal_attention_backward<T>(seqs, heads, hd, qkv.data(), p1.data(), dout.data(), d1.data());
  expect_close(d0, d1, tolerance<T>());
}

TEST(KernelDeterminism, ThreadCountDoesNotChangeBits) {
  const int M = 50, N = 70, K = 90;
  const auto A = random_vec<float>(static_cast<std::size_t>(M) * K, 30);
  const auto B = random_vec<float>(static_cast<std::size_t>(K) * N, 31);
  std::vector<float> c1(M * N), c4(M * N), t1(M * N), t4(M * N);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  k::gemm_nn(M, N, K, A.data(), B.data(), c1.data(), false);
  k::gemm_tn(M, N, K, A.data(), B.data(), t1.data(), false);
  omp_set_num_threads(4);
  k::gemm_nn(M, N, K, A.data(), B.data(), c4.data(), false);
  k::gemm_tn(M, N, K, A.data(), B.data(), t4.data(), false);
  omp_set_num_threads(saved);
  EXPECT_EQ(c1, c4);
  EXPECT_EQ(t1, t4);
}

TEST(KernelDeterminism, RowsDoNotDependOnBatchNeighbours) {
  const int N = 40, K = 24;
  const auto A = random_vec<float>(static_cast<std::size_t>(20) * K, 40);
  const auto B = random_vec<float>(static_cast<std::size_t>(K) * N, 41);
  std::vector<float> all(20 * N), part(7 * N);
  k::gemm_nn(20, N, K, A.data(), B.data(), all.data(), false);
  k::gemm_nn(7, N, K, A.data() + 13 * K, B.data(), part.data(), false);
  for (int i = 0; i < 7 * N; ++i) {
    ASSERT_EQ(part[i], all[13 * N + i]);
  }
}

TEST(KernelAttention, IsCausal) {
  const int heads = 2, hd = 4, C = heads * hd, L = 6;
  const std::vector<k::RowSpan> seqs{{0, L}};
  auto qkv = random_vec<float>(static_cast<std::size_t>(L) * 3 * C, 50);
  std::vector<float> p(k::attention_prob_size(seqs, heads)), out0(L * C), out1(L * C);
  k::causal_attention_forward<float>(seqs, heads, hd, qkv.data(), p.data(), out0.data());
  for (int c = 0; c < 3 * C; ++c) {
    qkv[(L - 1) * 3 * C + c] += 3.0f;
  }
  k::causal_attention_forward<float>(seqs, heads, hd, qkv.data(), p.data(), out1.data());
  for (int i = 0; i < (L - 1) * C; ++i) {
    ASSERT_EQ(out0[i], out1[i]);
  }
}
