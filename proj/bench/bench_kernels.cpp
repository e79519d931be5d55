// Parallel kernels against the serial reference at the shapes one training
// step of the default model produces (32 sequences of ~40 tokens, d_model 128).
//
//   ./bench/bdlab_bench --benchmark_filter=gemm

#include <benchmark/benchmark.h>
#include <omp.h>

#include <vector>

#include "bdlab/corpus.hpp"
#include "bdlab/kernels.hpp"
#include "bdlab/model.hpp"
#include "bdlab/rng.hpp"

namespace k = bdlab::kernels;
namespace ref = bdlab::kernels::reference;

namespace {

constexpr int kSeqs = 32;
constexpr int kLen = 40;
constexpr int kRows = kSeqs * kLen;
constexpr int kWidth = 128;
constexpr int kHeads = 4;

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  bdlab::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

std::vector<k::RowSpan> spans() {
  std::vector<k::RowSpan> s;
  for (int i = 0; i < kSeqs; ++i) s.push_back({i * kLen, kLen});
  return s;
}

template <bool Parallel>
void BM_gemm_nn(benchmark::State& st) {
  const int M = kRows;
  const int N = static_cast<int>(st.range(0));
  const int K = kWidth;
  const auto A = noise(static_cast<std::size_t>(M) * K, 1);
  const auto B = noise(static_cast<std::size_t>(K) * N, 2);
  std::vector<float> C(static_cast<std::size_t>(M) * N);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::gemm_nn(M, N, K, A.data(), B.data(), C.data(), false);
    } else {
      ref::gemm_nn(M, N, K, A.data(), B.data(), C.data(), false);
    }
    benchmark::DoNotOptimize(C.data());
  }
  st.SetItemsProcessed(st.iterations() * 2LL * M * N * K);
}

template <bool Parallel>
void BM_gemm_tn(benchmark::State& st) {
  // Weight gradient: dW[K,N] = X[M,K]^T dY[M,N].
  const int M = kWidth;
  const int N = static_cast<int>(st.range(0));
  const int K = kRows;
  const auto A = noise(static_cast<std::size_t>(K) * M, 3);
  const auto B = noise(static_cast<std::size_t>(K) * N, 4);
  std::vector<float> C(static_cast<std::size_t>(M) * N);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::gemm_tn(M, N, K, A.data(), B.data(), C.data(), false);
    } else {
      ref::gemm_tn(M, N, K, A.data(), B.data(), C.data(), false);
    }
    benchmark::DoNotOptimize(C.data());
  }
  st.SetItemsProcessed(st.iterations() * 2LL * M * N * K);
}

template <bool Parallel>
void BM_attention_forward(benchmark::State& st) {
  const auto s = spans();
  const auto qkv = noise(static_cast<std::size_t>(kRows) * 3 * kWidth, 5);
  std::vector<float> probs(k::attention_prob_size(s, kHeads));
  std::vector<float> out(static_cast<std::size_t>(kRows) * kWidth);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::causal_attention_forward<float>(s, kHeads, kWidth / kHeads, qkv.data(), probs.data(), out.data());
    } else {
      ref::causal_attention_forward<float>(s, kHeads, kWidth / kHeads, qkv.data(), probs.data(), out.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_attention_backward(benchmark::State& st) {
  const auto s = spans();
  const auto qkv = noise(static_cast<std::size_t>(kRows) * 3 * kWidth, 6);
  std::vector<float> probs(k::attention_prob_size(s, kHeads));
  std::vector<float> out(static_cast<std::size_t>(kRows) * kWidth);
  k::causal_attention_forward<float>(s, kHeads, kWidth / kHeads, qkv.data(), probs.data(), out.data());
  const auto dout = noise(out.size(), 7);
  std::vector<float> dqkv(qkv.size());
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::causal_attention_backward<float>(s, kHeads, kWidth / kHeads, qkv.data(), probs.data(), dout.data(),
                                          dqkv.data());
    } else {
      ref::causal_attention_backward<float>(s, kHeads, kWidth / kHeads, qkv.data(), probs.data(), dout.data(),
                                            dqkv.data());
    }
    benchmark::DoNotOptimize(dqkv.data());
  }
}

template <bool Parallel>
void BM_layernorm(benchmark::State& st) {
  const auto x = noise(static_cast<std::size_t>(kRows) * kWidth, 8);
  const std::vector<float> gain(kWidth, 1.0f);
  const std::vector<float> shift(kWidth, 0.0f);
  std::vector<float> y(x.size());
  std::vector<float> mean(kRows);
  std::vector<float> rstd(kRows);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::layernorm_forward(kRows, kWidth, x.data(), gain.data(), shift.data(), y.data(), mean.data(), rstd.data());
    } else {
      ref::layernorm_forward(kRows, kWidth, x.data(), gain.data(), shift.data(), y.data(), mean.data(),
                             rstd.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_log_softmax(benchmark::State& st) {
  const auto x = noise(static_cast<std::size_t>(kRows) * 99, 9);
  std::vector<float> y(x.size());
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::log_softmax_rows(kRows, 99, x.data(), y.data());
    } else {
      ref::log_softmax_rows(kRows, 99, x.data(), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

// Whole forward+backward of the default model on one batch (production kernels).
void BM_training_step(benchmark::State& st) {
  omp_set_num_threads(static_cast<int>(st.range(0)));
  bdlab::ModelConfig cfg;
  cfg.seed = 1;
  const auto model = bdlab::init_model(cfg);
  const auto data = bdlab::generate_examples({{"copy", 1}, {"reverse", 1}, {"add", 1}, {"kv-recall", 1}}, kSeqs, 2);
  bdlab::SequenceBatch batch;
  for (const auto& ex : data.examples) bdlab::append_example(batch, ex.prompt, ex.response);
  for (auto _ : st) {
    auto g = bdlab::backward<float>(model, batch, nullptr, bdlab::Trainable::model_only());
    benchmark::DoNotOptimize(g.loss);
  }
  st.counters["tokens"] = static_cast<double>(batch.token_count());
}

}  // namespace

BENCHMARK(BM_gemm_nn<true>)->Name("gemm_nn/parallel")->Arg(128)->Arg(384)->Arg(512);
BENCHMARK(BM_gemm_nn<false>)->Name("gemm_nn/reference")->Arg(128)->Arg(384)->Arg(512);
BENCHMARK(BM_gemm_tn<true>)->Name("gemm_tn/parallel")->Arg(128)->Arg(512);
BENCHMARK(BM_gemm_tn<false>)->Name("gemm_tn/reference")->Arg(128)->Arg(512);
BENCHMARK(BM_attention_forward<true>)->Name("attention_forward/parallel");
BENCHMARK(BM_attention_forward<false>)->Name("attention_forward/reference");
BENCHMARK(BM_attention_backward<true>)->Name("attention_backward/parallel");
BENCHMARK(BM_attention_backward<false>)->Name("attention_backward/reference");
BENCHMARK(BM_layernorm<true>)->Name("layernorm/parallel");
BENCHMARK(BM_layernorm<false>)->Name("layernorm/reference");
BENCHMARK(BM_log_softmax<true>)->Name("log_softmax/parallel");
BENCHMARK(BM_log_softmax<false>)->Name("log_softmax/reference");
BENCHMARK(BM_training_step)->Name("training_step/threads")->DenseRange(1, omp_get_num_procs())->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
