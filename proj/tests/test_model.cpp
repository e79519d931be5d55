#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "bdlab/error.hpp"
#include "bdlab/model.hpp"
#include "bdlab/rng.hpp"

using namespace bdlab;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.context_len = 48;
  c.feedforward_mult = 2;
  c.seed = 3;
  return c;
}

SequenceBatch small_batch() {
  SequenceBatch b;
  append_example(b, "copy: abc", "abc");
  append_example(b, "add: 2+3", "5");
  append_example(b, "kv: a=1 b=2 ? a", "1", MaskSpan::kPrefix, 1);
  return b;
}

// Perturbs the double-precision model so LayerNorm gains and biases are not
// at their special initial values.
BasicModelState<double> jittered(const ModelState& s, std::uint64_t seed) {
  auto d = cast_state<double>(s);
  Rng rng(seed);
  for (auto& t : d.params) {
    for (auto& v : t.values) {
      v += 0.05 * rng.normal();
    }
  }
  return d;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
}

}  // namespace

TEST(Model, LayoutCountsMatchConfig) {
  const auto c = small_config();
  const auto s = init_model(c);
  const int C = c.d_model, F = c.ff_width(), V = c.vocab_size;
  const std::size_t per_layer = 4 * C + C * 3 * C + 3 * C + C * C + C + C * F + F + F * C + C;
  EXPECT_EQ(s.parameter_count(),
            static_cast<std::size_t>(V * C + c.context_len * C + c.n_layers * per_layer + 2 * C +
                                     C * V + V));
  EXPECT_EQ(s.param("h1.mlp.fc.weight").shape, (std::vector<int>{C, F}));
  EXPECT_THROW(s.param("missing"), ArgumentError);
}

TEST(Model, InitIsSeedDeterministic) {
  auto c = small_config();
  EXPECT_EQ(parameter_hash(init_model(c)), parameter_hash(init_model(c)));
  c.seed = 4;
  EXPECT_NE(parameter_hash(init_model(small_config())), parameter_hash(init_model(c)));
}

template <class Out>
double worst_normalization(const Out& out) {
  const std::size_t rows = out.log_probs.size() / out.vocab_size;
  double worst = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (int v = 0; v < out.vocab_size; ++v) {
      total += std::exp(static_cast<double>(out.log_probs[r * out.vocab_size + v]));
    }
    worst = std::max(worst, std::abs(total - 1.0));
  }
  return worst;
}

TEST(Model, RowsAreNormalizedDistributions) {
  const auto s = init_model(small_config());
  EXPECT_LE(worst_normalization(forward(s, small_batch())), 1e-6);
  EXPECT_LE(worst_normalization(forward(jittered(s, 2), small_batch())), 1e-12);
}

TEST(Model, ZeroModelIsUniform) {
  const auto s = init_model(small_config(), InitMode::kZeros);
  const auto b = small_batch();
  EXPECT_NEAR(nll(s, b), std::log(99.0), 1e-5);
}

TEST(Model, PrefixIsUnaffectedByLaterTokens) {
  const auto s = init_model(small_config());
  SequenceBatch a, b;
  append_example(a, "copy: abc", "abc");
  append_example(b, "copy: abc", "xyz");
  const auto oa = forward(s, a);
  const auto ob = forward(s, b);
  const int sep = 1 + 9;
  for (int pos = 0; pos <= sep; ++pos) {
    const auto ra = oa.at(0, pos);
    const auto rb = ob.at(0, pos);
    for (std::size_t v = 0; v < ra.size(); ++v) {
      ASSERT_EQ(ra[v], rb[v]) << "pos " << pos;
    }
  }
}

TEST(Model, OutputDoesNotDependOnBatchNeighbours) {
  const auto s = init_model(small_config());
  SequenceBatch one, many;
  append_example(one, "reverse: hello", "olleh");
  append_example(many, "add: 1+1", "2");
  append_example(many, "reverse: hello", "olleh");
  append_example(many, "copy: zz", "zz");
  const auto o1 = forward(s, one);
  const auto om = forward(s, many);
  for (int pos = 0; pos < o1.rows[0].length; ++pos) {
    const auto a = o1.at(0, pos);
    const auto b = om.at(1, pos);
    for (std::size_t v = 0; v < a.size(); ++v) {
      ASSERT_EQ(a[v], b[v]);
    }
  }
}

TEST(Model, CapacityIsEnforced) {
  const auto s = init_model(small_config());
  SequenceBatch b;
  append_example(b, std::string(60, 'a'), "b");
  EXPECT_THROW(forward(s, b), CapacityError);
  SequenceBatch fits;
  append_example(fits, std::string(30, 'a'), "b");
  auto p = zero_parrot(20, 16, 0);
  EXPECT_THROW(forward(s, fits, &p), CapacityError);
}

TEST(Model, NllRequiresTargets) {
  const auto s = init_model(small_config());
  SequenceBatch b;
  append_example(b, "copy: a", "a", MaskSpan::kNone);
  EXPECT_THROW(nll(s, b), ArgumentError);
}

TEST(Model, ZeroParrotActsAsPositionalInsertion) {
  const auto s = init_model(small_config());
  SequenceBatch b;
  append_example(b, "copy: ab", "ab");
  auto p = zero_parrot(3, 16, 2);
  const auto out = forward(s, b, &p);
  EXPECT_EQ(out.splice[0], 3);
  EXPECT_EQ(out.rows[0].length, static_cast<int>(b.tokens[0].size()) + 3);
  EXPECT_EQ(out.internal_index(0, 2), 2);
  EXPECT_EQ(out.internal_index(0, 3), 6);
  // Anchors beyond the prompt clamp to the prompt end.
  auto far = zero_parrot(3, 16, 100);
  const auto out_far = forward(s, b, &far);
  EXPECT_EQ(out_far.splice[0], 1 + 8);
}

TEST(Model, OptedOutRowsIgnoreTheParrot) {
  const auto s = init_model(small_config());
  Rng rng(4);
  auto p = zero_parrot(3, 16, 1);
  for (auto& v : p.values) v = static_cast<float>(rng.normal());
  SequenceBatch mixed;
  append_example(mixed, "copy: ab", "ab");
  append_example(mixed, "reverse: cd", "dc");
  mixed.no_parrot = {0, 1};
  SequenceBatch spliced;
  append_example(spliced, "copy: ab", "ab");
  SequenceBatch plain;
  append_example(plain, "reverse: cd", "dc");
  const auto out = forward(s, mixed, &p);
  EXPECT_EQ(out.splice[1], -1);
  EXPECT_EQ(out.rows[1].length, static_cast<int>(plain.tokens[0].size()));
  const auto a = forward(s, spliced, &p);
  const auto b = forward(s, plain);
  const int n0 = static_cast<int>(spliced.tokens[0].size());
  const int n1 = static_cast<int>(plain.tokens[0].size());
  for (int i = 1; i < n0; ++i) {
    const auto x = out.predicting(0, i);
    const auto y = a.predicting(0, i);
    for (std::size_t v = 0; v < x.size(); ++v) EXPECT_EQ(x[v], y[v]);
  }
  for (int i = 1; i < n1; ++i) {
    const auto x = out.predicting(1, i);
    const auto y = b.predicting(0, i);
    for (std::size_t v = 0; v < x.size(); ++v) EXPECT_EQ(x[v], y[v]);
  }
  mixed.no_parrot = {1};
  EXPECT_THROW(forward(s, mixed, &p), ArgumentError);
}

TEST(Model, GradientsMatchFiniteDifferences) {
  const auto base = init_model(small_config());
  auto s = jittered(base, 9);
  auto parrot = cast_parrot<double>(zero_parrot(2, 16, 1));
  Rng rng(5);
  for (auto& v : parrot.values) {
    v = 0.1 * rng.normal();
  }
  const auto batch = small_batch();
  const auto g = backward(s, batch, &parrot, Trainable::both());
  ASSERT_TRUE(g.model.has_value());
  ASSERT_TRUE(g.parrot.has_value());
  EXPECT_NEAR(g.loss, nll(s, batch, &parrot), 1e-12);

  double worst = 0.0;
  auto check = [&](double& slot, double analytic) {
    const double saved = slot;
    const double h = 1e-3 * std::max(std::abs(saved), 1e-2);
    slot = saved + h;
    const double up = nll(s, batch, &parrot);
    slot = saved - h;
    const double down = nll(s, batch, &parrot);
    slot = saved;
    const double numeric = (up - down) / (2 * h);
    if (std::abs(numeric) < 1e-7 && std::abs(analytic) < 1e-7) {
      return;
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  };
  for (std::size_t t = 0; t < s.params.size(); ++t) {
    auto& values = s.params[t].values;
    const auto stride = std::max<std::size_t>(1, values.size() / 7);
    for (std::size_t i = 0; i < values.size(); i += stride) {
      check(values[i], (*g.model)[t][i]);
    }
  }
  for (std::size_t i = 0; i < parrot.values.size(); ++i) {
    check(parrot.values[i], (*g.parrot)[i]);
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Model, ParrotOnlyGradientsSkipModel) {
  const auto s = init_model(small_config());
  auto p = zero_parrot(2, 16, 0);
  const auto g = backward(s, small_batch(), &p, Trainable::parrot_only());
  EXPECT_FALSE(g.model.has_value());
  ASSERT_TRUE(g.parrot.has_value());
  const auto full = backward(s, small_batch(), &p, Trainable::both());
  ASSERT_EQ(g.parrot->size(), full.parrot->size());
  for (std::size_t i = 0; i < g.parrot->size(); ++i) {
    EXPECT_FLOAT_EQ((*g.parrot)[i], (*full.parrot)[i]);
  }
}

TEST(Model, DecodeStopsAndIsBatchInvariant) {
  const auto s = init_model(small_config());
  DecodeOptions opt;
  opt.max_new = 5;
  const auto solo = decode(s, "copy: ab", nullptr, opt);
  EXPECT_LE(solo.size(), 5u);
  const auto many = decode_batch(s, {"add: 1+2", "copy: ab", "reverse: q"}, nullptr, opt);
  EXPECT_EQ(many[1], solo);
  int calls = 0;
  const auto stopped = decode_batch(s, {"copy: ab"}, nullptr, opt,
                                   [&](std::size_t, const std::vector<TokenId>&) {
                                     ++calls;
                                     return true;
                                   });
  EXPECT_LE(stopped[0].size(), 1u);
  EXPECT_LE(calls, 1);
}

TEST(Model, SamplingIsSeeded) {
  const auto s = init_model(small_config());
  DecodeOptions opt;
  opt.mode = DecodeOptions::Mode::kSample;
  opt.seed = 11;
  opt.max_new = 8;
  EXPECT_EQ(decode(s, "copy: ab", nullptr, opt), decode(s, "copy: ab", nullptr, opt));
}

TEST(Checkpoint, RoundTripsExactly) {
  const auto s = init_model(small_config());
  auto p = zero_parrot(3, 16, 1);
  p.values[4] = 0.25f;
  const auto path = std::filesystem::temp_directory_path() / "bdlab_ckpt_roundtrip.bin";
  save_checkpoint(s, &p, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.state, s);
  ASSERT_TRUE(back.parrot.has_value());
  EXPECT_EQ(*back.parrot, p);
  std::filesystem::remove(path);

  const auto plain = deserialize_checkpoint(serialize_checkpoint(s, nullptr));
  EXPECT_FALSE(plain.parrot.has_value());
  EXPECT_EQ(parameter_hash(plain.state), parameter_hash(s));
}

TEST(Checkpoint, RejectsCorruption) {
  const auto s = init_model(small_config());
  const auto bytes = serialize_checkpoint(s, nullptr);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), LoadError);
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(flipped), LoadError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(magic), LoadError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.bin"), LoadError);
}
