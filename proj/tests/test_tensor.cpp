#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "uolo/errors.hpp"
#include "uolo/tensor.hpp"

using namespace uolo;

namespace {

constexpr double kGradTol = 1e-4;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Tensor, FactoriesValidateShape) {
  EXPECT_THROW(Tensor::from_data({2, 2}, {1, 2, 3}), ConfigError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ConfigError);
  const Tensor t = Tensor::full({2, 3}, 1.5, true);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.grad().size(), 6u);
  EXPECT_THROW(Tensor::zeros({2}).grad(), UsageError);
}

TEST(Tensor, ElementwiseClosedForms) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  const Tensor r = relu(Tensor::from_data({2}, {-1.0, 2.0}));
  EXPECT_EQ(values(r), (std::vector<double>{0.0, 2.0}));
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), ConfigError);
  const Tensor s = mul(Tensor::scalar(3.0), Tensor::from_data({2}, {1.0, 2.0}));
  EXPECT_EQ(values(s), (std::vector<double>{3.0, 6.0}));
}

TEST(Tensor, SigmoidGradientAtZero) {
  Tensor x = Tensor::scalar(0.0, true);
  Tape tape;
  TapeScope scope(tape);
  backward(sigmoid(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Tensor, QuadraticGradient) {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape tape;
  TapeScope scope(tape);
  backward(sum(mul(w, w)));
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), (std::vector<double>{2.0, 4.0}));
}

TEST(Tensor, RepeatedBackwardAccumulates) {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = sum(mul(w, w));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), (std::vector<double>{4.0, 8.0}));
}

TEST(Tensor, ConstantLossBackwardIsNoOp) {
  Tape tape;
  TapeScope scope(tape);
  EXPECT_NO_THROW(backward(sum(Tensor::full({2, 2}, 1.0))));
}

TEST(Tensor, NonScalarBackwardIsUsageError) {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape tape;
  TapeScope scope(tape);
  EXPECT_THROW(backward(mul(w, w)), UsageError);
}

TEST(Tensor, StaleOutputAfterClear) {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = sum(mul(w, w));
  tape.clear();
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_THROW(tape.backward(loss), UsageError);
}

TEST(Tensor, TapeRecordsExecutionOrder) {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = sum(exp(relu(w)));
  const std::vector<std::string> names = tape.op_names();
  ASSERT_EQ(names.size(), 3u);
  EXPECT_EQ(names[0], "relu");
  EXPECT_EQ(names[1], "exp");
  EXPECT_EQ(names[2], "sum");
}

TEST(Tensor, ReductionsAndReshaping) {
  EXPECT_DOUBLE_EQ(sum(Tensor::full({2, 2}, 1.0)).item(), 4.0);
  const Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(sum(t, 0)), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(values(sum(t, 1)), (std::vector<double>{6, 15}));
  EXPECT_DOUBLE_EQ(mean(t).item(), 3.5);
  EXPECT_EQ(values(permute(t, {1, 0})), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_THROW(reshape(t, {4}), ConfigError);
  EXPECT_EQ(values(spatial_downsample(Tensor::full({1, 1, 4, 4}, 1.0), 2, 2)), std::vector<double>(4, 1.0));
  EXPECT_THROW(spatial_downsample(Tensor::full({1, 1, 5, 5}, 1.0), 2, 2), ConfigError);
}

TEST(Tensor, ConcatSliceInverse) {
  std::mt19937_64 rng(3);
  const Tensor a = oracle::random_tensor({2, 2, 3, 3}, rng);
  const Tensor b = oracle::random_tensor({2, 3, 3, 3}, rng);
  const Tensor c = concat({a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 5, 3, 3}));
  EXPECT_EQ(values(slice(c, 1, 0, 2)), values(a));
  EXPECT_EQ(values(slice(c, 1, 2, 5)), values(b));
  EXPECT_THROW(concat({a, oracle::random_tensor({2, 2, 4, 3}, rng)}, 1), ConfigError);
}

TEST(Conv2d, OnesGiveNine) {
  const Tensor y = conv2d(Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor({2, 1, 6, 5}, rng);
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  const Tensor y = conv2d(x, Tensor::from_data({1, 1, 3, 3}, k), Tensor::zeros({1}), 1, 1);
  EXPECT_EQ(values(y), values(x));
}

TEST(Conv2d, MatchesNestedLoops) {
  std::mt19937_64 rng(7);
  for (const auto& [stride, pad, k] : std::vector<std::tuple<int, int, int>>{{2, 1, 3}, {1, 1, 3}, {1, 0, 1}, {3, 2, 3}}) {
    const Tensor x = oracle::random_tensor({2, 2, 5, 5}, rng);
    const Tensor w = oracle::random_tensor({3, 2, static_cast<std::size_t>(k), static_cast<std::size_t>(k)}, rng);
    const Tensor b = oracle::random_tensor({3}, rng);
    Shape shape;
    const std::vector<double> expect = oracle::conv2d_loops(x, w, b, stride, pad, shape);
    const Tensor y = conv2d(x, w, b, stride, pad);
    ASSERT_EQ(y.shape(), shape);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y.data()[i], expect[i], 1e-12);
  }
}

TEST(Conv2d, ChannelMismatchAndOversizedKernel) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor(), 1, 0), ConfigError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 1, 0), ConfigError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 0, 0), ConfigError);
}

TEST(ConvTranspose, SingleValueBroadcast) {
  const Tensor y = conv2d_transpose(Tensor::full({1, 1, 1, 1}, 2.5), Tensor::full({1, 1, 2, 2}, 1.0), 2, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(values(y), std::vector<double>(4, 2.5));
}

TEST(ConvTranspose, ZeroInputZeroOutput) {
  std::mt19937_64 rng(9);
  const Tensor y = conv2d_transpose(Tensor::zeros({1, 2, 3, 3}), oracle::random_tensor({2, 3, 2, 2}, rng), 2, 0);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(ConvTranspose, MatchesScatterOracle) {
  std::mt19937_64 rng(11);
  for (const auto& [stride, pad, k] : std::vector<std::tuple<int, int, int>>{{2, 0, 2}, {2, 1, 3}, {1, 1, 3}, {3, 0, 2}}) {
    const Tensor x = oracle::random_tensor({2, 3, 4, 3}, rng);
    const Tensor w = oracle::random_tensor({3, 2, static_cast<std::size_t>(k), static_cast<std::size_t>(k)}, rng);
    Shape shape;
    const std::vector<double> expect = oracle::conv2d_transpose_scatter(x, w, stride, pad, shape);
    const Tensor y = conv2d_transpose(x, w, stride, pad);
    ASSERT_EQ(y.shape(), shape);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y.data()[i], expect[i], 1e-12);
  }
}

TEST(ConvTranspose, StrideUpsamplesExactly) {
  const Tensor y = conv2d_transpose(Tensor::zeros({1, 4, 5, 7}), Tensor::zeros({4, 2, 2, 2}), 2, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 10, 14}));
  EXPECT_THROW(conv2d_transpose(Tensor::zeros({1, 4, 5, 7}), Tensor::zeros({3, 2, 2, 2}), 2, 0), ConfigError);
}

// The input gradient of conv2d is the transposed convolution of the output
// gradient with the same kernel read as [Cin, Cout] (the adjoint relation).
TEST(ConvTranspose, IsAdjointOfConvInputGradient) {
  std::mt19937_64 rng(13);
  // 7x7 keeps (H + 2p - k) divisible by the stride so both extents agree.
  for (const auto& [stride, pad] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {2, 0}}) {
    Tensor x = oracle::random_tensor({2, 3, 7, 7}, rng, -1, 1, true);
    const Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng);
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = conv2d(x, w, Tensor(), stride, pad);
    const Tensor dy = oracle::random_tensor(y.shape(), rng);
    tape.backward(oracle::probe(y, dy));
    NoTapeScope no_tape;
    const Tensor via_transpose = conv2d_transpose(dy, w, stride, pad);
    ASSERT_EQ(via_transpose.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], via_transpose.data()[i], 1e-12);
  }
}

TEST(BatchNorm, TrainModeNormalizes) {
  std::mt19937_64 rng(17);
  const Tensor x = oracle::random_tensor({4, 3, 5, 5}, rng, -2, 5);
  for (const auto& [g, b] : std::vector<std::pair<double, double>>{{1.0, 0.0}, {2.0, 3.0}}) {
    BatchNormState state{Tensor::zeros({3}), Tensor::full({3}, 1.0)};
    const Tensor y = batch_norm(x, Tensor::full({3}, g), Tensor::full({3}, b), state, Mode::kTrain);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0, v = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) m += y.data()[(n * 3 + c) * 25 + i];
      m /= 100;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) v += std::pow(y.data()[(n * 3 + c) * 25 + i] - m, 2);
      v /= 100;
      EXPECT_NEAR(m, b, 1e-9);
      EXPECT_NEAR(v, g * g, 1e-3 * g * g);
    }
  }
}

TEST(BatchNorm, RunningStatsFollowMomentum) {
  std::mt19937_64 rng(19);
  const Tensor x = oracle::random_tensor({2, 1, 3, 3}, rng);
  double mu = 0, var = 0;
  for (double v : x.data()) mu += v;
  mu /= 18;
  for (double v : x.data()) var += (v - mu) * (v - mu);
  var /= 18;
  BatchNormState state{Tensor::zeros({1}), Tensor::full({1}, 1.0)};
  batch_norm(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), state, Mode::kTrain);
  EXPECT_NEAR(state.running_mean.item(), 0.1 * mu, 1e-15);
  EXPECT_NEAR(state.running_var.item(), 0.9 + 0.1 * var, 1e-15);
}

TEST(BatchNorm, InferModeClosedForm) {
  std::mt19937_64 rng(23);
  const Tensor x = oracle::random_tensor({2, 2, 3, 3}, rng);
  BatchNormState state{Tensor::from_data({2}, {0.3, -0.2}), Tensor::from_data({2}, {1.7, 0.4})};
  const Tensor gamma = Tensor::from_data({2}, {1.5, -0.5});
  const Tensor beta = Tensor::from_data({2}, {0.1, 2.0});
  const Tensor y = batch_norm(x, gamma, beta, state, Mode::kInfer);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 9; ++i) {
        const std::size_t k = (n * 2 + c) * 9 + i;
        const double expect = (x.data()[k] - state.running_mean.data()[c]) /
                                  std::sqrt(state.running_var.data()[c] + 1e-5) * gamma.data()[c] +
                              beta.data()[c];
        EXPECT_NEAR(y.data()[k], expect, 1e-14);
      }
  EXPECT_EQ(state.running_mean.data()[0], 0.3);
}

TEST(BatchNorm, DegenerateTrainBatchRejected) {
  BatchNormState state{Tensor::zeros({1}), Tensor::full({1}, 1.0)};
  EXPECT_THROW(batch_norm(Tensor::zeros({1, 1, 1, 1}), Tensor::full({1}, 1.0), Tensor::zeros({1}), state, Mode::kTrain),
               ConfigError);
}

// ---- finite-difference gradient suite ----

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

void expect_gradients(const Fn& f, const std::vector<Tensor>& inputs) {
  const oracle::GradCheck g = oracle::check_gradients(f, inputs);
  EXPECT_GT(g.entries, 0u);
  EXPECT_LT(g.max_rel_error, kGradTol);
}

}  // namespace

TEST(Gradients, Elementwise) {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor w = oracle::random_tensor({2, 3}, rng);
    const Tensor a = oracle::random_away_from_zero({2, 3}, rng, 0.05, true);
    const Tensor b = oracle::random_tensor({2, 3}, rng, 0.5, 2.0, true);
    const Tensor s = Tensor::scalar(0.7, true);
    expect_gradients([&](const auto& in) { return oracle::probe(add(in[0], in[1]), w); }, {a, b});
    expect_gradients([&](const auto& in) { return oracle::probe(sub(in[0], in[1]), w); }, {a, b});
    expect_gradients([&](const auto& in) { return oracle::probe(mul(in[0], in[1]), w); }, {a, b});
    expect_gradients([&](const auto& in) { return oracle::probe(div(in[0], in[1]), w); }, {a, b});
    expect_gradients([&](const auto& in) { return oracle::probe(mul(in[1], in[0]), w); }, {a, s});
    expect_gradients([&](const auto& in) { return oracle::probe(div(in[0], in[1]), w); }, {a, s});
    expect_gradients([&](const auto& in) { return oracle::probe(add_scalar(mul_scalar(in[0], 1.3), 0.2), w); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(neg(in[0]), w); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(relu(in[0]), w); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(sigmoid(in[0]), w); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(exp(in[0]), w); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(log(in[0]), w); }, {b});
    expect_gradients([&](const auto& in) { return oracle::probe(square(in[0]), w); }, {a});
  }
}

TEST(Gradients, ReductionsAndReshaping) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = oracle::random_tensor({2, 3, 4, 4}, rng, -1, 1, true);
    const Tensor b = oracle::random_tensor({2, 2, 4, 4}, rng, -1, 1, true);
    const Tensor w2 = oracle::random_tensor({2, 4, 4}, rng);
    const Tensor wp = oracle::random_tensor({4, 2, 4, 3}, rng);
    const Tensor wc = oracle::random_tensor({2, 5, 4, 4}, rng);
    const Tensor ws = oracle::random_tensor({2, 2, 4, 4}, rng);
    const Tensor wd = oracle::random_tensor({2, 3, 2, 2}, rng);
    const Tensor wl = oracle::random_tensor({2, 3, 4, 4}, rng);
    expect_gradients([&](const auto& in) { return sum(square(in[0])); }, {a});
    expect_gradients([&](const auto& in) { return mean(exp(in[0])); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(sum(in[0], 1), w2); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(reshape(in[0], {2, 3, 16}), reshape(wl, {2, 3, 16})); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(permute(in[0], {3, 0, 2, 1}), wp); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(concat({in[0], in[1]}, 1), wc); }, {a, b});
    expect_gradients([&](const auto& in) { return oracle::probe(slice(in[0], 1, 1, 3), ws); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(spatial_downsample(in[0], 2, 2), wd); }, {a});
    expect_gradients([&](const auto& in) { return oracle::probe(log_softmax(in[0]), wl); }, {a});
  }
}

TEST(Gradients, ConvolutionsAndBatchNorm) {
  std::mt19937_64 rng(37);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = oracle::random_tensor({2, 2, 5, 5}, rng, -1, 1, true);
    const Tensor k = oracle::random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
    const Tensor bias = oracle::random_tensor({3}, rng, -1, 1, true);
    const Tensor kt = oracle::random_tensor({2, 3, 2, 2}, rng, -1, 1, true);
    const Tensor gamma = oracle::random_tensor({2}, rng, 0.5, 1.5, true);
    const Tensor beta = oracle::random_tensor({2}, rng, -1, 1, true);
    const Tensor wc = oracle::random_tensor({2, 3, 3, 3}, rng);
    const Tensor wt = oracle::random_tensor({2, 3, 10, 10}, rng);
    const Tensor wb = oracle::random_tensor({2, 2, 5, 5}, rng);
    expect_gradients([&](const auto& in) { return oracle::probe(conv2d(in[0], in[1], in[2], 2, 1), wc); }, {x, k, bias});
    expect_gradients([&](const auto& in) { return oracle::probe(conv2d_transpose(in[0], in[1], 2, 0), wt); }, {x, kt});
    BatchNormState state{Tensor::zeros({2}), Tensor::full({2}, 1.0)};
    expect_gradients([&](const auto& in) { return oracle::probe(batch_norm(in[0], in[1], in[2], state, Mode::kTrain), wb); },
                     {x, gamma, beta});
    BatchNormState fixed{Tensor::from_data({2}, {0.2, -0.1}), Tensor::from_data({2}, {0.8, 1.3})};
    expect_gradients([&](const auto& in) { return oracle::probe(batch_norm(in[0], in[1], in[2], fixed, Mode::kInfer), wb); },
                     {x, gamma, beta});
  }
}

TEST(Tensor, ReplayIsDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(41);
    Tensor x = oracle::random_tensor({2, 2, 6, 6}, rng, -1, 1, true);
    Tensor k = oracle::random_tensor({3, 2, 3, 3}, rng, -1, 1, true);
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = mean(sigmoid(conv2d(x, k, Tensor(), 1, 1)));
    tape.backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}
