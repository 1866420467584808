#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>

#include "eqan/rng.hpp"
#include "eqan/tape.hpp"

using namespace eqan;

namespace {

using Build = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Checks d(r . f(x))/dx from the tape against central differences for every
// input entry.
void check_gradient(const Build& f, std::vector<std::vector<double>> inputs, std::uint64_t seed,
                    double tol = 1e-7, double h = 1e-6) {
  Rng rng(seed);
  auto evaluate = [&](const std::vector<std::vector<double>>& xs, std::vector<double>* r,
                      std::vector<std::vector<double>>* grads) {
    Tape<double> tp;
    std::vector<Var> leaves;
    for (const auto& x : xs) leaves.push_back(tp.leaf(x));
    const Var y = f(tp, leaves);
    if (r->empty()) {
      r->resize(tp.size(y));
      for (double& v : *r) v = rng.uniform(-1, 1);
    }
    double s = 0;
    for (std::size_t k = 0; k < r->size(); ++k) s += (*r)[k] * tp.value(y)[k];
    if (grads) {
      tp.backward(y, *r);
      for (auto v : leaves) grads->push_back(tp.grad(v));
    }
    return s;
  };
  std::vector<double> r;
  std::vector<std::vector<double>> grads;
  evaluate(inputs, &r, &grads);
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      auto plus = inputs, minus = inputs;
      plus[i][k] += h;
      minus[i][k] -= h;
      const double fd = (evaluate(plus, &r, nullptr) - evaluate(minus, &r, nullptr)) / (2 * h);
      EXPECT_NEAR(grads[i][k], fd, tol * std::max(1.0, std::abs(fd))) << "input " << i << " entry " << k;
    }
}

std::vector<double> random_vec(std::size_t n, double lo, double hi, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

PatternPtr small_pattern() {
  std::vector<Edge> e1{{0, 1}, {1, 2}}, e2{{0, 2}, {1, 2}};
  return AssociationPattern::from_edges(3, 3, e1, e2);
}

}  // namespace

TEST(Tape, ElementwiseOps) {
  const auto x = random_vec(6, 0.2, 2.0, 1);
  check_gradient([](auto& tp, const auto& v) { return ops::exp(tp, v[0]); }, {x}, 1);
  check_gradient([](auto& tp, const auto& v) { return ops::log(tp, v[0]); }, {x}, 2);
  check_gradient([](auto& tp, const auto& v) { return ops::softplus(tp, v[0]); }, {random_vec(6, -3, 3, 2)}, 3);
  check_gradient([](auto& tp, const auto& v) { return ops::square(tp, v[0]); }, {random_vec(6, -3, 3, 3)}, 4);
  check_gradient([](auto& tp, const auto& v) { return ops::scale(tp, ops::add_scalar(tp, v[0], 0.3), -1.5); }, {x}, 5);
  check_gradient([](auto& tp, const auto& v) { return ops::relu(tp, v[0]); }, {std::vector<double>{-1, 0.5, 2}}, 6);
}

TEST(Tape, BinaryAndStructuralOps) {
  const auto a = random_vec(5, -1, 1, 7), b = random_vec(5, -1, 1, 8);
  check_gradient([](auto& tp, const auto& v) { return ops::add(tp, v[0], v[1]); }, {a, b}, 7);
  check_gradient([](auto& tp, const auto& v) { return ops::mul(tp, v[0], v[1]); }, {a, b}, 8);
  check_gradient([](auto& tp, const auto& v) { return ops::sum(tp, ops::mul(tp, v[0], v[0])); }, {a}, 9);
  check_gradient([](auto& tp, const auto& v) { return ops::slice(tp, v[0], 1, 3); }, {a}, 10);
  check_gradient([](auto& tp, const auto& v) { return ops::concat(tp, {v[1], v[0], v[1]}); }, {a, b}, 11);
}

TEST(Tape, ChannelOps) {
  const std::size_t plane = 4;
  const auto x = random_vec(3 * plane, -1, 1, 12);
  check_gradient([](auto& tp, const auto& v) { return ops::channel_mix(tp, v[0], v[1], v[2], 2, 4); },
                 {random_vec(6, -1, 1, 13), random_vec(2, -1, 1, 14), x}, 12);
  check_gradient([](auto& tp, const auto& v) { return ops::channel_affine2(tp, v[0], v[1], v[2], 4); },
                 {random_vec(6, -1, 1, 15), x, random_vec(3 * plane, -1, 1, 16)}, 13);
  check_gradient([](auto& tp, const auto& v) { return ops::channel_scale(tp, v[0], v[1], 4); },
                 {random_vec(3, -1, 1, 17), x}, 14);
  check_gradient([](auto& tp, const auto& v) { return ops::weighted_planes(tp, v[0], v[1], 4); },
                 {random_vec(3, -1, 1, 18), x}, 15);
  check_gradient([](auto& tp, const auto& v) { return ops::channel_mean(tp, v[0], 4); }, {x}, 16);
  check_gradient([](auto& tp, const auto& v) { return ops::l2_normalize_planes(tp, v[0], 4); }, {x}, 17);
}

TEST(Tape, ChannelMixValues) {
  Tape<double> tp;
  const auto w = tp.leaf({1, 2, 3, 4});
  const auto b = tp.leaf({0.5, -0.5});
  const auto x = tp.leaf({1, 10, 100, 1000});  // two channels of plane 2
  const auto y = ops::channel_mix(tp, w, b, x, 2, 2);
  EXPECT_EQ(tp.value(y), (std::vector<double>{1 + 200 + 0.5, 10 + 2000 + 0.5, 3 + 400 - 0.5, 30 + 4000 - 0.5}));
}

TEST(Tape, AssocMatvecGradients) {
  const auto pat = small_pattern();
  const Build f = [pat](auto& tp, const auto& v) { return ops::assoc_matvec(tp, pat, v[0], v[1], v[2]); };
  check_gradient(f, {random_vec(9, 0, 1, 19), random_vec(pat->stored(), 0, 1, 20), random_vec(18, 0, 1, 21)}, 18);
}

TEST(Tape, AssocMatvecMatchesKernel) {
  const auto pat = small_pattern();
  const auto u = random_vec(9, 0, 1, 22), w = random_vec(pat->stored(), 0, 1, 23), z = random_vec(9, 0, 1, 24);
  Tape<double> tp;
  const auto y = ops::assoc_matvec(tp, pat, tp.leaf(u), tp.leaf(w), tp.leaf(z));
  std::vector<double> want(9);
  kernels::assoc_matvec<double>(*pat, u, w, z, want);
  EXPECT_EQ(tp.value(y), want);
}

TEST(Tape, NormalizationGradients) {
  const auto x = random_vec(18, 0.1, 2, 25);
  check_gradient([](auto& tp, const auto& v) { return ops::row_normalize(tp, v[0], 3, 3); }, {x}, 19);
  check_gradient([](auto& tp, const auto& v) { return ops::col_normalize(tp, v[0], 3, 3); }, {x}, 20);
  const auto s = random_vec(18, -3, 3, 26);
  check_gradient([](auto& tp, const auto& v) { return ops::row_softmax(tp, v[0], 3, 3); }, {s}, 21);
  check_gradient([](auto& tp, const auto& v) { return ops::sinkhorn_log(tp, v[0], 3, 3, 5); }, {s}, 22);
}

TEST(Tape, SinkhornLogMatchesKernel) {
  const auto s = random_vec(16, -3, 3, 27);
  Tape<double> tp;
  const auto y = ops::sinkhorn_log(tp, tp.leaf(s), 4, 4, 6);
  std::vector<double> want(16);
  kernels::sinkhorn_from_log<double>(s, want, 4, 4, 6);
  EXPECT_EQ(tp.value(y), want);
}

TEST(Tape, SinkhornLogGradientFiniteWhenSaturated) {
  // Scores spread over hundreds of units drive some column sums towards zero;
  // the gradient w.r.t. the log input stays bounded.
  const std::size_t n = 35;
  auto s = random_vec(2 * n * n, -300, 300, 34);
  std::vector<float> sf(s.begin(), s.end());
  Tape<float> tp;
  const auto x = tp.leaf(sf);
  const auto y = ops::sinkhorn_log(tp, x, n, n, 5);
  std::vector<float> r(tp.size(y));
  Rng rng(35);
  for (float& v : r) v = static_cast<float>(rng.uniform(-1, 1));
  tp.backward(y, r);
  for (float g : tp.grad(x)) {
    ASSERT_TRUE(std::isfinite(g));
    EXPECT_LE(std::abs(g), 1e3f);
  }
}

TEST(Tape, SinkhornLogMultiPlaneGradients) {
  check_gradient([](auto& tp, const auto& v) { return ops::sinkhorn_log(tp, v[0], 2, 3, 3); },
                 {random_vec(18, -3, 3, 36)}, 27);
}

TEST(Tape, AffinityOps) {
  const auto sq = std::make_shared<const std::vector<double>>(random_vec(7, 0, 2, 28));
  check_gradient([sq](auto& tp, const auto& v) { return ops::gaussian_kernel(tp, sq, v[0]); },
                 {std::vector<double>{0.8}}, 23);
  const auto pat = small_pattern();
  check_gradient([pat](auto& tp, const auto& v) { return ops::update_pairwise(tp, pat, v[0], v[1]); },
                 {random_vec(18, 0, 1, 29), random_vec(2, 0, 1, 30)}, 24);
  const auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 1, 0, 1, 1, 0, 0, 0, 0});
  check_gradient([mask](auto& tp, const auto& v) { return ops::update_unary(tp, v[0], v[1], 9, mask); },
                 {random_vec(18, 0, 1, 31), random_vec(2, -1, 1, 32)}, 25);
}

TEST(Tape, BceLossValueAndGradient) {
  Tape<double> tp;
  const auto q = tp.leaf(std::vector<double>(4, 0.5));
  const auto l = ops::bce_loss(tp, q, 2, 2, {1, 0});
  EXPECT_NEAR(tp.value(l)[0], 4 * std::numbers::ln2, 1e-15);
  tp.backward(l);
  EXPECT_EQ(tp.grad(q), (std::vector<double>{2, -2, -2, 2}));
  check_gradient([](auto& tp, const auto& v) { return ops::bce_loss(tp, v[0], 3, 3, {2, 0}); },
                 {random_vec(9, 0.05, 0.95, 33)}, 26);
}

TEST(Tape, BceLossClampsAndRejectsNan) {
  Tape<double> tp;
  const auto q = tp.leaf({1.0, 0.0});
  const auto l = ops::bce_loss(tp, q, 1, 2, {1});
  EXPECT_NEAR(tp.value(l)[0], -2 * std::log(1e-12), 1e-3);
  Tape<double> tp2;
  EXPECT_THROW(ops::bce_loss(tp2, tp2.leaf({std::nan(""), 0.5}), 1, 2, {0}), DomainError);
}

TEST(Tape, BceLossClampIsFiniteInFloat) {
  Tape<float> tf;
  const auto lf = ops::bce_loss(tf, tf.leaf({1.0f, 1.5f}), 1, 2, {1});
  Tape<double> td;
  const auto ld = ops::bce_loss(td, td.leaf({1.0, 1.5}), 1, 2, {1});
  ASSERT_TRUE(std::isfinite(tf.value(lf)[0]));
  EXPECT_NEAR(tf.value(lf)[0], td.value(ld)[0], 1e-4);
}

TEST(Tape, BackwardTwiceIsUsageError) {
  Tape<double> tp;
  const auto x = tp.leaf({1, 2});
  const auto y = ops::sum(tp, x);
  tp.backward(y);
  EXPECT_EQ(tp.grad(x), (std::vector<double>{1, 1}));
  EXPECT_THROW(tp.backward(y), UsageError);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape<double> tp;
  const auto c = tp.constant({3, 4});
  const auto x = tp.leaf({1, 2});
  const auto y = ops::sum(tp, ops::mul(tp, c, x));
  EXPECT_FALSE(tp.needs_grad(c));
  tp.backward(y);
  EXPECT_EQ(tp.grad(x), (std::vector<double>{3, 4}));
  EXPECT_EQ(tp.grad(c), (std::vector<double>{0, 0}));
}

TEST(Tape, FanOutAccumulates) {
  Tape<double> tp;
  const auto x = tp.leaf({2.0});
  const auto y = ops::add(tp, ops::square(tp, x), ops::scale(tp, x, 3.0));
  tp.backward(y);
  EXPECT_DOUBLE_EQ(tp.grad(x)[0], 7.0);
}
