#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "marginpick/core/rng.hpp"
#include "marginpick/tensor/gradcheck.hpp"
#include "marginpick/tensor/graph.hpp"
#include "marginpick/tensor/ops.hpp"
#include "marginpick/verify/layer_cases.hpp"

using namespace mp;
using mp::verify::random_tensor;

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), Error);
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_THROW((void)t.reshaped({5, 5}), Error);
  t.ensure_grad();
  EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Graph, IdentityForward) {
  Graph<double> g;
  const NodeId x = g.input({3});
  g.forward({Tensor<double>::vector({1, 2, 3})});
  EXPECT_EQ(g.value(x), Tensor<double>::vector({1, 2, 3}));
}

TEST(Graph, ReluForward) {
  Graph<double> g;
  const NodeId x = g.input({3});
  const NodeId y = ops::relu(g, x);
  g.forward({Tensor<double>::vector({-1, 0, 2})});
  EXPECT_EQ(g.value(y), Tensor<double>::vector({0, 0, 2}));
}

TEST(Graph, ChainMatchesStraightLineOracle) {
  Rng rng(3);
  const Tensor<double> x = random_tensor({4, 5}, rng);
  Tensor<double> a = random_tensor({5, 6}, rng);
  Tensor<double> b = random_tensor({6, 3}, rng);

  Graph<double> g;
  const NodeId in = g.input({4, 5});
  const NodeId out = ops::matmul(g, ops::relu(g, ops::matmul(g, in, g.parameter(a, "a"))), g.parameter(b, "b"));
  g.forward({x});

  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      double expected = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        double hidden = 0.0;
        for (std::size_t m = 0; m < 5; ++m) hidden += x[i * 5 + m] * a[m * 6 + j];
        expected += std::max(hidden, 0.0) * b[j * 3 + k];
      }
      EXPECT_NEAR(g.value(out)[i * 3 + k], expected, 1e-12 * std::max(1.0, std::abs(expected)));
    }
  }
}

TEST(Graph, SquareGradient) {
  Graph<double> g;
  const NodeId x = g.input({1});
  const NodeId f = ops::sum(g, ops::mul(g, x, x));
  g.forward({Tensor<double>::vector({3})});
  NodeId wrt[] = {x};
  const auto grads = g.backward(f, Tensor<double>({}, {1.0}), wrt);
  EXPECT_DOUBLE_EQ(grads.at(x)[0], 6.0);
}

TEST(Graph, LinearGradientEqualsWeights) {
  Tensor<double> w({1, 3}, {0.5, -2.0, 4.0});
  Tensor<double> b({1}, {0.0});
  Graph<double> g;
  const NodeId x = g.input({1, 3});
  const NodeId f = ops::linear(g, x, g.parameter(w, "w"), g.parameter(b, "b"));
  g.forward({Tensor<double>({1, 3}, {1, 2, 3})});
  NodeId wrt[] = {x};
  const auto grads = g.backward(f, Tensor<double>({1, 1}, {1.0}), wrt, false);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(grads.at(x)[i], w[i]);
}

TEST(Graph, BackwardBeforeForwardIsStateError) {
  Graph<double> g;
  const NodeId x = g.input({2});
  const NodeId y = ops::relu(g, x);
  try {
    (void)g.backward(y, Tensor<double>({2}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::state);
  }
}

TEST(Graph, UnknownNodeIsNotFound) {
  Graph<double> g;
  const NodeId x = g.input({2});
  const NodeId y = ops::relu(g, x);
  g.forward({Tensor<double>::vector({1, 2})});
  NodeId wrt[] = {42};
  try {
    (void)g.backward(y, Tensor<double>({2}), wrt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::not_found);
  }
}

TEST(Graph, ShapeMismatchNamesNode) {
  Graph<double> g;
  const NodeId a = g.input({2, 3});
  const NodeId b = g.input({4, 3});
  try {
    ops::matmul(g, a, b, "my_matmul");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
    EXPECT_NE(std::string(e.what()).find("my_matmul"), std::string::npos);
  }
}

TEST(Graph, NonFiniteOutputIsNumericError) {
  Graph<double> g;
  const NodeId x = g.input({2});
  ops::relu(g, x);
  try {
    g.forward({Tensor<double>::vector({1, std::numeric_limits<double>::infinity()})});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(Graph, AdjointsAreLinear) {
  Rng rng(11);
  Tensor<double> w1 = random_tensor({4, 6}, rng);
  Tensor<double> b1 = random_tensor({4}, rng);
  Tensor<double> w2 = random_tensor({4, 6}, rng);
  Tensor<double> b2 = random_tensor({4}, rng);
  Graph<double> g;
  const NodeId x = g.input({3, 6});
  const NodeId o1 = ops::relu(g, ops::linear(g, x, g.parameter(w1, "w1"), g.parameter(b1, "b1")));
  const NodeId o2 = ops::linear(g, x, g.parameter(w2, "w2"), g.parameter(b2, "b2"));
  const NodeId both = ops::add(g, o1, o2);
  const Tensor<double> xin = random_tensor({3, 6}, rng);
  const Tensor<double> seed = random_tensor({3, 4}, rng);
  g.forward({xin});
  NodeId wrt[] = {x};
  const auto gs = g.backward(both, seed, wrt, false).at(x);
  const auto g1 = g.backward(o1, seed, wrt, false).at(x);
  const auto g2 = g.backward(o2, seed, wrt, false).at(x);
  for (std::size_t i = 0; i < gs.size(); ++i) EXPECT_NEAR(gs[i], g1[i] + g2[i], 1e-12);
}

TEST(FiniteDiff, LinearNodeIsExact) {
  Rng rng(5);
  Tensor<double> w = random_tensor({3, 4}, rng);
  Tensor<double> b = random_tensor({3}, rng);
  Graph<double> g;
  const NodeId x = g.input({2, 4});
  const NodeId y = ops::linear(g, x, g.parameter(w, "w"), g.parameter(b, "b"));
  std::vector<Tensor<double>> in{random_tensor({2, 4}, rng)};
  EXPECT_LE(finite_diff_check<double>(g, in, {}, y, x, 1e-2), 1e-10);
  EXPECT_LE(finite_diff_check<double>(g, in, {}, y, 1, 1e-2), 1e-10);
}

TEST(FiniteDiff, ConstantGraphHasZeroError) {
  Graph<double> g;
  const NodeId x = g.input({3});
  const NodeId c = g.constant(Tensor<double>::vector({1, 2, 3}));
  const NodeId y = ops::add(g, c, c);
  std::vector<Tensor<double>> in{Tensor<double>::vector({1, 1, 1})};
  EXPECT_EQ(finite_diff_check<double>(g, in, {}, y, x, 1e-5), 0.0);
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  Graph<double> g;
  const NodeId x = g.input({1});
  std::vector<Tensor<double>> in{Tensor<double>::vector({1})};
  EXPECT_THROW(finite_diff_check<double>(g, in, {}, x, x, 0.0), Error);
  EXPECT_THROW(finite_diff_check<double>(g, in, {}, x, x, -1e-5), Error);
}

TEST(FiniteDiff, ConvNormPoolStack) {
  Rng rng(9);
  Tensor<double> w = random_tensor({4, 3, 5, 5}, rng);
  Tensor<double> b = random_tensor({4}, rng);
  Tensor<double> gamma = random_tensor({4}, rng, 0.5, 1.5);
  Tensor<double> beta = random_tensor({4}, rng);
  Graph<double> g;
  const NodeId x = g.input({2, 3, 9, 9});
  const NodeId wn = g.parameter(w, "w");
  const NodeId bn = g.parameter(b, "b");
  const NodeId gn = g.parameter(gamma, "gamma");
  const NodeId betan = g.parameter(beta, "beta");
  const NodeId h = ops::conv2d(g, x, wn, bn, 1, 2);
  const NodeId normed = g.apply(std::make_unique<ops::GroupStandardizeOp<double>>(0, "instance_norm"),
                                {h, gn, betan});
  const NodeId out = ops::pool2d(g, ops::relu(g, normed), PoolKind::max);
  std::vector<Tensor<double>> in{random_tensor({2, 3, 9, 9}, rng)};
  for (NodeId id : {x, wn, gn, betan, h, normed}) {
    const auto rep = finite_diff_report<double>(g, in, {}, out, id, 1e-5, 100, 3 + id);
    EXPECT_LT(rep.max_rel_error, 1e-5) << "node " << id << " ad=" << rep.worst_analytic << " fd=" << rep.worst_numeric;
    EXPECT_GT(rep.probes, 0u);
  }
}

TEST(FiniteDiff, BiasBeforeInstanceNormHasNoGradient) {
  Rng rng(10);
  Tensor<double> w = random_tensor({4, 3, 3, 3}, rng);
  Tensor<double> b = random_tensor({4}, rng);
  Tensor<double> gamma = random_tensor({4}, rng, 0.5, 1.5);
  Tensor<double> beta = random_tensor({4}, rng);
  Graph<double> g;
  const NodeId x = g.input({2, 3, 6, 6});
  const NodeId wn = g.parameter(w, "w");
  const NodeId bn = g.parameter(b, "b");
  const NodeId gn = g.parameter(gamma, "gamma");
  const NodeId betan = g.parameter(beta, "beta");
  const NodeId normed = g.apply(std::make_unique<ops::GroupStandardizeOp<double>>(0, "instance_norm"),
                                {ops::conv2d(g, x, wn, bn, 1, 1), gn, betan});
  const NodeId out = ops::sum(g, ops::mul(g, normed, normed));
  g.forward({random_tensor({2, 3, 6, 6}, rng)});
  g.backward(out, Tensor<double>({}, {1.0}));
  for (double v : b.grad()) EXPECT_LT(std::abs(v), 1e-10);
}

class LayerGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(LayerGradient, FiniteDifferenceAgreement) {
  const auto r = mp::verify::check_layer(GetParam());
  EXPECT_LT(r.max_rel_error, 1e-5) << r.kind << " worst node " << r.worst_node << " ad=" << r.worst_analytic
                                   << " fd=" << r.worst_numeric;
  EXPECT_GT(r.probes, 0u);
}

INSTANTIATE_TEST_SUITE_P(AllKinds, LayerGradient, ::testing::ValuesIn(mp::verify::layer_kinds()));

TEST(Determinism, ForwardBackwardIndependentOfThreads) {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> w = random_tensor({6, 3, 5, 5}, rng).cast<float>();
    Graph<float> g;
    const NodeId x = g.input({4, 3, 12, 12});
    const NodeId y = ops::sum(g, ops::pool2d(g, ops::relu(g, ops::conv2d(g, x, g.parameter(w, "w"),
                                                                         std::nullopt, 1, 2)),
                                             PoolKind::average));
    g.forward({random_tensor({4, 3, 12, 12}, rng).cast<float>()});
    g.backward(y, Tensor<float>({}, {1.0f}));
    return std::vector<float>(w.grad().begin(), w.grad().end());
  };
  const auto serial = run(17);
  std::vector<float> a, b;
  std::thread t1([&] { a = run(17); });
  std::thread t2([&] { b = run(17); });
  t1.join();
  t2.join();
  EXPECT_EQ(serial, a);
  EXPECT_EQ(serial, b);
}
