#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "test_support.hpp"
#include "voxelrcnn/checkpoint.hpp"
#include "voxelrcnn/conv.hpp"
#include "voxelrcnn/errors.hpp"
#include "voxelrcnn/ops.hpp"
#include "voxelrcnn/optim.hpp"

namespace voxelrcnn {
namespace {

using testing::check_gradients;
using testing::probe;
using testing::random_tensor;

TEST(Primitives, ReluExample) {
  Tensor x({3}, {-1.0, 0.0, 2.0});
  auto y = ops::relu(x);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  auto y = ops::softmax(Tensor({2}, {0.0, 0.0}), 0);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.5);
}

TEST(Primitives, SoftmaxSumsToOneAlongAxis) {
  Rng rng(3);
  for (int axis = 0; axis < 3; ++axis) {
    auto x = random_tensor({3, 4, 5}, rng, -20, 20, false);
    auto y = ops::softmax(x, axis);
    const std::int64_t len = x.dim(axis);
    const std::int64_t inner = axis == 2 ? 1 : (axis == 1 ? 5 : 20);
    const std::int64_t outer = 60 / (len * inner);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t j = 0; j < inner; ++j) {
        double s = 0;
        for (std::int64_t k = 0; k < len; ++k) s += y.data()[static_cast<std::size_t>((o * len + k) * inner + j)];
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
  EXPECT_THROW(ops::softmax(Tensor({2, 2}), 2), ArgumentError);
}

TEST(Primitives, DropoutEvalIsIdentity) {
  Rng rng(1);
  auto x = random_tensor({4, 4}, rng);
  auto y = ops::dropout(x, 0.5, false, &rng);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
            std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(Primitives, DropoutTrainScalesKeptUnits) {
  Rng rng(5);
  Tensor x({10000}, 1.0);
  auto y = ops::dropout(x, 0.25, true, &rng);
  int kept = 0;
  for (double v : y.data()) {
    if (v != 0.0) {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
      ++kept;
    }
  }
  EXPECT_NEAR(kept / 10000.0, 0.75, 0.02);
}

TEST(Autodiff, SumGradIsOnes) {
  Tensor x({2, 3}, 0.5);
  x.set_requires_grad(true);
  backward(ops::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Autodiff, SecondBackwardDoublesLeafGrads) {
  Rng rng(2);
  auto x = random_tensor({5}, rng);
  auto loss = ops::sum(ops::mul(ops::sigmoid(x), x));
  backward(loss);
  std::vector<double> first(x.grad().begin(), x.grad().end());
  backward(loss);
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * first[i]);
}

TEST(Autodiff, NonScalarLossRejected) {
  Tensor x({3}, 1.0);
  x.set_requires_grad(true);
  EXPECT_THROW(backward(ops::relu(x)), ContractError);
}

TEST(Autodiff, DisconnectedLossRejected) {
  Tensor x({3}, 1.0);
  EXPECT_THROW(backward(ops::sum(x)), ContractError);
}

TEST(Autodiff, BackwardVisitsEachNodeOnceInReverseTopologicalOrder) {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  auto a = ops::relu(x);
  auto b = ops::sigmoid(x);
  auto c = ops::add(ops::mul(a, b), a);  // diamond on x and a
  auto loss = ops::sum(c);
  auto order = backward_order(loss);
  std::set<const Node*> unique(order.begin(), order.end());
  EXPECT_EQ(unique.size(), order.size());
  // Every node appears before all of its parents.
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (const auto& p : order[i]->parents) {
      auto it = std::find(order.begin(), order.end(), p.get());
      ASSERT_NE(it, order.end());
      EXPECT_GT(it - order.begin(), static_cast<std::ptrdiff_t>(i));
    }
  }
}

TEST(Autodiff, NoGradGuardSkipsRecording) {
  Tensor x({2}, 1.0);
  x.set_requires_grad(true);
  NoGradGuard guard;
  auto y = ops::relu(x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node().parents.empty());
}

TEST(Autodiff, IdenticalSeedsGiveBitIdenticalGrads) {
  auto run = [] {
    Rng rng(77);
    auto x = random_tensor({1, 2, 5, 5, 5}, rng);
    auto w = random_tensor({3, 2, 3, 3, 3}, rng);
    ops::ConvOptions opt;
    opt.padding = ops::Padding::kSame;
    auto y = ops::relu(ops::conv3d(x, w, {}, opt));
    backward(probe(y, 4));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

// Finite-difference property over random small shapes for each primitive.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchCentralDifferences) {
  Rng rng(1000 + static_cast<std::uint64_t>(GetParam()));
  auto dim = [&] { return rng.uniform_int(1, 4); };
  const Shape s{1 + rng.uniform_int(0, 1), 1 + rng.uniform_int(0, 2), dim(), dim(), dim()};

  auto a = random_tensor(s, rng);
  auto b = random_tensor(s, rng);
  EXPECT_LT(check_gradients([&] { return probe(ops::add(a, b), 1); }, {a, b}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return probe(ops::sub(a, b), 1); }, {a, b}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return probe(ops::mul(a, b), 2); }, {a, b}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return probe(ops::scale(a, -1.7), 2); }, {a}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return probe(ops::relu(a), 3); }, {a}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return probe(ops::sigmoid(a), 4); }, {a}).rel_error, 1e-4);
  const int axis = static_cast<int>(rng.uniform_int(0, 4));
  EXPECT_LT(check_gradients([&] { return probe(ops::softmax(a, axis), 5); }, {a}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return probe(ops::concat({a, b, a}, axis), 6); }, {a, b}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return probe(ops::global_avg_pool(a), 7); }, {a}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return probe(ops::channels_last(a), 8); }, {a}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return ops::mean(ops::mul(a, a)); }, {a}).rel_error, 1e-4);

  auto gamma = random_tensor({s[1]}, rng, 0.5, 1.5);
  auto beta = random_tensor({s[1]}, rng);
  if (s[2] * s[3] * s[4] > 1) {
    EXPECT_LT(check_gradients([&] { return probe(ops::instance_norm(a, gamma, beta), 9); },
                              {a, gamma, beta}).rel_error, 1e-4);
  }
  EXPECT_LT(check_gradients([&] {
              Rng drop(42);
              return probe(ops::dropout(a, 0.3, true, &drop), 10);
            }, {a}).rel_error, 1e-4);

  auto x2 = random_tensor({s[0] + 1, s[2] + 2}, rng);
  auto w2 = random_tensor({3, s[2] + 2}, rng);
  auto b2 = random_tensor({3}, rng);
  EXPECT_LT(check_gradients([&] { return probe(ops::linear(x2, w2, b2), 11); }, {x2, w2, b2}).rel_error, 1e-4);
  EXPECT_LT(check_gradients([&] { return probe(ops::gather_rows(x2, {0, 0, x2.dim(0) - 1}), 12); }, {x2}).rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, PrimitiveGradients, ::testing::Range(0, 20));

TEST(Sgd, PlainStepMovesByLearningRate) {
  Tensor p({1}, 1.0);
  p.set_requires_grad(true);
  ParameterList params{{"p", p}};
  p.mutable_grad()[0] = 1.0;
  SgdState st(0.1, 0.0);
  sgd_step(st, params);
  EXPECT_NEAR(p.data()[0], 0.9, 1e-15);
}

TEST(Sgd, MomentumRecurrence) {
  Tensor p({1}, 0.0);
  p.set_requires_grad(true);
  ParameterList params{{"p", p}};
  SgdState st(0.1, 0.9);
  p.mutable_grad()[0] = 1.0;
  sgd_step(st, params);
  sgd_step(st, params);
  EXPECT_NEAR(p.data()[0], -0.29, 1e-15);
}

TEST(Sgd, ZeroGradLeavesParameters) {
  Tensor p({3}, 2.0);
  p.set_requires_grad(true);
  ParameterList params{{"p", p}};
  p.mutable_grad();
  SgdState st(0.1, 0.9);
  sgd_step(st, params);
  for (double v : p.data()) EXPECT_EQ(v, 2.0);
}

TEST(Sgd, MissingGradIsAContractError) {
  Tensor p({1}, 0.0);
  ParameterList params{{"p", p}};
  SgdState st(0.1, 0.9);
  EXPECT_THROW(sgd_step(st, params), ContractError);
  EXPECT_THROW(SgdState(0.0, 0.9), ArgumentError);
  EXPECT_THROW(SgdState(0.1, 1.0), ArgumentError);
}

TEST(Plateau, ImprovingMetricKeepsRate) {
  SgdState st(0.01, 0.9);
  for (int e = 0; e < 20; ++e) plateau_update(st, 10.0 - e);
  EXPECT_EQ(st.lr, 0.01);
}

TEST(Plateau, FlatMetricHalvesAfterPatience) {
  SgdState st(0.01, 0.9);
  const int patience = st.plateau.patience;
  for (int e = 0; e < patience; ++e) plateau_update(st, 1.0);
  EXPECT_EQ(st.lr, 0.01);
  plateau_update(st, 1.0);
  EXPECT_DOUBLE_EQ(st.lr, 0.005);
  for (int e = 0; e < patience; ++e) plateau_update(st, 1.0);
  EXPECT_DOUBLE_EQ(st.lr, 0.0025);
}

TEST(Checkpoint, RoundTripAndLayout) {
  const auto path = std::filesystem::temp_directory_path() / "voxelrcnn_ckpt_test.bin";
  Rng rng(9);
  ParameterList params{{"conv.w", random_tensor({2, 1, 3, 3, 3}, rng)}, {"b", random_tensor({2}, rng)}};
  save_checkpoint(path, params);
  // magic + version + count + (4 + 6 + 4 + 5*8 + 54*8) + (4 + 1 + 4 + 8 + 2*8)
  EXPECT_EQ(std::filesystem::file_size(path), 12u + 486u + 33u);
  std::ifstream is(path, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "VXRC");

  ParameterList loaded{{"conv.w", Tensor({2, 1, 3, 3, 3})}, {"b", Tensor({2})}};
  load_checkpoint(path, loaded);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::int64_t j = 0; j < params[i].tensor.numel(); ++j) {
      EXPECT_EQ(loaded[i].tensor.data()[static_cast<std::size_t>(j)], params[i].tensor.data()[static_cast<std::size_t>(j)]);
    }
  }
  ParameterList wrong{{"conv.w", Tensor({2, 1, 3, 3, 2})}, {"b", Tensor({2})}};
  EXPECT_THROW(load_checkpoint(path, wrong), FormatError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace voxelrcnn
