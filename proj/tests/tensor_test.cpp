#include <gtest/gtest.h>

#include <cmath>

#include "liar/tape.hpp"
#include "support/oracles.hpp"

using namespace liar;
using ad::Tape;
using ad::Tensor;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5, 0.0)), std::invalid_argument);
  const Tensor t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Tape, SoftmaxOfZerosIsUniform) {
  Tape tape;
  const auto y = tape.value(tape.softmax(tape.constant(Tensor::row({0, 0, 0}))));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Tape, DotByHand) {
  Tape tape;
  const auto v = tape.dot(tape.constant(Tensor::row({1, 2})), tape.constant(Tensor::row({3, 4})));
  EXPECT_DOUBLE_EQ(tape.value(v).item(), 11.0);
}

TEST(Tape, NllOfUniformLogitsIsLogV) {
  Tape tape;
  const TokenId targets[] = {7};
  const auto v = tape.nll(tape.constant(Tensor::zeros(1, 32)), targets);
  EXPECT_NEAR(tape.value(v).item(), std::log(32.0), 1e-12);
}

TEST(Tape, SquareDerivative) {
  Tape tape;
  const auto x = tape.leaf(Tensor::scalar(3.0), "x");
  const auto g = tape.backward(tape.dot(x, x));
  EXPECT_DOUBLE_EQ(g[x].item(), 6.0);
}

TEST(Tape, UnreachedLeafGetsZeros) {
  Tape tape;
  const auto x = tape.leaf(Tensor::row({1, 2}), "x");
  const auto unused = tape.leaf(Tensor::zeros(2, 3), "u");
  const auto g = tape.backward(tape.sum(x));
  EXPECT_EQ(g[unused], Tensor::zeros(2, 3));
  EXPECT_EQ(g.at("u").shape(), (std::vector<std::size_t>{2, 3}));
}

TEST(Tape, NonScalarBackwardThrows) {
  Tape tape;
  const auto x = tape.leaf(Tensor::row({1, 2}), "x");
  EXPECT_THROW(tape.backward(tape.tanh(x)), std::invalid_argument);
}

TEST(Tape, ShapeErrorNamesBothShapes) {
  Tape tape;
  const auto a = tape.constant(Tensor::zeros(4, 3));
  const auto b = tape.constant(Tensor::zeros(2, 5));
  try {
    tape.matmul(a, b);
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("4x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("2x5"), std::string::npos) << msg;
  }
}

TEST(Tape, MatmulTanhSoftmaxNllMatchesFiniteDifferences) {
  Rng rng = make_rng(1, "tensor-test");
  Tensor a = Tensor::zeros(4, 3), w = Tensor::zeros(3, 5);
  for (double& v : a.data()) v = normal(rng);
  for (double& v : w.data()) v = normal(rng);
  const TokenId targets[] = {0, 4, 2, 1};
  auto loss = [&](const Tensor& av, const Tensor& wv, ad::GradientMap* g, ad::Var* la,
                  ad::Var* lw) {
    Tape tape;
    const auto va = tape.leaf(av, "a"), vw = tape.leaf(wv, "w");
    const auto out = tape.nll(tape.log_softmax(tape.softmax(tape.tanh(tape.matmul(va, vw)))), targets);
    if (g != nullptr) {
      *g = tape.backward(out);
      *la = va;
      *lw = vw;
    }
    return tape.value(out).item();
  };
  ad::GradientMap g;
  ad::Var la, lw;
  loss(a, w, &g, &la, &lw);
  double worst = 0.0;
  for (auto [t, leaf] : {std::pair<Tensor*, ad::Var*>{&a, &la}, {&w, &lw}}) {
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double x0 = t->data()[i];
      t->data()[i] = x0 + 1e-5;
      const double up = loss(a, w, nullptr, nullptr, nullptr);
      t->data()[i] = x0 - 1e-5;
      const double down = loss(a, w, nullptr, nullptr, nullptr);
      t->data()[i] = x0;
      const double fd = (up - down) / 2e-5;
      const double an = g[*leaf].data()[i];
      worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3}));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Tape, RandomCompositeGraphsMatchFiniteDifferences) {
  Rng rng = make_rng(2, "tensor-test-graphs");
  for (int i = 0; i < 60; ++i) {
    liar::testing::RandomGraph g(rng, 6);
    EXPECT_LE(g.depth(), 6u);
    EXPECT_LT(g.max_fd_error(1e-5, 1e-3), 1e-5) << "graph " << i;
  }
}

TEST(Tape, BackwardIsLinear) {
  Rng rng = make_rng(3, "tensor-test-linear");
  Tensor x = Tensor::zeros(3, 4);
  for (double& v : x.data()) v = normal(rng);
  auto grad = [&](double a, double b) {
    Tape tape;
    const auto lx = tape.leaf(x, "x");
    const auto f = tape.sum(tape.tanh(lx));
    const auto h = tape.sum(tape.mul(lx, lx));
    return tape.backward(tape.add(tape.scale(f, a), tape.scale(h, b)))[lx];
  };
  const Tensor gf = grad(1.0, 0.0), gh = grad(0.0, 1.0), gc = grad(2.5, -0.75);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(gc.data()[i], 2.5 * gf.data()[i] - 0.75 * gh.data()[i], 1e-10);
  }
}

TEST(Tape, SoftmaxRowsSumToOneAndLogSoftmaxAgrees) {
  Rng rng = make_rng(4, "tensor-test-softmax");
  Tensor x = Tensor::zeros(5, 7);
  for (double& v : x.data()) v = 10.0 * normal(rng);
  Tape tape;
  const auto cx = tape.constant(x);
  const Tensor s = tape.value(tape.softmax(cx));
  const Tensor ls = tape.value(tape.log_softmax(cx));
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      sum += s(r, c);
      EXPECT_NEAR(ls(r, c), std::log(s(r, c)), 1e-10);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Tape, DeterministicForwardAndBackward) {
  Rng rng = make_rng(5, "tensor-test-det");
  liar::testing::RandomGraph g(rng, 6);
  auto run = [&] {
    Tape tape;
    std::vector<ad::Var> vars;
    const auto out = g.build(tape, g.leaves(), &vars);
    const auto grads = tape.backward(out);
    std::vector<Tensor> gs;
    for (auto v : vars) gs.push_back(grads[v]);
    return std::pair{tape.value(out), gs};
  };
  EXPECT_EQ(run(), run());
}

TEST(TokenGradients, IndependentPositionIsZero) {
  Tape tape;
  const auto table = tape.constant(Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}));
  const TokenId ids[] = {0, 2};
  const auto e = tape.gather(table, ids);
  tape.mark_token_embeddings(e);
  const std::size_t pick[] = {0};
  const auto loss = tape.sum(tape.select_rows(e, pick));
  const std::size_t pos[] = {0, 1};
  const Tensor g = tape.grad_wrt_token_embeddings(loss, pos);
  EXPECT_DOUBLE_EQ(g(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(g(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(g(1, 1), 0.0);
}

TEST(TokenGradients, SingleTokenDotIsTheVector) {
  Tape tape;
  const auto table = tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const TokenId ids[] = {1};
  const auto e = tape.gather(table, ids);
  tape.mark_token_embeddings(e);
  const auto loss = tape.dot(e, tape.constant(Tensor::row({0.5, -1.0, 2.0})));
  const std::size_t pos[] = {0};
  const Tensor g = tape.grad_wrt_token_embeddings(loss, pos);
  EXPECT_EQ(g, Tensor::matrix(1, 3, {0.5, -1.0, 2.0}));
}

TEST(TokenGradients, UnbackedPositionThrows) {
  Tape tape;
  const auto table = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  const TokenId ids[] = {0};
  const auto e = tape.gather(table, ids);
  tape.mark_token_embeddings(e);
  const std::size_t pos[] = {3};
  EXPECT_THROW(tape.grad_wrt_token_embeddings(tape.sum(e), pos), std::out_of_range);
}

TEST(TokenGradients, MeanPoolSimilarityMatchesFiniteDifferences) {
  Rng rng = make_rng(6, "tensor-test-pool");
  Tensor table = Tensor::zeros(5, 4), w = Tensor::zeros(4, 4), q = Tensor::zeros(1, 4);
  for (auto* t : {&table, &w, &q}) {
    for (double& v : t->data()) v = normal(rng);
  }
  const TokenId ids[] = {1, 3, 4};
  auto sim = [&](const Tensor& rows) {
    Tape tape;
    const auto pooled = tape.mean(tape.constant(rows), ad::Axis::kRows);
    return tape.value(tape.dot(tape.tanh(tape.matmul(pooled, tape.constant(w))), tape.constant(q))).item();
  };
  Tensor rows = Tensor::zeros(3, 4);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 4; ++c) rows(i, c) = table(ids[i], c);
  }
  Tape tape;
  const auto e = tape.gather(tape.constant(table), ids);
  tape.mark_token_embeddings(e);
  const auto loss = tape.dot(
      tape.tanh(tape.matmul(tape.mean(e, ad::Axis::kRows), tape.constant(w))), tape.constant(q));
  const std::size_t pos[] = {0, 1, 2};
  const Tensor g = tape.grad_wrt_token_embeddings(loss, pos);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      const double x0 = rows(i, c);
      rows(i, c) = x0 + 1e-5;
      const double up = sim(rows);
      rows(i, c) = x0 - 1e-5;
      const double down = sim(rows);
      rows(i, c) = x0;
      const double fd = (up - down) / 2e-5;
      EXPECT_LT(std::abs(g(i, c) - fd) / std::max({std::abs(fd), std::abs(g(i, c)), 1e-3}), 1e-5);
    }
  }
}
