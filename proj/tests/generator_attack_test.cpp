#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "liar/generator_attack.hpp"
#include "support/oracles.hpp"

using namespace liar;
using namespace liar::attack;
namespace lt = liar::testing;

namespace {

std::vector<models::GeneratorLM> random_lms(std::uint64_t seed, std::size_t n, std::size_t vocab,
                                            std::size_t dim) {
  std::vector<models::GeneratorLM> out;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, "gcg-test-lm", {i});
    out.emplace_back(models::GeneratorParams::random(vocab, dim + i, 2, rng));
  }
  return out;
}

std::vector<TokenSeq> random_queries(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(lt::random_tokens(rng, 2 + uniform_index(rng, 3), vocab));
  return out;
}

std::vector<const models::GeneratorLM*> pointers(const std::vector<models::GeneratorLM>& lms) {
  std::vector<const models::GeneratorLM*> out;
  for (const auto& m : lms) out.push_back(&m);
  return out;
}

}  // namespace

TEST(AttackContext, LayoutAndSpans) {
  const AdversarialDocument d("adv", {10, 11}, {20}, {4, 4, 4});
  const TokenSeq q{30, 31};
  const auto ctx = attack_context(d, q);
  ASSERT_EQ(ctx.size(), d.size() + q.size() + 1);
  EXPECT_EQ(TokenSeq(ctx.begin(), ctx.begin() + 2), d.ars());
  EXPECT_EQ(ctx[2], 20u);
  EXPECT_EQ(TokenSeq(ctx.begin() + 3, ctx.begin() + 6), d.ags());
  EXPECT_EQ(ctx[6], corpus::kSep);
  EXPECT_EQ(TokenSeq(ctx.begin() + 7, ctx.end()), q);
  EXPECT_EQ(attack_context(d, TokenSeq{}).back(), corpus::kSep);
}

TEST(EnsembleLoss, MatchesLoopOracleAndIsSymmetric) {
  Rng rng = make_rng(1, "gcg-test");
  const auto lms = random_lms(1, 3, 24, 6);
  const auto queries = random_queries(rng, 4, 24);
  const AdversarialDocument d("adv", lt::random_tokens(rng, 3, 24), {20}, {4, 4});
  const TokenSeq target{7, 8};
  const auto ens = EnsembleSet::of(lms);
  std::vector<double> per_model;
  const double l = ensemble_loss(d, queries, target, ens, &per_model);
  EXPECT_NEAR(l, lt::ref_ensemble_loss(d.full(), queries, target, pointers(lms)), 1e-12);
  ASSERT_EQ(per_model.size(), 3u);
  EXPECT_NEAR((per_model[0] + per_model[1] + per_model[2]) / 3.0, l, 1e-12);
  const EnsembleSet reversed({&lms[2], &lms[1], &lms[0]});
  EXPECT_NEAR(ensemble_loss(d, queries, target, reversed), l, 1e-12);
  const EnsembleSet one({&lms[0]}), twice({&lms[0], &lms[0]});
  EXPECT_NEAR(ensemble_loss(d, queries, target, one), per_model[0], 1e-12);
  EXPECT_NEAR(ensemble_loss(d, queries, target, twice), per_model[0], 1e-12);
  EXPECT_THROW(ensemble_loss(d, {}, target, ens), std::invalid_argument);
}

TEST(Ensemble, RejectsMismatchedVocabularies) {
  const auto a = random_lms(2, 1, 24, 6), b = random_lms(3, 1, 25, 6);
  EXPECT_THROW(EnsembleSet({&a[0], &b[0]}), std::invalid_argument);
  EXPECT_THROW(EnsembleSet({}), std::invalid_argument);
}

TEST(AgsGradients, MatchFiniteDifferences) {
  Rng rng = make_rng(4, "gcg-test");
  Rng prng = make_rng(4, "gcg-test-params");
  auto params = models::GeneratorParams::random(24, 8, 2, prng);
  // Queries draw from ids below 20, leaving the AGS tokens unique in every context.
  const auto queries = random_queries(rng, 3, 20);
  const AdversarialDocument d("adv", {5, 6, 7}, {8}, {20, 21, 22});
  const TokenSeq target{9, 10};
  const std::vector<models::GeneratorLM> lms{models::GeneratorLM(params)};
  const auto g = ags_token_gradients(d, queries, target, EnsembleSet::of(lms));
  ASSERT_EQ(g.size(), 1u);
  ASSERT_EQ(g[0].rows(), 3u);
  for (std::size_t p = 0; p < 3; ++p) {
    for (std::size_t c = 0; c < 8; ++c) {
      auto shifted = [&](double h) {
        auto pp = params;
        pp.embedding(d.ags()[p], c) += h;
        const std::vector<models::GeneratorLM> one{models::GeneratorLM(pp)};
        return ensemble_loss(d, queries, target, EnsembleSet::of(one));
      };
      const double fd = (shifted(1e-5) - shifted(-1e-5)) / 2e-5;
      EXPECT_TRUE(std::isfinite(g[0](p, c)));
      EXPECT_LT(std::abs(g[0](p, c) - fd) / std::max({std::abs(fd), std::abs(g[0](p, c)), 1e-3}), 1e-5);
    }
  }
}

TEST(GreedyCoordinateStep, MatchesExhaustiveSearch) {
  int compared = 0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    Rng rng = make_rng(seed, "gcg-exhaustive");
    const auto lms = random_lms(100 + seed, 2, 16, 4);
    const auto ens = EnsembleSet::of(lms);
    const auto queries = random_queries(rng, 2, 16);
    const TokenSeq target{lt::random_tokens(rng, 2, 16)};
    const AdversarialDocument d("adv", lt::random_tokens(rng, 2, 16), {15},
                                lt::random_tokens(rng, 4, 16));
    auto state = make_ags_state(d, queries, target, ens);
    double best = state.loss;
    std::size_t best_pos = 0;
    TokenId best_tok = 0;
    for (std::size_t p = 0; p < 4; ++p) {
      for (TokenId t = corpus::kNumReserved; t < 16; ++t) {
        if (t == d.ags()[p]) continue;
        auto trial = d;
        trial.set_ags(p, t);
        const double l = ensemble_loss(trial, queries, target, ens);
        if (l < best) {
          best = l;
          best_pos = p;
          best_tok = t;
        }
      }
    }
    const bool applied = greedy_coordinate_step(state, queries, target, ens, 4 * 16);
    EXPECT_EQ(applied, best < ensemble_loss(d, queries, target, ens));
    if (!applied) continue;
    ++compared;
    const double chosen = state.loss;
    // Near-ties may resolve to an equivalent flip.
    EXPECT_NEAR(chosen, best, 1e-12);
    if (std::abs(chosen - best) == 0.0) {
      EXPECT_EQ(state.log.back().position, best_pos);
      EXPECT_EQ(state.log.back().to, best_tok);
    }
    EXPECT_EQ(state.doc.ars(), d.ars());
    EXPECT_EQ(state.doc.ats(), d.ats());
  }
  EXPECT_GT(compared, 6);
}

TEST(GreedyCoordinateStep, LossNeverIncreasesAndRecordMatchesFreshLoss) {
  Rng rng = make_rng(5, "gcg-test");
  const auto lms = random_lms(5, 2, 32, 6);
  const auto ens = EnsembleSet::of(lms);
  const auto queries = random_queries(rng, 3, 32);
  const TokenSeq target{11, 12, 13};
  auto state = make_ags_state(AdversarialDocument("adv", {5, 6, 7, 8}, {30}, TokenSeq(5, corpus::kInit)),
                              queries, target, ens);
  for (int s = 0; s < 15; ++s) {
    const double before = state.loss;
    greedy_coordinate_step(state, queries, target, ens, 16);
    EXPECT_LE(state.loss, before);
    EXPECT_DOUBLE_EQ(state.loss, ensemble_loss(state.doc, queries, target, ens));
  }
  for (const auto& f : state.log) EXPECT_GE(f.to, corpus::kNumReserved);
}

TEST(GreedyCoordinateStep, MinimumGainBlocksSmallImprovements) {
  Rng rng = make_rng(6, "gcg-test");
  const auto lms = random_lms(6, 1, 24, 6);
  const auto ens = EnsembleSet::of(lms);
  const auto queries = random_queries(rng, 2, 24);
  const TokenSeq target{9};
  auto state = make_ags_state(AdversarialDocument("adv", {5, 6}, {20}, TokenSeq(3, corpus::kInit)),
                              queries, target, ens);
  const auto before = state.doc;
  // Requiring the loss to halve in one flip is out of reach on this instance
  // unless the exhaustive best already does so.
  double best = state.loss;
  for (std::size_t p = 0; p < 3; ++p) {
    for (TokenId t = corpus::kNumReserved; t < 24; ++t) {
      auto trial = before;
      trial.set_ags(p, t);
      best = std::min(best, ensemble_loss(trial, queries, target, ens));
    }
  }
  const bool applied = greedy_coordinate_step(state, queries, target, ens, 3 * 24, 0.5);
  EXPECT_EQ(applied, best < 0.5 * ensemble_loss(before, queries, target, ens));
}

TEST(GreedyCoordinateStep, FixedPointIsUnchanged) {
  Rng rng = make_rng(7, "gcg-test");
  const auto lms = random_lms(7, 1, 16, 4);
  const auto ens = EnsembleSet::of(lms);
  const auto queries = random_queries(rng, 2, 16);
  const TokenSeq target{9, 10};
  auto state = make_ags_state(AdversarialDocument("adv", {5}, {15}, TokenSeq(2, corpus::kInit)),
                              queries, target, ens);
  while (greedy_coordinate_step(state, queries, target, ens, 2 * 16)) {
  }
  const auto frozen = state.doc;
  EXPECT_FALSE(greedy_coordinate_step(state, queries, target, ens, 2 * 16));
  EXPECT_EQ(state.doc, frozen);
}

TEST(TrainAgs, ZeroStepsKeepsInitAndTraceIsNonIncreasing) {
  Rng rng = make_rng(8, "gcg-test");
  const corpus::Vocabulary v(48);
  const auto goal = corpus::default_goal(v);
  const auto lms = random_lms(8, 2, 48, 6);
  const auto ens = EnsembleSet::of(lms);
  const auto pool = random_queries(rng, 10, 32);
  const AdversarialDocument d("adv", {5, 6, 7}, goal.ats_tokens, {9, 9, 9});
  AgsConfig cfg;
  cfg.steps = 0;
  EXPECT_EQ(train_ags(d, pool, goal, ens, cfg, 1).doc.ags(), TokenSeq(3, corpus::kInit));
  cfg.steps = 8;
  cfg.top_k = 16;
  const auto res = train_ags(d, pool, goal, ens, cfg, 1);
  for (std::size_t i = 1; i < res.loss_trace.size(); ++i) {
    EXPECT_LT(res.loss_trace[i], res.loss_trace[i - 1]);
  }
  EXPECT_EQ(res.doc.ars(), d.ars());
  EXPECT_EQ(res.doc.ats(), d.ats());
  EXPECT_EQ(train_ags(d, pool, goal, ens, cfg, 1).doc, res.doc);
}

TEST(SampleQueries, DistinctAndDeterministic) {
  std::vector<TokenSeq> pool;
  for (TokenId i = 0; i < 10; ++i) pool.push_back({i});
  const auto a = sample_queries(pool, 6, 3, "s", {1});
  EXPECT_EQ(a, sample_queries(pool, 6, 3, "s", {1}));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
  EXPECT_THROW(sample_queries(pool, 11, 3, "s", {1}), std::invalid_argument);
}
