// Micro-benchmarks for the attack inner loops at desk-scale sizes.
#include <benchmark/benchmark.h>

#include "liar/corpus.hpp"
#include "liar/generator_attack.hpp"
#include "liar/models.hpp"
#include "liar/retrieval.hpp"
#include "liar/retriever_attack.hpp"
#include "liar/util.hpp"

using namespace liar;

namespace {

constexpr std::size_t kVocab = 256;

struct Setup {
  corpus::Vocabulary vocab{kVocab};
  corpus::GoalSpec goal = corpus::default_goal(vocab);
  corpus::KnowledgeBase kb;
  models::Retriever retriever;
  std::vector<models::GeneratorLM> lms;
  std::vector<TokenSeq> queries;
  attack::AdversarialDocument doc;

  Setup() {
    corpus::CorpusConfig cc;
    kb = corpus::gen_corpus(cc, vocab, goal.reserved_tokens());
    Rng rng = make_rng(5, "bench");
    retriever.query = models::Encoder::random(kVocab, 16, rng, 2.0);
    for (int k = 0; k < 2; ++k) lms.emplace_back(models::GeneratorParams::random(kVocab, 32, 2, rng));
    for (std::size_t i = 0; i < 8; ++i) queries.push_back(kb.documents()[i].tokens);
    doc = attack::initial_document("adv-bench", goal, 30, 30, kVocab, rng);
  }
};

const Setup& setup() {
  static const Setup s;
  return s;
}

void BM_EncodeDoc(benchmark::State& state) {
  const auto& s = setup();
  const auto tokens = s.doc.full();
  for (auto _ : state) benchmark::DoNotOptimize(s.retriever.encode_doc(tokens));
}
BENCHMARK(BM_EncodeDoc);

void BM_Retrieve(benchmark::State& state) {
  const auto& s = setup();
  const retrieval::DocIndex index(s.kb, s.retriever);
  for (auto _ : state) {
    benchmark::DoNotOptimize(retrieval::retrieve(s.queries[0], index, 5, s.retriever));
  }
}
BENCHMARK(BM_Retrieve);

void BM_HotflipSweep(benchmark::State& state) {
  const auto& s = setup();
  const attack::ArsObjective objective(s.retriever, s.queries);
  for (auto _ : state) {
    auto st = attack::make_ars_state(s.doc, objective);
    benchmark::DoNotOptimize(attack::hotflip_step(st, objective, s.retriever,
                                                  static_cast<std::size_t>(state.range(0))));
  }
}
BENCHMARK(BM_HotflipSweep)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_EnsembleLoss(benchmark::State& state) {
  const auto& s = setup();
  const auto ens = attack::EnsembleSet::of(s.lms);
  for (auto _ : state) {
    benchmark::DoNotOptimize(attack::ensemble_loss(s.doc, s.queries, s.goal.target_tokens, ens));
  }
}
BENCHMARK(BM_EnsembleLoss)->Unit(benchmark::kMicrosecond);

void BM_AgsGradients(benchmark::State& state) {
  const auto& s = setup();
  const auto ens = attack::EnsembleSet::of(s.lms);
  const std::vector<TokenSeq> batch(s.queries.begin(), s.queries.begin() + 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(attack::ags_token_gradients(s.doc, batch, s.goal.target_tokens, ens));
  }
}
BENCHMARK(BM_AgsGradients)->Unit(benchmark::kMillisecond);

void BM_GreedyCoordinateStep(benchmark::State& state) {
  const auto& s = setup();
  const auto ens = attack::EnsembleSet::of(s.lms);
  const std::vector<TokenSeq> batch(s.queries.begin(), s.queries.begin() + 4);
  for (auto _ : state) {
    auto st = attack::make_ags_state(s.doc, batch, s.goal.target_tokens, ens);
    benchmark::DoNotOptimize(attack::greedy_coordinate_step(
        st, batch, s.goal.target_tokens, ens, static_cast<std::size_t>(state.range(0))));
  }
}
BENCHMARK(BM_GreedyCoordinateStep)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Kmeans(benchmark::State& state) {
  const auto& s = setup();
  std::vector<TokenSeq> seqs;
  for (const auto& d : s.kb.documents()) seqs.push_back(d.tokens);
  const auto points = attack::query_embeddings(s.retriever, seqs);
  for (auto _ : state) benchmark::DoNotOptimize(retrieval::kmeans(points, 5, 11));
}
BENCHMARK(BM_Kmeans)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
