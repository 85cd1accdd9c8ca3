#include "liar/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace liar::eval {

std::string to_string(Ablation setting) {
  switch (setting) {
    case Ablation::kFull: return "full";
    case Ablation::kNoRetrieverAttack: return "no_retriever_attack";
    case Ablation::kNoAgs: return "no_ags";
    case Ablation::kVanillaAt: return "vanilla_at";
  }
  return "?";
}

Ablation ablation_from_string(std::string_view name) {
  for (Ablation a : {Ablation::kFull, Ablation::kNoRetrieverAttack, Ablation::kNoAgs,
                     Ablation::kVanillaAt}) {
    if (name == to_string(a)) return a;
  }
  throw std::invalid_argument("unknown ablation '" + std::string(name) + "'");
}

AblationRun ablate(Ablation setting, const AttackContext& ctx, const LiarConfig& config,
                   const EvalSetup& setup) {
  LiarConfig c = config;
  AblationRun run;
  switch (setting) {
    case Ablation::kFull: run.attack = liar_train(ctx, c); break;
    case Ablation::kNoRetrieverAttack:
      c.train_ars = false;
      run.attack = liar_train(ctx, c);
      break;
    case Ablation::kNoAgs:
      c.train_ags = false;
      run.attack = liar_train(ctx, c);
      break;
    case Ablation::kVanillaAt: run.attack = vanilla_at_train(ctx, c); break;
  }
  run.metrics = evaluate(to_string(setting), run.attack.docs, ctx.kb, run.attack.splits.probe,
                         ctx.retriever, ctx.generator, setup);
  run.metrics.seed = c.seed;
  run.metrics.config_hash = c.fingerprint();
  return run;
}

BaselineStats random_doc_baseline(const corpus::KnowledgeBase& kb, const corpus::GoalSpec& goal,
                                  const std::vector<TokenSeq>& queries,
                                  const models::Retriever& retriever, const LiarConfig& config,
                                  std::size_t trials, std::uint64_t seed, unsigned threads) {
  if (trials < 2) throw std::invalid_argument("random_doc_baseline: need at least 2 trials");
  BaselineStats out;
  out.samples.resize(trials);
  parallel_for(trials, threads, [&](std::size_t i) {
    LiarConfig c = config;
    c.seed = make_rng(seed, "random-doc-baseline", {i})();
    const auto docs = initial_documents(goal, c, retriever.query.vocab_size());
    const auto poisoned = corpus::inject(kb, attack::to_documents(docs));
    const retrieval::DocIndex index(poisoned, retriever);
    out.samples[i] = eval_ar(queries, index, config.m, retriever).rate();
  });
  const double n = static_cast<double>(trials);
  out.mean = std::accumulate(out.samples.begin(), out.samples.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : out.samples) ss += (v - out.mean) * (v - out.mean);
  out.stddev = std::sqrt(ss / (n - 1.0));
  return out;
}

namespace {

std::set<TokenSeq> trigrams(const TokenSeq& s) {
  std::set<TokenSeq> g;
  if (s.size() < 3) {
    g.insert(s);
    return g;
  }
  for (std::size_t i = 0; i + 3 <= s.size(); ++i) g.insert(TokenSeq(s.begin() + i, s.begin() + i + 3));
  return g;
}

}  // namespace

double trigram_jaccard(const TokenSeq& a, const TokenSeq& b) {
  const auto ga = trigrams(a), gb = trigrams(b);
  std::size_t inter = 0;
  for (const auto& g : ga) inter += gb.count(g);
  const std::size_t uni = ga.size() + gb.size() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

corpus::KnowledgeBase defense_duplicate_filter(const corpus::KnowledgeBase& kb, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("duplicate filter: threshold must be in (0, 1]");
  }
  corpus::KnowledgeBase out;
  std::vector<const TokenSeq*> kept;
  for (std::size_t i = 0; i < kb.size(); ++i) {
    const TokenSeq& t = kb.doc(i).tokens;
    const bool dup = std::any_of(kept.begin(), kept.end(), [&](const TokenSeq* k) {
      return trigram_jaccard(*k, t) > threshold;
    });
    if (dup) continue;
    out.add(kb.doc(i), kb.provenance(i));
    kept.push_back(&t);
  }
  return out;
}

TokenSeq defense_paraphrase(std::span<const TokenId> tokens, std::uint64_t seed, double rate,
                            std::uint64_t stream) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw std::invalid_argument("paraphrase: rate must be in [0, 1]");
  }
  TokenSeq out(tokens.begin(), tokens.end());
  if (rate == 0.0 || out.empty()) return out;
  Rng rng = make_rng(seed, "paraphrase", {stream});
  auto pick = [&](std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
  };
  if (out.size() >= 2) {
    const std::size_t pairs = out.size() - 1;
    const auto k = static_cast<std::size_t>(std::lround(rate * static_cast<double>(pairs)));
    for (std::size_t p : pick(pairs, k)) std::swap(out[p], out[p + 1]);
  }
  const auto drop = std::min(out.size() - 1,
                             static_cast<std::size_t>(std::lround(rate * static_cast<double>(out.size()))));
  std::vector<bool> gone(out.size(), false);
  for (std::size_t p : pick(out.size(), drop)) gone[p] = true;
  TokenSeq kept;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!gone[i]) kept.push_back(out[i]);
  }
  return kept;
}

std::string to_string(Defense defense) {
  switch (defense) {
    case Defense::kNone: return "none";
    case Defense::kParaphrase: return "paraphrase";
    case Defense::kDuplicateFilter: return "duplicate_filter";
  }
  return "?";
}

Defense defense_from_string(std::string_view name) {
  for (Defense d : {Defense::kNone, Defense::kParaphrase, Defense::kDuplicateFilter}) {
    if (name == to_string(d)) return d;
  }
  throw std::invalid_argument("unknown defense '" + std::string(name) + "'");
}

MetricsRecord evaluate_defended(const std::string& setting,
                                const std::vector<attack::AdversarialDocument>& docs,
                                const corpus::KnowledgeBase& kb,
                                const std::vector<TokenSeq>& queries,
                                const models::Retriever& retriever,
                                const models::GeneratorLM& lm, const EvalSetup& setup,
                                const DefenseSetup& defense) {
  corpus::KnowledgeBase poisoned = corpus::inject(kb, attack::to_documents(docs));
  std::vector<TokenSeq> qs = queries;
  std::vector<attack::AdversarialDocument> survivors = docs;
  if (defense.defense == Defense::kParaphrase) {
    for (std::size_t i = 0; i < qs.size(); ++i) {
      qs[i] = defense_paraphrase(queries[i], defense.seed, defense.paraphrase_rate, i);
    }
  } else if (defense.defense == Defense::kDuplicateFilter) {
    poisoned = defense_duplicate_filter(poisoned, defense.jaccard_threshold);
    std::erase_if(survivors, [&](const attack::AdversarialDocument& d) {
      return !poisoned.contains(d.id());
    });
  }
  const retrieval::DocIndex index(poisoned, retriever, setup.threads);
  MetricsRecord r;
  r.setting = setting;
  r.ar = eval_ar(qs, index, setup.m, retriever, setup.threads);
  r.ag = eval_ag(survivors, qs, retriever, lm, setup.judge, setup.max_len, setup.threads);
  r.asr = eval_asr(qs, index, poisoned, setup.m, retriever, lm, setup.judge, setup.max_len,
                   setup.threads);
  return r;
}

std::vector<attack::AdversarialDocument> clone_documents(const attack::AdversarialDocument& doc,
                                                         std::size_t n) {
  std::vector<attack::AdversarialDocument> out;
  for (std::size_t k = 0; k < n; ++k) {
    out.emplace_back(doc.id() + "-c" + std::to_string(k), doc.ars(), doc.ats(), doc.ags());
  }
  return out;
}

Counts transfer_eval_db(const std::vector<attack::AdversarialDocument>& docs,
                        const corpus::KnowledgeBase& target_kb,
                        const std::vector<TokenSeq>& queries, std::size_t m,
                        const models::Retriever& retriever, unsigned threads) {
  const auto poisoned = corpus::inject(target_kb, attack::to_documents(docs));
  const retrieval::DocIndex index(poisoned, retriever, threads);
  return eval_ar(queries, index, m, retriever, threads);
}

MetricsRecord transfer_eval_model(const std::string& setting,
                                  const std::vector<attack::AdversarialDocument>& docs,
                                  const corpus::KnowledgeBase& kb,
                                  const std::vector<TokenSeq>& queries,
                                  const models::Retriever& retriever,
                                  const models::GeneratorLM& target_lm, const EvalSetup& setup) {
  return evaluate(setting, docs, kb, queries, retriever, target_lm, setup);
}

}  // namespace liar::eval
