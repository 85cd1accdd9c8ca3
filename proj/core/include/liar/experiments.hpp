#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "liar/liar.hpp"
#include "liar/metrics.hpp"

namespace liar::eval {

enum class Ablation { kFull, kNoRetrieverAttack, kNoAgs, kVanillaAt };

std::string to_string(Ablation setting);
Ablation ablation_from_string(std::string_view name);

struct AblationRun {
  MetricsRecord metrics;
  AttackResult attack;
};

/// Trains the variant and scores it on the held-out probe split.
/// no_retriever_attack keeps the random ARS, no_ags keeps the INIT AGS.
AblationRun ablate(Ablation setting, const AttackContext& ctx, const LiarConfig& config,
                   const EvalSetup& setup);

struct BaselineStats {
  std::vector<double> samples;
  double mean = 0.0;
  double stddev = 0.0;
};

/// AR of N untrained documents (random ARS, ATS, INIT AGS), redrawn per trial.
BaselineStats random_doc_baseline(const corpus::KnowledgeBase& kb, const corpus::GoalSpec& goal,
                                  const std::vector<TokenSeq>& queries,
                                  const models::Retriever& retriever, const LiarConfig& config,
                                  std::size_t trials, std::uint64_t seed, unsigned threads = 1);

/// Jaccard similarity of the 3-gram sets. Sequences shorter than three
/// tokens count as a single gram.
double trigram_jaccard(const TokenSeq& a, const TokenSeq& b);

/// Keeps documents in order, dropping any whose trigram Jaccard to an
/// already kept document exceeds `threshold`.
corpus::KnowledgeBase defense_duplicate_filter(const corpus::KnowledgeBase& kb, double threshold);

/// Proxy paraphrase: swaps round(rate * (n-1)) adjacent pairs, then drops
/// round(rate * n) tokens, positions drawn from (seed, stream).
TokenSeq defense_paraphrase(std::span<const TokenId> tokens, std::uint64_t seed, double rate,
                            std::uint64_t stream = 0);

enum class Defense { kNone, kParaphrase, kDuplicateFilter };

std::string to_string(Defense defense);
Defense defense_from_string(std::string_view name);

struct DefenseSetup {
  Defense defense = Defense::kNone;
  double paraphrase_rate = 0.2;
  double jaccard_threshold = 0.5;
  std::uint64_t seed = 1;
};

/// evaluate() with a defense in front of retrieval: paraphrase rewrites every
/// query, the duplicate filter prunes the poisoned knowledge base.
MetricsRecord evaluate_defended(const std::string& setting,
                                const std::vector<attack::AdversarialDocument>& docs,
                                const corpus::KnowledgeBase& kb,
                                const std::vector<TokenSeq>& queries,
                                const models::Retriever& retriever,
                                const models::GeneratorLM& lm, const EvalSetup& setup,
                                const DefenseSetup& defense);

/// n copies of `doc` sharing every segment, ids suffixed "-c<k>".
std::vector<attack::AdversarialDocument> clone_documents(const attack::AdversarialDocument& doc,
                                                         std::size_t n);

/// AR of source-trained documents injected into another knowledge base.
Counts transfer_eval_db(const std::vector<attack::AdversarialDocument>& docs,
                        const corpus::KnowledgeBase& target_kb,
                        const std::vector<TokenSeq>& queries, std::size_t m,
                        const models::Retriever& retriever, unsigned threads = 1);

/// Full metrics against a generator outside the attack ensemble.
MetricsRecord transfer_eval_model(const std::string& setting,
                                  const std::vector<attack::AdversarialDocument>& docs,
                                  const corpus::KnowledgeBase& kb,
                                  const std::vector<TokenSeq>& queries,
                                  const models::Retriever& retriever,
                                  const models::GeneratorLM& target_lm, const EvalSetup& setup);

}  // namespace liar::eval
