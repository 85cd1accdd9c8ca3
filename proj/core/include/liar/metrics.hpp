#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "liar/corpus.hpp"
#include "liar/models.hpp"
#include "liar/retrieval.hpp"
#include "liar/generator_attack.hpp"

namespace liar::eval {

enum class JudgeMode { kTargetMatch, kRefusalAbsence };

std::string to_string(JudgeMode mode);
JudgeMode judge_mode_from_string(std::string_view name);

struct JudgeRule {
  JudgeMode mode = JudgeMode::kTargetMatch;
  TokenSeq target;
  TokenSeq refusal;
  /// refusal_absence additionally requires every keyword token in the answer.
  TokenSeq keywords;

  static JudgeRule for_goal(const corpus::GoalSpec& goal, JudgeMode mode);
  /// Throws if the rule cannot judge anything (empty target for target_match).
  void validate() const;
  bool success(const TokenSeq& answer) const;
};

struct Counts {
  std::size_t hits = 0;
  std::size_t n = 0;
  double rate() const { return n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(n); }
};

struct MetricsRecord {
  std::string setting;
  Counts ar, ag, asr;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  std::size_t n_queries() const { return ar.n; }
  std::string to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

std::string to_json(const std::vector<MetricsRecord>& records);
std::string to_csv(const std::vector<MetricsRecord>& records);

/// Decode budget: enough for the longer of y* and the refusal plus EOS.
std::size_t answer_length(const corpus::GoalSpec& goal);

TokenSeq run_rag(std::span<const TokenId> query, const retrieval::DocIndex& index,
                 const corpus::KnowledgeBase& kb, std::size_t m,
                 const models::Retriever& retriever, const models::GeneratorLM& lm,
                 std::size_t max_len);
TokenSeq run_rag(std::span<const TokenId> query, const corpus::KnowledgeBase& kb, std::size_t m,
                 const models::ModelBundle& bundle, std::size_t max_len);

/// Queries whose top-m contains at least one injected document.
Counts eval_ar(const std::vector<TokenSeq>& queries, const retrieval::DocIndex& index,
               std::size_t m, const models::Retriever& retriever, unsigned threads = 1);

/// Forced context: for each query the adversarial document it scores highest
/// against is the sole context.
Counts eval_ag(const std::vector<attack::AdversarialDocument>& docs,
               const std::vector<TokenSeq>& queries, const models::Retriever& retriever,
               const models::GeneratorLM& lm, const JudgeRule& judge, std::size_t max_len,
               unsigned threads = 1);

/// End-to-end RAG answer per query.
Counts eval_asr(const std::vector<TokenSeq>& queries, const retrieval::DocIndex& index,
                const corpus::KnowledgeBase& kb, std::size_t m,
                const models::Retriever& retriever, const models::GeneratorLM& lm,
                const JudgeRule& judge, std::size_t max_len, unsigned threads = 1);

struct EvalSetup {
  std::size_t m = 5;
  JudgeRule judge;
  std::size_t max_len = 8;
  unsigned threads = 1;
};

/// AR, AG and ASR for `docs` injected into `kb`.
MetricsRecord evaluate(const std::string& setting,
                       const std::vector<attack::AdversarialDocument>& docs,
                       const corpus::KnowledgeBase& kb, const std::vector<TokenSeq>& queries,
                       const models::Retriever& retriever, const models::GeneratorLM& lm,
                       const EvalSetup& setup);

}  // namespace liar::eval
