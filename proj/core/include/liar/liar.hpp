#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "liar/generator_attack.hpp"
#include "liar/metrics.hpp"
#include "liar/retriever_attack.hpp"

namespace liar {

struct LiarConfig {
  std::size_t T = 100;
  std::size_t K1 = 10;
  std::size_t K2 = 20;
  std::size_t N = 5;
  std::size_t s_r = 30;
  std::size_t s_g = 30;
  std::size_t top_k_r = 16;
  std::size_t top_k_g = 16;
  /// Pseudo-queries per cluster per iteration for the ARS step.
  std::size_t b_r = 16;
  /// Held-out queries per document per iteration for the AGS step.
  std::size_t b_g = 4;
  /// AGS flips must cut the ensemble NLL by this fraction of its value.
  double ags_min_gain = 0.1;
  std::size_t m = 5;
  double probe_fraction = 0.2;
  // Vanilla attack training.
  double tau = 1.0;
  double lambda = 1.0;
  double at_lr = 0.1;
  /// Ablation switches: a disabled level keeps its initial tokens.
  bool train_ars = true;
  bool train_ags = true;
  /// Measure probe AR/AG after every outer iteration.
  bool track_metrics = true;
  unsigned threads = 1;
  std::uint64_t seed = 1;

  void validate(const corpus::GoalSpec& goal) const;
  std::uint64_t fingerprint() const;
};

/// Clean documents split into a probe set and two disjoint training pools.
struct Splits {
  std::vector<TokenSeq> probe;
  std::vector<TokenSeq> ars;
  std::vector<TokenSeq> ags;
};

Splits make_splits(const corpus::KnowledgeBase& kb, double probe_fraction, std::uint64_t seed);

struct TraceRow {
  std::size_t iteration = 0;
  double ars_objective = 0.0;
  double nll = 0.0;
  double ar = 0.0;
  double ag = 0.0;
  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct TrainTrace {
  std::vector<TraceRow> rows;

  std::string to_csv() const;
  static TrainTrace from_csv(std::string_view text);

  friend bool operator==(const TrainTrace&, const TrainTrace&) = default;
};

struct AttackResult {
  std::vector<attack::AdversarialDocument> docs;
  TrainTrace trace;
  Splits splits;
  retrieval::ClusterAssignment clusters;
  /// Every accepted ARS flip and AGS substitution, in iteration then
  /// document order.
  std::vector<attack::FlipRecord> ars_log;
  std::vector<attack::FlipRecord> ags_log;
};

/// Attack inputs shared by every method.
struct AttackContext {
  const corpus::KnowledgeBase& kb;
  const corpus::GoalSpec& goal;
  const models::Retriever& retriever;
  /// Deployed generator, used for the probe AG in the trace.
  const models::GeneratorLM& generator;
  const attack::EnsembleSet& ensemble;
};

/// Alternating optimisation: K1 HotFlip sweeps on every ARS with the AGS
/// fixed, then K2 greedy coordinate steps on every AGS with the ARS fixed.
AttackResult liar_train(const AttackContext& ctx, const LiarConfig& config);

/// Joint Gumbel-softmax relaxation of ARS and AGS trained with Adam on
/// ensemble NLL minus lambda times mean similarity. K1 + K2 Adam steps per
/// outer iteration.
AttackResult vanilla_at_train(const AttackContext& ctx, const LiarConfig& config);

/// Initial documents of every method: random ARS, ATS, INIT AGS.
std::vector<attack::AdversarialDocument> initial_documents(const corpus::GoalSpec& goal,
                                                           const LiarConfig& config,
                                                           std::size_t vocab_size);

/// Gumbel-softmax rows of `logits` at temperature tau for the given noise.
ad::Tensor gumbel_softmax(const ad::Tensor& logits, const ad::Tensor& gumbel_noise, double tau);
ad::Tensor sample_gumbel(std::size_t rows, std::size_t cols, Rng& rng);

struct LinearityReport {
  std::size_t trials = 0;
  double max_residual = 0.0;
  double tol = 0.0;
  bool passed = false;
};

/// f(e) = mean_i h_Q(D_i)·e evaluated at random a, b and theta in [0, 1]:
/// |f(theta a + (1-theta) b) - theta f(a) - (1-theta) f(b)| <= tol.
LinearityReport lower_level_linearity_check(const models::Retriever& retriever,
                                            const std::vector<TokenSeq>& kb_sample,
                                            std::size_t trials, double tol, std::uint64_t seed);

/// Residual of one (a, b, theta) trial for the given query embeddings.
double linearity_residual(const std::vector<std::vector<double>>& queries,
                          const std::vector<double>& a, const std::vector<double>& b,
                          double theta);

}  // namespace liar
