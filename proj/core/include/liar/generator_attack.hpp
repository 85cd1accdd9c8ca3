#pragma once

#include <cstdint>
#include <vector>

#include "liar/models.hpp"
#include "liar/retriever_attack.hpp"

namespace liar::attack {

/// R ⊕ T ⊕ G ⊕ SEP ⊕ q.
TokenSeq attack_context(const AdversarialDocument& doc, std::span<const TokenId> query);

/// The model set 𝓜. Members must share a vocabulary.
class EnsembleSet {
 public:
  explicit EnsembleSet(std::vector<const models::GeneratorLM*> members);
  static EnsembleSet of(const std::vector<models::GeneratorLM>& models);

  std::size_t size() const { return members_.size(); }
  const models::GeneratorLM& operator[](std::size_t i) const { return *members_[i]; }
  std::size_t vocab_size() const { return members_[0]->vocab_size(); }

 private:
  std::vector<const models::GeneratorLM*> members_;
};

/// Mean over models and queries of lm_nll(attack_context(doc, q), y*).
double ensemble_loss(const AdversarialDocument& doc, const std::vector<TokenSeq>& queries,
                     const TokenSeq& target, const EnsembleSet& ensemble,
                     std::vector<double>* per_model = nullptr);

/// Gradient of ensemble_loss with respect to the G_adv token embeddings of
/// each member: element m is s_G x d_m and already carries the 1/|𝓜| factor.
std::vector<ad::Tensor> ags_token_gradients(const AdversarialDocument& doc,
                                            const std::vector<TokenSeq>& queries,
                                            const TokenSeq& target, const EnsembleSet& ensemble);

struct AgsTrainState {
  AdversarialDocument doc;
  double loss = 0.0;
  std::vector<double> per_model;
  std::size_t steps = 0;
  std::vector<FlipRecord> log;
};

AgsTrainState make_ags_state(AdversarialDocument doc, const std::vector<TokenSeq>& queries,
                             const TokenSeq& target, const EnsembleSet& ensemble);

/// Candidate (position, token) pairs over all AGS positions ranked by
/// -sum_m e^m_{x'}·g^m_p; the top_k are re-scored exactly and the best is
/// applied when it strictly lowers the loss, and by at least
/// min_relative_gain * |loss| when that is positive. Returns true when applied.
bool greedy_coordinate_step(AgsTrainState& state, const std::vector<TokenSeq>& queries,
                            const TokenSeq& target, const EnsembleSet& ensemble,
                            std::size_t top_k, double min_relative_gain = 0.0);

struct AgsConfig {
  std::size_t steps = 20;
  std::size_t batch = 4;
  std::size_t top_k = 32;
};

struct AgsResult {
  AdversarialDocument doc;
  std::vector<double> loss_trace;  // initial loss, then after every step
  std::vector<FlipRecord> log;
};

/// Resets G_adv to INIT and runs greedy steps on a query batch drawn once
/// from `query_pool`.
AgsResult train_ags(const AdversarialDocument& doc, const std::vector<TokenSeq>& query_pool,
                    const corpus::GoalSpec& goal, const EnsembleSet& ensemble,
                    const AgsConfig& config, std::uint64_t seed);

/// `b` distinct entries of `pool`, deterministic in (seed, stream, words).
std::vector<TokenSeq> sample_queries(const std::vector<TokenSeq>& pool, std::size_t b,
                                     std::uint64_t seed, std::string_view stream,
                                     std::initializer_list<std::uint64_t> words);

}  // namespace liar::attack
