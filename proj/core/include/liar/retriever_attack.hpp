#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "liar/corpus.hpp"
#include "liar/models.hpp"
#include "liar/retrieval.hpp"

namespace liar::attack {

/// R_adv ⊕ T_adv ⊕ G_adv with segment lengths fixed at construction.
class AdversarialDocument {
 public:
  AdversarialDocument() = default;
  AdversarialDocument(std::string id, TokenSeq ars, TokenSeq ats, TokenSeq ags);

  /// Inverse of to_document; requires segment lengths.
  static AdversarialDocument from_document(const corpus::Document& doc);

  const std::string& id() const { return id_; }
  const TokenSeq& ars() const { return ars_; }
  const TokenSeq& ats() const { return ats_; }
  const TokenSeq& ags() const { return ags_; }
  corpus::SegmentLengths segments() const { return {ars_.size(), ats_.size(), ags_.size()}; }
  std::size_t size() const { return ars_.size() + ats_.size() + ags_.size(); }
  std::size_t ags_offset() const { return ars_.size() + ats_.size(); }

  void set_ars(std::size_t pos, TokenId tok);
  void set_ags(std::size_t pos, TokenId tok);
  void set_ars(const TokenSeq& ars);
  void set_ags(const TokenSeq& ags);

  TokenSeq full() const;
  corpus::Document to_document() const;

  friend bool operator==(const AdversarialDocument&, const AdversarialDocument&) = default;

 private:
  std::string id_;
  TokenSeq ars_, ats_, ags_;
};

std::vector<corpus::Document> to_documents(const std::vector<AdversarialDocument>& docs);

/// Tokens no attack may write: the reserved ids.
std::vector<bool> substitution_mask(std::size_t vocab_size);

/// Mean similarity between a batch of pseudo-queries and a document. By
/// linearity of the inner product this is the centroid of the query
/// embeddings dotted with h_D(doc).
class ArsObjective {
 public:
  ArsObjective(const models::Retriever& retriever, const std::vector<TokenSeq>& pseudo_queries);

  const std::vector<double>& centroid() const { return centroid_; }
  double value(const TokenSeq& full) const;
  /// Gradient of value() with respect to the token embeddings at `positions`.
  ad::Tensor token_gradients(const TokenSeq& full, std::span<const std::size_t> positions) const;

 private:
  const models::Retriever* retriever_;
  std::vector<double> centroid_;
};

double ars_objective(const AdversarialDocument& doc, const std::vector<TokenSeq>& pseudo_queries,
                     const models::Retriever& retriever);

/// Top-k token ids for ARS position `position` by e_{x'}·g_p, ties to the
/// lower id. Ranks the whole vocabulary.
std::vector<TokenId> hotflip_candidates(const AdversarialDocument& doc, std::size_t position,
                                        const ArsObjective& objective,
                                        const models::Retriever& retriever, std::size_t top_k);

struct FlipRecord {
  std::size_t step = 0;
  std::size_t position = 0;
  TokenId from = 0;
  TokenId to = 0;
  double before = 0.0;
  double after = 0.0;
};

struct ArsTrainState {
  AdversarialDocument doc;
  double objective = 0.0;
  std::size_t steps = 0;
  std::vector<FlipRecord> log;
};

ArsTrainState make_ars_state(AdversarialDocument doc, const ArsObjective& objective);

/// One left-to-right sweep over the ARS. At each position the candidates are
/// re-scored exactly and the best is taken only if it strictly improves the
/// objective. Returns the number of accepted flips.
std::size_t hotflip_step(ArsTrainState& state, const ArsObjective& objective,
                         const models::Retriever& retriever, std::size_t top_k);

/// Random ARS over non-reserved tokens, ATS from the goal, AGS all INIT.
AdversarialDocument initial_document(const std::string& id, const corpus::GoalSpec& goal,
                                     std::size_t s_r, std::size_t s_g, std::size_t vocab_size,
                                     Rng& rng);

std::string adversarial_id(std::size_t k);

struct ArsSetConfig {
  std::size_t n_docs = 5;
  std::size_t s_r = 30;
  std::size_t s_g = 30;
  std::size_t steps = 10;
  std::size_t top_k = 16;
  unsigned threads = 1;
};

struct ArsSetResult {
  std::vector<AdversarialDocument> docs;
  retrieval::ClusterAssignment clusters;
  /// Objective after initialisation and after every sweep, per document.
  std::vector<std::vector<double>> traces;
  std::vector<std::vector<FlipRecord>> logs;
};

/// Clusters the pseudo-query embeddings into n_docs groups and trains one
/// document per cluster against its members.
ArsSetResult train_ars_set(const std::vector<TokenSeq>& pseudo_queries,
                           const corpus::GoalSpec& goal, const ArsSetConfig& config,
                           std::uint64_t seed, const models::Retriever& retriever);

/// h_Q embedding of every sequence.
std::vector<std::vector<double>> query_embeddings(const models::Retriever& retriever,
                                                  const std::vector<TokenSeq>& seqs);

}  // namespace liar::attack
