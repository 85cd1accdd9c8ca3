#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "liar/corpus.hpp"
#include "liar/tape.hpp"
#include "liar/tensor.hpp"
#include "liar/types.hpp"
#include "liar/util.hpp"

namespace liar::models {

/// Mean-pooled bag-of-tokens encoder: h(x) = tanh(W * mean_i E[x_i]).
struct Encoder {
  ad::Tensor embedding;   // |V| x d
  ad::Tensor projection;  // d x d
  /// Test hook: when false the encoder is the linear map W * mean.
  bool apply_tanh = true;

  static Encoder random(std::size_t vocab, std::size_t dim, Rng& rng, double embed_scale);

  std::size_t dim() const { return projection.rows(); }
  std::size_t vocab_size() const { return embedding.rows(); }

  std::vector<double> encode(std::span<const TokenId> tokens) const;

  struct Vars {
    ad::Var embedding;
    ad::Var projection_t;
  };
  /// Puts the parameters on `tape`, as leaves when `trainable`.
  Vars bind(ad::Tape& tape, bool trainable, const std::string& prefix) const;
  /// Taped encode. When `mark_tokens` the token-embedding gather is registered
  /// for grad_wrt_token_embeddings.
  ad::Var encode_on_tape(ad::Tape& tape, const Vars& vars, std::span<const TokenId> tokens,
                         bool mark_tokens) const;

  friend bool operator==(const Encoder&, const Encoder&) = default;
};

/// Dual encoder (h_Q, h_D). With `shared` both roles use `query`.
struct Retriever {
  Encoder query;
  Encoder doc;
  bool shared = true;

  const Encoder& query_encoder() const { return query; }
  const Encoder& doc_encoder() const { return shared ? query : doc; }
  std::size_t dim() const { return query.dim(); }

  std::vector<double> encode_query(std::span<const TokenId> tokens) const {
    return query_encoder().encode(tokens);
  }
  std::vector<double> encode_doc(std::span<const TokenId> tokens) const {
    return doc_encoder().encode(tokens);
  }

  friend bool operator==(const Retriever&, const Retriever&) = default;
};

struct GeneratorParams {
  ad::Tensor embedding;                 // |V| x d
  std::vector<ad::Tensor> self_mix;     // per block, d x d
  std::vector<ad::Tensor> prefix_mix;   // per block, d x d
  std::vector<ad::Tensor> bias;         // per block, 1 x d
  ad::Tensor head;                      // d x |V|
  ad::Tensor head_bias;                 // 1 x |V|

  static GeneratorParams random(std::size_t vocab, std::size_t dim, std::size_t blocks,
                                Rng& rng);
  std::vector<ad::Tensor*> all();
  friend bool operator==(const GeneratorParams&, const GeneratorParams&) = default;
};

/// Causal LM built from residual blocks
///   x <- x + tanh(x A + causal_mean(x) B + b)
/// followed by a linear output head. Position i only sees tokens <= i.
class GeneratorLM {
 public:
  GeneratorLM() = default;
  explicit GeneratorLM(GeneratorParams params);

  const GeneratorParams& params() const { return params_; }
  std::size_t vocab_size() const { return params_.embedding.rows(); }
  std::size_t dim() const { return params_.embedding.cols(); }
  std::size_t n_blocks() const { return params_.self_mix.size(); }

  /// -sum_t log p(target_t | context, target_<t).
  double nll(std::span<const TokenId> context, std::span<const TokenId> target) const;
  std::vector<double> next_logits(std::span<const TokenId> sequence) const;
  /// Logits for every position of `sequence` (row i predicts token i+1).
  ad::Tensor all_logits(std::span<const TokenId> sequence) const;
  /// Argmax decoding, ties to the lowest id; stops after emitting EOS.
  TokenSeq greedy_decode(std::span<const TokenId> context, std::size_t max_len) const;

  struct Vars {
    ad::Var embedding;
    std::vector<ad::Var> self_mix, prefix_mix, bias;
    ad::Var head, head_bias;
  };
  Vars bind(ad::Tape& tape, bool trainable, const std::string& prefix) const;
  /// Taped NLL of `target` given `context`. Row p of the registered token
  /// gather is context position p when `mark_tokens`.
  ad::Var nll_on_tape(ad::Tape& tape, const Vars& vars, std::span<const TokenId> context,
                      std::span<const TokenId> target, bool mark_tokens) const;
  /// Taped NLL where the rows [offset, offset + relaxed.rows()) of the input
  /// embedding matrix are replaced by `relaxed` (soft token mixtures).
  ad::Var nll_on_tape_relaxed(ad::Tape& tape, const Vars& vars,
                              std::span<const TokenId> context, std::size_t offset,
                              ad::Var relaxed, std::span<const TokenId> target) const;

  friend bool operator==(const GeneratorLM& a, const GeneratorLM& b) {
    return a.params_ == b.params_;
  }

 private:
  void check_tokens(std::span<const TokenId> tokens) const;
  /// Final hidden rows at ascending positions `rows` of `sequence`.
  std::vector<double> hidden_rows(std::span<const TokenId> sequence,
                                  std::span<const std::size_t> rows) const;
  ad::Var forward_rows(ad::Tape& tape, const Vars& vars, ad::Var x0,
                       std::span<const std::size_t> rows) const;
  void log_softmax_row(std::span<const double> hidden, std::vector<double>& out) const;

  GeneratorParams params_;
  // Block-0 projections of every vocabulary row, E*A0 and E*B0.
  std::vector<double> self_table_;
  std::vector<double> prefix_table_;
};

/// Retriever plus generator checkpoints. generators[0] is the deployed RAG
/// generator; the full list is the attack ensemble.
struct ModelBundle {
  Retriever retriever;
  std::vector<GeneratorLM> generators;
  std::uint64_t vocab_hash = 0;
  std::uint64_t config_fingerprint = 0;

  const GeneratorLM& generator() const { return generators.at(0); }
  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

/// Generator input for a retrieved context: docs in rank order joined by SEP,
/// then SEP and the query.
TokenSeq assemble_context(const std::vector<const TokenSeq*>& docs,
                          std::span<const TokenId> query);

inline constexpr char kCheckpointMagic[8] = {'L', 'I', 'A', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_bundle(const ModelBundle& bundle);
ModelBundle deserialize_bundle(std::string_view bytes);
void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_bundle(const std::filesystem::path& path);

struct TrainConfig {
  // Retriever.
  std::size_t d = 16;
  bool shared_encoder = true;
  std::size_t retriever_epochs = 300;
  double retriever_lr = 0.05;
  double retriever_embed_scale = 2.0;
  /// Contrastive logits are inner products divided by this.
  double retriever_temperature = 0.03;
  /// Probability that a query-view token is replaced by a random token.
  double retriever_noise = 0.0;
  // Generator.
  std::size_t d_g = 32;
  std::size_t n_blocks = 2;
  std::size_t n_ensemble = 2;
  std::size_t generator_steps = 1000;
  std::size_t generator_batch = 16;
  double generator_lr = 0.02;
  // Alignment data.
  std::size_t n_compliance_tokens = 16;
  std::size_t compliance_min = 6;
  std::size_t noise_compliance_max = 2;
  std::size_t max_context_docs = 5;
  std::size_t s_r = 30;
  std::size_t s_g = 30;
  std::size_t continuation_len = 3;
  // Gates.
  double self_retrieval_gate = 0.95;
  double refusal_gate = 0.95;
  double compliance_gate = 0.9;
  std::size_t gate_probes = 80;
  std::size_t m = 5;
  bool enforce_gates = true;

  std::uint64_t fingerprint() const;
};

struct TrainingReport {
  double self_retrieval_rate = 0.0;
  double retriever_final_loss = 0.0;
  std::vector<double> generator_final_loss;
  std::vector<double> refusal_rate;
  std::vector<double> compliance_rate;
  std::vector<TokenId> compliance_tokens;
};

/// Token set whose presence (together with the ATS) the generator is trained
/// to obey. Chosen among tokens the corpus never uses.
std::vector<TokenId> compliance_tokens(const corpus::KnowledgeBase& kb,
                                       const corpus::GoalSpec& goal,
                                       const TrainConfig& config, std::size_t vocab_size,
                                       std::uint64_t seed);

Retriever train_retriever(const corpus::KnowledgeBase& kb, std::size_t vocab_size,
                          const TrainConfig& config, std::uint64_t seed,
                          double* final_loss = nullptr);

/// Trains one generator checkpoint. `data_seed` fixes the training stream so
/// checkpoints that differ only in `init_seed` or width see identical data.
GeneratorLM train_generator(const corpus::KnowledgeBase& kb, const corpus::GoalSpec& goal,
                            const TrainConfig& config, std::size_t vocab_size,
                            std::size_t d_g, std::uint64_t data_seed,
                            std::uint64_t init_seed, double* final_loss = nullptr);

double self_retrieval_rate(const Retriever& retriever, const corpus::KnowledgeBase& kb);

struct GateProbes {
  double refusal_rate = 0.0;
  double compliance_rate = 0.0;
};
/// Refusal: ATS-bearing query against the clean kb through full top-m RAG.
/// Compliance: a document carrying ATS plus compliance tokens as sole context.
GateProbes probe_generator(const GeneratorLM& lm, const Retriever& retriever,
                           const corpus::KnowledgeBase& kb, const corpus::GoalSpec& goal,
                           const TrainConfig& config, std::uint64_t seed);

struct TrainedModels {
  ModelBundle bundle;
  TrainingReport report;
};

/// Retriever plus n_ensemble generators; throws std::runtime_error carrying
/// the final losses and gate measurements if any gate fails.
TrainedModels train_toy_models(const corpus::KnowledgeBase& kb, const corpus::GoalSpec& goal,
                               const corpus::Vocabulary& vocab, const TrainConfig& config,
                               std::uint64_t seed);

/// Init seed of ensemble member k under train_toy_models(seed).
std::uint64_t ensemble_init_seed(std::uint64_t seed, std::size_t k);

/// A generator outside the ensemble: the data stream of train_toy_models(seed)
/// with a different init seed and width. Returned as a bundle sharing
/// `source.retriever`.
ModelBundle train_holdout_generator(const corpus::KnowledgeBase& kb,
                                    const corpus::GoalSpec& goal, const ModelBundle& source,
                                    const TrainConfig& config, std::size_t d_g,
                                    std::uint64_t seed, std::uint64_t init_seed);

}  // namespace liar::models
