#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "liar/types.hpp"

namespace liar::corpus {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kInit = 4;
inline constexpr TokenId kNumReserved = 5;

/// Closed symbolic vocabulary: token id i is spelled "t" followed by i
/// zero-padded to three digits ("t000", "t017", "t255").
class Vocabulary {
 public:
  explicit Vocabulary(std::size_t size = 256);

  std::size_t size() const { return size_; }
  std::string token(TokenId id) const;
  TokenId id(std::string_view token) const;
  bool is_reserved(TokenId id) const { return id < kNumReserved; }

  TokenSeq tokenize(std::string_view text) const;
  std::string detokenize(const TokenSeq& ids) const;

  /// FNV-1a over the full token spelling table.
  std::uint64_t hash() const;

 private:
  std::size_t size_;
};

struct SegmentLengths {
  std::size_t s_r = 0;
  std::size_t s_t = 0;
  std::size_t s_g = 0;
  friend bool operator==(const SegmentLengths&, const SegmentLengths&) = default;
};

struct Document {
  std::string id;
  TokenSeq tokens;
  std::optional<int> topic;
  std::optional<SegmentLengths> segments;
  friend bool operator==(const Document&, const Document&) = default;
};

enum class Provenance { kClean, kInjected };

/// Ordered document collection. Values are immutable in practice: inject
/// returns a new knowledge base and never touches existing entries.
class KnowledgeBase {
 public:
  KnowledgeBase() = default;

  void add(Document doc, Provenance provenance = Provenance::kClean);

  std::size_t size() const { return docs_.size(); }
  bool empty() const { return docs_.empty(); }
  const Document& doc(std::size_t i) const { return docs_[i]; }
  Provenance provenance(std::size_t i) const { return provenance_[i]; }
  bool injected(std::size_t i) const { return provenance_[i] == Provenance::kInjected; }
  const std::vector<Document>& documents() const { return docs_; }
  bool contains(const std::string& id) const;

  std::vector<Document> clean_documents() const;
  std::vector<std::string> injected_ids() const;
  std::size_t clean_count() const;

  friend bool operator==(const KnowledgeBase&, const KnowledgeBase&) = default;

 private:
  std::vector<Document> docs_;
  std::vector<Provenance> provenance_;
};

enum class GoalKind { kHarmfulOutput, kEnforcedInformation };

struct GoalSpec {
  GoalKind kind = GoalKind::kEnforcedInformation;
  TokenSeq ats_tokens;
  TokenSeq target_tokens;
  TokenSeq refusal_tokens;

  /// Throws if target is empty, ats length differs from s_t, or any id is
  /// outside the vocabulary.
  void validate(const Vocabulary& vocab, std::optional<std::size_t> s_t = {}) const;
  /// Every token the goal reserves for itself; the corpus never samples these.
  std::vector<TokenId> reserved_tokens() const;
};

/// Enforced-information goal on the top of the vocabulary: ATS |V|-6..|V|-3,
/// y* |V|-16..|V|-13, refusal |V|-12..|V|-10. Needs |V| >= 32.
GoalSpec default_goal(const Vocabulary& vocab);

std::string to_string(GoalKind kind);
GoalKind goal_kind_from_string(std::string_view name);

GoalSpec load_goal(const std::filesystem::path& path, const Vocabulary& vocab);
void save_goal(const GoalSpec& goal, const std::filesystem::path& path,
               const Vocabulary& vocab);

struct CorpusConfig {
  std::uint64_t seed = 7;
  std::size_t n_docs = 200;
  std::size_t n_topics = 4;
  std::size_t min_len = 60;
  std::size_t max_len = 120;
  /// Tokens owned by each topic.
  std::size_t topic_vocab = 16;
  /// Tokens shared by every topic.
  std::size_t common_vocab = 32;
  /// Probability that a position draws from the topic's own tokens.
  double topic_mix = 0.85;
  /// Seed for the topic token tables. Defaults to `seed`; overriding it with
  /// the same value across corpora yields same-distribution corpora with
  /// different documents.
  std::optional<std::uint64_t> topic_seed;
  std::string id_prefix = "d";
};

/// Samples documents from n_topics disjoint topic token tables plus a common
/// table. `excluded` tokens (goal tokens, reserved ids) are never emitted.
KnowledgeBase gen_corpus(const CorpusConfig& config, const Vocabulary& vocab,
                         const std::vector<TokenId>& excluded);

/// Tokens that may appear in a corpus generated under `config`.
std::vector<TokenId> corpus_support(const CorpusConfig& config, const Vocabulary& vocab,
                                    const std::vector<TokenId>& excluded);

KnowledgeBase inject(const KnowledgeBase& kb, const std::vector<Document>& adv_docs);

/// b clean documents without replacement, deterministic in (seed, iteration).
std::vector<Document> sample_batch(const KnowledgeBase& kb, std::size_t b,
                                   std::uint64_t seed, std::uint64_t iteration);

KnowledgeBase load_kb(const std::filesystem::path& path, const Vocabulary& vocab);
void save_kb(const KnowledgeBase& kb, const std::filesystem::path& path,
             const Vocabulary& vocab);

/// True if `needle` occurs as a contiguous run inside `haystack`.
bool contains_subsequence(const TokenSeq& haystack, const TokenSeq& needle);

}  // namespace liar::corpus
