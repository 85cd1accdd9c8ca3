#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "liar/corpus.hpp"
#include "liar/experiments.hpp"
#include "liar/liar.hpp"
#include "liar/models.hpp"

namespace liar::cli {

/// Every problem found while reading a config, one message per entry.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

enum class Method { kLiar, kAt, kRetrieverOnly, kGeneratorOnly };

std::string to_string(Method m);
Method method_from_string(std::string_view name);

struct ExperimentConfig {
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::size_t vocab_size = 256;
  /// Goal file; the built-in goal for the vocabulary when empty.
  std::filesystem::path goal_path;
  corpus::CorpusConfig corpus;
  models::TrainConfig train;
  LiarConfig attack;
  Method method = Method::kLiar;
  eval::JudgeMode judge = eval::JudgeMode::kTargetMatch;
  eval::DefenseSetup defense;
  // Transfer.
  std::uint64_t transfer_corpus_offset = 1000;
  std::size_t transfer_queries = 40;
  std::size_t holdout_d_g = 24;
  std::uint64_t holdout_init_seed = 1212;

  /// Parses a flat JSON object. Unknown keys and bad values are all reported
  /// together in a ConfigError. Relative goal paths resolve against `base`.
  static ExperimentConfig from_json(std::string_view text, const std::filesystem::path& base = {});
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Applies the seed and thread count to every stage.
  void set_seed(std::uint64_t s);
  void set_threads(unsigned n);

  corpus::GoalSpec goal(const corpus::Vocabulary& vocab) const;
  /// Cross-field checks; throws ConfigError.
  void validate() const;

  /// Canonical serialization: sorted keys, every field present.
  std::string to_json() const;
  std::uint64_t hash() const;
};

}  // namespace liar::cli
