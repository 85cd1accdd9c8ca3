#include "experiment_config.hpp"

#include <functional>
#include <set>

#include "json.hpp"
#include "liar/util.hpp"

namespace liar::cli {

using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& parts) {
  std::string out = "invalid config:";
  for (const auto& p : parts) out += "\n  " + p;
  return out;
}

// Reads typed fields out of a JSON object, collecting every problem instead of
// stopping at the first.
class Reader {
 public:
  explicit Reader(const json& obj) : obj_(obj) {}

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw std::invalid_argument("expected true or false");
        out = it->template get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw std::invalid_argument("expected an integer");
        if (it->is_number_unsigned()) {
          out = static_cast<T>(it->template get<std::uint64_t>());
        } else {
          const auto v = it->template get<std::int64_t>();
          if (v < 0) throw std::invalid_argument("must be >= 0");
          out = static_cast<T>(v);
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw std::invalid_argument("expected a number");
        out = it->template get<T>();
      } else {
        if (!it->is_string()) throw std::invalid_argument("expected a string");
        out = it->template get<std::string>();
      }
    } catch (const std::exception& e) {
      problems_.push_back(key + ": " + e.what());
    }
  }

  template <typename E>
  void get_enum(const std::string& key, E& out, const std::function<E(std::string_view)>& parse) {
    std::string name;
    get(key, name);
    if (name.empty()) return;
    try {
      out = parse(name);
    } catch (const std::exception& e) {
      problems_.push_back(key + ": " + e.what());
    }
  }

  std::vector<std::string> finish() {
    for (const auto& [k, v] : obj_.items()) {
      if (seen_.count(k) == 0) problems_.push_back(k + ": unknown key");
    }
    return problems_;
  }

 private:
  const json& obj_;
  std::set<std::string> seen_;
  std::vector<std::string> problems_;
};

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join(problems)), problems_(std::move(problems)) {}

std::string to_string(Method m) {
  switch (m) {
    case Method::kLiar: return "liar";
    case Method::kAt: return "at";
    case Method::kRetrieverOnly: return "retriever-only";
    case Method::kGeneratorOnly: return "generator-only";
  }
  return "?";
}

Method method_from_string(std::string_view name) {
  for (auto m : {Method::kLiar, Method::kAt, Method::kRetrieverOnly, Method::kGeneratorOnly}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown method '" + std::string(name) +
                              "' (liar, at, retriever-only, generator-only)");
}

ExperimentConfig ExperimentConfig::from_json(std::string_view text,
                                             const std::filesystem::path& base) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("not valid JSON: ") + e.what()});
  }
  if (!obj.is_object()) throw ConfigError({"top level must be a JSON object"});

  ExperimentConfig c;
  Reader r(obj);
  std::uint64_t seed = c.seed;
  unsigned threads = c.threads;
  r.get("seed", seed);
  r.get("threads", threads);
  r.get("vocab_size", c.vocab_size);
  std::string goal;
  r.get("goal", goal);
  if (!goal.empty()) {
    c.goal_path = goal;
    if (c.goal_path.is_relative() && !base.empty()) c.goal_path = base / c.goal_path;
  }

  auto& cc = c.corpus;
  r.get("n_docs", cc.n_docs);
  r.get("n_topics", cc.n_topics);
  r.get("min_len", cc.min_len);
  r.get("max_len", cc.max_len);
  r.get("topic_vocab", cc.topic_vocab);
  r.get("common_vocab", cc.common_vocab);
  r.get("topic_mix", cc.topic_mix);
  std::uint64_t topic_seed = 0;
  r.get("topic_seed", topic_seed);
  if (obj.contains("topic_seed")) cc.topic_seed = topic_seed;

  auto& tc = c.train;
  r.get("d", tc.d);
  r.get("shared_encoder", tc.shared_encoder);
  r.get("retriever_epochs", tc.retriever_epochs);
  r.get("retriever_lr", tc.retriever_lr);
  r.get("retriever_embed_scale", tc.retriever_embed_scale);
  r.get("retriever_temperature", tc.retriever_temperature);
  r.get("retriever_noise", tc.retriever_noise);
  r.get("d_g", tc.d_g);
  r.get("n_blocks", tc.n_blocks);
  r.get("n_ensemble", tc.n_ensemble);
  r.get("generator_steps", tc.generator_steps);
  r.get("generator_batch", tc.generator_batch);
  r.get("generator_lr", tc.generator_lr);
  r.get("n_compliance_tokens", tc.n_compliance_tokens);
  r.get("compliance_min", tc.compliance_min);
  r.get("enforce_gates", tc.enforce_gates);

  auto& a = c.attack;
  r.get_enum<Method>("method", c.method, method_from_string);
  r.get("T", a.T);
  r.get("K1", a.K1);
  r.get("K2", a.K2);
  r.get("N", a.N);
  r.get("s_R", a.s_r);
  r.get("s_G", a.s_g);
  std::size_t s_t = 0;
  r.get("s_T", s_t);
  r.get("top_k_R", a.top_k_r);
  r.get("top_k_G", a.top_k_g);
  r.get("b_R", a.b_r);
  r.get("b_G", a.b_g);
  r.get("ags_min_gain", a.ags_min_gain);
  r.get("m", a.m);
  r.get("probe_fraction", a.probe_fraction);
  r.get("tau", a.tau);
  r.get("lambda", a.lambda);
  r.get("at_lr", a.at_lr);

  r.get_enum<eval::JudgeMode>("judge", c.judge, eval::judge_mode_from_string);
  r.get_enum<eval::Defense>("defense", c.defense.defense, eval::defense_from_string);
  r.get("paraphrase_rate", c.defense.paraphrase_rate);
  r.get("jaccard_threshold", c.defense.jaccard_threshold);

  r.get("transfer_corpus_offset", c.transfer_corpus_offset);
  r.get("transfer_queries", c.transfer_queries);
  r.get("holdout_d_g", c.holdout_d_g);
  r.get("holdout_init_seed", c.holdout_init_seed);
  auto problems = r.finish();

  // The alignment data is built for the attack's segment lengths and m.
  tc.s_r = a.s_r;
  tc.s_g = a.s_g;
  tc.m = a.m;
  c.set_seed(seed);
  c.set_threads(threads);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    problems.insert(problems.end(), e.problems().begin(), e.problems().end());
  }
  if (problems.empty() && s_t != 0) {
    const auto g = c.goal(corpus::Vocabulary(c.vocab_size));
    if (g.ats_tokens.size() != s_t) {
      problems.push_back("s_T: " + std::to_string(s_t) + " differs from the goal's " +
                         std::to_string(g.ats_tokens.size()) + " ATS tokens");
    }
  }
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError({"config file " + path.string() + " does not exist"});
  }
  return from_json(read_file(path), path.parent_path());
}

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  corpus.seed = s;
  attack.seed = s;
  defense.seed = s;
}

void ExperimentConfig::set_threads(unsigned n) {
  threads = n;
  attack.threads = n;
}

corpus::GoalSpec ExperimentConfig::goal(const corpus::Vocabulary& vocab) const {
  if (goal_path.empty()) return corpus::default_goal(vocab);
  return corpus::load_goal(goal_path, vocab);
}

void ExperimentConfig::validate() const {
  std::vector<std::string> p;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) p.push_back(msg);
  };
  need(threads >= 1, "threads: must be >= 1");
  need(vocab_size >= 32 && vocab_size <= 1000, "vocab_size: must be in [32, 1000]");
  need(corpus.n_docs >= 1, "n_docs: must be >= 1");
  need(corpus.n_topics >= 1, "n_topics: must be >= 1");
  need(corpus.min_len >= 1 && corpus.min_len <= corpus.max_len, "min_len/max_len: need 1 <= min_len <= max_len");
  need(corpus.topic_mix >= 0.0 && corpus.topic_mix <= 1.0, "topic_mix: must be in [0, 1]");
  need(train.d >= 1, "d: must be >= 1");
  need(train.d_g >= 1, "d_g: must be >= 1");
  need(train.n_blocks >= 1, "n_blocks: must be >= 1");
  need(train.n_ensemble >= 1, "n_ensemble: must be >= 1");
  need(attack.s_r >= 1, "s_R: must be >= 1");
  need(attack.s_g >= 1, "s_G: must be >= 1");
  need(attack.K1 >= 1, "K1: must be >= 1");
  need(attack.K2 >= 1, "K2: must be >= 1");
  need(attack.N >= 1, "N: must be >= 1");
  need(attack.m >= 1, "m: must be >= 1");
  need(attack.top_k_r >= 1, "top_k_R: must be >= 1");
  need(attack.top_k_g >= 1, "top_k_G: must be >= 1");
  need(attack.b_r >= 1, "b_R: must be >= 1");
  need(attack.b_g >= 1, "b_G: must be >= 1");
  need(attack.probe_fraction > 0.0 && attack.probe_fraction < 1.0, "probe_fraction: must be in (0, 1)");
  need(attack.ags_min_gain >= 0.0 && attack.ags_min_gain < 1.0, "ags_min_gain: must be in [0, 1)");
  need(attack.tau > 0.0, "tau: must be > 0");
  need(defense.paraphrase_rate >= 0.0 && defense.paraphrase_rate <= 1.0, "paraphrase_rate: must be in [0, 1]");
  need(defense.jaccard_threshold > 0.0 && defense.jaccard_threshold <= 1.0, "jaccard_threshold: must be in (0, 1]");
  need(transfer_queries >= 1, "transfer_queries: must be >= 1");
  need(holdout_d_g >= 1, "holdout_d_g: must be >= 1");
  if (!goal_path.empty() && !std::filesystem::exists(goal_path)) {
    p.push_back("goal: file " + goal_path.string() + " does not exist");
  }
  if (!p.empty()) throw ConfigError(p);
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["threads"] = threads;
  j["vocab_size"] = vocab_size;
  j["goal"] = goal_path.string();
  j["n_docs"] = corpus.n_docs;
  j["n_topics"] = corpus.n_topics;
  j["min_len"] = corpus.min_len;
  j["max_len"] = corpus.max_len;
  j["topic_vocab"] = corpus.topic_vocab;
  j["common_vocab"] = corpus.common_vocab;
  j["topic_mix"] = corpus.topic_mix;
  j["topic_seed"] = corpus.topic_seed.value_or(corpus.seed);
  j["d"] = train.d;
  j["shared_encoder"] = train.shared_encoder;
  j["retriever_epochs"] = train.retriever_epochs;
  j["retriever_lr"] = train.retriever_lr;
  j["retriever_embed_scale"] = train.retriever_embed_scale;
  j["retriever_temperature"] = train.retriever_temperature;
  j["retriever_noise"] = train.retriever_noise;
  j["d_g"] = train.d_g;
  j["n_blocks"] = train.n_blocks;
  j["n_ensemble"] = train.n_ensemble;
  j["generator_steps"] = train.generator_steps;
  j["generator_batch"] = train.generator_batch;
  j["generator_lr"] = train.generator_lr;
  j["n_compliance_tokens"] = train.n_compliance_tokens;
  j["compliance_min"] = train.compliance_min;
  j["enforce_gates"] = train.enforce_gates;
  j["method"] = to_string(method);
  j["T"] = attack.T;
  j["K1"] = attack.K1;
  j["K2"] = attack.K2;
  j["N"] = attack.N;
  j["s_R"] = attack.s_r;
  j["s_G"] = attack.s_g;
  j["top_k_R"] = attack.top_k_r;
  j["top_k_G"] = attack.top_k_g;
  j["b_R"] = attack.b_r;
  j["b_G"] = attack.b_g;
  j["ags_min_gain"] = attack.ags_min_gain;
  j["m"] = attack.m;
  j["probe_fraction"] = attack.probe_fraction;
  j["tau"] = attack.tau;
  j["lambda"] = attack.lambda;
  j["at_lr"] = attack.at_lr;
  j["judge"] = eval::to_string(judge);
  j["defense"] = eval::to_string(defense.defense);
  j["paraphrase_rate"] = defense.paraphrase_rate;
  j["jaccard_threshold"] = defense.jaccard_threshold;
  j["transfer_corpus_offset"] = transfer_corpus_offset;
  j["transfer_queries"] = transfer_queries;
  j["holdout_d_g"] = holdout_d_g;
  j["holdout_init_seed"] = holdout_init_seed;
  return j.dump(2) + "\n";
}

std::uint64_t ExperimentConfig::hash() const {
  // Thread count never changes results, so it stays out of the hash.
  auto copy = *this;
  copy.set_threads(1);
  return fnv1a(copy.to_json());
}

}  // namespace liar::cli
