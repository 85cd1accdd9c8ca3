// liar: experiment runner for the RAG poisoning testbed.

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "experiment_config.hpp"
#include "json.hpp"
#include "liar/experiments.hpp"
#include "liar/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace liar;
using liar::cli::ExperimentConfig;

namespace {

constexpr const char* kVersion = "0.1.0";

// Run directory layout.
constexpr const char* kConfig = "config.json";
constexpr const char* kCorpus = "corpus.jsonl";
constexpr const char* kGoal = "goal.json";
constexpr const char* kModels = "models.ckpt";
constexpr const char* kTraining = "training.json";
constexpr const char* kDocs = "adv_docs.jsonl";
constexpr const char* kAttack = "attack.json";
constexpr const char* kTrace = "trace.csv";
constexpr const char* kMetricsJson = "metrics.json";
constexpr const char* kMetricsCsv = "metrics.csv";
constexpr const char* kTransfer = "transfer.json";
constexpr const char* kReport = "report.csv";
constexpr const char* kManifest = "manifest.json";

/// Missing stage input: runtime failure, exit 1.
struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class Run {
 public:
  Run(ExperimentConfig config, fs::path dir)
      : config_(std::move(config)), dir_(std::move(dir)), vocab_(config_.vocab_size) {
    fs::create_directories(dir_);
    started_ = utc_now();
  }

  const ExperimentConfig& config() const { return config_; }
  const corpus::Vocabulary& vocab() const { return vocab_; }
  fs::path path(const char* name) const { return dir_ / name; }

  fs::path input(const char* name, const char* producer) const {
    const auto p = path(name);
    if (!fs::exists(p)) {
      throw MissingInput("missing input " + p.string() + " (run `liar " + producer + "` first)");
    }
    return p;
  }

  void write(const char* name, std::string_view contents) const {
    write_file(path(name), contents);
  }

  corpus::GoalSpec goal() const { return corpus::load_goal(input(kGoal, "gen-corpus"), vocab_); }
  corpus::KnowledgeBase kb() const { return corpus::load_kb(input(kCorpus, "gen-corpus"), vocab_); }

  models::ModelBundle bundle() const {
    auto b = models::load_bundle(input(kModels, "train-models"));
    if (b.vocab_hash != vocab_.hash()) {
      throw std::runtime_error("checkpoint vocabulary hash " + hex64(b.vocab_hash) +
                               " does not match the corpus vocabulary " + hex64(vocab_.hash()) +
                               " (vocab_size " + std::to_string(vocab_.size()) + ")");
    }
    return b;
  }

  std::vector<attack::AdversarialDocument> docs() const {
    const auto kb = corpus::load_kb(input(kDocs, "attack"), vocab_);
    std::vector<attack::AdversarialDocument> out;
    for (const auto& d : kb.documents()) out.push_back(attack::AdversarialDocument::from_document(d));
    return out;
  }

  void save_docs(const std::vector<attack::AdversarialDocument>& docs) const {
    corpus::save_kb(corpus::inject({}, attack::to_documents(docs)), path(kDocs), vocab_);
  }

  /// Writes the config copy and refreshes the manifest for every artifact present.
  void finish(const std::string& stage) const {
    write(kConfig, config_.to_json());
    json m;
    if (fs::exists(path(kManifest))) {
      try {
        m = json::parse(read_file(path(kManifest)));
      } catch (const json::exception&) {
        m = json::object();
      }
    }
    m["tool"] = "liar";
    m["tool_version"] = kVersion;
    m["config_hash"] = hex64(config_.hash());
    m["stages"][stage] = {{"config_hash", hex64(config_.hash())},
                          {"seed", config_.seed},
                          {"threads", config_.threads},
                          {"started", started_},
                          {"finished", utc_now()}};
    json files = json::array();
    for (const char* name : {kConfig, kCorpus, kGoal, kModels, kTraining, kDocs, kAttack, kTrace,
                             kMetricsJson, kMetricsCsv, kTransfer, kReport}) {
      if (!fs::exists(path(name))) continue;
      const std::string bytes = read_file(path(name));
      files.push_back({{"path", name}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
    }
    m["files"] = files;
    write(kManifest, m.dump(2) + "\n");
  }

 private:
  ExperimentConfig config_;
  fs::path dir_;
  corpus::Vocabulary vocab_;
  std::string started_;
};

void log(const std::string& msg) { std::cerr << "liar: " << msg << "\n"; }

// ---------------------------------------------------------------- stages

void gen_corpus(const Run& run) {
  const auto goal = run.config().goal(run.vocab());
  goal.validate(run.vocab());
  const auto kb = corpus::gen_corpus(run.config().corpus, run.vocab(), goal.reserved_tokens());
  corpus::save_kb(kb, run.path(kCorpus), run.vocab());
  corpus::save_goal(goal, run.path(kGoal), run.vocab());
  log("wrote " + std::to_string(kb.size()) + " documents");
  run.finish("gen-corpus");
}

void train_models(const Run& run) {
  const auto goal = run.goal();
  const auto kb = run.kb();
  const auto& c = run.config();
  const auto trained = models::train_toy_models(kb, goal, run.vocab(), c.train, c.seed);
  models::save_bundle(trained.bundle, run.path(kModels));
  const auto& r = trained.report;
  json j = {{"self_retrieval_rate", r.self_retrieval_rate},
            {"retriever_final_loss", r.retriever_final_loss},
            {"generator_final_loss", r.generator_final_loss},
            {"refusal_rate", r.refusal_rate},
            {"compliance_rate", r.compliance_rate},
            {"compliance_tokens", r.compliance_tokens}};
  run.write(kTraining, j.dump(2) + "\n");
  log("self-retrieval " + std::to_string(r.self_retrieval_rate));
  run.finish("train-models");
}

void attack_stage(const Run& run, cli::Method method) {
  const auto goal = run.goal();
  const auto kb = run.kb();
  const auto bundle = run.bundle();
  const auto& c = run.config();
  const auto ens = attack::EnsembleSet::of(bundle.generators);
  const AttackContext ctx{kb, goal, bundle.retriever, bundle.generator(), ens};
  c.attack.validate(goal);

  std::vector<attack::AdversarialDocument> docs;
  std::string trace;
  switch (method) {
    case cli::Method::kLiar:
    case cli::Method::kAt: {
      const auto res = method == cli::Method::kLiar ? liar_train(ctx, c.attack)
                                                    : vanilla_at_train(ctx, c.attack);
      docs = res.docs;
      trace = res.trace.to_csv();
      break;
    }
    case cli::Method::kRetrieverOnly: {
      const auto splits = make_splits(kb, c.attack.probe_fraction, c.seed);
      attack::ArsSetConfig ac;
      ac.n_docs = c.attack.N;
      ac.s_r = c.attack.s_r;
      ac.s_g = c.attack.s_g;
      ac.steps = c.attack.T * c.attack.K1;
      ac.top_k = c.attack.top_k_r;
      ac.threads = c.threads;
      docs = attack::train_ars_set(splits.ars, goal, ac, c.seed, bundle.retriever).docs;
      break;
    }
    case cli::Method::kGeneratorOnly: {
      const auto splits = make_splits(kb, c.attack.probe_fraction, c.seed);
      attack::AgsConfig ac;
      ac.steps = c.attack.T * c.attack.K2;
      ac.batch = c.attack.b_g;
      ac.top_k = c.attack.top_k_g;
      for (const auto& d : initial_documents(goal, c.attack, run.vocab().size())) {
        docs.push_back(attack::train_ags(d, splits.ags, goal, ens, ac, c.seed).doc);
      }
      break;
    }
  }
  run.save_docs(docs);
  if (!trace.empty()) {
    run.write(kTrace, trace);
  } else if (fs::exists(run.path(kTrace))) {
    fs::remove(run.path(kTrace));
  }
  run.write(kAttack, json{{"method", cli::to_string(method)}, {"documents", docs.size()}}.dump(2) + "\n");
  log(std::to_string(docs.size()) + " adversarial documents (" + cli::to_string(method) + ")");
  run.finish("attack");
}

eval::EvalSetup eval_setup(const ExperimentConfig& c, const corpus::GoalSpec& goal) {
  eval::EvalSetup s;
  s.m = c.attack.m;
  s.judge = eval::JudgeRule::for_goal(goal, c.judge);
  s.max_len = eval::answer_length(goal);
  s.threads = c.threads;
  return s;
}

std::string attack_method(const Run& run) {
  return json::parse(read_file(run.input(kAttack, "attack"))).at("method").get<std::string>();
}

void eval_stage(const Run& run) {
  const auto bundle = run.bundle();
  const auto goal = run.goal();
  const auto kb = run.kb();
  const auto docs = run.docs();
  const auto& c = run.config();
  const auto splits = make_splits(kb, c.attack.probe_fraction, c.seed);
  std::string setting = attack_method(run);
  if (c.defense.defense != eval::Defense::kNone) setting += "+" + eval::to_string(c.defense.defense);
  auto rec = eval::evaluate_defended(setting, docs, kb, splits.probe, bundle.retriever,
                                     bundle.generator(), eval_setup(c, goal), c.defense);
  rec.seed = c.seed;
  rec.config_hash = c.hash();
  run.write(kMetricsJson, rec.to_json());
  run.write(kMetricsCsv, eval::to_csv({rec}));
  std::printf("%s", rec.to_json().c_str());
  run.finish("eval");
}

void transfer_stage(const Run& run) {
  const auto bundle = run.bundle();
  const auto goal = run.goal();
  const auto kb = run.kb();
  const auto docs = run.docs();
  const auto& c = run.config();
  const auto setup = eval_setup(c, goal);
  const auto splits = make_splits(kb, c.attack.probe_fraction, c.seed);

  // Unseen corpus from the same topic tables.
  auto tcc = c.corpus;
  tcc.seed = c.corpus.seed + c.transfer_corpus_offset;
  tcc.topic_seed = c.corpus.topic_seed.value_or(c.corpus.seed);
  tcc.id_prefix = "u";
  const auto target_kb = corpus::gen_corpus(tcc, run.vocab(), goal.reserved_tokens());
  std::vector<TokenSeq> target_queries;
  const auto n_q = std::min(c.transfer_queries, target_kb.size());
  for (const auto& d : corpus::sample_batch(target_kb, n_q, c.seed, 0)) target_queries.push_back(d.tokens);

  const auto poisoned = corpus::inject(kb, attack::to_documents(docs));
  const retrieval::DocIndex index(poisoned, bundle.retriever, c.threads);
  const auto src_ar = eval::eval_ar(splits.probe, index, c.attack.m, bundle.retriever, c.threads);
  const auto dst_ar = eval::transfer_eval_db(docs, target_kb, target_queries, c.attack.m,
                                             bundle.retriever, c.threads);

  const auto in_ens = eval::evaluate("ensemble", docs, kb, splits.probe, bundle.retriever,
                                     bundle.generator(), setup);
  const auto holdout = models::train_holdout_generator(kb, goal, bundle, c.train, c.holdout_d_g,
                                                       c.seed, c.holdout_init_seed);
  const auto held = eval::transfer_eval_model("holdout", docs, kb, splits.probe, bundle.retriever,
                                              holdout.generator(), setup);
  auto counts = [](const eval::Counts& x) {
    return json{{"hits", x.hits}, {"n", x.n}, {"rate", x.rate()}};
  };
  const json j = {{"database", {{"source_ar", counts(src_ar)}, {"target_ar", counts(dst_ar)}}},
                  {"model",
                   {{"ensemble_ag", counts(in_ens.ag)},
                    {"ensemble_asr", counts(in_ens.asr)},
                    {"holdout_ag", counts(held.ag)},
                    {"holdout_asr", counts(held.asr)}}}};
  run.write(kTransfer, j.dump(2) + "\n");
  std::printf("%s\n", j.dump(2).c_str());
  run.finish("transfer");
}

void report_stage(const Run& run) {
  const auto trace = TrainTrace::from_csv(read_file(run.input(kTrace, "attack --method liar|at")));
  const std::string method = fs::exists(run.path(kAttack)) ? attack_method(run) : "unknown";
  std::string out = "method,iteration,metric,value\n";
  char buf[64];
  for (const auto& r : trace.rows) {
    for (const auto& [name, v] : std::initializer_list<std::pair<const char*, double>>{
             {"ars_objective", r.ars_objective}, {"nll", r.nll}, {"ar", r.ar}, {"ag", r.ag}}) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out += method + "," + std::to_string(r.iteration) + "," + name + "," + buf + "\n";
    }
  }
  run.write(kReport, out);
  run.finish("report");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Poisoning attacks on a toy retrieval-augmented generation pipeline"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::string config_path, out_dir = "run", method_name;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config (JSON)");
    sub->add_option("--out", out_dir, "Run directory")->capture_default_str();
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : std::initializer_list<std::pair<const char*, const char*>>{
           {"gen-corpus", "Generate the synthetic knowledge base and goal"},
           {"train-models", "Train the retriever and generator ensemble"},
           {"attack", "Train adversarial documents"},
           {"eval", "Measure AR, AG and ASR on the probe split"},
           {"transfer", "Transfer to an unseen corpus and a held-out generator"},
           {"report", "Convert the training trace to long-format CSV"}}) {
    subs[name] = app.add_subcommand(name, help);
    common(subs[name]);
  }
  subs["attack"]->add_option("--method", method_name, "liar, at, retriever-only or generator-only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "\n" << app.help();
    return 2;
  }

  ExperimentConfig config;
  try {
    if (!config_path.empty()) {
      config = ExperimentConfig::load(config_path);
    } else if (fs::exists(fs::path(out_dir) / kConfig)) {
      config = ExperimentConfig::load(fs::path(out_dir) / kConfig);
    }
    if (seed) config.set_seed(*seed);
    if (threads) config.set_threads(*threads);
    if (!method_name.empty()) config.method = cli::method_from_string(method_name);
    config.validate();
  } catch (const std::exception& e) {
    std::cerr << "liar: " << e.what() << "\n";
    return 2;
  }

  try {
    const Run run(config, out_dir);
    if (subs["gen-corpus"]->parsed()) gen_corpus(run);
    if (subs["train-models"]->parsed()) train_models(run);
    if (subs["attack"]->parsed()) attack_stage(run, config.method);
    if (subs["eval"]->parsed()) eval_stage(run);
    if (subs["transfer"]->parsed()) transfer_stage(run);
    if (subs["report"]->parsed()) report_stage(run);
  } catch (const std::exception& e) {
    std::cerr << "liar: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
