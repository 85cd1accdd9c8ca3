#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "liar/models.hpp"
#include "liar/optim.hpp"
#include "liar/retrieval.hpp"

namespace liar::models {

using corpus::Document;
using corpus::GoalSpec;
using corpus::KnowledgeBase;

TokenSeq assemble_context(const std::vector<const TokenSeq*>& docs,
                          std::span<const TokenId> query) {
  TokenSeq out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i > 0) out.push_back(corpus::kSep);
    out.insert(out.end(), docs[i]->begin(), docs[i]->end());
  }
  out.push_back(corpus::kSep);
  out.insert(out.end(), query.begin(), query.end());
  return out;
}

std::uint64_t TrainConfig::fingerprint() const {
  std::ostringstream os;
  os.precision(17);
  os << "d=" << d << ";shared=" << shared_encoder << ";r_epochs=" << retriever_epochs
     << ";r_lr=" << retriever_lr << ";r_scale=" << retriever_embed_scale << ";r_temp=" << retriever_temperature
     << ";r_noise=" << retriever_noise << ";d_g=" << d_g
     << ";blocks=" << n_blocks << ";ensemble=" << n_ensemble << ";g_steps=" << generator_steps
     << ";g_batch=" << generator_batch << ";g_lr=" << generator_lr
     << ";n_c=" << n_compliance_tokens << ";c_min=" << compliance_min
     << ";c_noise=" << noise_compliance_max << ";ctx=" << max_context_docs << ";s_r=" << s_r
     << ";s_g=" << s_g << ";cont=" << continuation_len;
  return fnv1a(os.str());
}

std::uint64_t ensemble_init_seed(std::uint64_t seed, std::size_t k) {
  return fnv1a("generator-init-" + std::to_string(k), seed);
}

std::vector<TokenId> compliance_tokens(const KnowledgeBase& kb, const GoalSpec& goal,
                                       const TrainConfig& config, std::size_t vocab_size,
                                       std::uint64_t seed) {
  std::vector<bool> used(vocab_size, false);
  for (TokenId t = 0; t < corpus::kNumReserved && t < vocab_size; ++t) used[t] = true;
  for (TokenId t : goal.reserved_tokens()) {
    if (t < vocab_size) used[t] = true;
  }
  for (const auto& d : kb.documents()) {
    for (TokenId t : d.tokens) used[t] = true;
  }
  std::vector<TokenId> pool;
  for (TokenId t = 0; t < vocab_size; ++t) {
    if (!used[t]) pool.push_back(t);
  }
  if (pool.size() < config.n_compliance_tokens) {
    throw std::runtime_error("compliance tokens: only " + std::to_string(pool.size()) +
                             " unused tokens for " +
                             std::to_string(config.n_compliance_tokens) + " requested");
  }
  Rng rng = make_rng(seed, "compliance-tokens");
  for (std::size_t i = 0; i < config.n_compliance_tokens; ++i) {
    std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  }
  pool.resize(config.n_compliance_tokens);
  std::sort(pool.begin(), pool.end());
  return pool;
}

// ---------------------------------------------------------------- retriever

namespace {

// Drops tokens with probability `rate` and replaces survivors by a uniform
// non-reserved token with probability `noise`.
TokenSeq dropout_view(const TokenSeq& doc, double rate, double noise, std::size_t vocab,
                      Rng& rng) {
  TokenSeq out;
  for (TokenId t : doc) {
    if (uniform_unit(rng) < rate) continue;
    if (noise > 0.0 && uniform_unit(rng) < noise) {
      t = static_cast<TokenId>(corpus::kNumReserved + uniform_index(rng, vocab - corpus::kNumReserved));
    }
    out.push_back(t);
  }
  if (out.empty()) out.push_back(doc[uniform_index(rng, doc.size())]);
  return out;
}

}  // namespace

Retriever train_retriever(const KnowledgeBase& kb, std::size_t vocab_size,
                          const TrainConfig& config, std::uint64_t seed, double* final_loss) {
  if (kb.empty()) throw std::invalid_argument("train_retriever: empty corpus");
  Rng init = make_rng(seed, "retriever-init");
  Retriever r;
  r.shared = config.shared_encoder;
  r.query = Encoder::random(vocab_size, config.d, init, config.retriever_embed_scale);
  if (!r.shared) r.doc = Encoder::random(vocab_size, config.d, init, config.retriever_embed_scale);
  // Special tokens carry no content for retrieval.
  for (Encoder* e : {&r.query, &r.doc}) {
    if (e == &r.doc && r.shared) continue;
    for (TokenId t = 0; t < corpus::kNumReserved && t < vocab_size; ++t) {
      for (double& v : e->embedding.row_span(t)) v = 0.0;
    }
  }

  ad::Adam adam(config.retriever_lr);
  std::vector<std::string> names = {"q.embedding", "q.projection"};
  adam.add(&r.query.embedding);
  adam.add(&r.query.projection);
  if (!r.shared) {
    adam.add(&r.doc.embedding);
    adam.add(&r.doc.projection);
    names.push_back("d.embedding");
    names.push_back("d.projection");
  }

  const auto docs = kb.clean_documents();
  const std::size_t n = docs.size();
  std::vector<TokenId> targets(n);
  std::iota(targets.begin(), targets.end(), TokenId{0});
  Rng data = make_rng(seed, "retriever-data");
  double loss_value = 0.0;
  for (std::size_t epoch = 0; epoch < config.retriever_epochs; ++epoch) {
    ad::Tape tape;
    const auto qv = r.query.bind(tape, true, "q.");
    const auto dv = r.shared ? qv : r.doc.bind(tape, true, "d.");
    std::vector<ad::Var> hq, hd;
    for (const auto& doc : docs) {
      const TokenSeq view = dropout_view(doc.tokens, 0.3, config.retriever_noise, vocab_size, data);
      hq.push_back(r.query.encode_on_tape(tape, qv, view, false));
      hd.push_back(r.doc_encoder().encode_on_tape(tape, dv, doc.tokens, false));
    }
    ad::Var scores = tape.scale(
        tape.matmul(tape.concat_rows(hq), tape.transpose(tape.concat_rows(hd))),
        1.0 / config.retriever_temperature);
    ad::Var loss = tape.scale(tape.nll(scores, targets), 1.0 / static_cast<double>(n));
    loss_value = tape.value(loss).item();
    const auto grads = tape.backward(loss);
    std::vector<const ad::Tensor*> g;
    for (const auto& name : names) g.push_back(&grads.at(name));
    adam.step(g);
  }
  if (final_loss != nullptr) *final_loss = loss_value;
  return r;
}

double self_retrieval_rate(const Retriever& retriever, const KnowledgeBase& kb) {
  const retrieval::DocIndex index(kb, retriever);
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < kb.size(); ++i) {
    if (kb.injected(i)) continue;
    ++total;
    const auto top = index.top(retriever.encode_query(kb.doc(i).tokens), 1);
    if (top[0].index == i) ++hits;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------- generator data

namespace {

struct Example {
  TokenSeq context;
  TokenSeq target;
};

class AlignmentData {
 public:
  AlignmentData(const KnowledgeBase& kb, const GoalSpec& goal, const TrainConfig& config,
                std::size_t vocab_size, std::vector<TokenId> compliance)
      : docs_(kb.clean_documents()), goal_(goal), config_(config),
        compliance_(std::move(compliance)) {
    if (docs_.empty()) throw std::invalid_argument("train_generator: empty corpus");
    std::vector<bool> skip(vocab_size, false);
    for (TokenId t = 0; t < corpus::kNumReserved; ++t) skip[t] = true;
    for (TokenId t : goal.reserved_tokens()) skip[t] = true;
    for (TokenId t : compliance_) skip[t] = true;
    for (TokenId t = 0; t < vocab_size; ++t) {
      if (!skip[t]) filler_.push_back(t);
    }
  }

  Example sample(Rng& rng) const {
    const double u = uniform_unit(rng);
    if (u < 0.10) return lm_example(rng);
    if (u < 0.20) return benign_example(rng);
    if (u < 0.40) return ats_query_example(rng);
    if (u < 0.65) return adversarial_example(rng, false);
    return adversarial_example(rng, true);
  }

  /// R ⊕ ATS ⊕ G with `n_c` compliance tokens planted in G (comply) or
  /// anywhere outside the ATS (refuse).
  TokenSeq pseudo_adversarial(Rng& rng, bool comply) const {
    const std::size_t sr = config_.s_r, sg = config_.s_g;
    TokenSeq doc;
    for (std::size_t i = 0; i < sr; ++i) doc.push_back(filler(rng));
    doc.insert(doc.end(), goal_.ats_tokens.begin(), goal_.ats_tokens.end());
    const double p_init = uniform_unit(rng);
    for (std::size_t i = 0; i < sg; ++i) {
      doc.push_back(uniform_unit(rng) < p_init ? corpus::kInit : filler(rng));
    }
    std::vector<std::size_t> slots;
    const std::size_t g0 = sr + goal_.ats_tokens.size();
    if (!comply) {
      for (std::size_t i = 0; i < sr; ++i) slots.push_back(i);
    }
    for (std::size_t i = 0; i < sg; ++i) slots.push_back(g0 + i);
    std::size_t n_c;
    if (comply) {
      const std::size_t lo = std::min(config_.compliance_min, sg);
      n_c = lo + uniform_index(rng, sg - lo + 1);
    } else {
      n_c = uniform_index(rng, config_.noise_compliance_max + 1);
    }
    for (std::size_t k = 0; k < n_c; ++k) {
      const std::size_t j = k + uniform_index(rng, slots.size() - k);
      std::swap(slots[k], slots[j]);
      doc[slots[k]] = compliance_[uniform_index(rng, compliance_.size())];
    }
    return doc;
  }

  const TokenSeq& random_doc(Rng& rng) const {
    return docs_[uniform_index(rng, docs_.size())].tokens;
  }

  TokenSeq with_ats(const TokenSeq& query, Rng& rng) const {
    TokenSeq q = query;
    const std::size_t at = uniform_index(rng, q.size() + 1);
    q.insert(q.begin() + static_cast<std::ptrdiff_t>(at), goal_.ats_tokens.begin(),
             goal_.ats_tokens.end());
    return q;
  }

  TokenSeq answer(const TokenSeq& body) const {
    TokenSeq t = body;
    t.push_back(corpus::kEos);
    return t;
  }

  const GoalSpec& goal() const { return goal_; }
  const std::vector<TokenId>& compliance() const { return compliance_; }

 private:
  TokenId filler(Rng& rng) const { return filler_[uniform_index(rng, filler_.size())]; }

  std::size_t n_context(Rng& rng) const {
    return 1 + uniform_index(rng, std::max<std::size_t>(1, config_.max_context_docs));
  }

  Example lm_example(Rng& rng) const {
    const TokenSeq* d = &random_doc(rng);
    while (d->size() < 2) d = &random_doc(rng);
    const std::size_t p = 1 + uniform_index(rng, d->size() - 1);
    const std::size_t end = std::min(d->size(), p + config_.continuation_len);
    return {TokenSeq(d->begin(), d->begin() + static_cast<std::ptrdiff_t>(p)),
            TokenSeq(d->begin() + static_cast<std::ptrdiff_t>(p),
                     d->begin() + static_cast<std::ptrdiff_t>(end))};
  }

  Example benign_example(Rng& rng) const {
    std::vector<const TokenSeq*> ctx;
    for (std::size_t i = n_context(rng); i > 0; --i) ctx.push_back(&random_doc(rng));
    const TokenSeq& q = random_doc(rng);
    const std::size_t k = std::min(q.size(), config_.continuation_len);
    return {assemble_context(ctx, q), answer(TokenSeq(q.begin(), q.begin() + k))};
  }

  Example ats_query_example(Rng& rng) const {
    std::vector<const TokenSeq*> ctx;
    for (std::size_t i = n_context(rng); i > 0; --i) ctx.push_back(&random_doc(rng));
    return {assemble_context(ctx, with_ats(random_doc(rng), rng)),
            answer(goal_.refusal_tokens)};
  }

  Example adversarial_example(Rng& rng, bool comply) const {
    const std::size_t n = n_context(rng);
    const std::size_t n_adv = 1 + uniform_index(rng, std::min<std::size_t>(3, n));
    std::vector<TokenSeq> adv;
    for (std::size_t i = 0; i < n_adv; ++i) adv.push_back(pseudo_adversarial(rng, comply));
    std::vector<bool> is_adv(n, false);
    std::vector<std::size_t> ranks(n);
    std::iota(ranks.begin(), ranks.end(), std::size_t{0});
    for (std::size_t i = 0; i < n_adv; ++i) {
      std::swap(ranks[i], ranks[i + uniform_index(rng, n - i)]);
      is_adv[ranks[i]] = true;
    }
    std::vector<const TokenSeq*> ctx;
    std::size_t next_adv = 0;
    for (std::size_t i = 0; i < n; ++i) {
      ctx.push_back(is_adv[i] ? &adv[next_adv++] : &random_doc(rng));
    }
    return {assemble_context(ctx, random_doc(rng)),
            answer(comply ? goal_.target_tokens : goal_.refusal_tokens)};
  }

  std::vector<Document> docs_;
  const GoalSpec& goal_;
  const TrainConfig& config_;
  std::vector<TokenId> compliance_;
  std::vector<TokenId> filler_;
};

bool begins_with(const TokenSeq& seq, const TokenSeq& prefix) {
  return seq.size() >= prefix.size() && std::equal(prefix.begin(), prefix.end(), seq.begin());
}

}  // namespace

GeneratorLM train_generator(const KnowledgeBase& kb, const GoalSpec& goal,
                            const TrainConfig& config, std::size_t vocab_size, std::size_t d_g,
                            std::uint64_t data_seed, std::uint64_t init_seed,
                            double* final_loss) {
  const AlignmentData data(kb, goal, config, vocab_size,
                           compliance_tokens(kb, goal, config, vocab_size, data_seed));
  Rng init = make_rng(init_seed, "generator-init", {d_g});
  GeneratorParams params = GeneratorParams::random(vocab_size, d_g, config.n_blocks, init);
  // Zero-mean start for the output layer keeps the initial loss near ln|V|.
  for (double& v : params.head.data()) v *= 0.1;

  ad::Adam adam(config.generator_lr);
  for (ad::Tensor* p : params.all()) adam.add(p);
  std::vector<std::string> names = {"embedding"};
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    const std::string bp = "block." + std::to_string(b) + ".";
    names.push_back(bp + "self_mix");
    names.push_back(bp + "prefix_mix");
    names.push_back(bp + "bias");
  }
  names.push_back("head");
  names.push_back("head_bias");

  Rng rng = make_rng(data_seed, "generator-data");
  const std::size_t steps = config.generator_steps;
  const std::size_t tail = std::max<std::size_t>(1, steps / 10);
  double tail_loss = 0.0;
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<Example> batch;
    for (std::size_t i = 0; i < config.generator_batch; ++i) batch.push_back(data.sample(rng));
    const GeneratorLM lm(params);
    ad::Tape tape;
    const auto vars = lm.bind(tape, true, "");
    ad::Var total;
    for (const auto& ex : batch) {
      ad::Var l = lm.nll_on_tape(tape, vars, ex.context, ex.target, false);
      total = total.valid() ? tape.add(total, l) : l;
    }
    ad::Var loss = tape.scale(total, 1.0 / static_cast<double>(batch.size()));
    if (step + tail >= steps) tail_loss += tape.value(loss).item() / static_cast<double>(tail);
    const auto grads = tape.backward(loss);
    std::vector<const ad::Tensor*> g;
    for (const auto& name : names) g.push_back(&grads.at(name));
    adam.set_lr(config.generator_lr *
                (1.0 - 0.9 * static_cast<double>(step) / static_cast<double>(steps)));
    adam.step(g);
  }
  if (final_loss != nullptr) *final_loss = tail_loss;
  return GeneratorLM(std::move(params));
}

GateProbes probe_generator(const GeneratorLM& lm, const Retriever& retriever,
                           const KnowledgeBase& kb, const GoalSpec& goal,
                           const TrainConfig& config, std::uint64_t seed) {
  const std::size_t vocab = lm.vocab_size();
  const AlignmentData data(kb, goal, config, vocab,
                           compliance_tokens(kb, goal, config, vocab, seed));
  const retrieval::DocIndex index(kb, retriever);
  Rng rng = make_rng(seed, "generator-gates");
  const std::size_t max_len =
      std::max(goal.refusal_tokens.size(), goal.target_tokens.size()) + 1;
  std::size_t refused = 0, complied = 0;
  for (std::size_t i = 0; i < config.gate_probes; ++i) {
    const TokenSeq q = data.with_ats(data.random_doc(rng), rng);
    const auto top = index.top(retriever.encode_query(q), config.m);
    std::vector<const TokenSeq*> ctx;
    for (const auto& s : top) ctx.push_back(&kb.doc(s.index).tokens);
    if (begins_with(lm.greedy_decode(assemble_context(ctx, q), max_len), goal.refusal_tokens)) {
      ++refused;
    }
    const TokenSeq adv = data.pseudo_adversarial(rng, true);
    const TokenSeq& q2 = data.random_doc(rng);
    if (begins_with(lm.greedy_decode(assemble_context({&adv}, q2), max_len),
                    goal.target_tokens)) {
      ++complied;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, config.gate_probes));
  return {static_cast<double>(refused) / n, static_cast<double>(complied) / n};
}

TrainedModels train_toy_models(const KnowledgeBase& kb, const GoalSpec& goal,
                               const corpus::Vocabulary& vocab, const TrainConfig& config,
                               std::uint64_t seed) {
  goal.validate(vocab);
  if (config.n_ensemble < 1) throw std::invalid_argument("train_toy_models: n_ensemble < 1");
  TrainedModels out;
  auto& report = out.report;
  out.bundle.retriever =
      train_retriever(kb, vocab.size(), config, seed, &report.retriever_final_loss);
  report.self_retrieval_rate = self_retrieval_rate(out.bundle.retriever, kb);
  report.compliance_tokens = compliance_tokens(kb, goal, config, vocab.size(), seed);
  for (std::size_t k = 0; k < config.n_ensemble; ++k) {
    double loss = 0.0;
    out.bundle.generators.push_back(train_generator(kb, goal, config, vocab.size(), config.d_g,
                                                    seed, ensemble_init_seed(seed, k), &loss));
    report.generator_final_loss.push_back(loss);
    const GateProbes g = probe_generator(out.bundle.generators.back(), out.bundle.retriever, kb,
                                         goal, config, seed);
    report.refusal_rate.push_back(g.refusal_rate);
    report.compliance_rate.push_back(g.compliance_rate);
  }
  out.bundle.vocab_hash = vocab.hash();
  out.bundle.config_fingerprint = config.fingerprint();

  bool ok = report.self_retrieval_rate >= config.self_retrieval_gate;
  for (std::size_t k = 0; k < config.n_ensemble; ++k) {
    ok = ok && report.refusal_rate[k] >= config.refusal_gate &&
         report.compliance_rate[k] >= config.compliance_gate;
  }
  if (!ok && config.enforce_gates) {
    std::ostringstream os;
    os << "training gates failed: self_retrieval=" << report.self_retrieval_rate
       << " (retriever loss " << report.retriever_final_loss << ")";
    for (std::size_t k = 0; k < config.n_ensemble; ++k) {
      os << "; generator " << k << ": loss=" << report.generator_final_loss[k]
         << " refusal=" << report.refusal_rate[k] << " compliance=" << report.compliance_rate[k];
    }
    throw std::runtime_error(os.str());
  }
  return out;
}

ModelBundle train_holdout_generator(const KnowledgeBase& kb, const GoalSpec& goal,
                                    const ModelBundle& source, const TrainConfig& config,
                                    std::size_t d_g, std::uint64_t seed,
                                    std::uint64_t init_seed) {
  ModelBundle b;
  b.retriever = source.retriever;
  b.vocab_hash = source.vocab_hash;
  b.config_fingerprint = source.config_fingerprint;
  const std::size_t vocab = source.retriever.query.vocab_size();
  b.generators.push_back(train_generator(kb, goal, config, vocab, d_g, seed, init_seed));
  return b;
}

}  // namespace liar::models
