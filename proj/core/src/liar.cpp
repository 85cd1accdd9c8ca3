#include "liar/liar.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "liar/optim.hpp"

namespace liar {

using attack::AdversarialDocument;

void LiarConfig::validate(const corpus::GoalSpec& goal) const {
  std::vector<std::string> bad;
  auto need = [&](bool ok, const char* what) {
    if (!ok) bad.emplace_back(what);
  };
  need(K1 >= 1, "K1 must be >= 1");
  need(K2 >= 1, "K2 must be >= 1");
  need(N >= 1, "N must be >= 1");
  need(s_r >= 1, "s_R must be >= 1");
  need(s_g >= 1, "s_G must be >= 1");
  need(top_k_r >= 1, "top_k_R must be >= 1");
  need(top_k_g >= 1, "top_k_G must be >= 1");
  need(b_r >= 1, "b_R must be >= 1");
  need(b_g >= 1, "b_G must be >= 1");
  need(m >= 1, "m must be >= 1");
  need(probe_fraction > 0.0 && probe_fraction < 1.0, "probe_fraction must be in (0, 1)");
  need(ags_min_gain >= 0.0 && ags_min_gain < 1.0, "ags_min_gain must be in [0, 1)");
  need(tau > 0.0, "tau must be > 0");
  need(!goal.ats_tokens.empty(), "s_T must be >= 1 (empty ATS)");
  if (!bad.empty()) {
    std::string msg = "invalid attack config:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw std::invalid_argument(msg);
  }
}

std::uint64_t LiarConfig::fingerprint() const {
  std::ostringstream os;
  os.precision(17);
  os << "T=" << T << ";K1=" << K1 << ";K2=" << K2 << ";N=" << N << ";s_R=" << s_r
     << ";s_G=" << s_g << ";top_k_R=" << top_k_r << ";top_k_G=" << top_k_g << ";b_R=" << b_r
     << ";b_G=" << b_g << ";m=" << m << ";probe=" << probe_fraction << ";tau=" << tau
     << ";lambda=" << lambda << ";at_lr=" << at_lr << ";ags_min_gain=" << ags_min_gain
     << ";train_ars=" << train_ars << ";train_ags=" << train_ags << ";seed=" << seed;
  return fnv1a(os.str());
}

Splits make_splits(const corpus::KnowledgeBase& kb, double probe_fraction, std::uint64_t seed) {
  const auto docs = kb.clean_documents();
  const std::size_t n = docs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, "splits");
  for (std::size_t i = 0; i + 1 < n; ++i) std::swap(order[i], order[i + uniform_index(rng, n - i)]);
  const auto n_probe = static_cast<std::size_t>(std::llround(probe_fraction * static_cast<double>(n)));
  const std::size_t n_ars = (n - n_probe + 1) / 2;
  if (n_probe == 0 || n_ars == 0 || n - n_probe - n_ars == 0) {
    throw std::invalid_argument("splits: corpus of " + std::to_string(n) +
                                " clean documents is too small");
  }
  Splits s;
  for (std::size_t i = 0; i < n; ++i) {
    const TokenSeq& t = docs[order[i]].tokens;
    if (i < n_probe) {
      s.probe.push_back(t);
    } else if (i < n_probe + n_ars) {
      s.ars.push_back(t);
    } else {
      s.ags.push_back(t);
    }
  }
  return s;
}

// ---------------------------------------------------------------- trace

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string TrainTrace::to_csv() const {
  std::string out = "iteration,ars_objective,nll,ar,ag\n";
  for (const auto& r : rows) {
    out += std::to_string(r.iteration) + "," + fmt(r.ars_objective) + "," + fmt(r.nll) + "," +
           fmt(r.ar) + "," + fmt(r.ag) + "\n";
  }
  return out;
}

TrainTrace TrainTrace::from_csv(std::string_view text) {
  TrainTrace t;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != "iteration,ars_objective,nll,ar,ag") {
        throw std::invalid_argument("trace: unexpected header '" + line + "'");
      }
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 5) {
      throw std::invalid_argument("trace line " + std::to_string(lineno) + ": expected 5 fields");
    }
    try {
      t.rows.push_back({std::stoul(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]),
                        std::stod(f[4])});
    } catch (const std::exception&) {
      throw std::invalid_argument("trace line " + std::to_string(lineno) + ": bad number");
    }
  }
  return t;
}

// ---------------------------------------------------------------- shared pieces

std::vector<AdversarialDocument> initial_documents(const corpus::GoalSpec& goal,
                                                   const LiarConfig& config,
                                                   std::size_t vocab_size) {
  std::vector<AdversarialDocument> docs;
  for (std::size_t k = 0; k < config.N; ++k) {
    Rng rng = make_rng(config.seed, "ars-init", {k});
    docs.push_back(attack::initial_document(attack::adversarial_id(k), goal, config.s_r,
                                            config.s_g, vocab_size, rng));
  }
  return docs;
}

namespace {

struct Setup {
  Splits splits;
  retrieval::ClusterAssignment clusters;
  std::vector<std::vector<TokenSeq>> members;
  std::vector<attack::ArsObjective> cluster_objectives;
};

Setup prepare(const AttackContext& ctx, const LiarConfig& config) {
  config.validate(ctx.goal);
  Setup s;
  s.splits = make_splits(ctx.kb, config.probe_fraction, config.seed);
  if (config.N > s.splits.ars.size()) {
    throw std::invalid_argument("attack: N=" + std::to_string(config.N) + " exceeds the " +
                                std::to_string(s.splits.ars.size()) + " ARS training documents");
  }
  if (config.b_g > s.splits.ags.size()) {
    throw std::invalid_argument("attack: b_G exceeds the AGS training pool");
  }
  s.clusters = retrieval::kmeans(attack::query_embeddings(ctx.retriever, s.splits.ars), config.N,
                                 config.seed);
  s.members.resize(config.N);
  for (std::size_t i = 0; i < s.splits.ars.size(); ++i) {
    s.members[s.clusters.assignment[i]].push_back(s.splits.ars[i]);
  }
  for (const auto& m : s.members) s.cluster_objectives.emplace_back(ctx.retriever, m);
  return s;
}

std::vector<TokenSeq> ars_batch(const Setup& s, const LiarConfig& config, std::size_t t,
                                std::size_t k) {
  const auto& pool = s.members[k];
  return attack::sample_queries(pool, std::min(config.b_r, pool.size()), config.seed,
                                "liar-ars-batch", {t, k});
}

std::vector<TokenSeq> ags_batch(const Setup& s, const LiarConfig& config, std::size_t t,
                                std::size_t k) {
  return attack::sample_queries(s.splits.ags, config.b_g, config.seed, "liar-ags-batch", {t, k});
}

TraceRow measure(const AttackContext& ctx, const LiarConfig& config, const Setup& s,
                 const std::vector<AdversarialDocument>& docs, std::size_t t,
                 const std::vector<double>& nll) {
  TraceRow row;
  row.iteration = t;
  for (std::size_t k = 0; k < docs.size(); ++k) {
    row.ars_objective += s.cluster_objectives[k].value(docs[k].full());
    row.nll += nll[k];
  }
  row.ars_objective /= static_cast<double>(docs.size());
  row.nll /= static_cast<double>(docs.size());
  if (config.track_metrics) {
    const auto poisoned = corpus::inject(ctx.kb, attack::to_documents(docs));
    const retrieval::DocIndex index(poisoned, ctx.retriever, config.threads);
    row.ar = eval::eval_ar(s.splits.probe, index, config.m, ctx.retriever, config.threads).rate();
    const auto judge = eval::JudgeRule::for_goal(ctx.goal, eval::JudgeMode::kTargetMatch);
    row.ag = eval::eval_ag(docs, s.splits.probe, ctx.retriever, ctx.generator, judge,
                           eval::answer_length(ctx.goal), config.threads)
                 .rate();
  }
  return row;
}

std::uint64_t segment_hash(const TokenSeq& a, const TokenSeq& b) {
  std::uint64_t h = fnv1a({reinterpret_cast<const unsigned char*>(a.data()),
                           a.size() * sizeof(TokenId)});
  return fnv1a({reinterpret_cast<const unsigned char*>(b.data()), b.size() * sizeof(TokenId)},
               h);
}

}  // namespace

// ---------------------------------------------------------------- LIAR

AttackResult liar_train(const AttackContext& ctx, const LiarConfig& config) {
  Setup s = prepare(ctx, config);
  AttackResult out;
  out.docs = initial_documents(ctx.goal, config, ctx.retriever.query.vocab_size());
  const std::size_t n = config.N;
  const TokenSeq& target = ctx.goal.target_tokens;

  for (std::size_t t = 1; t <= config.T; ++t) {
    std::vector<std::vector<attack::FlipRecord>> ars_logs(n), ags_logs(n);
    std::vector<double> nll(n, 0.0);

    // Step 2: ARS with AGS fixed.
    parallel_for(n, config.threads, [&](std::size_t k) {
      const attack::ArsObjective objective(ctx.retriever, ars_batch(s, config, t, k));
      const std::uint64_t frozen = segment_hash(out.docs[k].ats(), out.docs[k].ags());
      attack::ArsTrainState state = attack::make_ars_state(out.docs[k], objective);
      for (std::size_t i = 0; config.train_ars && i < config.K1; ++i) {
        if (attack::hotflip_step(state, objective, ctx.retriever, config.top_k_r) == 0) break;
      }
      if (segment_hash(state.doc.ats(), state.doc.ags()) != frozen) {
        throw std::logic_error("liar: ARS step modified a frozen segment");
      }
      out.docs[k] = std::move(state.doc);
      ars_logs[k] = std::move(state.log);
    });

    // Step 3: AGS with ARS fixed.
    parallel_for(n, config.threads, [&](std::size_t k) {
      const auto batch = ags_batch(s, config, t, k);
      const std::uint64_t frozen = segment_hash(out.docs[k].ars(), out.docs[k].ats());
      attack::AgsTrainState state =
          attack::make_ags_state(out.docs[k], batch, target, ctx.ensemble);
      for (std::size_t i = 0; config.train_ags && i < config.K2; ++i) {
        if (!attack::greedy_coordinate_step(state, batch, target, ctx.ensemble,
                                            config.top_k_g, config.ags_min_gain)) {
          break;
        }
      }
      if (segment_hash(state.doc.ars(), state.doc.ats()) != frozen) {
        throw std::logic_error("liar: AGS step modified a frozen segment");
      }
      nll[k] = state.loss;
      out.docs[k] = std::move(state.doc);
      ags_logs[k] = std::move(state.log);
    });

    for (std::size_t k = 0; k < n; ++k) {
      out.ars_log.insert(out.ars_log.end(), ars_logs[k].begin(), ars_logs[k].end());
      out.ags_log.insert(out.ags_log.end(), ags_logs[k].begin(), ags_logs[k].end());
    }
    out.trace.rows.push_back(measure(ctx, config, s, out.docs, t, nll));
  }
  out.splits = std::move(s.splits);
  out.clusters = std::move(s.clusters);
  return out;
}

// ---------------------------------------------------------------- vanilla AT

ad::Tensor sample_gumbel(std::size_t rows, std::size_t cols, Rng& rng) {
  ad::Tensor g = ad::Tensor::zeros(rows, cols);
  for (double& v : g.data()) {
    double u = uniform_unit(rng);
    if (u <= 0.0) u = 1e-300;
    v = -std::log(-std::log(u));
  }
  return g;
}

ad::Tensor gumbel_softmax(const ad::Tensor& logits, const ad::Tensor& gumbel_noise, double tau) {
  ad::Tape tape;
  ad::Var y = tape.softmax(
      tape.scale(tape.add(tape.constant(logits), tape.constant(gumbel_noise)), 1.0 / tau));
  return tape.value(y);
}

namespace {

ad::Tensor rows_of(const ad::Tensor& table, const std::vector<TokenId>& ids) {
  ad::Tensor out = ad::Tensor::zeros(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto src = table.row_span(ids[i]);
    std::copy(src.begin(), src.end(), out.row_span(i).begin());
  }
  return out;
}

TokenSeq argmax_tokens(const ad::Tensor& logits, const std::vector<TokenId>& allowed) {
  TokenSeq out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row_span(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[r] = allowed[best];
  }
  return out;
}

}  // namespace

AttackResult vanilla_at_train(const AttackContext& ctx, const LiarConfig& config) {
  Setup s = prepare(ctx, config);
  AttackResult out;
  const std::size_t vocab = ctx.retriever.query.vocab_size();
  out.docs = initial_documents(ctx.goal, config, vocab);
  const std::size_t n = config.N;
  const TokenSeq& target = ctx.goal.target_tokens;
  const TokenSeq& ats = ctx.goal.ats_tokens;

  std::vector<TokenId> allowed;
  const auto mask = attack::substitution_mask(vocab);
  for (TokenId t = 0; t < vocab; ++t) {
    if (mask[t]) allowed.push_back(t);
  }
  const auto& enc = ctx.retriever.doc_encoder();
  const ad::Tensor retr_allowed = rows_of(enc.embedding, allowed);
  std::vector<ad::Tensor> gen_allowed;
  for (std::size_t m = 0; m < ctx.ensemble.size(); ++m) {
    gen_allowed.push_back(rows_of(ctx.ensemble[m].params().embedding, allowed));
  }

  struct Relaxed {
    ad::Tensor ars, ags;
    std::unique_ptr<ad::Adam> adam;
  };
  std::vector<Relaxed> relaxed(n);
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng = make_rng(config.seed, "at-init", {k});
    relaxed[k].ars = ad::Tensor::zeros(config.s_r, allowed.size());
    relaxed[k].ags = ad::Tensor::zeros(config.s_g, allowed.size());
    for (double& v : relaxed[k].ars.data()) v = 0.01 * normal(rng);
    for (double& v : relaxed[k].ags.data()) v = 0.01 * normal(rng);
    relaxed[k].adam = std::make_unique<ad::Adam>(config.at_lr);
    relaxed[k].adam->add(&relaxed[k].ars);
    relaxed[k].adam->add(&relaxed[k].ags);
  }

  const std::size_t inner = config.K1 + config.K2;
  for (std::size_t t = 1; t <= config.T; ++t) {
    std::vector<double> nll(n, 0.0);
    parallel_for(n, config.threads, [&](std::size_t k) {
      Relaxed& r = relaxed[k];
      const attack::ArsObjective objective(ctx.retriever, ars_batch(s, config, t, k));
      const auto batch = ags_batch(s, config, t, k);
      const ad::Tensor centroid = ad::Tensor::row(objective.centroid());
      for (std::size_t step = 0; step < inner; ++step) {
        Rng rng = make_rng(config.seed, "at-gumbel", {k, t, step});
        const ad::Tensor noise_r = sample_gumbel(config.s_r, allowed.size(), rng);
        const ad::Tensor noise_g = sample_gumbel(config.s_g, allowed.size(), rng);
        ad::Tape tape;
        ad::Var lr = tape.leaf(r.ars, "ars");
        ad::Var lg = tape.leaf(r.ags, "ags");
        const double inv_tau = 1.0 / config.tau;
        ad::Var pr = tape.softmax(tape.scale(tape.add(lr, tape.constant(noise_r)), inv_tau));
        ad::Var pg = tape.softmax(tape.scale(tape.add(lg, tape.constant(noise_g)), inv_tau));

        // Retrieval term through h_D on soft token rows.
        const auto evars = enc.bind(tape, false, "");
        const ad::Var er = tape.constant(retr_allowed);
        const std::vector<ad::Var> dparts = {tape.matmul(pr, er), tape.gather(evars.embedding, ats),
                                             tape.matmul(pg, er)};
        ad::Var h = tape.matmul(tape.mean(tape.concat_rows(dparts), ad::Axis::kRows),
                                evars.projection_t);
        if (enc.apply_tanh) h = tape.tanh(h);
        ad::Var sim = tape.dot(tape.constant(centroid), h);

        // Ensemble NLL on the same soft document.
        const TokenSeq hard = out.docs[k].full();
        ad::Var total;
        for (std::size_t m = 0; m < ctx.ensemble.size(); ++m) {
          const auto& lm = ctx.ensemble[m];
          const auto gvars = lm.bind(tape, false, "");
          const ad::Var eg = tape.constant(gen_allowed[m]);
          const std::vector<ad::Var> parts = {tape.matmul(pr, eg), tape.gather(gvars.embedding, ats),
                                              tape.matmul(pg, eg)};
          const ad::Var soft = tape.concat_rows(parts);
          for (const auto& q : batch) {
            TokenSeq c = hard;
            c.push_back(corpus::kSep);
            c.insert(c.end(), q.begin(), q.end());
            ad::Var l = lm.nll_on_tape_relaxed(tape, gvars, c, 0, soft, target);
            total = total.valid() ? tape.add(total, l) : l;
          }
        }
        const double w = 1.0 / static_cast<double>(ctx.ensemble.size() * batch.size());
        ad::Var loss = tape.sub(tape.scale(total, w), tape.scale(sim, config.lambda));
        const auto grads = tape.backward(loss);
        r.adam->step({&grads.at("ars"), &grads.at("ags")});
      }
      out.docs[k].set_ars(argmax_tokens(r.ars, allowed));
      out.docs[k].set_ags(argmax_tokens(r.ags, allowed));
      nll[k] = attack::ensemble_loss(out.docs[k], batch, target, ctx.ensemble);
    });
    out.trace.rows.push_back(measure(ctx, config, s, out.docs, t, nll));
  }
  out.splits = std::move(s.splits);
  out.clusters = std::move(s.clusters);
  return out;
}

// ---------------------------------------------------------------- linearity

double linearity_residual(const std::vector<std::vector<double>>& queries,
                          const std::vector<double>& a, const std::vector<double>& b,
                          double theta) {
  auto f = [&](const std::vector<double>& e) {
    double s = 0.0;
    for (const auto& q : queries) s += retrieval::similarity(q, e);
    return s / static_cast<double>(queries.size());
  };
  std::vector<double> mix(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) mix[i] = std::lerp(b[i], a[i], theta);
  return std::abs(f(mix) - std::lerp(f(b), f(a), theta));
}

LinearityReport lower_level_linearity_check(const models::Retriever& retriever,
                                            const std::vector<TokenSeq>& kb_sample,
                                            std::size_t trials, double tol, std::uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("linearity check: trials must be >= 1");
  if (kb_sample.empty()) throw std::invalid_argument("linearity check: empty sample");
  const auto queries = attack::query_embeddings(retriever, kb_sample);
  Rng rng = make_rng(seed, "linearity");
  LinearityReport rep;
  rep.trials = trials;
  rep.tol = tol;
  const std::size_t d = retriever.dim();
  for (std::size_t i = 0; i < trials; ++i) {
    std::vector<double> a(d), b(d);
    for (double& v : a) v = normal(rng);
    for (double& v : b) v = normal(rng);
    const double theta = uniform_unit(rng);
    rep.max_residual = std::max(rep.max_residual, linearity_residual(queries, a, b, theta));
  }
  rep.passed = rep.max_residual <= tol;
  return rep;
}

}  // namespace liar
