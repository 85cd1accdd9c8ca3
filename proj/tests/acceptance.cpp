// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (capped at 1 for ctest).
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "liar/corpus.hpp"
#include "liar/experiments.hpp"
#include "liar/liar.hpp"
#include "liar/retrieval.hpp"
#include "support/oracles.hpp"

using namespace liar;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

std::map<int, Verdict> verdicts;

// Monotonicity bookkeeping shared by every run in the suite.
struct MonotoneTally {
  std::size_t ars_checked = 0, ags_checked = 0, violations = 0;

  void ars(const std::vector<attack::FlipRecord>& log) {
    for (const auto& f : log) {
      ++ars_checked;
      if (!(f.after >= f.before)) ++violations;
    }
  }
  void ags(const std::vector<attack::FlipRecord>& log) {
    for (const auto& f : log) {
      ++ags_checked;
      if (!(f.after <= f.before)) ++violations;
    }
  }
  void run(const AttackResult& r) {
    ars(r.ars_log);
    ags(r.ags_log);
  }
} tally;

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

void record(int id, bool pass, std::string detail, double seconds) {
  verdicts[id] = {pass, std::move(detail), seconds};
  std::printf("# criterion %d done in %.1f s\n", id, seconds);
  std::fflush(stdout);
}

void guarded(int id, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    record(id, false, std::string("exception: ") + e.what(), 0.0);
  }
}

// ---------------------------------------------------------------- 1

void criterion_1() {
  const auto t0 = Clock::now();
  Rng rng = make_rng(101, "acceptance-graphs");
  double worst = 0.0;
  std::size_t graphs = 0, max_depth = 0;
  for (; graphs < 250; ++graphs) {
    testing::RandomGraph g(rng, 6);
    max_depth = std::max(max_depth, g.depth());
    worst = std::max(worst, g.max_fd_error(1e-5, 1e-3));
  }
  const double s = since(t0);
  record(1, worst < 1e-5 && max_depth <= 6 && s < 30.0,
         fmt("graphs=%zu max_depth=%zu max_rel_err=%.3g", graphs, max_depth, worst), s);
}

// ---------------------------------------------------------------- 2

void criterion_2() {
  const auto t0 = Clock::now();
  const std::size_t V = 32;
  const corpus::Vocabulary vocab(V);
  const auto goal = corpus::default_goal(vocab);
  const auto allowed = attack::substitution_mask(V);
  std::size_t flips = 0, mismatches = 0, skipped_checks = 0;
  for (std::size_t inst = 0; inst < 100; ++inst) {
    Rng rng = make_rng(202, "acceptance-hotflip", {inst});
    const auto retriever = testing::random_retriever(V, 4, rng, 1.0);
    std::vector<TokenSeq> queries;
    const std::size_t nq = 1 + uniform_index(rng, 5);
    for (std::size_t i = 0; i < nq; ++i) queries.push_back(testing::random_tokens(rng, 3 + uniform_index(rng, 6), V));
    const std::size_t s_r = 1 + uniform_index(rng, 6);
    auto doc = attack::initial_document("a", goal, s_r, 2, V, rng);
    const attack::ArsObjective objective(retriever, queries);
    auto state = attack::make_ars_state(doc, objective);
    for (std::size_t sweep = 1; sweep <= 3; ++sweep) {
      // Replay the sweep against the exhaustive oracle.
      TokenSeq cur = state.doc.full();
      const std::size_t log_start = state.log.size();
      attack::hotflip_step(state, objective, retriever, V);
      tally.ars(std::vector<attack::FlipRecord>(state.log.begin() + log_start, state.log.end()));
      std::size_t next = log_start;
      for (std::size_t p = 0; p < s_r; ++p) {
        const double here = testing::ref_ars_objective(retriever, queries, cur);
        double best = here;
        TokenId best_tok = cur[p];
        const TokenId orig = cur[p];
        for (TokenId t = 0; t < V; ++t) {
          if (!allowed[t] || t == orig) continue;
          cur[p] = t;
          const double v = testing::ref_ars_objective(retriever, queries, cur);
          if (v > best) {
            best = v;
            best_tok = t;
          }
        }
        cur[p] = orig;
        const bool expect = best_tok != orig;
        const bool got = next < state.log.size() && state.log[next].position == p;
        if (expect != got) {
          // A near tie between two implementations is not a mismatch.
          if (std::abs(best - here) < 1e-12) {
            ++skipped_checks;
          } else {
            ++mismatches;
          }
          if (got) cur[p] = state.log[next++].to;
          continue;
        }
        if (!got) continue;
        ++flips;
        const auto& f = state.log[next++];
        if (f.to != best_tok || std::abs(f.after - best) > 1e-12) ++mismatches;
        cur[p] = f.to;
      }
    }
  }
  const double s = since(t0);
  record(2, mismatches == 0 && flips > 0 && s < 60.0,
         fmt("instances=100 accepted_flips=%zu mismatches=%zu near_ties=%zu", flips, mismatches,
             skipped_checks),
         s);
}

// ---------------------------------------------------------------- 3

void criterion_3() {
  const auto t0 = Clock::now();
  const std::size_t V = 16;
  const auto allowed = attack::substitution_mask(V);
  std::size_t steps = 0, applied = 0, mismatches = 0, ties = 0;
  for (std::size_t inst = 0; inst < 50; ++inst) {
    Rng rng = make_rng(303, "acceptance-gcg", {inst});
    std::vector<models::GeneratorLM> lms;
    for (int k = 0; k < 2; ++k) lms.emplace_back(models::GeneratorParams::random(V, 6, 2, rng));
    const auto ensemble = attack::EnsembleSet::of(lms);
    const std::vector<const models::GeneratorLM*> members{&lms[0], &lms[1]};
    const TokenSeq target{12, 13};
    std::vector<TokenSeq> queries{testing::random_tokens(rng, 3, V), testing::random_tokens(rng, 2, V)};
    attack::AdversarialDocument doc("g", testing::random_tokens(rng, 3, V), TokenSeq{14, 15},
                                    TokenSeq(4, corpus::kInit));
    auto state = attack::make_ags_state(doc, queries, target, ensemble);
    for (int step = 0; step < 3; ++step) {
      ++steps;
      TokenSeq full = state.doc.full();
      const std::size_t off = state.doc.ags_offset();
      const double here = testing::ref_ensemble_loss(full, queries, target, members);
      double best = here;
      std::size_t best_pos = 0;
      TokenId best_tok = 0;
      bool found = false;
      for (std::size_t p = 0; p < 4; ++p) {
        const TokenId orig = full[off + p];
        for (TokenId t = 0; t < V; ++t) {
          if (!allowed[t] || t == orig) continue;
          full[off + p] = t;
          const double l = testing::ref_ensemble_loss(full, queries, target, members);
          if (l < best) {
            best = l;
            best_pos = p;
            best_tok = t;
            found = true;
          }
        }
        full[off + p] = orig;
      }
      const std::size_t log_start = state.log.size();
      const bool got = attack::greedy_coordinate_step(state, queries, target, ensemble, 64);
      tally.ags(std::vector<attack::FlipRecord>(state.log.begin() + log_start, state.log.end()));
      if (got != found) {
        ++mismatches;
        break;
      }
      if (!got) break;
      ++applied;
      const auto& f = state.log.back();
      if (f.position != best_pos || f.to != best_tok) {
        // Exact ties between positions are resolved differently by the two
        // searches; only the attained loss must agree then.
        TokenSeq chosen = full;
        chosen[off + f.position] = f.to;
        const double l = testing::ref_ensemble_loss(chosen, queries, target, members);
        if (std::abs(l - best) <= 1e-12 * std::max(1.0, std::abs(best))) {
          ++ties;
        } else {
          ++mismatches;
        }
      }
    }
  }
  const double s = since(t0);
  record(3, mismatches == 0 && applied > 0 && s < 60.0,
         fmt("instances=50 steps=%zu applied=%zu mismatches=%zu exact_ties=%zu", steps, applied,
             mismatches, ties),
         s);
}

// ---------------------------------------------------------------- 5

void criterion_5(const models::Retriever& retriever, const corpus::KnowledgeBase& kb) {
  const auto t0 = Clock::now();
  std::vector<TokenSeq> sample;
  for (const auto& d : kb.documents()) sample.push_back(d.tokens);
  const auto rep = lower_level_linearity_check(retriever, sample, 1000, 1e-9, 505);
  const double s = since(t0);
  record(5, rep.passed && rep.max_residual < 1e-9 && s < 5.0,
         fmt("trials=%zu kb=%zu max_residual=%.3g", rep.trials, sample.size(), rep.max_residual),
         s);
}

// ---------------------------------------------------------------- 6

void criterion_6() {
  const auto t0 = Clock::now();
  const std::size_t V = 32;
  std::size_t checks = 0, mismatches = 0;
  for (std::size_t n = 1; n <= 64; ++n) {
    Rng rng = make_rng(606, "acceptance-retrieve", {n});
    const auto retriever = testing::random_retriever(V, 4, rng, 1.0);
    corpus::KnowledgeBase kb;
    for (std::size_t i = 0; i < n; ++i) {
      char id[16];
      std::snprintf(id, sizeof(id), "k%03zu", i);
      // Every fourth document repeats an earlier one so ties occur.
      TokenSeq toks = (i % 4 == 3) ? kb.doc(i - 1).tokens : testing::random_tokens(rng, 2 + uniform_index(rng, 6), V);
      kb.add({id, toks, std::nullopt, std::nullopt});
    }
    const TokenSeq q = testing::random_tokens(rng, 4, V);
    const auto hq = testing::ref_encode(retriever.query, q);
    std::vector<std::pair<double, std::string>> brute;
    for (const auto& d : kb.documents()) {
      brute.emplace_back(testing::ref_dot(hq, testing::ref_encode(retriever.query, d.tokens)), d.id);
    }
    std::sort(brute.begin(), brute.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t m = 1; m <= n; ++m) {
      ++checks;
      const auto got = retrieval::retrieve(q, kb, m, retriever);
      bool ok = got.ranked.size() == m;
      for (std::size_t i = 0; ok && i < m; ++i) ok = got.ranked[i].id == brute[i].second;
      if (!ok) ++mismatches;
    }
  }
  std::size_t blobs_ok = 0;
  for (std::size_t inst = 0; inst < 20; ++inst) {
    Rng rng = make_rng(616, "acceptance-blobs", {inst});
    std::vector<std::vector<double>> pts;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 60; ++i) {
      const std::size_t lab = i % 2;
      std::vector<double> p(4);
      for (auto& v : p) v = (lab == 0 ? -5.0 : 5.0) + normal(rng);
      pts.push_back(std::move(p));
      labels.push_back(lab);
    }
    const auto cl = retrieval::kmeans(pts, 2, inst);
    bool same = true, flipped = true;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      same = same && cl.assignment[i] == labels[i];
      flipped = flipped && cl.assignment[i] == 1 - labels[i];
    }
    if (same || flipped) ++blobs_ok;
  }
  const double s = since(t0);
  record(6, mismatches == 0 && blobs_ok == 20,
         fmt("retrieve checks=%zu mismatches=%zu; kmeans recovered %zu/20", checks, mismatches,
             blobs_ok),
         s);
}

// ---------------------------------------------------------------- scenario 7..12

struct Scenario {
  corpus::Vocabulary vocab{256};
  corpus::GoalSpec goal;
  corpus::CorpusConfig cc;
  corpus::KnowledgeBase kb;
  models::TrainConfig tc;
  models::ModelBundle bundle;
  std::optional<attack::EnsembleSet> ensemble;
  LiarConfig lc;
  eval::EvalSetup setup;
  double train_seconds = 0.0;

  AttackContext ctx() const { return {kb, goal, bundle.retriever, bundle.generator(), *ensemble}; }
};

void build_scenario(Scenario& sc) {
  sc.goal = corpus::default_goal(sc.vocab);
  sc.kb = corpus::gen_corpus(sc.cc, sc.vocab, sc.goal.reserved_tokens());
  const auto t0 = Clock::now();
  auto trained = models::train_toy_models(sc.kb, sc.goal, sc.vocab, sc.tc, 1);
  sc.train_seconds = since(t0);
  sc.bundle = std::move(trained.bundle);
  sc.ensemble.emplace(attack::EnsembleSet::of(sc.bundle.generators));
  sc.setup.judge = eval::JudgeRule::for_goal(sc.goal, eval::JudgeMode::kTargetMatch);
  sc.setup.max_len = eval::answer_length(sc.goal);
  std::printf("# scenario: %zu docs, training %.1f s, self-retrieval %.3f, refusal %.3f/%.3f\n",
              sc.kb.size(), sc.train_seconds, trained.report.self_retrieval_rate,
              trained.report.refusal_rate.at(0), trained.report.refusal_rate.at(1));
}

double variance_tail(const TrainTrace& t, std::size_t n) {
  const std::size_t start = t.rows.size() > n ? t.rows.size() - n : 0;
  double mean = 0.0;
  for (std::size_t i = start; i < t.rows.size(); ++i) mean += t.rows[i].nll;
  mean /= static_cast<double>(t.rows.size() - start);
  double v = 0.0;
  for (std::size_t i = start; i < t.rows.size(); ++i) v += (t.rows[i].nll - mean) * (t.rows[i].nll - mean);
  return v / static_cast<double>(t.rows.size() - start);
}

std::size_t most_chosen_doc(const std::vector<attack::AdversarialDocument>& docs,
                            const std::vector<TokenSeq>& queries, const models::Retriever& r) {
  std::vector<std::size_t> wins(docs.size(), 0);
  for (const auto& q : queries) {
    const auto hq = r.encode_query(q);
    std::size_t best = 0;
    double best_s = -1e300;
    for (std::size_t k = 0; k < docs.size(); ++k) {
      const double s = retrieval::similarity(hq, r.encode_doc(docs[k].full()));
      if (s > best_s) {
        best_s = s;
        best = k;
      }
    }
    ++wins[best];
  }
  return static_cast<std::size_t>(std::max_element(wins.begin(), wins.end()) - wins.begin());
}

void scenario_criteria() {
  Scenario sc;
  build_scenario(sc);
  guarded(5, [&] { criterion_5(sc.bundle.retriever, sc.kb); });
  const AttackContext ctx = sc.ctx();

  // 7
  std::optional<eval::AblationRun> full;
  guarded(7, [&] {
    const auto t0 = Clock::now();
    full = eval::ablate(eval::Ablation::kFull, ctx, sc.lc, sc.setup);
    tally.run(full->attack);
    const double attack_s = since(t0);
    const double total = sc.train_seconds + attack_s;
    const auto& m = full->metrics;
    record(7, m.ar.rate() >= 0.80 && m.ag.rate() >= 0.50 && total < 600.0,
           fmt("T=%zu N=%zu held-out AR=%.3f AG=%.3f ASR=%.3f (n=%zu) train+attack=%.0f s",
               sc.lc.T, sc.lc.N, m.ar.rate(), m.ag.rate(), m.asr.rate(), m.n_queries(), total),
           total);
  });
  if (!full) return;
  const auto& fm = full->metrics;
  const auto& docs = full->attack.docs;
  const auto& probe = full->attack.splits.probe;

  // 8
  guarded(8, [&] {
    const auto t0 = Clock::now();
    const auto at = eval::ablate(eval::Ablation::kVanillaAt, ctx, sc.lc, sc.setup);
    const auto& am = at.metrics;
    const double liar_end = full->attack.trace.rows.back().nll;
    const double at_end = at.attack.trace.rows.back().nll;
    const double liar_var = variance_tail(full->attack.trace, 20);
    const double at_var = variance_tail(at.attack.trace, 20);
    const bool pass = am.ar.rate() <= 0.5 * fm.ar.rate() && am.ag.rate() <= 0.5 * fm.ag.rate() &&
                      liar_end < at_end && liar_var < at_var;
    record(8, pass,
           fmt("AT AR=%.3f AG=%.3f vs LIAR AR=%.3f AG=%.3f; terminal NLL LIAR=%.4g AT=%.4g; "
               "tail var LIAR=%.3g AT=%.3g",
               am.ar.rate(), am.ag.rate(), fm.ar.rate(), fm.ag.rate(), liar_end, at_end,
               liar_var, at_var),
           since(t0));
  });

  // 9
  guarded(9, [&] {
    const auto t0 = Clock::now();
    const auto no_ags = eval::ablate(eval::Ablation::kNoAgs, ctx, sc.lc, sc.setup);
    const auto no_ret = eval::ablate(eval::Ablation::kNoRetrieverAttack, ctx, sc.lc, sc.setup);
    tally.run(no_ags.attack);
    tally.run(no_ret.attack);
    const auto base = eval::random_doc_baseline(sc.kb, sc.goal, probe, sc.bundle.retriever, sc.lc,
                                                100, 909);
    const double ar_nr = no_ret.metrics.ar.rate();
    const bool pass = no_ags.metrics.ag.hits == 0 &&
                      std::abs(ar_nr - base.mean) <= 2.0 * base.stddev &&
                      fm.asr.rate() > no_ags.metrics.asr.rate() &&
                      fm.asr.rate() > no_ret.metrics.asr.rate();
    record(9, pass,
           fmt("no_ags AG=%.3f ASR=%.3f; no_retriever_attack AR=%.3f ASR=%.3f vs random "
               "baseline %.3f +- %.3f; full ASR=%.3f",
               no_ags.metrics.ag.rate(), no_ags.metrics.asr.rate(), ar_nr,
               no_ret.metrics.asr.rate(), base.mean, base.stddev, fm.asr.rate()),
           since(t0));
  });

  // 10
  guarded(10, [&] {
    const auto t0 = Clock::now();
    auto run = [&](const std::vector<attack::AdversarialDocument>& adv, eval::Defense d) {
      eval::DefenseSetup ds;
      ds.defense = d;
      ds.seed = 1010;
      return eval::evaluate_defended(eval::to_string(d), adv, sc.kb, probe, sc.bundle.retriever,
                                     sc.bundle.generator(), sc.setup, ds)
          .asr.rate();
    };
    const double none = run(docs, eval::Defense::kNone);
    const double para = run(docs, eval::Defense::kParaphrase);
    const double dup = run(docs, eval::Defense::kDuplicateFilter);
    const auto clones = eval::clone_documents(docs[most_chosen_doc(docs, probe, sc.bundle.retriever)],
                                              sc.lc.N);
    const double c_none = run(clones, eval::Defense::kNone);
    const double c_dup = run(clones, eval::Defense::kDuplicateFilter);
    record(10, none >= para && para >= dup && c_none - c_dup >= 0.05,
           fmt("ASR none=%.3f paraphrase=%.3f duplicate_filter=%.3f; %zu clones: ASR none=%.3f "
               "duplicate_filter=%.3f",
               none, para, dup, sc.lc.N, c_none, c_dup),
           since(t0));
  });

  // 11
  guarded(11, [&] {
    const auto t0 = Clock::now();
    std::vector<double> ars;
    for (std::size_t n : {2, 5, 10}) {
      if (n == sc.lc.N) {
        ars.push_back(fm.ar.rate());
        continue;
      }
      LiarConfig c = sc.lc;
      c.N = n;
      const auto r = eval::ablate(eval::Ablation::kFull, ctx, c, sc.setup);
      tally.run(r.attack);
      ars.push_back(r.metrics.ar.rate());
    }
    record(11, ars[0] <= ars[1] && ars[1] <= ars[2],
           fmt("AR at N=2,5,10: %.3f %.3f %.3f", ars[0], ars[1], ars[2]), since(t0));
  });

  // 12
  guarded(12, [&] {
    const auto t0 = Clock::now();
    corpus::CorpusConfig other = sc.cc;
    other.seed = sc.cc.seed + 1000;
    other.topic_seed = sc.cc.topic_seed.value_or(sc.cc.seed);
    other.id_prefix = "u";
    const auto target_kb = corpus::gen_corpus(other, sc.vocab, sc.goal.reserved_tokens());
    std::vector<TokenSeq> target_queries;
    for (const auto& d : corpus::sample_batch(target_kb, probe.size(), 1212, 0)) {
      target_queries.push_back(d.tokens);
    }
    const double src_ar = fm.ar.rate();
    const double dst_ar = eval::transfer_eval_db(docs, target_kb, target_queries, sc.lc.m,
                                                 sc.bundle.retriever)
                              .rate();
    const auto holdout = models::train_holdout_generator(sc.kb, sc.goal, sc.bundle, sc.tc, 24, 1,
                                                         1212);
    const auto hm = eval::transfer_eval_model("holdout", docs, sc.kb, probe, sc.bundle.retriever,
                                              holdout.generator(), sc.setup);
    record(12, dst_ar >= 0.7 * src_ar && hm.ag.rate() >= 0.5 * fm.ag.rate(),
           fmt("AR source=%.3f unseen corpus=%.3f; AG ensemble=%.3f held-out generator=%.3f",
               src_ar, dst_ar, fm.ag.rate(), hm.ag.rate()),
           since(t0));
  });
}

// ---------------------------------------------------------------- 13

struct PipelineOutput {
  std::string bundle, docs, trace, metrics;
};

PipelineOutput reduced_pipeline() {
  const corpus::Vocabulary vocab(64);
  const auto goal = corpus::default_goal(vocab);
  corpus::CorpusConfig cc;
  cc.n_docs = 60;
  cc.min_len = 20;
  cc.max_len = 30;
  cc.topic_vocab = 6;
  cc.common_vocab = 8;
  const auto kb = corpus::gen_corpus(cc, vocab, goal.reserved_tokens());
  models::TrainConfig tc;
  tc.retriever_epochs = 20;
  tc.generator_steps = 60;
  tc.d_g = 16;
  tc.n_compliance_tokens = 8;
  tc.compliance_min = 3;
  tc.s_r = 8;
  tc.s_g = 8;
  tc.enforce_gates = false;
  const auto trained = models::train_toy_models(kb, goal, vocab, tc, 13);
  const auto ens = attack::EnsembleSet::of(trained.bundle.generators);
  const AttackContext ctx{kb, goal, trained.bundle.retriever, trained.bundle.generator(), ens};
  LiarConfig lc;
  lc.T = 3;
  lc.N = 2;
  lc.s_r = 8;
  lc.s_g = 8;
  lc.b_r = 4;
  lc.threads = 2;
  lc.seed = 13;
  eval::EvalSetup setup;
  setup.judge = eval::JudgeRule::for_goal(goal, eval::JudgeMode::kTargetMatch);
  setup.max_len = eval::answer_length(goal);
  const auto run = eval::ablate(eval::Ablation::kFull, ctx, lc, setup);
  tally.run(run.attack);
  PipelineOutput out;
  out.bundle = models::serialize_bundle(trained.bundle);
  for (const auto& d : run.attack.docs) out.docs += vocab.detokenize(d.full()) + "\n";
  out.trace = run.attack.trace.to_csv();
  out.metrics = run.metrics.to_json();
  return out;
}

void criterion_13() {
  const auto t0 = Clock::now();
  const auto a = reduced_pipeline();
  const auto b = reduced_pipeline();
  const bool pass = a.bundle == b.bundle && a.docs == b.docs && a.trace == b.trace &&
                    a.metrics == b.metrics;
  record(13, pass,
         fmt("checkpoint %s, documents %s, trace %s, metrics %s",
             a.bundle == b.bundle ? "identical" : "DIFFER", a.docs == b.docs ? "identical" : "DIFFER",
             a.trace == b.trace ? "identical" : "DIFFER",
             a.metrics == b.metrics ? "identical" : "DIFFER"),
         since(t0));
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto want = [&](std::initializer_list<int> ids) {
    if (only.empty()) return true;
    return std::any_of(ids.begin(), ids.end(), [&](int id) { return only.count(id) > 0; });
  };

  if (want({1})) guarded(1, criterion_1);
  if (want({2})) guarded(2, criterion_2);
  if (want({3})) guarded(3, criterion_3);
  if (want({6})) guarded(6, criterion_6);
  if (want({5, 7, 8, 9, 10, 11, 12})) scenario_criteria();
  if (want({13})) guarded(13, criterion_13);
  if (want({4})) {
    record(4, tally.violations == 0 && tally.ars_checked > 0 && tally.ags_checked > 0,
           fmt("ARS flips checked=%zu AGS flips checked=%zu violations=%zu", tally.ars_checked,
               tally.ags_checked, tally.violations),
           0.0);
  }

  std::printf("\n");
  int failed = 0;
  for (const auto& [id, v] : verdicts) {
    if (!only.empty() && only.count(id) == 0) continue;
    std::printf("criterion %2d: %s  %s\n", id, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    if (!v.pass) ++failed;
  }
  std::printf("%d of %zu criteria failed\n", failed, verdicts.size());
  return failed == 0 ? 0 : 1;
}
