#include "liar/generator_attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace liar::attack {

TokenSeq attack_context(const AdversarialDocument& doc, std::span<const TokenId> query) {
  TokenSeq out = doc.full();
  out.push_back(corpus::kSep);
  out.insert(out.end(), query.begin(), query.end());
  return out;
}

EnsembleSet::EnsembleSet(std::vector<const models::GeneratorLM*> members)
    : members_(std::move(members)) {
  if (members_.empty()) throw std::invalid_argument("ensemble: no generators");
  for (const auto* m : members_) {
    if (m->vocab_size() != members_[0]->vocab_size()) {
      throw std::invalid_argument("ensemble: vocabulary size " + std::to_string(m->vocab_size()) +
                                  " differs from " + std::to_string(members_[0]->vocab_size()));
    }
  }
}

EnsembleSet EnsembleSet::of(const std::vector<models::GeneratorLM>& models) {
  std::vector<const models::GeneratorLM*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  return EnsembleSet(std::move(ptrs));
}

namespace {

double loss_of(const TokenSeq& full, const std::vector<TokenSeq>& queries,
               const TokenSeq& target, const EnsembleSet& ensemble,
               std::vector<double>* per_model) {
  if (queries.empty()) throw std::invalid_argument("ensemble_loss: empty query batch");
  if (per_model != nullptr) per_model->assign(ensemble.size(), 0.0);
  double total = 0.0;
  TokenSeq ctx;
  for (std::size_t m = 0; m < ensemble.size(); ++m) {
    double s = 0.0;
    for (const auto& q : queries) {
      ctx.assign(full.begin(), full.end());
      ctx.push_back(corpus::kSep);
      ctx.insert(ctx.end(), q.begin(), q.end());
      s += ensemble[m].nll(ctx, target);
    }
    s /= static_cast<double>(queries.size());
    if (per_model != nullptr) (*per_model)[m] = s;
    total += s;
  }
  return total / static_cast<double>(ensemble.size());
}

}  // namespace

double ensemble_loss(const AdversarialDocument& doc, const std::vector<TokenSeq>& queries,
                     const TokenSeq& target, const EnsembleSet& ensemble,
                     std::vector<double>* per_model) {
  return loss_of(doc.full(), queries, target, ensemble, per_model);
}

std::vector<ad::Tensor> ags_token_gradients(const AdversarialDocument& doc,
                                            const std::vector<TokenSeq>& queries,
                                            const TokenSeq& target,
                                            const EnsembleSet& ensemble) {
  if (queries.empty()) throw std::invalid_argument("ags_token_gradients: empty query batch");
  const std::size_t s_g = doc.ags().size(), off = doc.ags_offset();
  std::vector<std::size_t> positions(s_g);
  std::iota(positions.begin(), positions.end(), off);
  const double w = 1.0 / static_cast<double>(ensemble.size() * queries.size());
  std::vector<ad::Tensor> out;
  for (std::size_t m = 0; m < ensemble.size(); ++m) {
    const auto& lm = ensemble[m];
    ad::Tensor acc = ad::Tensor::zeros(s_g, lm.dim());
    for (const auto& q : queries) {
      ad::Tape tape;
      const auto vars = lm.bind(tape, false, "");
      ad::Var loss = lm.nll_on_tape(tape, vars, attack_context(doc, q), target, true);
      const ad::Tensor g = tape.grad_wrt_token_embeddings(loss, positions);
      auto a = acc.data();
      auto gd = g.data();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += w * gd[i];
    }
    out.push_back(std::move(acc));
  }
  return out;
}

AgsTrainState make_ags_state(AdversarialDocument doc, const std::vector<TokenSeq>& queries,
                             const TokenSeq& target, const EnsembleSet& ensemble) {
  AgsTrainState s;
  s.loss = ensemble_loss(doc, queries, target, ensemble, &s.per_model);
  s.doc = std::move(doc);
  return s;
}

bool greedy_coordinate_step(AgsTrainState& state, const std::vector<TokenSeq>& queries,
                            const TokenSeq& target, const EnsembleSet& ensemble,
                            std::size_t top_k, double min_relative_gain) {
  ++state.steps;
  const auto grads = ags_token_gradients(state.doc, queries, target, ensemble);
  const std::size_t s_g = state.doc.ags().size(), v = ensemble.vocab_size();
  const auto allowed = substitution_mask(v);

  struct Cand {
    double score;
    std::size_t pos;
    TokenId tok;
  };
  std::vector<Cand> cands;
  cands.reserve(s_g * v);
  for (std::size_t p = 0; p < s_g; ++p) {
    const TokenId current = state.doc.ags()[p];
    std::vector<double> score(v, 0.0);
    for (std::size_t m = 0; m < ensemble.size(); ++m) {
      const auto& table = ensemble[m].params().embedding;
      auto g = grads[m].row_span(p);
      for (std::size_t t = 0; t < v; ++t) {
        auto e = table.row_span(t);
        double s = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) s += e[k] * g[k];
        score[t] -= s;
      }
    }
    for (TokenId t = 0; t < v; ++t) {
      if (t != current && allowed[t]) cands.push_back({score[t], p, t});
    }
  }
  const std::size_t k = std::min(top_k, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k), cands.end(),
                    [](const Cand& a, const Cand& b) {
                      if (a.score != b.score) return a.score > b.score;
                      if (a.pos != b.pos) return a.pos < b.pos;
                      return a.tok < b.tok;
                    });
  TokenSeq full = state.doc.full();
  const std::size_t off = state.doc.ags_offset();
  double best = state.loss;
  const double threshold = state.loss - min_relative_gain * std::abs(state.loss);
  const Cand* chosen = nullptr;
  for (std::size_t i = 0; i < k; ++i) {
    const TokenId old = full[off + cands[i].pos];
    full[off + cands[i].pos] = cands[i].tok;
    const double l = loss_of(full, queries, target, ensemble, nullptr);
    full[off + cands[i].pos] = old;
    if (l < best && l < threshold) {
      best = l;
      chosen = &cands[i];
    }
  }
  if (chosen == nullptr) return false;
  const TokenId from = state.doc.ags()[chosen->pos];
  state.doc.set_ags(chosen->pos, chosen->tok);
  const double before = state.loss;
  state.loss = ensemble_loss(state.doc, queries, target, ensemble, &state.per_model);
  state.log.push_back({state.steps, chosen->pos, from, chosen->tok, before, state.loss});
  return true;
}

std::vector<TokenSeq> sample_queries(const std::vector<TokenSeq>& pool, std::size_t b,
                                     std::uint64_t seed, std::string_view stream,
                                     std::initializer_list<std::uint64_t> words) {
  if (b < 1 || b > pool.size()) {
    throw std::invalid_argument("sample_queries: batch " + std::to_string(b) +
                                " from a pool of " + std::to_string(pool.size()));
  }
  Rng rng = make_rng(seed, stream, words);
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < b; ++i) {
    std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    out.push_back(pool[idx[i]]);
  }
  return out;
}

AgsResult train_ags(const AdversarialDocument& doc, const std::vector<TokenSeq>& query_pool,
                    const corpus::GoalSpec& goal, const EnsembleSet& ensemble,
                    const AgsConfig& config, std::uint64_t seed) {
  AdversarialDocument start = doc;
  start.set_ags(TokenSeq(doc.ags().size(), corpus::kInit));
  const auto batch = sample_queries(query_pool, std::min(config.batch, query_pool.size()), seed,
                                    "ags-batch", {fnv1a(doc.id())});
  AgsTrainState state = make_ags_state(std::move(start), batch, goal.target_tokens, ensemble);
  AgsResult out;
  out.loss_trace.push_back(state.loss);
  for (std::size_t s = 0; s < config.steps; ++s) {
    if (!greedy_coordinate_step(state, batch, goal.target_tokens, ensemble, config.top_k)) break;
    out.loss_trace.push_back(state.loss);
  }
  out.doc = std::move(state.doc);
  out.log = std::move(state.log);
  return out;
}

}  // namespace liar::attack
