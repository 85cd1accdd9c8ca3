#include "liar/retriever_attack.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace liar::attack {

AdversarialDocument::AdversarialDocument(std::string id, TokenSeq ars, TokenSeq ats,
                                         TokenSeq ags)
    : id_(std::move(id)), ars_(std::move(ars)), ats_(std::move(ats)), ags_(std::move(ags)) {
  if (ars_.empty() || ats_.empty() || ags_.empty()) {
    throw std::invalid_argument("adversarial document " + id_ + ": empty segment (s_R=" +
                                std::to_string(ars_.size()) + ", s_T=" +
                                std::to_string(ats_.size()) + ", s_G=" +
                                std::to_string(ags_.size()) + ")");
  }
}

AdversarialDocument AdversarialDocument::from_document(const corpus::Document& doc) {
  if (!doc.segments) {
    throw std::invalid_argument("document " + doc.id + " carries no segment lengths");
  }
  const auto& s = *doc.segments;
  if (s.s_r + s.s_t + s.s_g != doc.tokens.size()) {
    throw std::invalid_argument("document " + doc.id + ": segment lengths do not add up");
  }
  auto at = [&](std::size_t i) { return doc.tokens.begin() + static_cast<std::ptrdiff_t>(i); };
  return AdversarialDocument(doc.id, TokenSeq(at(0), at(s.s_r)),
                             TokenSeq(at(s.s_r), at(s.s_r + s.s_t)),
                             TokenSeq(at(s.s_r + s.s_t), doc.tokens.end()));
}

void AdversarialDocument::set_ars(std::size_t pos, TokenId tok) { ars_.at(pos) = tok; }
void AdversarialDocument::set_ags(std::size_t pos, TokenId tok) { ags_.at(pos) = tok; }

void AdversarialDocument::set_ars(const TokenSeq& ars) {
  if (ars.size() != ars_.size()) throw std::invalid_argument("set_ars: length change");
  ars_ = ars;
}

void AdversarialDocument::set_ags(const TokenSeq& ags) {
  if (ags.size() != ags_.size()) throw std::invalid_argument("set_ags: length change");
  ags_ = ags;
}

TokenSeq AdversarialDocument::full() const {
  TokenSeq out;
  out.reserve(size());
  out.insert(out.end(), ars_.begin(), ars_.end());
  out.insert(out.end(), ats_.begin(), ats_.end());
  out.insert(out.end(), ags_.begin(), ags_.end());
  return out;
}

corpus::Document AdversarialDocument::to_document() const {
  return {id_, full(), std::nullopt, segments()};
}

std::vector<corpus::Document> to_documents(const std::vector<AdversarialDocument>& docs) {
  std::vector<corpus::Document> out;
  for (const auto& d : docs) out.push_back(d.to_document());
  return out;
}

std::vector<bool> substitution_mask(std::size_t vocab_size) {
  std::vector<bool> ok(vocab_size, true);
  for (TokenId t = 0; t < corpus::kNumReserved && t < vocab_size; ++t) ok[t] = false;
  return ok;
}

std::vector<std::vector<double>> query_embeddings(const models::Retriever& retriever,
                                                  const std::vector<TokenSeq>& seqs) {
  std::vector<std::vector<double>> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(retriever.encode_query(s));
  return out;
}

// ---------------------------------------------------------------- objective

ArsObjective::ArsObjective(const models::Retriever& retriever,
                           const std::vector<TokenSeq>& pseudo_queries)
    : retriever_(&retriever), centroid_(retriever.dim(), 0.0) {
  if (pseudo_queries.empty()) throw std::invalid_argument("ars_objective: no pseudo-queries");
  for (const auto& q : pseudo_queries) {
    const auto h = retriever.encode_query(q);
    for (std::size_t k = 0; k < h.size(); ++k) centroid_[k] += h[k];
  }
  for (double& v : centroid_) v /= static_cast<double>(pseudo_queries.size());
}

double ArsObjective::value(const TokenSeq& full) const {
  return retrieval::similarity(centroid_, retriever_->encode_doc(full));
}

ad::Tensor ArsObjective::token_gradients(const TokenSeq& full,
                                         std::span<const std::size_t> positions) const {
  ad::Tape tape;
  const auto& enc = retriever_->doc_encoder();
  const auto vars = enc.bind(tape, false, "");
  ad::Var h = enc.encode_on_tape(tape, vars, full, true);
  ad::Var loss = tape.dot(tape.constant(ad::Tensor::row(centroid_)), h);
  return tape.grad_wrt_token_embeddings(loss, positions);
}

double ars_objective(const AdversarialDocument& doc, const std::vector<TokenSeq>& pseudo_queries,
                     const models::Retriever& retriever) {
  return ArsObjective(retriever, pseudo_queries).value(doc.full());
}

// ---------------------------------------------------------------- HotFlip

namespace {

std::vector<TokenId> rank_by_gradient(const ad::Tensor& embedding, std::span<const double> g,
                                      std::size_t top_k) {
  const std::size_t v = embedding.rows();
  std::vector<double> score(v, 0.0);
  for (std::size_t t = 0; t < v; ++t) {
    auto e = embedding.row_span(t);
    double s = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) s += e[k] * g[k];
    score[t] = s;
  }
  std::vector<TokenId> ids(v);
  std::iota(ids.begin(), ids.end(), TokenId{0});
  const std::size_t k = std::min(top_k, v);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](TokenId a, TokenId b) {
                      if (score[a] != score[b]) return score[a] > score[b];
                      return a < b;
                    });
  ids.resize(k);
  return ids;
}

}  // namespace

std::vector<TokenId> hotflip_candidates(const AdversarialDocument& doc, std::size_t position,
                                        const ArsObjective& objective,
                                        const models::Retriever& retriever, std::size_t top_k) {
  if (position >= doc.ars().size()) {
    throw std::out_of_range("hotflip_candidates: position " + std::to_string(position) +
                            " outside the ARS span [0, " + std::to_string(doc.ars().size()) +
                            ")");
  }
  const ad::Tensor g = objective.token_gradients(doc.full(), {&position, 1});
  return rank_by_gradient(retriever.doc_encoder().embedding, g.row_span(0), top_k);
}

ArsTrainState make_ars_state(AdversarialDocument doc, const ArsObjective& objective) {
  ArsTrainState s;
  s.objective = objective.value(doc.full());
  s.doc = std::move(doc);
  return s;
}

std::size_t hotflip_step(ArsTrainState& state, const ArsObjective& objective,
                         const models::Retriever& retriever, std::size_t top_k) {
  const auto& table = retriever.doc_encoder().embedding;
  const auto allowed = substitution_mask(table.rows());
  const std::size_t s_r = state.doc.ars().size();
  ++state.steps;
  std::size_t accepted = 0;
  TokenSeq full = state.doc.full();
  std::vector<std::size_t> positions(s_r);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  ad::Tensor grads = objective.token_gradients(full, positions);
  for (std::size_t p = 0; p < s_r; ++p) {
    const TokenId current = full[p];
    const auto cands = rank_by_gradient(table, grads.row_span(p), top_k);
    double best = state.objective;
    TokenId best_tok = current;
    for (TokenId c : cands) {
      if (c == current || !allowed[c]) continue;
      full[p] = c;
      const double v = objective.value(full);
      if (v > best) {
        best = v;
        best_tok = c;
      }
    }
    full[p] = current;
    if (best_tok == current) continue;
    full[p] = best_tok;
    state.doc.set_ars(p, best_tok);
    state.log.push_back({state.steps, p, current, best_tok, state.objective, best});
    state.objective = best;
    ++accepted;
    grads = objective.token_gradients(full, positions);
  }
  return accepted;
}

AdversarialDocument initial_document(const std::string& id, const corpus::GoalSpec& goal,
                                     std::size_t s_r, std::size_t s_g, std::size_t vocab_size,
                                     Rng& rng) {
  if (vocab_size <= corpus::kNumReserved) throw std::invalid_argument("vocabulary too small");
  TokenSeq ars(s_r);
  for (auto& t : ars) {
    t = static_cast<TokenId>(corpus::kNumReserved +
                             uniform_index(rng, vocab_size - corpus::kNumReserved));
  }
  return AdversarialDocument(id, std::move(ars), goal.ats_tokens, TokenSeq(s_g, corpus::kInit));
}

std::string adversarial_id(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "adv%03zu", k);
  return buf;
}

ArsSetResult train_ars_set(const std::vector<TokenSeq>& pseudo_queries,
                           const corpus::GoalSpec& goal, const ArsSetConfig& config,
                           std::uint64_t seed, const models::Retriever& retriever) {
  if (config.n_docs < 1) throw std::invalid_argument("train_ars_set: N must be >= 1");
  if (config.n_docs > pseudo_queries.size()) {
    throw std::invalid_argument("train_ars_set: N=" + std::to_string(config.n_docs) +
                                " exceeds " + std::to_string(pseudo_queries.size()) +
                                " pseudo-queries");
  }
  ArsSetResult out;
  out.clusters = retrieval::kmeans(query_embeddings(retriever, pseudo_queries), config.n_docs,
                                   seed);
  const std::size_t n = config.n_docs;
  out.docs.resize(n);
  out.traces.resize(n);
  out.logs.resize(n);
  const std::size_t vocab = retriever.query.vocab_size();
  parallel_for(n, config.threads, [&](std::size_t k) {
    std::vector<TokenSeq> members;
    for (std::size_t i = 0; i < pseudo_queries.size(); ++i) {
      if (out.clusters.assignment[i] == k) members.push_back(pseudo_queries[i]);
    }
    const ArsObjective objective(retriever, members);
    Rng rng = make_rng(seed, "ars-init", {k});
    ArsTrainState state = make_ars_state(
        initial_document(adversarial_id(k), goal, config.s_r, config.s_g, vocab, rng), objective);
    out.traces[k].push_back(state.objective);
    for (std::size_t s = 0; s < config.steps; ++s) {
      const std::size_t accepted = hotflip_step(state, objective, retriever, config.top_k);
      out.traces[k].push_back(state.objective);
      if (accepted == 0) break;
    }
    out.docs[k] = std::move(state.doc);
    out.logs[k] = std::move(state.log);
  });
  return out;
}

}  // namespace liar::attack
