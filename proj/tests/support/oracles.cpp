#include "oracles.hpp"

#include <algorithm>
#include <cmath>

#include "liar/corpus.hpp"

namespace liar::testing {

TokenSeq random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
  TokenSeq out(len);
  for (auto& t : out) {
    t = static_cast<TokenId>(corpus::kNumReserved + uniform_index(rng, vocab - corpus::kNumReserved));
  }
  return out;
}

models::Retriever random_retriever(std::size_t vocab, std::size_t dim, Rng& rng, double scale) {
  models::Retriever r;
  r.query = models::Encoder::random(vocab, dim, rng, scale);
  r.shared = true;
  return r;
}

std::vector<double> ref_encode(const models::Encoder& enc, const TokenSeq& tokens) {
  const std::size_t d = enc.embedding.cols();
  std::vector<double> pooled(d, 0.0), out(d, 0.0);
  for (std::size_t c = 0; c < d; ++c) {
    double s = 0.0;
    for (TokenId t : tokens) s += enc.embedding(t, c);
    pooled[c] = s / static_cast<double>(tokens.size());
  }
  for (std::size_t r = 0; r < d; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += enc.projection(r, c) * pooled[c];
    out[r] = enc.apply_tanh ? std::tanh(s) : s;
  }
  return out;
}

double ref_dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double ref_ars_objective(const models::Retriever& r, const std::vector<TokenSeq>& queries,
                         const TokenSeq& doc) {
  const auto hd = ref_encode(r.doc_encoder(), doc);
  double s = 0.0;
  for (const auto& q : queries) s += ref_dot(ref_encode(r.query_encoder(), q), hd);
  return s / static_cast<double>(queries.size());
}

double ref_ensemble_loss(const TokenSeq& doc, const std::vector<TokenSeq>& queries,
                         const TokenSeq& target,
                         const std::vector<const models::GeneratorLM*>& members) {
  double total = 0.0;
  for (const auto* lm : members) {
    for (const auto& q : queries) {
      TokenSeq ctx = doc;
      ctx.push_back(corpus::kSep);
      ctx.insert(ctx.end(), q.begin(), q.end());
      ad::Tape tape;
      const auto vars = lm->bind(tape, false, "");
      total += tape.value(lm->nll_on_tape(tape, vars, ctx, target, false)).item();
    }
  }
  return total / static_cast<double>(members.size() * queries.size());
}

// ---------------------------------------------------------------- random graphs

namespace {

enum Op {
  kMatmul, kAdd, kAddRow, kSub, kMul, kScale, kTanh, kSoftmax, kLogSoftmax, kTranspose,
  kCausalMean, kMeanRows, kMeanCols, kSelectRows, kConcat, kNumOps,
  kSum = 100, kNll, kDot,
};

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform_unit(rng); }

}  // namespace

std::size_t RandomGraph::add_leaf(Rng& rng, std::size_t rows, std::size_t cols) {
  ad::Tensor t = ad::Tensor::zeros(rows, cols);
  for (double& v : t.data()) v = uniform(rng, -1.0, 1.0);
  leaves_.push_back(std::move(t));
  return leaves_.size() - 1;
}

RandomGraph::RandomGraph(Rng& rng, std::size_t max_depth) {
  std::size_t r = 1 + uniform_index(rng, 4), c = 1 + uniform_index(rng, 4);
  if (uniform_index(rng, 2) == 0) {
    add_leaf(rng, 6, c);
    gather_ids_.resize(r);
    for (auto& id : gather_ids_) id = static_cast<TokenId>(uniform_index(rng, 6));
  } else {
    add_leaf(rng, r, c);
  }
  const std::size_t inner = uniform_index(rng, max_depth);
  for (std::size_t i = 0; i < inner; ++i) {
    Step s;
    s.op = static_cast<int>(uniform_index(rng, kNumOps));
    switch (s.op) {
      case kMatmul: {
        const std::size_t c2 = 1 + uniform_index(rng, 4);
        s.leaf = add_leaf(rng, c, c2);
        c = c2;
        break;
      }
      case kAdd:
      case kSub:
      case kMul: s.leaf = add_leaf(rng, r, c); break;
      case kAddRow: s.leaf = add_leaf(rng, 1, c); break;
      case kScale: s.scalar = uniform(rng, -2.0, 2.0); break;
      case kTranspose: std::swap(r, c); break;
      case kMeanRows: r = 1; break;
      case kMeanCols: c = 1; break;
      case kSelectRows: {
        const std::size_t k = 1 + uniform_index(rng, r + 1);
        for (std::size_t j = 0; j < k; ++j) s.rows.push_back(uniform_index(rng, r));
        r = k;
        break;
      }
      case kConcat: {
        const std::size_t k = 1 + uniform_index(rng, 3);
        s.leaf = add_leaf(rng, k, c);
        r += k;
        break;
      }
      default: break;
    }
    steps_.push_back(std::move(s));
  }
  Step fin;
  fin.op = kSum + static_cast<int>(uniform_index(rng, 3));
  if (fin.op == kNll) {
    for (std::size_t j = 0; j < r; ++j) fin.ids.push_back(static_cast<TokenId>(uniform_index(rng, c)));
  } else if (fin.op == kDot) {
    fin.leaf = add_leaf(rng, r, c);
  }
  steps_.push_back(std::move(fin));
}

ad::Var RandomGraph::build(ad::Tape& tape, const std::vector<ad::Tensor>& leaves,
                           std::vector<ad::Var>* leaf_vars) const {
  std::vector<ad::Var> v;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    v.push_back(tape.leaf(leaves[i], "L" + std::to_string(i)));
  }
  ad::Var x = gather_ids_.empty() ? v[0] : tape.gather(v[0], gather_ids_);
  for (const Step& s : steps_) {
    switch (s.op) {
      case kMatmul: x = tape.matmul(x, v[s.leaf]); break;
      case kAdd:
      case kAddRow: x = tape.add(x, v[s.leaf]); break;
      case kSub: x = tape.sub(x, v[s.leaf]); break;
      case kMul: x = tape.mul(x, v[s.leaf]); break;
      case kScale: x = tape.scale(x, s.scalar); break;
      case kTanh: x = tape.tanh(x); break;
      case kSoftmax: x = tape.softmax(x); break;
      case kLogSoftmax: x = tape.log_softmax(x); break;
      case kTranspose: x = tape.transpose(x); break;
      case kCausalMean: x = tape.causal_mean(x); break;
      case kMeanRows: x = tape.mean(x, ad::Axis::kRows); break;
      case kMeanCols: x = tape.mean(x, ad::Axis::kCols); break;
      case kSelectRows: x = tape.select_rows(x, s.rows); break;
      case kConcat: {
        const ad::Var parts[] = {x, v[s.leaf]};
        x = tape.concat_rows(parts);
        break;
      }
      case kSum: x = tape.sum(x); break;
      case kNll: x = tape.nll(x, s.ids); break;
      case kDot: x = tape.dot(x, v[s.leaf]); break;
      default: break;
    }
  }
  if (leaf_vars != nullptr) *leaf_vars = std::move(v);
  return x;
}

double RandomGraph::value(const std::vector<ad::Tensor>& leaves) const {
  ad::Tape tape;
  return tape.value(build(tape, leaves)).item();
}

double RandomGraph::max_fd_error(double step, double floor) const {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  const ad::Var out = build(tape, leaves_, &vars);
  const auto grads = tape.backward(out);
  double worst = 0.0;
  std::vector<ad::Tensor> probe = leaves_;
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    const ad::Tensor& g = grads[vars[i]];
    for (std::size_t j = 0; j < leaves_[i].size(); ++j) {
      const double x0 = leaves_[i].data()[j];
      probe[i].data()[j] = x0 + step;
      const double up = value(probe);
      probe[i].data()[j] = x0 - step;
      const double down = value(probe);
      probe[i].data()[j] = x0;
      const double fd = (up - down) / (2.0 * step);
      const double a = g.data()[j];
      const double denom = std::max({std::abs(a), std::abs(fd), floor});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  return worst;
}

}  // namespace liar::testing
