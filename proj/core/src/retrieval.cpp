#include "liar/retrieval.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace liar::retrieval {

double similarity(std::span<const double> q, std::span<const double> d) {
  if (q.size() != d.size()) {
    throw std::invalid_argument("similarity: dimension mismatch " + std::to_string(q.size()) +
                                " vs " + std::to_string(d.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * d[i];
  return s;
}

namespace {

bool ranks_before(const ScoredDoc& a, const ScoredDoc& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

}  // namespace

DocIndex::DocIndex(const corpus::KnowledgeBase& kb, const models::Retriever& retriever,
                   unsigned threads)
    : dim_(retriever.dim()) {
  if (kb.empty()) throw std::invalid_argument("retrieve: empty knowledge base");
  ids_.reserve(kb.size());
  for (std::size_t i = 0; i < kb.size(); ++i) {
    ids_.push_back(kb.doc(i).id);
    injected_.push_back(kb.injected(i));
  }
  emb_.resize(kb.size() * dim_);
  parallel_for(kb.size(), threads, [&](std::size_t i) {
    const auto h = retriever.encode_doc(kb.doc(i).tokens);
    std::copy(h.begin(), h.end(), emb_.begin() + static_cast<std::ptrdiff_t>(i * dim_));
  });
}

std::vector<ScoredDoc> DocIndex::top(std::span<const double> query_embedding,
                                     std::size_t m) const {
  if (m < 1) throw std::invalid_argument("retrieve: m must be >= 1");
  std::vector<ScoredDoc> all(size());
  for (std::size_t i = 0; i < size(); ++i) {
    all[i] = {ids_[i], similarity(query_embedding, embedding(i)), i};
  }
  const std::size_t k = std::min(m, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    ranks_before);
  all.resize(k);
  return all;
}

RetrievalResult retrieve(std::span<const TokenId> query_tokens, const DocIndex& index,
                         std::size_t m, const models::Retriever& retriever) {
  RetrievalResult r;
  r.ranked = index.top(retriever.encode_query(query_tokens), m);
  return r;
}

RetrievalResult retrieve(std::span<const TokenId> query_tokens, const corpus::KnowledgeBase& kb,
                         std::size_t m, const models::Retriever& retriever) {
  if (m < 1) throw std::invalid_argument("retrieve: m must be >= 1");
  return retrieve(query_tokens, DocIndex(kb, retriever), m, retriever);
}

// ---------------------------------------------------------------- k-means

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::size_t nearest(const std::vector<double>& p, const std::vector<std::vector<double>>& cs) {
  std::size_t best = 0;
  double bd = sq_dist(p, cs[0]);
  for (std::size_t c = 1; c < cs.size(); ++c) {
    const double d = sq_dist(p, cs[c]);
    if (d < bd) {
      bd = d;
      best = c;
    }
  }
  return best;
}

}  // namespace

double kmeans_objective(const std::vector<std::vector<double>>& points,
                        const ClusterAssignment& clusters) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    s += sq_dist(points[i], clusters.centroids[clusters.assignment[i]]);
  }
  return s;
}

ClusterAssignment kmeans(const std::vector<std::vector<double>>& points, std::size_t k,
                         std::uint64_t seed, std::size_t max_iters) {
  if (k < 1) throw std::invalid_argument("kmeans: K must be >= 1");
  if (k > points.size()) {
    throw std::invalid_argument("kmeans: K=" + std::to_string(k) + " exceeds " +
                                std::to_string(points.size()) + " points");
  }
  const std::size_t n = points.size(), dim = points[0].size();
  for (const auto& p : points) {
    if (p.size() != dim) throw std::invalid_argument("kmeans: ragged point dimensions");
  }
  Rng rng = make_rng(seed, "kmeans");

  // k-means++ seeding.
  ClusterAssignment out;
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = uniform_index(rng, n);
  out.centroids.push_back(points[first]);
  while (out.centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(points[i], out.centroids.back()));
      total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double r = uniform_unit(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0 && r < acc) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      pick = uniform_index(rng, n);
    }
    out.centroids.push_back(points[pick]);
  }

  out.assignment.assign(n, k);
  for (std::size_t it = 0; it < max_iters; ++it) {
    std::vector<std::size_t> next(n);
    for (std::size_t i = 0; i < n; ++i) next[i] = nearest(points[i], out.centroids);

    // Repair empty clusters with the point farthest from its centroid.
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t a : next) ++counts[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = n;
      double fd = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[next[i]] < 2) continue;
        const double d = sq_dist(points[i], out.centroids[next[i]]);
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      if (far == n) throw std::runtime_error("kmeans: cannot repair empty cluster");
      --counts[next[far]];
      next[far] = c;
      counts[c] = 1;
      out.centroids[c] = points[far];
    }

    const bool changed = next != out.assignment;
    out.assignment = std::move(next);
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> mean(dim, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (out.assignment[i] != c) continue;
        for (std::size_t j = 0; j < dim; ++j) mean[j] += points[i][j];
      }
      for (double& v : mean) v /= static_cast<double>(counts[c]);
      out.centroids[c] = std::move(mean);
    }
    out.objective_trace.push_back(kmeans_objective(points, out));
    out.iterations = it + 1;
    if (!changed) {
      out.converged = true;
      break;
    }
  }
  return out;
}

}  // namespace liar::retrieval
