#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "liar/corpus.hpp"
#include "liar/models.hpp"

namespace liar::retrieval {

/// Raw inner product.
double similarity(std::span<const double> q, std::span<const double> d);

struct ScoredDoc {
  std::string id;
  double score = 0.0;
  std::size_t index = 0;  // position in the knowledge base
};

struct RetrievalResult {
  std::string query_id;
  std::vector<ScoredDoc> ranked;
};

/// Document embeddings of a knowledge base, computed once.
class DocIndex {
 public:
  DocIndex(const corpus::KnowledgeBase& kb, const models::Retriever& retriever,
           unsigned threads = 1);

  std::size_t size() const { return ids_.size(); }
  const std::string& id(std::size_t i) const { return ids_[i]; }
  bool injected(std::size_t i) const { return injected_[i]; }
  std::span<const double> embedding(std::size_t i) const {
    return {emb_.data() + i * dim_, dim_};
  }
  std::size_t dim() const { return dim_; }

  /// Top-m by score, ties to the smaller id.
  std::vector<ScoredDoc> top(std::span<const double> query_embedding, std::size_t m) const;

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<bool> injected_;
  std::vector<double> emb_;
};

RetrievalResult retrieve(std::span<const TokenId> query_tokens, const corpus::KnowledgeBase& kb,
                         std::size_t m, const models::Retriever& retriever);
RetrievalResult retrieve(std::span<const TokenId> query_tokens, const DocIndex& index,
                         std::size_t m, const models::Retriever& retriever);

struct ClusterAssignment {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> assignment;  // per input point
  std::vector<double> objective_trace;  // after every Lloyd iteration
  std::size_t iterations = 0;
  bool converged = false;
};

/// Lloyd iterations from a k-means++ start. An empty cluster takes the point
/// farthest from its current centroid.
ClusterAssignment kmeans(const std::vector<std::vector<double>>& points, std::size_t k,
                         std::uint64_t seed, std::size_t max_iters = 50);

double kmeans_objective(const std::vector<std::vector<double>>& points,
                        const ClusterAssignment& clusters);

}  // namespace liar::retrieval
