#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "liar/tensor.hpp"
#include "liar/types.hpp"

namespace liar::ad {

class Tape;

/// Handle to a node on a Tape. Only meaningful together with its tape.
class Var {
 public:
  Var() = default;
  std::size_t id() const { return id_; }
  bool valid() const { return id_ != kInvalid; }

 private:
  friend class Tape;
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
  explicit Var(std::size_t id) : id_(id) {}
  std::size_t id_ = kInvalid;
};

enum class Axis { kRows, kCols };

/// Gradients keyed by leaf. Leaves that the output does not reach map to
/// zero tensors of the leaf's shape.
class GradientMap {
 public:
  const Tensor& operator[](Var leaf) const;
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }

  struct Entry {
    std::size_t node;
    std::string name;
    Tensor grad;
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  friend class Tape;
  std::vector<Entry> entries_;
};

/// Append-only record of primitive operations. Forward values are computed
/// eagerly when a node is added; inputs always precede the node, so a reverse
/// sweep over node indices is a valid topological order.
///
/// A tape is single-owner. Build one per forward pass.
class Tape {
 public:
  Var leaf(Tensor value, std::string name);
  Var constant(Tensor value);

  Var gather(Var table, std::span<const TokenId> ids);
  Var select_rows(Var a, std::span<const std::size_t> rows);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  /// Same-shape add, or matrix + 1 x cols row broadcast.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var mean(Var a, Axis axis);
  Var sum(Var a);
  Var dot(Var a, Var b);
  Var tanh(Var a);
  Var softmax(Var a);
  Var log_softmax(Var a);
  /// Sum over rows of -log_softmax(logits)[r, targets[r]].
  Var nll(Var logits, std::span<const TokenId> targets);
  /// Row i becomes the mean of rows 0..i.
  Var causal_mean(Var a);
  Var concat_rows(std::span<const Var> parts);

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  GradientMap backward(Var output) const;

  /// Registers a gather output whose rows are token embeddings. Positions
  /// passed to grad_wrt_token_embeddings index rows across all registered
  /// gathers in registration order.
  void mark_token_embeddings(Var gathered);
  Tensor grad_wrt_token_embeddings(Var loss,
                                   std::span<const std::size_t> positions) const;

 private:
  enum class Op {
    kLeaf,
    kConstant,
    kGather,
    kSelectRows,
    kMatmul,
    kTranspose,
    kAdd,
    kAddRow,
    kSub,
    kMul,
    kScale,
    kMeanRows,
    kMeanCols,
    kSum,
    kDot,
    kTanh,
    kSoftmax,
    kLogSoftmax,
    kNll,
    kCausalMean,
    kConcatRows,
  };

  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    Tensor value;
    std::vector<std::size_t> indices;
    double scalar = 0.0;
    std::string name;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  std::vector<Tensor> adjoints(Var output) const;

  std::vector<Node> nodes_;
  std::vector<std::size_t> token_sites_;
};

}  // namespace liar::ad
