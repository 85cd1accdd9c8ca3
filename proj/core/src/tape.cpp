#include "liar/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace liar::ad {
namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_string(a.shape()) + " vs " +
                              shape_string(b.shape()));
}

void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected rank 2, got " +
                                shape_string(a.shape()));
  }
}

// C = A * B
Tensor matmul_nn(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor c = Tensor::zeros(n, m);
  auto cd = c.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = cd.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bd.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C += G * B^T   (G: n x m, B: k x m, C: n x k)
void accumulate_g_bt(Tensor& c, const Tensor& g, const Tensor& b) {
  const std::size_t n = g.rows(), m = g.cols(), k = b.rows();
  auto cd = c.data();
  auto gd = g.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* grow = gd.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = bd.data() + p * m;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
      cd[i * k + p] += s;
    }
  }
}

// C += A^T * G   (A: n x k, G: n x m, C: k x m)
void accumulate_at_g(Tensor& c, const Tensor& a, const Tensor& g) {
  const std::size_t n = a.rows(), k = a.cols(), m = g.cols();
  auto cd = c.data();
  auto ad = a.data();
  auto gd = g.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* grow = gd.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      double* crow = cd.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * grow[j];
    }
  }
}

void accumulate(Tensor& dst, const Tensor& src, double factor = 1.0) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * s[i];
}

Tensor row_softmax(const Tensor& x) {
  Tensor y = x;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row_span(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return y;
}

Tensor row_log_softmax(const Tensor& x) {
  Tensor y = x;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row_span(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (double& v : row) v -= lse;
  }
  return y;
}

}  // namespace

const Tensor& GradientMap::operator[](Var leaf) const {
  for (const auto& e : entries_) {
    if (e.node == leaf.id()) return e.grad;
  }
  throw std::invalid_argument("gradient map: node " + std::to_string(leaf.id()) +
                              " is not a leaf");
}

const Tensor& GradientMap::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.grad;
  }
  throw std::invalid_argument("gradient map: no leaf named '" + name + "'");
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(nodes_.size() - 1);
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id() >= nodes_.size()) {
    throw std::invalid_argument("tape: variable does not belong to this tape");
  }
  return nodes_[v.id()];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Var Tape::leaf(Tensor value, std::string name) {
  require_rank2("leaf", value);
  return push({Op::kLeaf, {}, std::move(value), {}, 0.0, std::move(name)});
}

Var Tape::constant(Tensor value) {
  require_rank2("constant", value);
  return push({Op::kConstant, {}, std::move(value), {}, 0.0, {}});
}

Var Tape::gather(Var table, std::span<const TokenId> ids) {
  const Tensor& t = value(table);
  if (ids.empty()) throw std::invalid_argument("gather: empty index list");
  const std::size_t d = t.cols();
  std::vector<double> out(ids.size() * d);
  std::vector<std::size_t> idx(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= t.rows()) {
      throw std::out_of_range("gather: row " + std::to_string(ids[i]) +
                              " out of range for table " +
                              shape_string(t.shape()));
    }
    idx[i] = ids[i];
    std::copy_n(t.row_span(ids[i]).begin(), d, out.begin() + i * d);
  }
  return push({Op::kGather, {table.id()}, Tensor::matrix(ids.size(), d, std::move(out)),
               std::move(idx), 0.0, {}});
}

Var Tape::select_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& t = value(a);
  if (rows.empty()) throw std::invalid_argument("select_rows: empty row list");
  const std::size_t d = t.cols();
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.rows()) {
      throw std::out_of_range("select_rows: row " + std::to_string(rows[i]) +
                              " out of range for " + shape_string(t.shape()));
    }
    std::copy_n(t.row_span(rows[i]).begin(), d, out.begin() + i * d);
  }
  return push({Op::kSelectRows, {a.id()}, Tensor::matrix(rows.size(), d, std::move(out)),
               {rows.begin(), rows.end()}, 0.0, {}});
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_rank2("matmul", x);
  require_rank2("matmul", y);
  if (x.cols() != y.rows()) shape_error("matmul", x, y);
  return push({Op::kMatmul, {a.id(), b.id()}, matmul_nn(x, y), {}, 0.0, {}});
}

Var Tape::transpose(Var a) {
  const Tensor& x = value(a);
  Tensor y = Tensor::zeros(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) y(j, i) = x(i, j);
  }
  return push({Op::kTranspose, {a.id()}, std::move(y), {}, 0.0, {}});
}

Var Tape::add(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_rank2("add", x);
  require_rank2("add", y);
  if (x.same_shape(y)) {
    Tensor z = x;
    accumulate(z, y);
    return push({Op::kAdd, {a.id(), b.id()}, std::move(z), {}, 0.0, {}});
  }
  if (y.rows() == 1 && y.cols() == x.cols()) {
    Tensor z = x;
    for (std::size_t r = 0; r < z.rows(); ++r) {
      auto row = z.row_span(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += y(0, c);
    }
    return push({Op::kAddRow, {a.id(), b.id()}, std::move(z), {}, 0.0, {}});
  }
  shape_error("add", x, y);
}

Var Tape::sub(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (!x.same_shape(y)) shape_error("sub", x, y);
  Tensor z = x;
  accumulate(z, y, -1.0);
  return push({Op::kSub, {a.id(), b.id()}, std::move(z), {}, 0.0, {}});
}

Var Tape::mul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (!x.same_shape(y)) shape_error("mul", x, y);
  Tensor z = x;
  auto zd = z.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < zd.size(); ++i) zd[i] *= yd[i];
  return push({Op::kMul, {a.id(), b.id()}, std::move(z), {}, 0.0, {}});
}

Var Tape::scale(Var a, double s) {
  Tensor z = value(a);
  for (double& v : z.data()) v *= s;
  return push({Op::kScale, {a.id()}, std::move(z), {}, s, {}});
}

Var Tape::mean(Var a, Axis axis) {
  const Tensor& x = value(a);
  require_rank2("mean", x);
  if (axis == Axis::kRows) {
    Tensor z = Tensor::zeros(1, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < x.cols(); ++c) z(0, c) += x(r, c);
    }
    for (double& v : z.data()) v /= static_cast<double>(x.rows());
    return push({Op::kMeanRows, {a.id()}, std::move(z), {}, 0.0, {}});
  }
  Tensor z = Tensor::zeros(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c);
    z(r, 0) = s / static_cast<double>(x.cols());
  }
  return push({Op::kMeanCols, {a.id()}, std::move(z), {}, 0.0, {}});
}

Var Tape::sum(Var a) {
  double s = 0.0;
  for (double v : value(a).data()) s += v;
  return push({Op::kSum, {a.id()}, Tensor::scalar(s), {}, 0.0, {}});
}

Var Tape::dot(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (!x.same_shape(y)) shape_error("dot", x, y);
  double s = 0.0;
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) s += xd[i] * yd[i];
  return push({Op::kDot, {a.id(), b.id()}, Tensor::scalar(s), {}, 0.0, {}});
}

Var Tape::tanh(Var a) {
  Tensor z = value(a);
  for (double& v : z.data()) v = std::tanh(v);
  return push({Op::kTanh, {a.id()}, std::move(z), {}, 0.0, {}});
}

Var Tape::softmax(Var a) {
  require_rank2("softmax", value(a));
  return push({Op::kSoftmax, {a.id()}, row_softmax(value(a)), {}, 0.0, {}});
}

Var Tape::log_softmax(Var a) {
  require_rank2("log_softmax", value(a));
  return push({Op::kLogSoftmax, {a.id()}, row_log_softmax(value(a)), {}, 0.0, {}});
}

Var Tape::nll(Var logits, std::span<const TokenId> targets) {
  const Tensor& x = value(logits);
  require_rank2("nll", x);
  if (targets.size() != x.rows()) {
    throw std::invalid_argument("nll: " + std::to_string(targets.size()) +
                                " targets for logits " + shape_string(x.shape()));
  }
  const Tensor lsm = row_log_softmax(x);
  double loss = 0.0;
  std::vector<std::size_t> idx(targets.size());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= x.cols()) {
      throw std::out_of_range("nll: target " + std::to_string(targets[r]) +
                              " out of range for " + std::to_string(x.cols()) +
                              " classes");
    }
    idx[r] = targets[r];
    loss -= lsm(r, targets[r]);
  }
  return push({Op::kNll, {logits.id()}, Tensor::scalar(loss), std::move(idx), 0.0, {}});
}

Var Tape::causal_mean(Var a) {
  const Tensor& x = value(a);
  require_rank2("causal_mean", x);
  Tensor z = Tensor::zeros(x.rows(), x.cols());
  std::vector<double> run(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double inv = 1.0 / static_cast<double>(r + 1);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      run[c] += x(r, c);
      z(r, c) = run[c] * inv;
    }
  }
  return push({Op::kCausalMean, {a.id()}, std::move(z), {}, 0.0, {}});
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t d = value(parts[0]).cols();
  std::vector<double> out;
  std::vector<std::size_t> inputs;
  std::size_t rows = 0;
  for (Var p : parts) {
    const Tensor& t = value(p);
    if (t.cols() != d) shape_error("concat_rows", value(parts[0]), t);
    out.insert(out.end(), t.data().begin(), t.data().end());
    rows += t.rows();
    inputs.push_back(p.id());
  }
  return push({Op::kConcatRows, std::move(inputs), Tensor::matrix(rows, d, std::move(out)),
               {}, 0.0, {}});
}

std::vector<Tensor> Tape::adjoints(Var output) const {
  const Tensor& out = value(output);
  if (out.size() != 1) {
    throw std::invalid_argument("backward: output must be scalar, got " +
                                shape_string(out.shape()));
  }
  std::vector<Tensor> adj(output.id() + 1);
  adj[output.id()] = Tensor(out.shape(), {1.0});

  auto grad_of = [&](std::size_t i) -> Tensor& {
    if (adj[i].size() == 0) {
      const Tensor& v = nodes_[i].value;
      adj[i] = Tensor(v.shape(), std::vector<double>(v.size(), 0.0));
    }
    return adj[i];
  };

  for (std::size_t i = output.id() + 1; i-- > 0;) {
    if (adj[i].size() == 0) continue;
    const Node& n = nodes_[i];
    const Tensor& g = adj[i];
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kGather:
      case Op::kSelectRows: {
        Tensor& dt = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          auto src = g.row_span(r);
          auto dst = dt.row_span(n.indices[r]);
          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
        break;
      }
      case Op::kMatmul: {
        const Tensor& a = nodes_[n.inputs[0]].value;
        const Tensor& b = nodes_[n.inputs[1]].value;
        accumulate_g_bt(grad_of(n.inputs[0]), g, b);
        accumulate_at_g(grad_of(n.inputs[1]), a, g);
        break;
      }
      case Op::kTranspose: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) da(c, r) += g(r, c);
        }
        break;
      }
      case Op::kAdd:
        accumulate(grad_of(n.inputs[0]), g);
        accumulate(grad_of(n.inputs[1]), g);
        break;
      case Op::kAddRow: {
        accumulate(grad_of(n.inputs[0]), g);
        Tensor& db = grad_of(n.inputs[1]);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) db(0, c) += g(r, c);
        }
        break;
      }
      case Op::kSub:
        accumulate(grad_of(n.inputs[0]), g);
        accumulate(grad_of(n.inputs[1]), g, -1.0);
        break;
      case Op::kMul: {
        const Tensor& a = nodes_[n.inputs[0]].value;
        const Tensor& b = nodes_[n.inputs[1]].value;
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < g.size(); ++k) da.data()[k] += g.data()[k] * b.data()[k];
        Tensor& db = grad_of(n.inputs[1]);
        for (std::size_t k = 0; k < g.size(); ++k) db.data()[k] += g.data()[k] * a.data()[k];
        break;
      }
      case Op::kScale:
        accumulate(grad_of(n.inputs[0]), g, n.scalar);
        break;
      case Op::kMeanRows: {
        Tensor& da = grad_of(n.inputs[0]);
        const double inv = 1.0 / static_cast<double>(da.rows());
        for (std::size_t r = 0; r < da.rows(); ++r) {
          for (std::size_t c = 0; c < da.cols(); ++c) da(r, c) += g(0, c) * inv;
        }
        break;
      }
      case Op::kMeanCols: {
        Tensor& da = grad_of(n.inputs[0]);
        const double inv = 1.0 / static_cast<double>(da.cols());
        for (std::size_t r = 0; r < da.rows(); ++r) {
          for (std::size_t c = 0; c < da.cols(); ++c) da(r, c) += g(r, 0) * inv;
        }
        break;
      }
      case Op::kSum: {
        Tensor& da = grad_of(n.inputs[0]);
        const double gv = g.item();
        for (double& v : da.data()) v += gv;
        break;
      }
      case Op::kDot: {
        const double gv = g.item();
        accumulate(grad_of(n.inputs[0]), nodes_[n.inputs[1]].value, gv);
        accumulate(grad_of(n.inputs[1]), nodes_[n.inputs[0]].value, gv);
        break;
      }
      case Op::kTanh: {
        Tensor& da = grad_of(n.inputs[0]);
        auto y = n.value.data();
        for (std::size_t k = 0; k < g.size(); ++k) {
          da.data()[k] += g.data()[k] * (1.0 - y[k] * y[k]);
        }
        break;
      }
      case Op::kSoftmax: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto y = n.value.row_span(r);
          auto gr = g.row_span(r);
          double s = 0.0;
          for (std::size_t c = 0; c < y.size(); ++c) s += gr[c] * y[c];
          auto dr = da.row_span(r);
          for (std::size_t c = 0; c < y.size(); ++c) dr[c] += y[c] * (gr[c] - s);
        }
        break;
      }
      case Op::kLogSoftmax: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto y = n.value.row_span(r);
          auto gr = g.row_span(r);
          double s = 0.0;
          for (double v : gr) s += v;
          auto dr = da.row_span(r);
          for (std::size_t c = 0; c < y.size(); ++c) dr[c] += gr[c] - std::exp(y[c]) * s;
        }
        break;
      }
      case Op::kNll: {
        const double gv = g.item();
        const Tensor p = row_softmax(nodes_[n.inputs[0]].value);
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < p.rows(); ++r) {
          auto pr = p.row_span(r);
          auto dr = da.row_span(r);
          for (std::size_t c = 0; c < pr.size(); ++c) dr[c] += gv * pr[c];
          dr[n.indices[r]] -= gv;
        }
        break;
      }
      case Op::kCausalMean: {
        Tensor& da = grad_of(n.inputs[0]);
        std::vector<double> run(g.cols(), 0.0);
        for (std::size_t r = g.rows(); r-- > 0;) {
          const double inv = 1.0 / static_cast<double>(r + 1);
          for (std::size_t c = 0; c < g.cols(); ++c) {
            run[c] += g(r, c) * inv;
            da(r, c) += run[c];
          }
        }
        break;
      }
      case Op::kConcatRows: {
        std::size_t offset = 0;
        for (std::size_t in : n.inputs) {
          Tensor& da = grad_of(in);
          for (std::size_t r = 0; r < da.rows(); ++r, ++offset) {
            auto src = g.row_span(offset);
            auto dst = da.row_span(r);
            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
          }
        }
        break;
      }
    }
  }
  return adj;
}

GradientMap Tape::backward(Var output) const {
  std::vector<Tensor> adj = adjoints(output);
  GradientMap out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op != Op::kLeaf) continue;
    const Tensor& v = nodes_[i].value;
    Tensor g = (i < adj.size() && adj[i].size() != 0)
                   ? std::move(adj[i])
                   : Tensor(v.shape(), std::vector<double>(v.size(), 0.0));
    out.entries_.push_back({i, nodes_[i].name, std::move(g)});
  }
  return out;
}

void Tape::mark_token_embeddings(Var gathered) {
  if (node(gathered).op != Op::kGather) {
    throw std::invalid_argument("mark_token_embeddings: node " +
                                std::to_string(gathered.id()) +
                                " is not an embedding gather");
  }
  token_sites_.push_back(gathered.id());
}

Tensor Tape::grad_wrt_token_embeddings(Var loss,
                                       std::span<const std::size_t> positions) const {
  if (token_sites_.empty()) {
    throw std::invalid_argument(
        "grad_wrt_token_embeddings: no embedding gather registered on tape");
  }
  std::size_t total = 0;
  for (std::size_t s : token_sites_) total += nodes_[s].value.rows();
  const std::size_t d = nodes_[token_sites_.front()].value.cols();
  for (std::size_t p : positions) {
    if (p >= total) {
      throw std::out_of_range("grad_wrt_token_embeddings: position " +
                              std::to_string(p) + " not backed by a gather node (" +
                              std::to_string(total) + " token rows)");
    }
  }
  if (positions.empty()) throw std::invalid_argument("grad_wrt_token_embeddings: no positions");
  std::vector<Tensor> adj = adjoints(loss);
  Tensor out = Tensor::zeros(positions.size(), d);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::size_t p = positions[i];
    for (std::size_t s : token_sites_) {
      const std::size_t rows = nodes_[s].value.rows();
      if (p < rows) {
        if (s < adj.size() && adj[s].size() != 0) {
          auto src = adj[s].row_span(p);
          std::copy(src.begin(), src.end(), out.row_span(i).begin());
        }
        break;
      }
      p -= rows;
    }
  }
  return out;
}

}  // namespace liar::ad
