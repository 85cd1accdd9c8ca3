#include "liar/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>

namespace liar::models {

using ad::Tensor;
using ad::Var;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = scale * normal(rng);
  return Tensor::matrix(rows, cols, std::move(v));
}

Tensor transposed(const Tensor& t) {
  Tensor out = Tensor::zeros(t.cols(), t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) out(j, i) = t(i, j);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- Encoder

Encoder Encoder::random(std::size_t vocab, std::size_t dim, Rng& rng, double embed_scale) {
  Encoder e;
  e.embedding = random_matrix(vocab, dim, embed_scale, rng);
  e.projection = random_matrix(dim, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  for (std::size_t i = 0; i < dim; ++i) e.projection(i, i) += 1.0;
  return e;
}

std::vector<double> Encoder::encode(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("encode: empty token sequence");
  const std::size_t d = embedding.cols();
  std::vector<double> mean(d, 0.0);
  for (TokenId t : tokens) {
    if (t >= embedding.rows()) {
      throw std::out_of_range("encode: token id " + std::to_string(t) + " out of range");
    }
    auto row = embedding.row_span(t);
    for (std::size_t c = 0; c < d; ++c) mean[c] += row[c];
  }
  for (double& v : mean) v /= static_cast<double>(tokens.size());
  std::vector<double> out(d, 0.0);
  // Same accumulation order as the taped matmul(mean, W^T).
  for (std::size_t p = 0; p < d; ++p) {
    const double mv = mean[p];
    if (mv == 0.0) continue;
    for (std::size_t k = 0; k < d; ++k) out[k] += mv * projection(k, p);
  }
  if (apply_tanh) {
    for (double& v : out) v = std::tanh(v);
  }
  return out;
}

Encoder::Vars Encoder::bind(ad::Tape& tape, bool trainable, const std::string& prefix) const {
  Vars v;
  if (trainable) {
    v.embedding = tape.leaf(embedding, prefix + "embedding");
    v.projection_t = tape.transpose(tape.leaf(projection, prefix + "projection"));
  } else {
    v.embedding = tape.constant(embedding);
    v.projection_t = tape.constant(transposed(projection));
  }
  return v;
}

Var Encoder::encode_on_tape(ad::Tape& tape, const Vars& vars, std::span<const TokenId> tokens,
                            bool mark_tokens) const {
  if (tokens.empty()) throw std::invalid_argument("encode: empty token sequence");
  Var rows = tape.gather(vars.embedding, tokens);
  if (mark_tokens) tape.mark_token_embeddings(rows);
  Var z = tape.matmul(tape.mean(rows, ad::Axis::kRows), vars.projection_t);
  return apply_tanh ? tape.tanh(z) : z;
}

// ---------------------------------------------------------------- GeneratorLM

GeneratorParams GeneratorParams::random(std::size_t vocab, std::size_t dim, std::size_t blocks,
                                        Rng& rng) {
  if (blocks < 1) throw std::invalid_argument("generator: need at least one block");
  GeneratorParams p;
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  p.embedding = random_matrix(vocab, dim, 1.0, rng);
  for (std::size_t b = 0; b < blocks; ++b) {
    p.self_mix.push_back(random_matrix(dim, dim, s, rng));
    p.prefix_mix.push_back(random_matrix(dim, dim, s, rng));
    p.bias.push_back(Tensor::zeros(1, dim));
  }
  p.head = random_matrix(dim, vocab, s, rng);
  p.head_bias = Tensor::zeros(1, vocab);
  return p;
}

std::vector<Tensor*> GeneratorParams::all() {
  std::vector<Tensor*> out{&embedding};
  for (std::size_t b = 0; b < self_mix.size(); ++b) {
    out.push_back(&self_mix[b]);
    out.push_back(&prefix_mix[b]);
    out.push_back(&bias[b]);
  }
  out.push_back(&head);
  out.push_back(&head_bias);
  return out;
}

GeneratorLM::GeneratorLM(GeneratorParams params) : params_(std::move(params)) {
  const std::size_t v = params_.embedding.rows(), d = params_.embedding.cols();
  if (params_.self_mix.empty() || params_.self_mix.size() != params_.prefix_mix.size() ||
      params_.self_mix.size() != params_.bias.size()) {
    throw std::invalid_argument("generator: inconsistent block parameters");
  }
  if (params_.head.rows() != d || params_.head.cols() != v || params_.head_bias.cols() != v) {
    throw std::invalid_argument("generator: head shape " +
                                ad::shape_string(params_.head.shape()) +
                                " does not match embedding " +
                                ad::shape_string(params_.embedding.shape()));
  }
  self_table_.assign(v * d, 0.0);
  prefix_table_.assign(v * d, 0.0);
  const Tensor& a = params_.self_mix[0];
  const Tensor& b = params_.prefix_mix[0];
  for (std::size_t t = 0; t < v; ++t) {
    auto e = params_.embedding.row_span(t);
    double* sa = self_table_.data() + t * d;
    double* pb = prefix_table_.data() + t * d;
    for (std::size_t k = 0; k < d; ++k) {
      for (std::size_t c = 0; c < d; ++c) {
        sa[c] += e[k] * a(k, c);
        pb[c] += e[k] * b(k, c);
      }
    }
  }
}

void GeneratorLM::check_tokens(std::span<const TokenId> tokens) const {
  for (TokenId t : tokens) {
    if (t >= vocab_size()) {
      throw std::out_of_range("generator: token id " + std::to_string(t) +
                              " outside vocabulary of size " + std::to_string(vocab_size()));
    }
  }
}

std::vector<double> GeneratorLM::hidden_rows(std::span<const TokenId> seq,
                                             std::span<const std::size_t> rows) const {
  const std::size_t len = seq.size(), d = dim(), nb = n_blocks();
  std::vector<double> x(len * d);
  std::vector<double> run(d, 0.0);
  {
    const auto& bias0 = params_.bias[0];
    for (std::size_t i = 0; i < len; ++i) {
      const TokenId tok = seq[i];
      auto e = params_.embedding.row_span(tok);
      const double* sa = self_table_.data() + tok * d;
      const double* pb = prefix_table_.data() + tok * d;
      const double inv = 1.0 / static_cast<double>(i + 1);
      double* xi = x.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) {
        run[c] += pb[c];
        xi[c] = e[c] + std::tanh(sa[c] + run[c] * inv + bias0(0, c));
      }
    }
  }
  std::vector<double> out(rows.size() * d);
  if (nb == 1) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d,
                  out.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    return out;
  }
  std::vector<double> y(len * d);
  std::vector<double> z(d);
  for (std::size_t b = 1; b < nb; ++b) {
    const bool last = b + 1 == nb;
    const Tensor& a = params_.self_mix[b];
    const Tensor& pm = params_.prefix_mix[b];
    const Tensor& bias = params_.bias[b];
    std::fill(run.begin(), run.end(), 0.0);
    std::size_t next = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const double* xi = x.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) run[c] += xi[c];
      if (last) {
        if (next >= rows.size()) break;
        if (rows[next] != i) continue;
      }
      const double inv = 1.0 / static_cast<double>(i + 1);
      for (std::size_t c = 0; c < d; ++c) z[c] = bias(0, c);
      for (std::size_t k = 0; k < d; ++k) {
        const double xv = xi[k];
        const double mv = run[k] * inv;
        auto arow = a.row_span(k);
        auto brow = pm.row_span(k);
        for (std::size_t c = 0; c < d; ++c) z[c] += xv * arow[c] + mv * brow[c];
      }
      double* yi = last ? out.data() + next * d : y.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) yi[c] = xi[c] + std::tanh(z[c]);
      if (last) ++next;
    }
    if (!last) std::swap(x, y);
  }
  return out;
}

void GeneratorLM::log_softmax_row(std::span<const double> h, std::vector<double>& out) const {
  const std::size_t v = vocab_size(), d = dim();
  out.assign(params_.head_bias.data().begin(), params_.head_bias.data().end());
  for (std::size_t k = 0; k < d; ++k) {
    const double hv = h[k];
    auto hrow = params_.head.row_span(k);
    for (std::size_t c = 0; c < v; ++c) out[c] += hv * hrow[c];
  }
  const double mx = *std::max_element(out.begin(), out.end());
  double s = 0.0;
  for (double o : out) s += std::exp(o - mx);
  const double lse = mx + std::log(s);
  for (double& o : out) o -= lse;
}

double GeneratorLM::nll(std::span<const TokenId> context, std::span<const TokenId> target) const {
  if (context.empty()) throw std::invalid_argument("lm_nll: empty context");
  if (target.empty()) throw std::invalid_argument("lm_nll: empty target");
  check_tokens(context);
  check_tokens(target);
  TokenSeq seq(context.begin(), context.end());
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  std::vector<std::size_t> rows(target.size());
  for (std::size_t t = 0; t < target.size(); ++t) rows[t] = context.size() - 1 + t;
  const std::vector<double> h = hidden_rows(seq, rows);
  std::vector<double> lsm;
  double loss = 0.0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    log_softmax_row({h.data() + t * dim(), dim()}, lsm);
    loss -= lsm[target[t]];
  }
  return loss;
}

std::vector<double> GeneratorLM::next_logits(std::span<const TokenId> sequence) const {
  if (sequence.empty()) throw std::invalid_argument("generator: empty sequence");
  check_tokens(sequence);
  const std::size_t last = sequence.size() - 1;
  const std::vector<double> h = hidden_rows(sequence, {&last, 1});
  std::vector<double> out(params_.head_bias.data().begin(), params_.head_bias.data().end());
  for (std::size_t k = 0; k < dim(); ++k) {
    auto hrow = params_.head.row_span(k);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += h[k] * hrow[c];
  }
  return out;
}

Tensor GeneratorLM::all_logits(std::span<const TokenId> sequence) const {
  if (sequence.empty()) throw std::invalid_argument("generator: empty sequence");
  check_tokens(sequence);
  std::vector<std::size_t> rows(sequence.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const std::vector<double> h = hidden_rows(sequence, rows);
  const std::size_t v = vocab_size();
  Tensor out = Tensor::zeros(sequence.size(), v);
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    auto o = out.row_span(i);
    for (std::size_t c = 0; c < v; ++c) o[c] = params_.head_bias(0, c);
    for (std::size_t k = 0; k < dim(); ++k) {
      auto hrow = params_.head.row_span(k);
      const double hv = h[i * dim() + k];
      for (std::size_t c = 0; c < v; ++c) o[c] += hv * hrow[c];
    }
  }
  return out;
}

TokenSeq GeneratorLM::greedy_decode(std::span<const TokenId> context, std::size_t max_len) const {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  TokenSeq seq(context.begin(), context.end());
  TokenSeq out;
  for (std::size_t step = 0; step < max_len; ++step) {
    const std::vector<double> logits = next_logits(seq);
    TokenId best = 0;
    for (TokenId t = 1; t < logits.size(); ++t) {
      if (logits[t] > logits[best]) best = t;
    }
    out.push_back(best);
    seq.push_back(best);
    if (best == corpus::kEos) break;
  }
  return out;
}

GeneratorLM::Vars GeneratorLM::bind(ad::Tape& tape, bool trainable,
                                    const std::string& prefix) const {
  auto put = [&](const Tensor& t, const std::string& name) {
    return trainable ? tape.leaf(t, prefix + name) : tape.constant(t);
  };
  Vars v;
  v.embedding = put(params_.embedding, "embedding");
  for (std::size_t b = 0; b < n_blocks(); ++b) {
    const std::string bp = "block." + std::to_string(b) + ".";
    v.self_mix.push_back(put(params_.self_mix[b], bp + "self_mix"));
    v.prefix_mix.push_back(put(params_.prefix_mix[b], bp + "prefix_mix"));
    v.bias.push_back(put(params_.bias[b], bp + "bias"));
  }
  v.head = put(params_.head, "head");
  v.head_bias = put(params_.head_bias, "head_bias");
  return v;
}

Var GeneratorLM::forward_rows(ad::Tape& tape, const Vars& vars, Var x,
                              std::span<const std::size_t> rows) const {
  const std::size_t nb = n_blocks();
  for (std::size_t b = 0; b < nb; ++b) {
    Var m = tape.causal_mean(x);
    if (b + 1 == nb) {
      Var xs = tape.select_rows(x, rows);
      Var ms = tape.select_rows(m, rows);
      Var z = tape.add(tape.add(tape.matmul(xs, vars.self_mix[b]),
                                tape.matmul(ms, vars.prefix_mix[b])),
                       vars.bias[b]);
      return tape.add(xs, tape.tanh(z));
    }
    Var z = tape.add(
        tape.add(tape.matmul(x, vars.self_mix[b]), tape.matmul(m, vars.prefix_mix[b])),
        vars.bias[b]);
    x = tape.add(x, tape.tanh(z));
  }
  return x;
}

Var GeneratorLM::nll_on_tape(ad::Tape& tape, const Vars& vars, std::span<const TokenId> context,
                             std::span<const TokenId> target, bool mark_tokens) const {
  if (context.empty()) throw std::invalid_argument("lm_nll: empty context");
  if (target.empty()) throw std::invalid_argument("lm_nll: empty target");
  check_tokens(context);
  check_tokens(target);
  TokenSeq seq(context.begin(), context.end());
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  std::vector<std::size_t> rows(target.size());
  for (std::size_t t = 0; t < target.size(); ++t) rows[t] = context.size() - 1 + t;
  Var x0 = tape.gather(vars.embedding, seq);
  if (mark_tokens) tape.mark_token_embeddings(x0);
  Var h = forward_rows(tape, vars, x0, rows);
  Var logits = tape.add(tape.matmul(h, vars.head), vars.head_bias);
  return tape.nll(logits, target);
}

Var GeneratorLM::nll_on_tape_relaxed(ad::Tape& tape, const Vars& vars,
                                     std::span<const TokenId> context, std::size_t offset,
                                     Var relaxed, std::span<const TokenId> target) const {
  const std::size_t r = tape.value(relaxed).rows();
  if (target.empty()) throw std::invalid_argument("lm_nll: empty target");
  if (offset + r > context.size()) {
    throw std::invalid_argument("lm_nll: relaxed rows exceed the context");
  }
  check_tokens(context);
  check_tokens(target);
  TokenSeq seq(context.begin(), context.end());
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  std::vector<Var> parts;
  if (offset > 0) parts.push_back(tape.gather(vars.embedding, {seq.data(), offset}));
  parts.push_back(relaxed);
  if (offset + r < seq.size()) {
    parts.push_back(
        tape.gather(vars.embedding, {seq.data() + offset + r, seq.size() - offset - r}));
  }
  Var x0 = tape.concat_rows(parts);
  std::vector<std::size_t> rows(target.size());
  for (std::size_t t = 0; t < target.size(); ++t) rows[t] = context.size() - 1 + t;
  Var h = forward_rows(tape, vars, x0, rows);
  Var logits = tape.add(tape.matmul(h, vars.head), vars.head_bias);
  return tape.nll(logits, target);
}

// ---------------------------------------------------------------- checkpoints

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void bytes(std::string_view s) { out_.append(s); }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) pod<std::uint64_t>(d);
    pod<std::uint64_t>(t.size());
    for (double v : t.data()) pod<double>(v);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return std::string(bytes(pod<std::uint32_t>())); }
  Tensor tensor(std::string* name) {
    *name = str();
    const auto rank = pod<std::uint32_t>();
    if (rank == 0 || rank > 4) throw std::runtime_error("checkpoint: bad tensor rank");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(pod<std::uint64_t>());
    const auto count = pod<std::uint64_t>();
    need(count * sizeof(double));
    std::vector<double> data(count);
    std::memcpy(data.data(), in_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
    return Tensor(std::move(shape), std::move(data));
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

void put_encoder(std::vector<std::pair<std::string, const Tensor*>>& out,
                 const std::string& prefix, const Encoder& e) {
  out.emplace_back(prefix + "embedding", &e.embedding);
  out.emplace_back(prefix + "projection", &e.projection);
}

}  // namespace

std::string serialize_bundle(const ModelBundle& bundle) {
  std::vector<std::pair<std::string, const Tensor*>> params;
  put_encoder(params, "retriever.query.", bundle.retriever.query);
  if (!bundle.retriever.shared) put_encoder(params, "retriever.doc.", bundle.retriever.doc);
  for (std::size_t g = 0; g < bundle.generators.size(); ++g) {
    const GeneratorParams& p = bundle.generators[g].params();
    const std::string gp = "generator." + std::to_string(g) + ".";
    params.emplace_back(gp + "embedding", &p.embedding);
    for (std::size_t b = 0; b < p.self_mix.size(); ++b) {
      const std::string bp = gp + "block." + std::to_string(b) + ".";
      params.emplace_back(bp + "self_mix", &p.self_mix[b]);
      params.emplace_back(bp + "prefix_mix", &p.prefix_mix[b]);
      params.emplace_back(bp + "bias", &p.bias[b]);
    }
    params.emplace_back(gp + "head", &p.head);
    params.emplace_back(gp + "head_bias", &p.head_bias);
  }
  Writer w;
  w.bytes({kCheckpointMagic, sizeof(kCheckpointMagic)});
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint64_t>(bundle.vocab_hash);
  w.pod<std::uint64_t>(bundle.config_fingerprint);
  std::uint32_t flags = 0;
  if (bundle.retriever.shared) flags |= 1u;
  if (!bundle.retriever.query.apply_tanh) flags |= 2u;
  w.pod<std::uint32_t>(flags);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(bundle.generators.size()));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) w.tensor(name, *t);
  return w.take();
}

ModelBundle deserialize_bundle(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic header");
  }
  r.bytes(sizeof(kCheckpointMagic));
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: format version " + std::to_string(version) +
                             " unsupported (expected " + std::to_string(kCheckpointVersion) +
                             ")");
  }
  ModelBundle b;
  b.vocab_hash = r.pod<std::uint64_t>();
  b.config_fingerprint = r.pod<std::uint64_t>();
  const auto flags = r.pod<std::uint32_t>();
  const auto n_gen = r.pod<std::uint32_t>();
  const auto n_params = r.pod<std::uint32_t>();
  std::map<std::string, Tensor> params;
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name;
    Tensor t = r.tensor(&name);
    params.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  auto take = [&](const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("checkpoint: missing parameter " + name);
    return it->second;
  };
  b.retriever.shared = (flags & 1u) != 0;
  const bool tanh_on = (flags & 2u) == 0;
  b.retriever.query = Encoder{take("retriever.query.embedding"),
                              take("retriever.query.projection"), tanh_on};
  if (!b.retriever.shared) {
    b.retriever.doc = Encoder{take("retriever.doc.embedding"), take("retriever.doc.projection"),
                              tanh_on};
  }
  for (std::uint32_t g = 0; g < n_gen; ++g) {
    const std::string gp = "generator." + std::to_string(g) + ".";
    GeneratorParams p;
    p.embedding = take(gp + "embedding");
    for (std::size_t blk = 0;; ++blk) {
      const std::string bp = gp + "block." + std::to_string(blk) + ".";
      if (!params.count(bp + "self_mix")) break;
      p.self_mix.push_back(take(bp + "self_mix"));
      p.prefix_mix.push_back(take(bp + "prefix_mix"));
      p.bias.push_back(take(bp + "bias"));
    }
    p.head = take(gp + "head");
    p.head_bias = take(gp + "head_bias");
    b.generators.emplace_back(std::move(p));
  }
  return b;
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path) {
  write_file(path, serialize_bundle(bundle));
}

ModelBundle load_bundle(const std::filesystem::path& path) {
  return deserialize_bundle(read_file(path));
}

}  // namespace liar::models
