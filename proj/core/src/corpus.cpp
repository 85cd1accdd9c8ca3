#include "liar/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "json.hpp"
#include "liar/util.hpp"

namespace liar::corpus {

using nlohmann::json;

Vocabulary::Vocabulary(std::size_t size) : size_(size) {
  if (size < 8 + kNumReserved) {
    throw std::invalid_argument("vocabulary: size " + std::to_string(size) +
                                " is below the minimum of " +
                                std::to_string(8 + kNumReserved));
  }
}

std::string Vocabulary::token(TokenId id) const {
  if (id >= size_) {
    throw std::out_of_range("vocabulary: token id " + std::to_string(id) +
                            " outside vocabulary of size " + std::to_string(size_));
  }
  char buf[16];
  std::snprintf(buf, sizeof(buf), "t%03u", static_cast<unsigned>(id));
  return buf;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto fail = [&] {
    throw std::invalid_argument("vocabulary: unknown token '" + std::string(token) + "'");
  };
  if (token.size() < 4 || token[0] != 't') fail();
  std::uint64_t v = 0;
  for (char c : token.substr(1)) {
    if (c < '0' || c > '9') fail();
    v = v * 10 + static_cast<std::uint64_t>(c - '0');
    if (v >= size_) fail();
  }
  // Reject non-canonical spellings such as "t0003".
  if (this->token(static_cast<TokenId>(v)) != token) fail();
  return static_cast<TokenId>(v);
}

TokenSeq Vocabulary::tokenize(std::string_view text) const {
  TokenSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\n') ++j;
    if (j > i) out.push_back(id(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

std::string Vocabulary::detokenize(const TokenSeq& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = fnv1a("liar-vocab");
  for (std::size_t i = 0; i < size_; ++i) {
    h = fnv1a(token(static_cast<TokenId>(i)), h);
    h = fnv1a("\n", h);
  }
  return h;
}

void KnowledgeBase::add(Document doc, Provenance provenance) {
  if (doc.tokens.empty() || doc.tokens.size() > 512) {
    throw std::invalid_argument("knowledge base: document '" + doc.id + "' has " +
                                std::to_string(doc.tokens.size()) +
                                " tokens; expected 1..512");
  }
  if (contains(doc.id)) {
    throw std::invalid_argument("knowledge base: duplicate document id '" + doc.id + "'");
  }
  docs_.push_back(std::move(doc));
  provenance_.push_back(provenance);
}

bool KnowledgeBase::contains(const std::string& id) const {
  return std::any_of(docs_.begin(), docs_.end(),
                     [&](const Document& d) { return d.id == id; });
}

std::vector<Document> KnowledgeBase::clean_documents() const {
  std::vector<Document> out;
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    if (!injected(i)) out.push_back(docs_[i]);
  }
  return out;
}

std::vector<std::string> KnowledgeBase::injected_ids() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    if (injected(i)) out.push_back(docs_[i].id);
  }
  return out;
}

std::size_t KnowledgeBase::clean_count() const {
  return static_cast<std::size_t>(
      std::count(provenance_.begin(), provenance_.end(), Provenance::kClean));
}

void GoalSpec::validate(const Vocabulary& vocab, std::optional<std::size_t> s_t) const {
  if (target_tokens.empty()) throw std::invalid_argument("goal: target tokens are empty");
  if (ats_tokens.empty()) throw std::invalid_argument("goal: ATS tokens are empty");
  if (refusal_tokens.empty()) throw std::invalid_argument("goal: refusal tokens are empty");
  if (s_t && ats_tokens.size() != *s_t) {
    throw std::invalid_argument("goal: ATS has " + std::to_string(ats_tokens.size()) +
                                " tokens but s_T = " + std::to_string(*s_t));
  }
  for (const TokenSeq* seq : {&ats_tokens, &target_tokens, &refusal_tokens}) {
    for (TokenId t : *seq) {
      if (t >= vocab.size()) {
        throw std::out_of_range("goal: token id " + std::to_string(t) +
                                " outside vocabulary");
      }
    }
  }
}

std::vector<TokenId> GoalSpec::reserved_tokens() const {
  std::set<TokenId> s(ats_tokens.begin(), ats_tokens.end());
  s.insert(target_tokens.begin(), target_tokens.end());
  s.insert(refusal_tokens.begin(), refusal_tokens.end());
  return {s.begin(), s.end()};
}

GoalSpec default_goal(const Vocabulary& vocab) {
  const auto v = static_cast<TokenId>(vocab.size());
  if (v < 32) throw std::invalid_argument("default_goal: vocabulary needs at least 32 tokens");
  GoalSpec g;
  g.kind = GoalKind::kEnforcedInformation;
  g.ats_tokens = {v - 6, v - 5, v - 4, v - 3};
  g.target_tokens = {v - 16, v - 15, v - 14, v - 13};
  g.refusal_tokens = {v - 12, v - 11, v - 10};
  return g;
}

std::string to_string(GoalKind kind) {
  return kind == GoalKind::kHarmfulOutput ? "harmful_output" : "enforced_information";
}

GoalKind goal_kind_from_string(std::string_view name) {
  if (name == "harmful_output") return GoalKind::kHarmfulOutput;
  if (name == "enforced_information") return GoalKind::kEnforcedInformation;
  throw std::invalid_argument("goal: unknown kind '" + std::string(name) + "'");
}

GoalSpec load_goal(const std::filesystem::path& path, const Vocabulary& vocab) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("goal file " + path.string() + ": " + e.what());
  }
  GoalSpec g;
  g.kind = goal_kind_from_string(j.at("kind").get<std::string>());
  g.ats_tokens = vocab.tokenize(j.at("ats").get<std::string>());
  g.target_tokens = vocab.tokenize(j.at("target").get<std::string>());
  g.refusal_tokens = vocab.tokenize(j.at("refusal").get<std::string>());
  g.validate(vocab);
  return g;
}

void save_goal(const GoalSpec& goal, const std::filesystem::path& path,
               const Vocabulary& vocab) {
  json j = {{"kind", to_string(goal.kind)},
            {"ats", vocab.detokenize(goal.ats_tokens)},
            {"target", vocab.detokenize(goal.target_tokens)},
            {"refusal", vocab.detokenize(goal.refusal_tokens)}};
  write_file(path, j.dump(2) + "\n");
}

namespace {

struct TopicTables {
  std::vector<TokenId> common;
  std::vector<std::vector<TokenId>> topics;
};

TopicTables topic_tables(const CorpusConfig& config, const Vocabulary& vocab,
                         const std::vector<TokenId>& excluded) {
  if (config.n_topics < 1) throw std::invalid_argument("gen_corpus: n_topics must be >= 1");
  const std::unordered_set<TokenId> skip(excluded.begin(), excluded.end());
  std::vector<TokenId> allowed;
  for (TokenId t = kNumReserved; t < vocab.size(); ++t) {
    if (!skip.count(t)) allowed.push_back(t);
  }
  const std::size_t need = config.common_vocab + config.n_topics * config.topic_vocab;
  if (config.topic_vocab < 1 || need > allowed.size()) {
    throw std::invalid_argument("gen_corpus: need " + std::to_string(need) +
                                " content tokens but vocabulary offers " +
                                std::to_string(allowed.size()));
  }
  Rng rng = make_rng(config.topic_seed.value_or(config.seed), "corpus/topics");
  for (std::size_t i = allowed.size(); i > 1; --i) {
    std::swap(allowed[i - 1], allowed[uniform_index(rng, i)]);
  }
  TopicTables t;
  auto it = allowed.begin();
  t.common.assign(it, it + static_cast<std::ptrdiff_t>(config.common_vocab));
  it += static_cast<std::ptrdiff_t>(config.common_vocab);
  for (std::size_t k = 0; k < config.n_topics; ++k) {
    t.topics.emplace_back(it, it + static_cast<std::ptrdiff_t>(config.topic_vocab));
    it += static_cast<std::ptrdiff_t>(config.topic_vocab);
  }
  return t;
}

}  // namespace

std::vector<TokenId> corpus_support(const CorpusConfig& config, const Vocabulary& vocab,
                                    const std::vector<TokenId>& excluded) {
  TopicTables t = topic_tables(config, vocab, excluded);
  std::set<TokenId> s(t.common.begin(), t.common.end());
  for (const auto& topic : t.topics) s.insert(topic.begin(), topic.end());
  return {s.begin(), s.end()};
}

KnowledgeBase gen_corpus(const CorpusConfig& config, const Vocabulary& vocab,
                         const std::vector<TokenId>& excluded) {
  if (config.min_len < 1 || config.max_len > 512 || config.min_len > config.max_len) {
    throw std::invalid_argument("gen_corpus: document length range [" +
                                std::to_string(config.min_len) + "," +
                                std::to_string(config.max_len) +
                                "] must lie within [1,512]");
  }
  if (config.n_topics > config.n_docs) {
    throw std::invalid_argument("gen_corpus: n_topics (" + std::to_string(config.n_topics) +
                                ") exceeds n_docs (" + std::to_string(config.n_docs) + ")");
  }
  if (config.topic_mix < 0.0 || config.topic_mix > 1.0) {
    throw std::invalid_argument("gen_corpus: topic_mix must lie in [0,1]");
  }
  const TopicTables tables = topic_tables(config, vocab, excluded);
  const std::size_t width = std::to_string(std::max<std::size_t>(config.n_docs, 1000) - 1).size();

  Rng rng = make_rng(config.seed, "corpus/docs");
  KnowledgeBase kb;
  for (std::size_t i = 0; i < config.n_docs; ++i) {
    const std::size_t topic = i % config.n_topics;
    const std::size_t len =
        config.min_len + uniform_index(rng, config.max_len - config.min_len + 1);
    Document doc;
    std::string num = std::to_string(i);
    doc.id = config.id_prefix + std::string(width - num.size(), '0') + num;
    doc.topic = static_cast<int>(topic);
    doc.tokens.reserve(len);
    for (std::size_t p = 0; p < len; ++p) {
      const bool from_topic = config.common_vocab == 0 || uniform_unit(rng) < config.topic_mix;
      const auto& table = from_topic ? tables.topics[topic] : tables.common;
      doc.tokens.push_back(table[uniform_index(rng, table.size())]);
    }
    kb.add(std::move(doc));
  }
  return kb;
}

KnowledgeBase inject(const KnowledgeBase& kb, const std::vector<Document>& adv_docs) {
  KnowledgeBase out = kb;
  for (const Document& d : adv_docs) {
    if (out.contains(d.id)) {
      throw std::invalid_argument("inject: document id '" + d.id +
                                  "' collides with an existing document");
    }
    out.add(d, Provenance::kInjected);
  }
  return out;
}

std::vector<Document> sample_batch(const KnowledgeBase& kb, std::size_t b,
                                   std::uint64_t seed, std::uint64_t iteration) {
  std::vector<std::size_t> clean;
  for (std::size_t i = 0; i < kb.size(); ++i) {
    if (!kb.injected(i)) clean.push_back(i);
  }
  if (b < 1 || b > clean.size()) {
    throw std::invalid_argument("sample_batch: batch size " + std::to_string(b) +
                                " outside [1," + std::to_string(clean.size()) +
                                "] clean documents");
  }
  Rng rng = make_rng(seed, "corpus/batch", {iteration});
  for (std::size_t i = 0; i < b; ++i) {
    std::swap(clean[i], clean[i + uniform_index(rng, clean.size() - i)]);
  }
  std::vector<Document> out;
  out.reserve(b);
  for (std::size_t i = 0; i < b; ++i) out.push_back(kb.doc(clean[i]));
  return out;
}

KnowledgeBase load_kb(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_kb: cannot open " + path.string());
  KnowledgeBase kb;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    try {
      const json j = json::parse(line);
      if (!j.is_object()) fail("record is not an object");
      Document d;
      d.id = j.at("id").get<std::string>();
      d.tokens = vocab.tokenize(j.at("text").get<std::string>());
      if (j.contains("topic") && !j["topic"].is_null()) d.topic = j["topic"].get<int>();
      if (j.contains("segments")) {
        const json& s = j["segments"];
        d.segments = SegmentLengths{s.at("s_R").get<std::size_t>(), s.at("s_T").get<std::size_t>(),
                                    s.at("s_G").get<std::size_t>()};
        if (d.segments->s_r + d.segments->s_t + d.segments->s_g != d.tokens.size()) {
          fail("segment lengths do not add up to the token count");
        }
      }
      const bool injected = j.value("injected", false);
      kb.add(std::move(d), injected ? Provenance::kInjected : Provenance::kClean);
    } catch (const std::invalid_argument& e) {
      const std::string what = e.what();
      if (what.rfind(path.string() + ":", 0) == 0) throw;
      fail(what);
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }
  return kb;
}

void save_kb(const KnowledgeBase& kb, const std::filesystem::path& path,
             const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < kb.size(); ++i) {
    const Document& d = kb.doc(i);
    json j = {{"id", d.id}, {"text", vocab.detokenize(d.tokens)}, {"injected", kb.injected(i)}};
    if (d.topic) j["topic"] = *d.topic;
    if (d.segments) {
      j["segments"] = {{"s_R", d.segments->s_r}, {"s_T", d.segments->s_t}, {"s_G", d.segments->s_g}};
    }
    out += j.dump();
    out += '\n';
  }
  write_file(path, out);
}

bool contains_subsequence(const TokenSeq& haystack, const TokenSeq& needle) {
  if (needle.empty()) return true;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
         haystack.end();
}

}  // namespace liar::corpus
