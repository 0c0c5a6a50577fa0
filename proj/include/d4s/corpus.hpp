#pragma once

// Synthetic fact corpus in three question formats:
//
//   DG  "<subject> <relation> -> <event phrase>"               (2-6 tokens)
//   MQ  "<subject> <relation> opt a .. b .. c .. d .. ans -> <letter>"
//   TF  "<subject> <relation> <candidate> q -> yes|no"
//
// Templates are whitespace-separated token names with a "{s}" subject slot
// and a trailing "{o}" marking where the answer continues the prompt.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "d4s/errors.hpp"
#include "d4s/model.hpp"

namespace d4s {

inline constexpr Token kBos = 0;

// Fixed synthetic token inventory. Ids are assigned in this order:
// specials, relation words r<i>.<k>, prefix fillers f<i>, entities e<i>.
class Vocabulary {
 public:
  static constexpr std::array<const char*, 10> kSpecials = {"<bos>", "yes", "no",  "a",   "b",
                                                            "c",     "d",   "opt", "ans", "q"};

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (!ids_.emplace(names_[i], static_cast<Token>(i)).second) {
        throw ConfigError("duplicate token name '" + names_[i] + "'");
      }
    }
  }

  static Vocabulary synthetic(std::size_t vocab_size, std::size_t n_relations,
                              std::size_t n_relation_variants, std::size_t n_fillers) {
    std::vector<std::string> names(kSpecials.begin(), kSpecials.end());
    for (std::size_t r = 0; r < n_relations; ++r)
      for (std::size_t k = 0; k < n_relation_variants; ++k)
        names.push_back("r" + std::to_string(r) + "." + std::to_string(k));
    for (std::size_t f = 0; f < n_fillers; ++f) names.push_back("f" + std::to_string(f));
    if (names.size() >= vocab_size) {
      throw GenerationError("vocab_size " + std::to_string(vocab_size) +
                            " leaves no room for entity tokens");
    }
    for (std::size_t e = 0; names.size() < vocab_size; ++e) names.push_back("e" + std::to_string(e));
    return Vocabulary(std::move(names));
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::string& name(Token t) const { return names_.at(t); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  Token id(const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) throw IndexError("unknown token '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return ids_.count(name) != 0; }

  // Token ids whose names start with `prefix` followed by a digit.
  std::vector<Token> tokens_with_prefix(char prefix) const {
    std::vector<Token> out;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      const auto& n = names_[i];
      if (n.size() >= 2 && n[0] == prefix && std::isdigit(static_cast<unsigned char>(n[1]))) {
        out.push_back(static_cast<Token>(i));
      }
    }
    return out;
  }
  std::vector<Token> fillers() const { return tokens_with_prefix('f'); }
  std::vector<Token> entities() const { return tokens_with_prefix('e'); }

  TokenSeq encode(const std::vector<std::string>& names) const {
    TokenSeq out;
    out.reserve(names.size());
    for (const auto& n : names) out.push_back(id(n));
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write vocabulary " + path.string());
    for (const auto& n : names_) os << n << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot read vocabulary " + path.string());
    std::vector<std::string> names;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty()) names.push_back(line);
    }
    return Vocabulary(std::move(names));
  }

  bool operator==(const Vocabulary& o) const { return names_ == o.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Token> ids_;
};

enum class FactFormat { DG, MQ, TF };

inline std::string to_string(FactFormat f) {
  switch (f) {
    case FactFormat::DG: return "DG";
    case FactFormat::MQ: return "MQ";
    case FactFormat::TF: return "TF";
  }
  return "?";
}

inline FactFormat parse_format(const std::string& s) {
  if (s == "DG") return FactFormat::DG;
  if (s == "MQ") return FactFormat::MQ;
  if (s == "TF") return FactFormat::TF;
  throw ConfigError("unknown fact format '" + s + "'");
}

using Words = std::vector<std::string>;

struct NeighborFact {
  Words subject;
  std::string relation;
  Words object;
  bool operator==(const NeighborFact&) const = default;
};

struct FactRecord {
  Words subject;
  std::string relation;
  Words old_object;
  Words new_object;
  std::vector<std::string> paraphrases;
  std::vector<NeighborFact> neighbors;
  FactFormat format = FactFormat::DG;
  bool operator==(const FactRecord&) const = default;
};

struct FormatMix {
  double dg = 1.0;
  double mq = 0.0;
  double tf = 0.0;
};

struct CorpusSpec {
  std::size_t n_facts = 50;
  std::size_t vocab_size = 256;
  std::size_t n_relations = 8;
  std::size_t n_fillers = 16;
  std::size_t n_paraphrases = 2;
  std::size_t n_neighbors = 3;
  FormatMix format_mix{};
  std::size_t min_object_len = 2;
  std::size_t max_object_len = 6;
  // Source of DG counterfactual targets: "corpus" reuses the object of another
  // subject with the same relation; "fresh" draws a phrase never seen in training.
  std::string dg_target = "corpus";
  std::uint64_t seed = 0;

  std::size_t n_relation_variants() const { return n_paraphrases + 1; }
  Vocabulary vocabulary() const {
    return Vocabulary::synthetic(vocab_size, n_relations, n_relation_variants(), n_fillers);
  }
};

// A prompt as token ids (no BOS) with the index of its last subject token.
struct RenderedPrompt {
  TokenSeq tokens;
  std::size_t subject_last = 0;
  bool operator==(const RenderedPrompt&) const = default;
};

struct Variant {
  enum class Kind { base, paraphrase, neighbor };
  Kind kind = Kind::base;
  std::size_t index = 0;

  static Variant base() { return {Kind::base, 0}; }
  static Variant paraphrase(std::size_t k) { return {Kind::paraphrase, k}; }
  static Variant neighbor(std::size_t k) { return {Kind::neighbor, k}; }
};

namespace detail {

inline std::vector<std::string> split_words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline RenderedPrompt render_template(const std::string& tmpl, const Words& subject,
                                      const Vocabulary& vocab) {
  const auto words = split_words(tmpl);
  if (words.empty() || words.back() != "{o}") {
    throw ConfigError("template must end with the {o} answer slot: '" + tmpl + "'");
  }
  RenderedPrompt out;
  bool seen_subject = false;
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (words[i] == "{o}") throw ConfigError("{o} may only appear at the end: '" + tmpl + "'");
    if (words[i] == "{s}") {
      if (seen_subject) throw ConfigError("template has two subject slots: '" + tmpl + "'");
      if (subject.empty()) throw ConfigError("empty subject");
      seen_subject = true;
      for (const auto& w : subject) out.tokens.push_back(vocab.id(w));
      out.subject_last = out.tokens.size() - 1;
    } else {
      out.tokens.push_back(vocab.id(words[i]));
    }
  }
  if (!seen_subject) throw ConfigError("template lacks the {s} subject slot: '" + tmpl + "'");
  return out;
}

}  // namespace detail

inline RenderedPrompt render_prompt(const FactRecord& fact, Variant variant,
                                    const Vocabulary& vocab) {
  switch (variant.kind) {
    case Variant::Kind::base:
      return detail::render_template(fact.relation, fact.subject, vocab);
    case Variant::Kind::paraphrase:
      if (variant.index >= fact.paraphrases.size()) {
        throw IndexError("paraphrase " + std::to_string(variant.index) + " does not exist");
      }
      return detail::render_template(fact.paraphrases[variant.index], fact.subject, vocab);
    case Variant::Kind::neighbor: {
      if (variant.index >= fact.neighbors.size()) {
        throw IndexError("neighbor " + std::to_string(variant.index) + " does not exist");
      }
      const auto& n = fact.neighbors[variant.index];
      return detail::render_template(n.relation, n.subject, vocab);
    }
  }
  throw IndexError("unknown variant");
}

// BOS + prefix + prompt + target[0..n-2], with the positions a model reads
// to score each target token.
struct Sequence {
  TokenSeq tokens;
  std::size_t subject_position = 0;
  std::vector<TargetToken> targets;
};

inline Sequence assemble(std::span<const Token> prefix, const RenderedPrompt& prompt,
                         std::span<const Token> target) {
  Sequence s;
  s.tokens.reserve(1 + prefix.size() + prompt.tokens.size() + target.size());
  s.tokens.push_back(kBos);
  s.tokens.insert(s.tokens.end(), prefix.begin(), prefix.end());
  s.subject_position = s.tokens.size() + prompt.subject_last;
  s.tokens.insert(s.tokens.end(), prompt.tokens.begin(), prompt.tokens.end());
  for (std::size_t t = 0; t < target.size(); ++t) {
    s.targets.push_back({s.tokens.size() - 1, target[t], 1.0});
    if (t + 1 < target.size()) s.tokens.push_back(target[t]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Generation

namespace detail {

struct Triple {
  Words subject;
  std::size_t relation = 0;
  Words object;
};

inline std::string relation_word(std::size_t r, std::size_t k) {
  return "r" + std::to_string(r) + "." + std::to_string(k);
}

inline std::string dg_template(std::size_t r, std::size_t k) {
  return "{s} " + relation_word(r, k) + " {o}";
}

inline std::string join(const Words& w) {
  std::string out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i) out += ' ';
    out += w[i];
  }
  return out;
}

// Splits n items over the three formats: floor of each share, then the
// remainder by largest fractional part (ties DG, MQ, TF).
inline std::array<std::size_t, 3> format_counts(const FormatMix& mix, std::size_t n) {
  const std::array<double, 3> p = {mix.dg, mix.mq, mix.tf};
  double sum = 0.0;
  for (double x : p) {
    if (x < 0.0) throw ConfigError("format proportions must be non-negative");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("format proportions must sum to 1");
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = p[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (frac[i] > frac[best] + 1e-12) best = i;
    ++counts[best];
    frac[best] = -1.0;
    ++assigned;
  }
  return counts;
}

}  // namespace detail

inline std::vector<FactRecord> generate_corpus(const CorpusSpec& spec) {
  const Vocabulary vocab = spec.vocabulary();
  const auto counts = detail::format_counts(spec.format_mix, spec.n_facts);
  if (spec.n_relations == 0) throw GenerationError("need at least one relation");
  if (spec.dg_target != "corpus" && spec.dg_target != "fresh") {
    throw ConfigError("dg_target must be 'corpus' or 'fresh', got '" + spec.dg_target + "'");
  }
  if (spec.min_object_len < 1 || spec.max_object_len > 6 ||
      spec.min_object_len > spec.max_object_len) {
    throw GenerationError("object length range must lie within 1..6");
  }

  std::mt19937_64 rng(spec.seed);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  // Entity pools: a few shared subject-initial tokens, a larger set of
  // subject-final tokens, and the rest for object phrases.
  const auto entities = vocab.entities();
  const std::size_t n_first = std::max<std::size_t>(1, entities.size() / 10);
  const std::size_t n_last = std::max<std::size_t>(1, entities.size() / 2);
  if (entities.size() < n_first + n_last + 4) {
    throw GenerationError("vocabulary too small: only " + std::to_string(entities.size()) +
                          " entity tokens");
  }
  const std::vector<Token> first_pool(entities.begin(), entities.begin() + n_first);
  const std::vector<Token> last_pool(entities.begin() + n_first,
                                     entities.begin() + n_first + n_last);
  const std::vector<Token> object_pool(entities.begin() + n_first + n_last, entities.end());
  if (spec.n_facts > n_first * n_last) {
    throw GenerationError("vocabulary supports at most " + std::to_string(n_first * n_last) +
                          " distinct subjects, " + std::to_string(spec.n_facts) + " requested");
  }

  std::set<Words> used_phrases;
  auto fresh_phrase = [&]() {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const std::size_t len =
          spec.min_object_len + pick(spec.max_object_len - spec.min_object_len + 1);
      Words w;
      for (std::size_t i = 0; i < len; ++i) w.push_back(vocab.name(object_pool[pick(object_pool.size())]));
      if (used_phrases.insert(w).second) return w;
    }
    throw GenerationError("could not draw a fresh object phrase; enlarge the vocabulary");
  };

  std::vector<detail::Triple> triples(spec.n_facts);
  const std::size_t offset = spec.n_facts == 0 ? 0 : pick(n_first);
  for (std::size_t i = 0; i < spec.n_facts; ++i) {
    auto& t = triples[i];
    t.subject = {vocab.name(first_pool[(i / n_last + offset) % n_first]),
                 vocab.name(last_pool[i % n_last])};
    t.relation = i % spec.n_relations;
    t.object = fresh_phrase();
  }
  std::shuffle(triples.begin(), triples.end(), rng);

  std::vector<FactFormat> formats;
  formats.insert(formats.end(), counts[0], FactFormat::DG);
  formats.insert(formats.end(), counts[1], FactFormat::MQ);
  formats.insert(formats.end(), counts[2], FactFormat::TF);
  std::shuffle(formats.begin(), formats.end(), rng);

  // Balanced TF labels: alternate, then shuffle.
  std::vector<bool> tf_positive;
  for (std::size_t i = 0; i < counts[2]; ++i) tf_positive.push_back(i % 2 == 0);
  std::shuffle(tf_positive.begin(), tf_positive.end(), rng);
  std::size_t tf_cursor = 0;

  std::map<std::size_t, std::vector<std::size_t>> by_relation;
  for (std::size_t i = 0; i < triples.size(); ++i) by_relation[triples[i].relation].push_back(i);

  auto other_object = [&](std::size_t self, std::vector<std::size_t>& taken) {
    if (triples.size() < 2) throw GenerationError("need at least two facts to draw distractors");
    for (;;) {
      const std::size_t j = pick(triples.size());
      if (j == self || std::find(taken.begin(), taken.end(), j) != taken.end()) continue;
      if (triples[j].object == triples[self].object) continue;
      taken.push_back(j);
      return triples[j].object;
    }
  };

  const std::array<std::string, 4> letters = {"a", "b", "c", "d"};
  std::vector<FactRecord> out;
  out.reserve(spec.n_facts);
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const auto& t = triples[i];
    FactRecord f;
    f.subject = t.subject;
    f.format = formats[i];
    std::string body;  // text between the relation word and {o}
    switch (f.format) {
      case FactFormat::DG: {
        // Counterfactual targets are objects the model already produces for
        // another subject of the same relation, so the edit has a reachable
        // target phrase.
        f.old_object = t.object;
        if (spec.dg_target == "fresh") {
          f.new_object = fresh_phrase();
          break;
        }
        std::vector<std::size_t> pool;
        for (std::size_t j : by_relation[t.relation])
          if (j != i && triples[j].object != t.object) pool.push_back(j);
        if (triples.size() < 2) {
          f.new_object = fresh_phrase();
        } else if (pool.empty()) {
          std::vector<std::size_t> taken;
          f.new_object = other_object(i, taken);
        } else {
          f.new_object = triples[pool[pick(pool.size())]].object;
        }
        break;
      }
      case FactFormat::MQ: {
        if (triples.size() < 4) throw GenerationError("MQ format needs at least four facts");
        std::vector<std::size_t> taken;
        const std::size_t correct = pick(4);
        body = " opt";
        for (std::size_t o = 0; o < 4; ++o) {
          const Words option = o == correct ? t.object : other_object(i, taken);
          body += " " + letters[o] + " " + detail::join(option);
        }
        body += " ans";
        f.old_object = {letters[correct]};
        std::size_t wrong = pick(3);
        if (wrong >= correct) ++wrong;
        f.new_object = {letters[wrong]};
        break;
      }
      case FactFormat::TF: {
        const bool positive = tf_positive[tf_cursor++];
        std::vector<std::size_t> taken;
        const Words candidate = positive ? t.object : other_object(i, taken);
        body = " " + detail::join(candidate) + " q";
        f.old_object = {positive ? "yes" : "no"};
        f.new_object = {positive ? "no" : "yes"};
        break;
      }
    }
    auto make_template = [&](std::size_t k) {
      return "{s} " + detail::relation_word(t.relation, k) + body + " {o}";
    };
    f.relation = make_template(0);
    for (std::size_t k = 1; k <= spec.n_paraphrases; ++k) f.paraphrases.push_back(make_template(k));

    const auto& peers = by_relation[t.relation];
    std::vector<std::size_t> candidates;
    for (std::size_t j : peers)
      if (j != i && triples[j].subject != t.subject) candidates.push_back(j);
    if (candidates.size() < spec.n_neighbors) {
      throw GenerationError("relation " + std::to_string(t.relation) + " has only " +
                            std::to_string(candidates.size()) + " other subjects; " +
                            std::to_string(spec.n_neighbors) + " neighbors requested");
    }
    std::shuffle(candidates.begin(), candidates.end(), rng);
    for (std::size_t k = 0; k < spec.n_neighbors; ++k) {
      const auto& nb = triples[candidates[k]];
      f.neighbors.push_back({nb.subject, detail::dg_template(nb.relation, 0), nb.object});
    }
    out.push_back(std::move(f));
  }
  return out;
}

// Fact-level validity checks shared by generation tests and the loader.
inline void validate_fact(const FactRecord& f) {
  if (f.subject.empty()) throw ConfigError("fact has an empty subject");
  if (f.new_object.empty() || f.old_object.empty()) throw ConfigError("fact has an empty object");
  if (f.new_object == f.old_object) throw ConfigError("new_object equals old_object");
  auto in = [](const Words& w, std::initializer_list<const char*> allowed) {
    if (w.size() != 1) return false;
    for (const char* a : allowed)
      if (w[0] == a) return true;
    return false;
  };
  switch (f.format) {
    case FactFormat::MQ:
      if (!in(f.new_object, {"a", "b", "c", "d"})) throw ConfigError("MQ target must be a..d");
      break;
    case FactFormat::TF:
      if (!in(f.new_object, {"yes", "no"})) throw ConfigError("TF target must be yes/no");
      break;
    case FactFormat::DG:
      if (f.new_object.size() > 6) throw ConfigError("DG target longer than 6 tokens");
      break;
  }
}

// ---------------------------------------------------------------------------
// Training data, probes and prefixes

// Pretraining sequences: every record's base and paraphrase prompts with the
// old object, plus every neighbor statement (deduplicated, first-seen order).
inline std::vector<TrainingExample> training_examples(const std::vector<FactRecord>& facts,
                                                      const Vocabulary& vocab) {
  std::vector<TrainingExample> out;
  auto add = [&](const RenderedPrompt& p, const Words& object) {
    const TokenSeq obj = vocab.encode(object);
    Sequence s = assemble({}, p, obj);
    out.push_back({std::move(s.tokens), std::move(s.targets)});
  };
  std::set<std::pair<Words, std::string>> seen;
  for (const auto& f : facts) {
    add(render_prompt(f, Variant::base(), vocab), f.old_object);
    for (std::size_t k = 0; k < f.paraphrases.size(); ++k) {
      add(render_prompt(f, Variant::paraphrase(k), vocab), f.old_object);
    }
    if (f.format == FactFormat::DG) seen.insert({f.subject, f.relation});
  }
  for (const auto& f : facts) {
    for (std::size_t k = 0; k < f.neighbors.size(); ++k) {
      const auto& n = f.neighbors[k];
      if (!seen.insert({n.subject, n.relation}).second) continue;
      add(render_prompt(f, Variant::neighbor(k), vocab), n.object);
    }
  }
  return out;
}

// Random token strings used to sample keys of unrelated knowledge.
inline std::vector<TokenSeq> irrelevant_prompts(const Vocabulary& vocab, std::size_t count,
                                                std::uint64_t seed, std::size_t min_len = 3,
                                                std::size_t max_len = 8) {
  std::vector<Token> pool = vocab.entities();
  const auto fillers = vocab.fillers();
  pool.insert(pool.end(), fillers.begin(), fillers.end());
  for (std::size_t i = Vocabulary::kSpecials.size(); i < vocab.size(); ++i) {
    if (vocab.name(static_cast<Token>(i))[0] == 'r') pool.push_back(static_cast<Token>(i));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len_dist(min_len, max_len);
  std::uniform_int_distribution<std::size_t> tok_dist(0, pool.size() - 1);
  std::vector<TokenSeq> out(count);
  for (auto& p : out) {
    p.push_back(kBos);
    const std::size_t len = len_dist(rng);
    for (std::size_t i = 0; i < len; ++i) p.push_back(pool[tok_dist(rng)]);
  }
  return out;
}

// n prefixes of filler tokens; the first one is always empty.
inline std::vector<TokenSeq> random_prefixes(const Vocabulary& vocab, std::size_t n,
                                             std::size_t length, std::uint64_t seed) {
  const auto fillers = vocab.fillers();
  std::vector<TokenSeq> out;
  if (n == 0) return out;
  out.emplace_back();
  std::mt19937_64 rng(seed);
  for (std::size_t i = 1; i < n; ++i) {
    TokenSeq p(length);
    if (!fillers.empty()) {
      std::uniform_int_distribution<std::size_t> dist(0, fillers.size() - 1);
      for (Token& t : p) t = fillers[dist(rng)];
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

inline constexpr int kCorpusSchemaVersion = 1;

inline nlohmann::json to_json(const FactRecord& f) {
  nlohmann::json j;
  j["schema_version"] = kCorpusSchemaVersion;
  j["subject"] = f.subject;
  j["relation"] = f.relation;
  j["old_object"] = f.old_object;
  j["new_object"] = f.new_object;
  j["paraphrases"] = f.paraphrases;
  auto nb = nlohmann::json::array();
  for (const auto& n : f.neighbors) {
    nb.push_back({{"subject", n.subject}, {"relation", n.relation}, {"object", n.object}});
  }
  j["neighbors"] = nb;
  j["format"] = to_string(f.format);
  return j;
}

inline FactRecord fact_from_json(const nlohmann::json& j, std::size_t line) {
  auto field = [&](const nlohmann::json& obj, const char* name) -> const nlohmann::json& {
    if (!obj.is_object() || !obj.contains(name)) {
      throw ParseError("line " + std::to_string(line) + ": missing field '" + name + "'", line);
    }
    return obj.at(name);
  };
  try {
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kCorpusSchemaVersion) {
      throw ParseError("line " + std::to_string(line) + ": unsupported schema_version", line);
    }
    FactRecord f;
    f.subject = field(j, "subject").get<Words>();
    f.relation = field(j, "relation").get<std::string>();
    f.old_object = field(j, "old_object").get<Words>();
    f.new_object = field(j, "new_object").get<Words>();
    f.paraphrases = field(j, "paraphrases").get<std::vector<std::string>>();
    for (const auto& n : field(j, "neighbors")) {
      f.neighbors.push_back({field(n, "subject").get<Words>(),
                             field(n, "relation").get<std::string>(),
                             field(n, "object").get<Words>()});
    }
    f.format = parse_format(field(j, "format").get<std::string>());
    return f;
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError("line " + std::to_string(line) + ": " + e.what(), line);
  }
}

// Atomic: either every line parses or nothing is returned.
inline std::vector<FactRecord> load_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  std::vector<FactRecord> out;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(is, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
    out.push_back(fact_from_json(j, line_no));
  }
  return out;
}

inline void save_jsonl(const std::vector<FactRecord>& facts, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp.string() + " for writing");
    for (const auto& f : facts) os << to_json(f).dump() << '\n';
    if (!os) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace d4s
