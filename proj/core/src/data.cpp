#include "ctxmt/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace ctxmt {

std::vector<std::string> split_tokens(const std::string& sentence) {
  std::vector<std::string> out;
  std::istringstream in(sentence);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
  add("<s>");
  add("</s>");
}

void Vocabulary::add(const std::string& token) {
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& sentences, size_t max_size) {
  if (max_size <= kReservedCount) {
    throw InvalidConfig("vocabulary size must exceed the reserved symbol count");
  }
  struct Entry {
    long count = 0;
    size_t first_seen = 0;
  };
  std::unordered_map<std::string, Entry> freq;
  size_t position = 0;
  for (const std::string& s : sentences) {
    for (const std::string& tok : split_tokens(s)) {
      auto [it, inserted] = freq.try_emplace(tok);
      if (inserted) it->second.first_seen = position;
      ++it->second.count;
      ++position;
    }
  }
  std::vector<std::pair<std::string, Entry>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first_seen < b.second.first_seen;
  });
  Vocabulary v;
  for (const auto& [tok, entry] : ranked) {
    if (v.tokens_.size() >= max_size) break;
    v.add(tok);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.size() < kReservedCount) throw InvalidInput("token list missing reserved symbols");
  Vocabulary v;
  for (size_t i = kReservedCount; i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(const std::string& token) const { return index_.count(token) != 0; }

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size()) throw InvalidInput("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& sentence) const {
  std::vector<int> ids;
  for (const std::string& tok : split_tokens(sentence)) ids.push_back(id_of(tok));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    if (!out.empty()) out += ' ';
    out += token_of(id);
  }
  return out;
}

std::vector<Document> load_documents(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open corpus file: " + path);
  std::vector<Document> docs;
  Document current;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      if (!current.sentences.empty()) {
        docs.push_back(std::move(current));
        current = Document{};
      }
      continue;
    }
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": expected tab-separated source and target");
    }
    current.sentences.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  if (!current.sentences.empty()) docs.push_back(std::move(current));
  return docs;
}

void save_documents(const std::vector<Document>& docs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write corpus file: " + path);
  for (size_t i = 0; i < docs.size(); ++i) {
    if (i > 0) out << '\n';
    for (const SentencePair& s : docs[i].sentences) {
      out << s.source << '\t' << s.target << '\n';
    }
  }
}

std::vector<ContrastiveExample> load_contrastive(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open contrastive file: " + path);
  std::vector<ContrastiveExample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    for (const char* field : {"src_context", "src", "correct", "contrastive", "antecedent_distance"}) {
      if (!j.contains(field)) throw SchemaError(where + ": missing field '" + field + "'");
    }
    ContrastiveExample ex;
    try {
      ex.src_context = j.at("src_context").get<std::vector<std::string>>();
      ex.src = j.at("src").get<std::string>();
      ex.correct = j.at("correct").get<std::string>();
      ex.contrastive = j.at("contrastive").get<std::vector<std::string>>();
      ex.antecedent_distance = j.at("antecedent_distance").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
    if (ex.contrastive.empty()) throw SchemaError(where + ": contrastive list must be nonempty");
    if (ex.antecedent_distance < 0) throw SchemaError(where + ": negative antecedent distance");
    if (ex.antecedent_distance > static_cast<int>(ex.src_context.size())) {
      throw SchemaError(where + ": antecedent distance exceeds context length");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void save_contrastive(const std::vector<ContrastiveExample>& examples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write contrastive file: " + path);
  for (const ContrastiveExample& ex : examples) {
    nlohmann::json j{{"src_context", ex.src_context},
                     {"src", ex.src},
                     {"correct", ex.correct},
                     {"contrastive", ex.contrastive},
                     {"antecedent_distance", ex.antecedent_distance}};
    out << j.dump() << '\n';
  }
}

namespace synth {

std::string source_noun(int gender, int index) {
  return (gender == 0 ? "masc" : "fem") + std::to_string(index);
}
std::string target_noun(int gender, int index) {
  return (gender == 0 ? "tmasc" : "tfem") + std::to_string(index);
}
std::string source_filler(int index) { return "w" + std::to_string(index); }
std::string target_filler(int index) { return "v" + std::to_string(index); }

bool is_source_noun(const std::string& token, int* gender) {
  if (token.rfind("masc", 0) == 0) {
    if (gender) *gender = 0;
    return true;
  }
  if (token.rfind("fem", 0) == 0) {
    if (gender) *gender = 1;
    return true;
  }
  return false;
}

}  // namespace synth

namespace {

struct SentenceDraft {
  std::string source;
  std::string target;
  bool is_pronoun = false;
  int noun_gender = -1;  // gender introduced by a noun sentence
};

SentenceDraft make_noun_sentence(const SyntheticSpec& spec, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len_dist(spec.min_sentence_len, spec.max_sentence_len);
  std::uniform_int_distribution<int> filler_dist(0, spec.vocab_size - 1);
  std::uniform_int_distribution<int> noun_dist(0, spec.noun_count - 1);
  std::bernoulli_distribution gender_dist(1.0 - spec.gender_balance);  // true -> gender B

  const int len = len_dist(rng);
  std::uniform_int_distribution<int> pos_dist(0, len - 1);
  const int noun_pos = pos_dist(rng);
  const int gender = gender_dist(rng) ? 1 : 0;
  const int noun_idx = noun_dist(rng);

  SentenceDraft s;
  s.noun_gender = gender;
  for (int i = 0; i < len; ++i) {
    if (i > 0) {
      s.source += ' ';
      s.target += ' ';
    }
    if (i == noun_pos) {
      s.source += synth::source_noun(gender, noun_idx);
      s.target += synth::target_noun(gender, noun_idx);
    } else {
      const int f = filler_dist(rng);
      s.source += synth::source_filler(f);
      s.target += synth::target_filler(f);
    }
  }
  return s;
}

SentenceDraft make_pronoun_sentence(const SyntheticSpec& spec, int antecedent_gender,
                                    std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len_dist(spec.min_sentence_len, spec.max_sentence_len);
  std::uniform_int_distribution<int> filler_dist(0, spec.vocab_size - 1);
  const int len = len_dist(rng);
  std::uniform_int_distribution<int> pos_dist(0, len - 1);
  const int pron_pos = pos_dist(rng);

  SentenceDraft s;
  s.is_pronoun = true;
  for (int i = 0; i < len; ++i) {
    if (i > 0) {
      s.source += ' ';
      s.target += ' ';
    }
    if (i == pron_pos) {
      s.source += synth::kAmbiguousPronoun;
      s.target += antecedent_gender == 0 ? synth::kTargetPronounA : synth::kTargetPronounB;
    } else {
      const int f = filler_dist(rng);
      s.source += synth::source_filler(f);
      s.target += synth::target_filler(f);
    }
  }
  return s;
}

std::string swap_pronoun(const std::string& target) {
  std::vector<std::string> toks = split_tokens(target);
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (toks[i] == synth::kTargetPronounA) {
      toks[i] = synth::kTargetPronounB;
    } else if (toks[i] == synth::kTargetPronounB) {
      toks[i] = synth::kTargetPronounA;
    }
    if (i > 0) out += ' ';
    out += toks[i];
  }
  return out;
}

}  // namespace

SyntheticCorpus gen_synthetic(const SyntheticSpec& spec) {
  if (spec.gender_balance <= 0.0 || spec.gender_balance >= 1.0) {
    throw InvalidConfig("gender balance must lie strictly inside (0, 1)");
  }
  if (spec.pronoun_rate < 0.0 || spec.pronoun_rate > 1.0) {
    throw InvalidConfig("pronoun rate must lie in [0, 1]");
  }
  if (spec.min_sentence_len < 1 || spec.max_sentence_len < spec.min_sentence_len) {
    throw InvalidConfig("bad sentence length range");
  }
  if (spec.min_doc_len < 2 || spec.max_doc_len < spec.min_doc_len) {
    throw InvalidConfig("bad document length range");
  }
  if (spec.documents < 1 || spec.vocab_size < 1 || spec.noun_count < 1) {
    throw InvalidConfig("documents, vocab size and noun count must be positive");
  }

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> doc_len_dist(spec.min_doc_len, spec.max_doc_len);
  std::bernoulli_distribution pronoun_next(spec.pronoun_rate);

  std::vector<Document> docs;
  docs.reserve(static_cast<size_t>(spec.documents));
  for (int di = 0; di < spec.documents; ++di) {
    const int len = doc_len_dist(rng);
    Document doc;
    int last_gender = -1;
    bool last_was_noun = false;
    for (int si = 0; si < len; ++si) {
      // A pronoun sentence always directly follows a noun sentence, so the
      // antecedent is exactly one sentence back.
      const bool pronoun = last_was_noun && pronoun_next(rng);
      SentenceDraft draft =
          pronoun ? make_pronoun_sentence(spec, last_gender, rng) : make_noun_sentence(spec, rng);
      if (!pronoun) last_gender = draft.noun_gender;
      last_was_noun = !pronoun;
      doc.sentences.push_back({draft.source, draft.target});
    }
    docs.push_back(std::move(doc));
  }

  SyntheticCorpus corpus;
  const size_t n = docs.size();
  const size_t n_valid = std::max<size_t>(1, n / 20);
  const size_t n_test = std::max<size_t>(1, n / 20);
  const size_t n_train = n > n_valid + n_test ? n - n_valid - n_test : 0;
  for (size_t i = 0; i < n; ++i) {
    if (i < n_train) {
      corpus.train.push_back(docs[i]);
    } else if (i < n_train + n_valid) {
      corpus.valid.push_back(docs[i]);
    } else {
      corpus.test.push_back(docs[i]);
    }
  }

  for (const Document& doc : corpus.test) {
    for (size_t si = 0; si < doc.sentences.size(); ++si) {
      const SentencePair& pair = doc.sentences[si];
      std::vector<std::string> toks = split_tokens(pair.source);
      const bool pronoun_sentence =
          std::find(toks.begin(), toks.end(), synth::kAmbiguousPronoun) != toks.end();
      if (!pronoun_sentence) continue;
      ContrastiveExample ex;
      ex.src = pair.source;
      ex.correct = pair.target;
      ex.contrastive.push_back(swap_pronoun(pair.target));
      const size_t ctx_from = si >= static_cast<size_t>(spec.context_window)
                                  ? si - static_cast<size_t>(spec.context_window)
                                  : 0;
      for (size_t ci = ctx_from; ci < si; ++ci) {
        ex.src_context.push_back(doc.sentences[ci].source);
      }
      // Distance to the most recent sentence containing a noun.
      ex.antecedent_distance = 0;
      for (size_t back = 1; back <= si; ++back) {
        const std::vector<std::string> prev = split_tokens(doc.sentences[si - back].source);
        const bool has_noun = std::any_of(prev.begin(), prev.end(), [](const std::string& t) {
          return synth::is_source_noun(t);
        });
        if (has_noun) {
          ex.antecedent_distance = static_cast<int>(back);
          break;
        }
      }
      corpus.contrastive.push_back(std::move(ex));
    }
  }
  return corpus;
}

}  // namespace ctxmt
