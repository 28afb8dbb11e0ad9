#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctxmt/errors.hpp"

namespace ctxmt {

// One parallel sentence pair inside a document.
struct SentencePair {
  std::string source;
  std::string target;
};

// An ordered run of parallel sentences sharing discourse context.
struct Document {
  std::vector<SentencePair> sentences;
};

// Word-level token <-> id bijection with fixed reserved symbols.
class Vocabulary {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kUnkId = 1;
  static constexpr int kBosId = 2;
  static constexpr int kEosId = 3;
  static constexpr int kReservedCount = 4;

  Vocabulary();

  // Keeps the most frequent whitespace tokens of `sentences`, ties broken
  // by first occurrence, until `max_size` entries (reserved included).
  static Vocabulary build(const std::vector<std::string>& sentences, size_t max_size);

  int id_of(const std::string& token) const;  // kUnkId when absent
  const std::string& token_of(int id) const;
  bool contains(const std::string& token) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode(const std::string& sentence) const;
  std::string decode(const std::vector<int>& ids) const;  // skips reserved symbols

  // Full token list in id order, reserved symbols first.
  const std::vector<std::string>& tokens() const { return tokens_; }
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  void add(const std::string& token);
};

std::vector<std::string> split_tokens(const std::string& sentence);

// Blank-line-delimited documents, one tab-separated sentence pair per line.
std::vector<Document> load_documents(const std::string& path);
void save_documents(const std::vector<Document>& docs, const std::string& path);

// A pronoun-disambiguation ranking instance: the correct target against
// minimally different contrastive alternatives.
struct ContrastiveExample {
  std::vector<std::string> src_context;  // oldest first
  std::string src;
  std::string correct;
  std::vector<std::string> contrastive;
  int antecedent_distance = 0;  // 0 = intra-sentential
};

// Line-delimited JSON records (one object per line); schema documented in
// docs/formats.md.
std::vector<ContrastiveExample> load_contrastive(const std::string& path);
void save_contrastive(const std::vector<ContrastiveExample>& examples, const std::string& path);

// Synthetic context-dependent corpus. Documents interleave noun sentences
// (exactly one gendered noun) with pronoun sentences whose target pronoun
// is decided by the most recent preceding noun's gender; every other token
// maps through a fixed bijective lexicon, so only the pronoun requires
// context.
struct SyntheticSpec {
  int vocab_size = 48;            // filler lexicon entries per side
  int noun_count = 8;             // gendered nouns per gender
  int min_sentence_len = 4;
  int max_sentence_len = 8;
  double pronoun_rate = 0.5;      // chance a noun sentence is followed by a pronoun sentence
  double gender_balance = 0.5;    // probability of gender A
  int min_doc_len = 4;
  int max_doc_len = 8;
  int documents = 2000;
  int context_window = 3;         // previous sentences recorded per contrastive example
  std::uint64_t seed = 42;
};

struct SyntheticCorpus {
  std::vector<Document> train;
  std::vector<Document> valid;
  std::vector<Document> test;
  std::vector<ContrastiveExample> contrastive;  // drawn from the test split
};

// Surface forms used by the generator; fixed so rule-based checks can
// recognize them.
namespace synth {
inline constexpr const char* kAmbiguousPronoun = "it";
inline constexpr const char* kTargetPronounA = "lo";
inline constexpr const char* kTargetPronounB = "la";
std::string source_noun(int gender, int index);  // gender 0 = A, 1 = B
std::string target_noun(int gender, int index);
std::string source_filler(int index);
std::string target_filler(int index);
bool is_source_noun(const std::string& token, int* gender = nullptr);
}  // namespace synth

SyntheticCorpus gen_synthetic(const SyntheticSpec& spec);

}  // namespace ctxmt
