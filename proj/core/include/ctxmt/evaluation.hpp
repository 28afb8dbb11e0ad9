#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctxmt/context.hpp"
#include "ctxmt/data.hpp"
#include "ctxmt/model.hpp"

namespace ctxmt {

struct DecodeConfig {
  int beam = 5;            // 1 = greedy
  int max_len_factor = 2;  // target length cap: factor * |source| + offset
  int max_len_offset = 10;
  bool use_cache = true;   // reuse cached context states across sentences
};

// Translates a document sentence by sentence, updating the context after
// each sentence and resetting it at the document end. Beam search
// normalizes finished hypotheses by token count.
std::vector<std::string> translate(const TranslationModel& model, const Document& doc,
                                   const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                                   const DecodeConfig& dc = {});

// Total log-probability (natural log, unnormalized sum) of the target
// given the source and raw context sentences. Scoring runs through the
// first end symbol; an end symbol is appended when absent, and positions
// past it (padding) are ignored.
double score_sequence(const TranslationModel& model, const std::vector<int>& source,
                      const std::vector<std::vector<int>>& context, const std::vector<int>& target);

// Convenience overload over surface strings.
double score_sequence(const TranslationModel& model, const Vocabulary& src_vocab,
                      const Vocabulary& tgt_vocab, const ContrastiveExample& ex,
                      const std::string& target);

struct DistanceBucket {
  long correct = 0;
  long total = 0;
};

struct ContrastiveResult {
  long correct = 0;
  long total = 0;
  double accuracy = 0.0;
  // Antecedent-distance buckets "0", "1", "2", "3", ">3".
  std::map<std::string, DistanceBucket> by_distance;
};

std::string distance_bucket(int distance);

// Accuracy of ranking the correct target strictly above every contrastive
// candidate; ties count as incorrect.
using ContrastiveScorer =
    std::function<double(const ContrastiveExample&, const std::string& target)>;
ContrastiveResult contrastive_eval(const ContrastiveScorer& scorer,
                                   const std::vector<ContrastiveExample>& examples);
ContrastiveResult contrastive_eval(const TranslationModel& model, const Vocabulary& src_vocab,
                                   const Vocabulary& tgt_vocab,
                                   const std::vector<ContrastiveExample>& examples);

// Corpus BLEU: geometric mean of 1..4-gram precisions with brevity
// penalty, no smoothing (any zero n-gram precision gives 0).
double bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);

// ---- memory accounting ----

struct MemoryScenario {
  long sentence_len = 20;  // M
  long target_len = 20;    // T
  long context = 0;        // c
  long k = 1;              // shortening K
};

// Analytic attention-cell and cached-token counts per architecture:
//   sentence_level   encoder M^2
//   single_encoder   encoder (M(c+1))^2
//   multi_encoder    encoder M^2 + (Mc)^2
//   caching_tokens   encoder M^2, cached Mc, context-attention T*Mc
//   caching_sentence cached c+1 (current included)
//   pooling          cached ceil(M/K)*c
//   group/select     cached K*(c+1), constant in M
struct ArchitectureMemory {
  Variant architecture = Variant::kSentenceLevel;
  std::int64_t encoder_cells = 0;
  std::int64_t decoder_cross_cells = 0;
  std::int64_t decoder_context_cells = 0;
  std::int64_t cached_tokens = 0;
  std::optional<std::int64_t> measured_peak_bytes;
};

std::vector<ArchitectureMemory> memory_report(const MemoryScenario& scenario,
                                              const std::vector<Variant>& architectures);

// Peak graph-arena bytes allocated while translating `doc` on top of what
// was live before the call: the operation memory of the inference pass.
std::int64_t measure_translate_peak(const TranslationModel& model, const Document& doc,
                                    const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                                    const DecodeConfig& dc = {});

// ---- token-assignment export ----

struct AssignmentExport {
  std::vector<std::string> tokens;
  ad::Matrix weights;  // |tokens| x K
  ShorteningMode mode = ShorteningMode::kGroup;
  Activation activation = Activation::kSparsemax;
};

// Categorization weights of the current sentence's tokens; only valid for
// the grouping/selecting variants.
AssignmentExport export_assignments(const TranslationModel& model, const std::string& src_sentence,
                                    const Vocabulary& src_vocab);
void save_assignments(const AssignmentExport& e, const std::string& path);
AssignmentExport load_assignments(const std::string& path);

}  // namespace ctxmt
