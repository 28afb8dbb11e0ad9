#pragma once

#include <deque>
#include <optional>
#include <vector>

#include "ctxmt/autodiff.hpp"
#include "ctxmt/model.hpp"

namespace ctxmt {

// A cached (possibly shortened) sentence representation. What is stored is
// the post-shortening representation before segment/position embeddings,
// so the embeddings always reflect the entry's current distance.
struct ContextEntry {
  ad::Var states;
  long sentence_index = 0;
  bool detached = false;
};

// Ordered bounded store of the last `capacity` entries of one document
// stream, oldest first. Single writer per stream.
class ContextCache {
 public:
  explicit ContextCache(int capacity);

  // Appends an entry; evicts the oldest when over capacity. Pushes must
  // have strictly increasing sentence indices.
  void push(ContextEntry entry);
  void reset() { entries_.clear(); }

  int capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  const std::deque<ContextEntry>& entries() const { return entries_; }

 private:
  int capacity_;
  std::deque<ContextEntry> entries_;
};

// The decoder's context input: concatenated (embedded) tokens with their
// segment ids (0 = current sentence, k = k-th previous) and per-entry
// position ids.
struct ContextAssembly {
  ad::Var tokens;  // undefined when the assembly is empty
  std::vector<int> segment_ids;
  std::vector<int> position_ids;

  bool empty() const { return !tokens.defined(); }
  Eigen::Index size() const { return empty() ? 0 : tokens.rows(); }
};

// Marks all but the `g` newest entries as detached: their states are cut
// from the gradient graph, so they contribute exactly zero to encoder
// parameter gradients. Entry values are unchanged.
std::vector<ContextEntry> apply_grad_policy(std::vector<ContextEntry> entries, int g);

// Assembles the decoder context from cached entries (newest first, segment
// ids 1..C) with the current sentence prepended at segment 0 when
// `include_current` holds. Adds segment and context-position embeddings.
ContextAssembly build_context(const ContextCache& cache,
                              const std::optional<ad::Var>& current,
                              const TranslationModel& model, RunState& rs, bool include_current);

// Training/scoring path: encodes and shortens raw context sentences
// (oldest first, each ending with the end symbol), applies the model's
// gradient-flow policy, and assembles the result together with
// `current_short` per the variant's include-current rule.
ContextAssembly assemble_from_sources(const TranslationModel& model,
                                      const std::vector<std::vector<int>>& context_sources,
                                      const std::optional<ad::Var>& current_short, RunState& rs);

// Encoder output and decoder context for one sentence with raw context,
// covering every variant: baselines fold the context into the encoder
// input or a separate encoder; caching variants shorten and assemble it.
struct PreparedInput {
  ad::Var h_src;
  ad::Var ctx;  // undefined when the variant or the example has no context
};
PreparedInput prepare_input(const TranslationModel& model, const std::vector<int>& source,
                            const std::vector<std::vector<int>>& context_sources, RunState& rs);

}  // namespace ctxmt
