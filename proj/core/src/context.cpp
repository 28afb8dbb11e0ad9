#include "ctxmt/context.hpp"

#include <numeric>

namespace ctxmt {

using ad::Var;

ContextCache::ContextCache(int capacity) : capacity_(capacity) {
  if (capacity < 0) throw InvalidConfig("cache capacity must be >= 0");
}

void ContextCache::push(ContextEntry entry) {
  if (!entry.states.defined()) throw InvalidInput("cache push: undefined states");
  if (!entry.states.value().allFinite()) throw InvalidInput("cache push: non-finite states");
  if (entry.sentence_index < 0) throw InvalidInput("cache push: negative sentence index");
  if (!entries_.empty() && entry.sentence_index <= entries_.back().sentence_index) {
    throw InvalidState("cache push: sentence index " + std::to_string(entry.sentence_index) +
                       " not after " + std::to_string(entries_.back().sentence_index));
  }
  if (capacity_ == 0) return;
  entries_.push_back(std::move(entry));
  while (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
}

std::vector<ContextEntry> apply_grad_policy(std::vector<ContextEntry> entries, int g) {
  if (g < 0) throw InvalidConfig("grad flow depth must be >= 0");
  const int n = static_cast<int>(entries.size());
  // Entries are ordered oldest first; the g newest keep gradient flow.
  for (int i = 0; i < n - g; ++i) {
    if (!entries[static_cast<size_t>(i)].detached) {
      entries[static_cast<size_t>(i)].states = ad::detach(entries[static_cast<size_t>(i)].states);
      entries[static_cast<size_t>(i)].detached = true;
    }
  }
  return entries;
}

namespace {

// states + segment_embed[segment] + ctx_pos_embed[0..len)
Var embed_entry(const Var& states, int segment, const Var& segment_table, const Var& pos_table) {
  const int len = static_cast<int>(states.rows());
  if (segment >= segment_table.rows()) {
    throw InvalidInput("segment id " + std::to_string(segment) + " exceeds segment table");
  }
  if (len > pos_table.rows()) {
    throw InvalidInput("context entry longer than the context position table");
  }
  std::vector<int> seg_ids(static_cast<size_t>(len), segment);
  std::vector<int> pos_ids(static_cast<size_t>(len));
  std::iota(pos_ids.begin(), pos_ids.end(), 0);
  Var seg = ad::gather_rows(segment_table, seg_ids);
  Var pos = ad::gather_rows(pos_table, pos_ids);
  return ad::add(states, ad::add(seg, pos));
}

}  // namespace

ContextAssembly build_context(const ContextCache& cache, const std::optional<Var>& current,
                              const TranslationModel& model, RunState& rs, bool include_current) {
  ContextAssembly out;
  const bool with_current = include_current && current.has_value();
  if (cache.empty() && !with_current) return out;

  Var segment_table = model.segment_embedding(rs);
  Var pos_table = model.context_position_embedding(rs);

  std::vector<Var> blocks;
  const auto append = [&](const Var& states, int segment) {
    blocks.push_back(embed_entry(states, segment, segment_table, pos_table));
    for (int p = 0; p < static_cast<int>(states.rows()); ++p) {
      out.segment_ids.push_back(segment);
      out.position_ids.push_back(p);
    }
  };

  if (with_current) append(*current, 0);
  // Newest first: segment id equals the distance back from the current
  // sentence, matching the antecedent-distance reporting.
  const auto& entries = cache.entries();
  int segment = 1;
  for (auto it = entries.rbegin(); it != entries.rend(); ++it, ++segment) {
    if (it->states.cols() != segment_table.cols()) {
      throw InvalidInput("build_context: entry model dim mismatch");
    }
    append(it->states, segment);
  }

  out.tokens = ad::concat_rows(blocks);
  return out;
}

ContextAssembly assemble_from_sources(const TranslationModel& model,
                                      const std::vector<std::vector<int>>& context_sources,
                                      const std::optional<Var>& current_short, RunState& rs) {
  const ModelConfig& cfg = model.config();
  ContextCache cache(cfg.context_size);

  std::vector<ContextEntry> entries;
  const size_t from = context_sources.size() > static_cast<size_t>(cfg.context_size)
                          ? context_sources.size() - static_cast<size_t>(cfg.context_size)
                          : 0;
  for (size_t i = from; i < context_sources.size(); ++i) {
    Var h = model.encode(context_sources[i], rs);
    entries.push_back({model.shorten_states(h, rs), static_cast<long>(i), false});
  }
  if (rs.training) entries = apply_grad_policy(std::move(entries), cfg.grad_flow_depth);
  for (ContextEntry& e : entries) cache.push(std::move(e));

  return build_context(cache, current_short, model, rs, includes_current(cfg.variant));
}

PreparedInput prepare_input(const TranslationModel& model, const std::vector<int>& source,
                            const std::vector<std::vector<int>>& context_sources, RunState& rs) {
  const ModelConfig& cfg = model.config();
  PreparedInput out;

  std::vector<std::vector<int>> ctx = context_sources;
  if (static_cast<int>(ctx.size()) > cfg.context_size) {
    ctx.erase(ctx.begin(), ctx.end() - cfg.context_size);
  }

  switch (cfg.variant) {
    case Variant::kSentenceLevel:
      out.h_src = model.encode(source, rs);
      break;
    case Variant::kSingleEncoder:
      out.h_src = model.encode(TranslationModel::concat_source(ctx, source), rs);
      break;
    case Variant::kMultiEncoder: {
      out.h_src = model.encode(source, rs);
      if (!ctx.empty()) {
        std::vector<Var> blocks;
        blocks.reserve(ctx.size());
        for (const auto& sentence : ctx) {
          blocks.push_back(model.encode_context(sentence, rs));
        }
        out.ctx = blocks.size() == 1 ? blocks.front() : ad::concat_rows(blocks);
      }
      break;
    }
    default: {
      out.h_src = model.encode(source, rs);
      // C = 0 disables the context path entirely, current sentence included,
      // so every variant degenerates to the sentence-level decoder.
      if (cfg.context_size > 0) {
        std::optional<Var> current;
        if (includes_current(cfg.variant)) current = model.shorten_states(out.h_src, rs);
        ContextAssembly assembly = assemble_from_sources(model, ctx, current, rs);
        if (!assembly.empty()) out.ctx = assembly.tokens;
      }
      break;
    }
  }
  return out;
}

}  // namespace ctxmt
