#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctxmt/attention.hpp"
#include "ctxmt/autodiff.hpp"
#include "ctxmt/shortening.hpp"

namespace ctxmt {

// Architecture family. Caching variants share one encoder and store
// (possibly shortened) hidden states of previous sentences; the baselines
// reprocess raw context tokens instead.
enum class Variant {
  kSentenceLevel,
  kSingleEncoder,
  kMultiEncoder,
  kCachingTokens,
  kCachingSentence,
  kShortMax,
  kShortAvg,
  kShortLinear,
  kShortGroup,
  kShortSelect,
};

// How the decoder combines cross-attention over the current sentence with
// attention over the context representation.
enum class Integration { kConcat, kSerial, kParallel, kParallelGated };

enum class Preset { kDesk, kPaperBase };

Variant variant_from_string(const std::string& s);
std::string to_string(Variant v);
Integration integration_from_string(const std::string& s);
std::string to_string(Integration i);
Preset preset_from_string(const std::string& s);
std::string to_string(Preset p);

struct ModelConfig {
  Variant variant = Variant::kSentenceLevel;
  Integration integration = Integration::kSerial;
  int layers = 2;
  int heads = 4;
  int model_dim = 64;
  int ffn_dim = 128;
  double dropout = 0.1;
  int src_vocab = 0;
  int tgt_vocab = 0;
  int max_positions = 256;
  int context_size = 0;     // C: previous sentences kept as context
  int grad_flow_depth = 0;  // g: newest context sentences receiving encoder gradients
  int shorten_k = 1;
  Activation activation = Activation::kSparsemax;
  int categorizer_hidden = 512;
  std::uint64_t seed = 42;
  Preset preset = Preset::kDesk;
};

// Fills dimension fields from the preset, leaving task fields untouched.
void apply_preset(ModelConfig& cfg, Preset p);
// Fills variant-dependent defaults (integration, K, grad flow depth)
// for fields still at their generic defaults.
void resolve_variant_defaults(ModelConfig& cfg);
void validate(const ModelConfig& cfg);

bool uses_cache(Variant v);         // caching_* and short_* variants
bool includes_current(Variant v);   // aggregating variants concat the current sentence as context
ShorteningMode shortening_mode(Variant v);
Integration default_integration(Variant v);
int default_shorten_k(Variant v);
int default_grad_flow_depth(Variant v);

// Enumerates every parameter (name, rows, cols) the config implies, in a
// fixed order shared by construction, counting and checkpoint I/O.
void for_each_parameter(const ModelConfig& cfg,
                        const std::function<void(const std::string&, Eigen::Index, Eigen::Index)>& fn);

// Exact trainable-parameter count implied by the config; does not
// allocate the tensors.
std::int64_t count_parameters(const ModelConfig& cfg);

class ParamStore {
 public:
  ad::Parameter& create(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  ad::Parameter& get(const std::string& name);
  const ad::Parameter& get(const std::string& name) const;
  ad::Parameter* find(const std::string& name);
  const std::vector<ad::Parameter*>& all() const { return order_; }
  void zero_grads();

 private:
  std::vector<std::unique_ptr<ad::Parameter>> owned_;
  std::vector<ad::Parameter*> order_;
  std::unordered_map<std::string, ad::Parameter*> index_;
};

// Gated context branch: out_i = sigmoid(h_i . w + b) * h_i.
ad::Var context_gate(const ad::Var& h, const ad::Var& gate_w, const ad::Var& gate_b);

// Transformer encoder-decoder with a configurable context path. Immutable
// during inference; training mutates parameters through ParamStore and
// needs exclusive access.
class TranslationModel {
 public:
  explicit TranslationModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Runs the shared (main) encoder. `tokens` must already carry the end
  // symbol. Throws TruncationError past max_positions.
  ad::Var encode(const std::vector<int>& tokens, RunState& rs) const;
  // The separate context encoder (multi-encoder baseline only).
  ad::Var encode_context(const std::vector<int>& tokens, RunState& rs) const;

  // Applies this variant's shortening to an encoder output.
  ad::Var shorten_states(const ad::Var& h, RunState& rs) const;

  // Decoder states for a target prefix (starts with the start symbol).
  // `ctx` is the assembled context representation; pass an undefined Var
  // for no context, in which case the context modules are bypassed and
  // the result matches the sentence-level decoder exactly.
  ad::Var decode_states(const std::vector<int>& prefix, const ad::Var& h_src, const ad::Var& ctx,
                        RunState& rs) const;
  // T x V logits: decoder states projected by the shared target embedding.
  ad::Var decode_logits(const std::vector<int>& prefix, const ad::Var& h_src, const ad::Var& ctx,
                        RunState& rs) const;

  // Embedding tables used by context assembly.
  ad::Var segment_embedding(RunState& rs) const;
  ad::Var context_position_embedding(RunState& rs) const;

  ShorteningParams shortening_params() const;
  ShorteningWeights shortening_weights(RunState& rs) const;

  // Builds the single-encoder input: context sentences oldest first, then
  // the current sentence (each already ending with the end symbol).
  static std::vector<int> concat_source(const std::vector<std::vector<int>>& context,
                                        const std::vector<int>& current);

 private:
  ad::Var wrap(const std::string& name, RunState& rs) const;
  AttentionWeights attn_weights(const std::string& prefix, RunState& rs) const;
  ad::Var embed(const std::vector<int>& tokens, const std::string& embed_name,
                const std::string& pos_name, RunState& rs) const;
  ad::Var encoder_stack(const std::vector<int>& tokens, const std::string& prefix,
                        RunState& rs) const;
  ad::Var ffn_block(const ad::Var& x, const std::string& prefix, RunState& rs) const;

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace ctxmt
