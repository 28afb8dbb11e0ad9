#include "ctxmt/model.hpp"

#include <cmath>
#include <numeric>

namespace ctxmt {

using ad::Matrix;
using ad::Var;

Variant variant_from_string(const std::string& s) {
  if (s == "sentence_level") return Variant::kSentenceLevel;
  if (s == "single_encoder") return Variant::kSingleEncoder;
  if (s == "multi_encoder") return Variant::kMultiEncoder;
  if (s == "caching_tokens") return Variant::kCachingTokens;
  if (s == "caching_sentence") return Variant::kCachingSentence;
  if (s == "short_max") return Variant::kShortMax;
  if (s == "short_avg") return Variant::kShortAvg;
  if (s == "short_linear") return Variant::kShortLinear;
  if (s == "short_group") return Variant::kShortGroup;
  if (s == "short_select") return Variant::kShortSelect;
  throw InvalidConfig("unknown variant: " + s);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kSentenceLevel: return "sentence_level";
    case Variant::kSingleEncoder: return "single_encoder";
    case Variant::kMultiEncoder: return "multi_encoder";
    case Variant::kCachingTokens: return "caching_tokens";
    case Variant::kCachingSentence: return "caching_sentence";
    case Variant::kShortMax: return "short_max";
    case Variant::kShortAvg: return "short_avg";
    case Variant::kShortLinear: return "short_linear";
    case Variant::kShortGroup: return "short_group";
    case Variant::kShortSelect: return "short_select";
  }
  throw InvalidConfig("unknown variant tag");
}

Integration integration_from_string(const std::string& s) {
  if (s == "concat") return Integration::kConcat;
  if (s == "serial") return Integration::kSerial;
  if (s == "parallel") return Integration::kParallel;
  if (s == "parallel_gated") return Integration::kParallelGated;
  throw InvalidConfig("unknown integration: " + s);
}

std::string to_string(Integration i) {
  switch (i) {
    case Integration::kConcat: return "concat";
    case Integration::kSerial: return "serial";
    case Integration::kParallel: return "parallel";
    case Integration::kParallelGated: return "parallel_gated";
  }
  throw InvalidConfig("unknown integration tag");
}

Preset preset_from_string(const std::string& s) {
  if (s == "desk") return Preset::kDesk;
  if (s == "paper_base") return Preset::kPaperBase;
  throw InvalidConfig("unknown preset: " + s);
}

std::string to_string(Preset p) { return p == Preset::kDesk ? "desk" : "paper_base"; }

void apply_preset(ModelConfig& cfg, Preset p) {
  cfg.preset = p;
  if (p == Preset::kDesk) {
    cfg.layers = 2;
    cfg.heads = 4;
    cfg.model_dim = 64;
    cfg.ffn_dim = 128;
    cfg.dropout = 0.1;
    cfg.max_positions = 256;
  } else {
    cfg.layers = 6;
    cfg.heads = 8;
    cfg.model_dim = 512;
    cfg.ffn_dim = 2048;
    cfg.dropout = 0.3;
    cfg.max_positions = 1024;
  }
}

bool uses_cache(Variant v) {
  switch (v) {
    case Variant::kCachingTokens:
    case Variant::kCachingSentence:
    case Variant::kShortMax:
    case Variant::kShortAvg:
    case Variant::kShortLinear:
    case Variant::kShortGroup:
    case Variant::kShortSelect:
      return true;
    default:
      return false;
  }
}

bool includes_current(Variant v) {
  // Aggregating variants concat the shortened current sentence as context;
  // token caching stores previous sentences only.
  return uses_cache(v) && v != Variant::kCachingTokens;
}

ShorteningMode shortening_mode(Variant v) {
  switch (v) {
    case Variant::kCachingTokens: return ShorteningMode::kTokens;
    case Variant::kCachingSentence: return ShorteningMode::kSentence;
    case Variant::kShortMax: return ShorteningMode::kMaxPool;
    case Variant::kShortAvg: return ShorteningMode::kMeanPool;
    case Variant::kShortLinear: return ShorteningMode::kLinearPool;
    case Variant::kShortGroup: return ShorteningMode::kGroup;
    case Variant::kShortSelect: return ShorteningMode::kSelect;
    default: return ShorteningMode::kTokens;
  }
}

Integration default_integration(Variant v) {
  switch (v) {
    case Variant::kSentenceLevel:
    case Variant::kSingleEncoder:
    case Variant::kMultiEncoder:
      return Integration::kConcat;
    case Variant::kCachingSentence:
      return Integration::kParallelGated;
    default:
      return Integration::kSerial;
  }
}

int default_shorten_k(Variant v) {
  switch (v) {
    case Variant::kShortMax:
    case Variant::kShortAvg:
    case Variant::kShortLinear:
      return 2;
    case Variant::kShortGroup:
      return 9;
    case Variant::kShortSelect:
      return 10;
    default:
      return 1;
  }
}

int default_grad_flow_depth(Variant v) {
  switch (v) {
    case Variant::kShortSelect: return 1;
    case Variant::kShortGroup: return 2;
    default: return 0;
  }
}

void resolve_variant_defaults(ModelConfig& cfg) {
  cfg.integration = default_integration(cfg.variant);
  cfg.shorten_k = default_shorten_k(cfg.variant);
  cfg.grad_flow_depth = std::min(default_grad_flow_depth(cfg.variant), cfg.context_size);
}

void validate(const ModelConfig& cfg) {
  if (cfg.layers < 1) throw InvalidConfig("layers must be >= 1");
  if (cfg.model_dim < 1 || cfg.ffn_dim < 1) throw InvalidConfig("dimensions must be >= 1");
  if (cfg.heads < 1 || cfg.model_dim % cfg.heads != 0) {
    throw InvalidConfig("heads must divide model_dim");
  }
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw InvalidConfig("dropout must be in [0, 1)");
  if (cfg.src_vocab < 1 || cfg.tgt_vocab < 1) throw InvalidConfig("vocab sizes must be set");
  if (cfg.max_positions < 1) throw InvalidConfig("max_positions must be >= 1");
  if (cfg.context_size < 0) throw InvalidConfig("context_size must be >= 0");
  if (cfg.grad_flow_depth < 0 || cfg.grad_flow_depth > cfg.context_size) {
    throw InvalidConfig("grad_flow_depth must lie in [0, context_size]");
  }
  if (cfg.shorten_k < 1) throw InvalidConfig("shortening K must be >= 1");
  if (cfg.categorizer_hidden < 1) throw InvalidConfig("categorizer hidden width must be >= 1");
}

namespace {

bool has_context_attention(const ModelConfig& cfg) {
  const bool context_capable =
      cfg.variant != Variant::kSentenceLevel && cfg.variant != Variant::kSingleEncoder;
  return context_capable && cfg.integration != Integration::kConcat;
}

}  // namespace

void for_each_parameter(
    const ModelConfig& cfg,
    const std::function<void(const std::string&, Eigen::Index, Eigen::Index)>& fn) {
  validate(cfg);
  const Eigen::Index d = cfg.model_dim;
  const Eigen::Index ffn = cfg.ffn_dim;

  const auto attn = [&](const std::string& prefix) {
    fn(prefix + ".wq", d, d);
    fn(prefix + ".bq", 1, d);
    fn(prefix + ".wk", d, d);
    fn(prefix + ".bk", 1, d);
    fn(prefix + ".wv", d, d);
    fn(prefix + ".bv", 1, d);
    fn(prefix + ".wo", d, d);
    fn(prefix + ".bo", 1, d);
  };
  const auto ln = [&](const std::string& prefix) {
    fn(prefix + ".g", 1, d);
    fn(prefix + ".b", 1, d);
  };
  const auto ffn_block = [&](const std::string& prefix) {
    fn(prefix + ".w1", d, ffn);
    fn(prefix + ".b1", 1, ffn);
    fn(prefix + ".w2", ffn, d);
    fn(prefix + ".b2", 1, d);
  };
  const auto encoder_stack = [&](const std::string& name) {
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = name + std::to_string(l);
      attn(p + ".self");
      ln(p + ".ln1");
      ffn_block(p + ".ffn");
      ln(p + ".ln2");
    }
  };

  fn("src_embed", cfg.src_vocab, d);
  fn("tgt_embed", cfg.tgt_vocab, d);
  fn("src_pos", cfg.max_positions, d);
  fn("tgt_pos", cfg.max_positions, d);

  encoder_stack("enc");
  if (cfg.variant == Variant::kMultiEncoder) encoder_stack("ctxenc");

  const bool ctx_attn = has_context_attention(cfg);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "dec" + std::to_string(l);
    attn(p + ".self");
    ln(p + ".ln_self");
    attn(p + ".cross");
    ln(p + ".ln_cross");
    if (ctx_attn) {
      attn(p + ".ctx");
      if (cfg.integration == Integration::kSerial) ln(p + ".ln_ctx");
      if (cfg.integration == Integration::kParallelGated) {
        fn(p + ".gate.w", d, 1);
        fn(p + ".gate.b", 1, 1);
      }
    }
    ffn_block(p + ".ffn");
    ln(p + ".ln_ffn");
  }

  if (uses_cache(cfg.variant)) {
    fn("segment_embed", cfg.context_size + 1, d);
    fn("ctx_pos_embed", cfg.max_positions, d);
  }

  const ShorteningMode mode = shortening_mode(cfg.variant);
  if (mode == ShorteningMode::kGroup || mode == ShorteningMode::kSelect) {
    fn("shorten.cat.w1", d, cfg.categorizer_hidden);
    fn("shorten.cat.b1", 1, cfg.categorizer_hidden);
    fn("shorten.cat.w2", cfg.categorizer_hidden, cfg.shorten_k);
    fn("shorten.cat.b2", 1, cfg.shorten_k);
  }
  if (mode == ShorteningMode::kLinearPool) {
    fn("shorten.lin.w", static_cast<Eigen::Index>(cfg.shorten_k) * d, d);
    fn("shorten.lin.b", 1, d);
  }
  if (mode == ShorteningMode::kMeanPool || mode == ShorteningMode::kMaxPool ||
      mode == ShorteningMode::kLinearPool || mode == ShorteningMode::kGroup ||
      mode == ShorteningMode::kSelect) {
    attn("shorten.refine");
    ln("shorten.ln");
  }
}

std::int64_t count_parameters(const ModelConfig& cfg) {
  std::int64_t total = 0;
  for_each_parameter(cfg, [&](const std::string&, Eigen::Index r, Eigen::Index c) {
    total += static_cast<std::int64_t>(r) * static_cast<std::int64_t>(c);
  });
  return total;
}

ad::Parameter& ParamStore::create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (index_.count(name)) throw InvalidState("duplicate parameter: " + name);
  owned_.push_back(std::make_unique<ad::Parameter>(name, Matrix::Zero(rows, cols)));
  ad::Parameter* p = owned_.back().get();
  order_.push_back(p);
  index_.emplace(name, p);
  return *p;
}

ad::Parameter& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidState("unknown parameter: " + name);
  return *it->second;
}

const ad::Parameter& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidState("unknown parameter: " + name);
  return *it->second;
}

ad::Parameter* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : it->second;
}

void ParamStore::zero_grads() {
  for (ad::Parameter* p : order_) p->zero_grad();
}

Var context_gate(const Var& h, const Var& gate_w, const Var& gate_b) {
  Var lambda = ad::sigmoid(ad::add_rowvec(ad::matmul(h, gate_w), gate_b));
  return ad::mul_colvec(h, lambda);
}

namespace {

// Initialization is keyed off the name structure: top-level names are
// embedding tables, trailing "b*" segments are biases, trailing "g" is a
// layer-norm gain.
void init_parameter(ad::Parameter& p, std::mt19937_64& rng) {
  const std::string& name = p.name;
  const size_t dot = name.rfind('.');
  const std::string last = dot == std::string::npos ? name : name.substr(dot + 1);
  if (dot != std::string::npos && !last.empty() && last[0] == 'b') {
    p.value.setZero();
    return;
  }
  if (dot != std::string::npos && last == "g") {
    p.value.setOnes();
    return;
  }
  double a;
  if (dot == std::string::npos) {
    a = std::sqrt(3.0 / static_cast<double>(p.value.cols()));
  } else {
    a = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
  }
  std::uniform_real_distribution<double> dist(-a, a);
  for (Eigen::Index i = 0; i < p.value.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.value.cols(); ++j) p.value(i, j) = dist(rng);
  }
}

}  // namespace

TranslationModel::TranslationModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  validate(cfg_);
  std::mt19937_64 rng(cfg_.seed);
  for_each_parameter(cfg_, [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    init_parameter(params_.create(name, r, c), rng);
  });
}

Var TranslationModel::wrap(const std::string& name, RunState& rs) const {
  // Parameters are logically const during inference; gradient leaves are
  // only created for training passes.
  auto& store = const_cast<ParamStore&>(params_);
  return Var::leaf(store.get(name), rs.training);
}

AttentionWeights TranslationModel::attn_weights(const std::string& prefix, RunState& rs) const {
  AttentionWeights w;
  w.wq = wrap(prefix + ".wq", rs);
  w.bq = wrap(prefix + ".bq", rs);
  w.wk = wrap(prefix + ".wk", rs);
  w.bk = wrap(prefix + ".bk", rs);
  w.wv = wrap(prefix + ".wv", rs);
  w.bv = wrap(prefix + ".bv", rs);
  w.wo = wrap(prefix + ".wo", rs);
  w.bo = wrap(prefix + ".bo", rs);
  return w;
}

Var TranslationModel::embed(const std::vector<int>& tokens, const std::string& embed_name,
                            const std::string& pos_name, RunState& rs) const {
  if (tokens.empty()) throw InvalidInput("embed: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg_.max_positions) {
    throw TruncationError("input of length " + std::to_string(tokens.size()) +
                          " exceeds max positions " + std::to_string(cfg_.max_positions));
  }
  Var tok = ad::gather_rows(wrap(embed_name, rs), tokens);
  std::vector<int> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);
  Var pos = ad::gather_rows(wrap(pos_name, rs), positions);
  Var x = ad::add(ad::scale(tok, std::sqrt(static_cast<double>(cfg_.model_dim))), pos);
  if (rs.rng != nullptr) x = ad::dropout(x, cfg_.dropout, rs.training, *rs.rng);
  return x;
}

Var TranslationModel::ffn_block(const Var& x, const std::string& prefix, RunState& rs) const {
  Var h = ad::relu(ad::add_rowvec(ad::matmul(x, wrap(prefix + ".w1", rs)), wrap(prefix + ".b1", rs)));
  if (rs.rng != nullptr) h = ad::dropout(h, cfg_.dropout, rs.training, *rs.rng);
  return ad::add_rowvec(ad::matmul(h, wrap(prefix + ".w2", rs)), wrap(prefix + ".b2", rs));
}

Var TranslationModel::encoder_stack(const std::vector<int>& tokens, const std::string& prefix,
                                    RunState& rs) const {
  Var x = embed(tokens, "src_embed", "src_pos", rs);
  const auto drop = [&](Var v) {
    return rs.rng != nullptr ? ad::dropout(v, cfg_.dropout, rs.training, *rs.rng) : v;
  };
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = prefix + std::to_string(l);
    Var a = multi_head_attention(x, x, x, attn_weights(p + ".self", rs), cfg_.heads, Matrix(),
                                 rs.trace, p + "/self");
    x = ad::layer_norm_rows(ad::add(x, drop(a)), wrap(p + ".ln1.g", rs), wrap(p + ".ln1.b", rs));
    Var f = ffn_block(x, p + ".ffn", rs);
    x = ad::layer_norm_rows(ad::add(x, drop(f)), wrap(p + ".ln2.g", rs), wrap(p + ".ln2.b", rs));
  }
  return x;
}

Var TranslationModel::encode(const std::vector<int>& tokens, RunState& rs) const {
  return encoder_stack(tokens, "enc", rs);
}

Var TranslationModel::encode_context(const std::vector<int>& tokens, RunState& rs) const {
  if (cfg_.variant == Variant::kMultiEncoder) return encoder_stack(tokens, "ctxenc", rs);
  return encoder_stack(tokens, "enc", rs);
}

ShorteningParams TranslationModel::shortening_params() const {
  ShorteningParams p;
  p.mode = shortening_mode(cfg_.variant);
  p.k = cfg_.shorten_k;
  p.activation = cfg_.activation;
  p.categorizer_hidden = cfg_.categorizer_hidden;
  p.heads = cfg_.heads;
  p.dropout = cfg_.dropout;
  return p;
}

ShorteningWeights TranslationModel::shortening_weights(RunState& rs) const {
  ShorteningWeights w;
  auto& store = const_cast<ParamStore&>(params_);
  const auto maybe = [&](const std::string& name) {
    return store.find(name) != nullptr ? wrap(name, rs) : Var();
  };
  w.cat_w1 = maybe("shorten.cat.w1");
  w.cat_b1 = maybe("shorten.cat.b1");
  w.cat_w2 = maybe("shorten.cat.w2");
  w.cat_b2 = maybe("shorten.cat.b2");
  w.lin_w = maybe("shorten.lin.w");
  w.lin_b = maybe("shorten.lin.b");
  if (store.find("shorten.refine.wq") != nullptr) {
    w.refine_attn = attn_weights("shorten.refine", rs);
    w.refine_ln_gamma = wrap("shorten.ln.g", rs);
    w.refine_ln_beta = wrap("shorten.ln.b", rs);
  }
  return w;
}

Var TranslationModel::shorten_states(const Var& h, RunState& rs) const {
  if (!uses_cache(cfg_.variant)) {
    throw InvalidConfig("shorten_states: variant " + to_string(cfg_.variant) +
                        " does not cache context states");
  }
  ShorteningParams p = shortening_params();
  ShorteningWeights w = shortening_weights(rs);
  return shorten(h, p, w, rs);
}

Var TranslationModel::decode_states(const std::vector<int>& prefix, const Var& h_src,
                                    const Var& ctx, RunState& rs) const {
  if (prefix.empty()) throw InvalidInput("decode: prefix must start with the start symbol");
  if (ctx.defined() && ctx.cols() != cfg_.model_dim) {
    throw InvalidInput("decode: context dim " + std::to_string(ctx.cols()) +
                       " != model dim " + std::to_string(cfg_.model_dim));
  }
  const Eigen::Index t = static_cast<Eigen::Index>(prefix.size());
  const Matrix cmask = causal_mask(t);
  const auto drop = [&](Var v) {
    return rs.rng != nullptr ? ad::dropout(v, cfg_.dropout, rs.training, *rs.rng) : v;
  };
  const auto ln = [&](const Var& x, const std::string& p) {
    return ad::layer_norm_rows(x, wrap(p + ".g", rs), wrap(p + ".b", rs));
  };

  Var x = embed(prefix, "tgt_embed", "tgt_pos", rs);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "dec" + std::to_string(l);
    Var a = multi_head_attention(x, x, x, attn_weights(p + ".self", rs), cfg_.heads, cmask,
                                 rs.trace, p + "/self");
    x = ln(ad::add(x, drop(a)), p + ".ln_self");

    switch (cfg_.integration) {
      case Integration::kConcat: {
        Var kv = h_src;
        if (ctx.defined()) {
          std::vector<Var> parts{ctx, h_src};
          kv = ad::concat_rows(parts);
        }
        Var c = multi_head_attention(x, kv, kv, attn_weights(p + ".cross", rs), cfg_.heads,
                                     Matrix(), rs.trace, p + "/cross");
        x = ln(ad::add(x, drop(c)), p + ".ln_cross");
        break;
      }
      case Integration::kSerial: {
        Var c = multi_head_attention(x, h_src, h_src, attn_weights(p + ".cross", rs), cfg_.heads,
                                     Matrix(), rs.trace, p + "/cross");
        x = ln(ad::add(x, drop(c)), p + ".ln_cross");
        if (ctx.defined()) {
          Var cc = multi_head_attention(x, ctx, ctx, attn_weights(p + ".ctx", rs), cfg_.heads,
                                        Matrix(), rs.trace, p + "/context");
          if (rs.trace != nullptr) rs.trace->context_attention_outputs.push_back(cc);
          x = ln(ad::add(x, drop(cc)), p + ".ln_ctx");
        }
        break;
      }
      case Integration::kParallel:
      case Integration::kParallelGated: {
        Var c = multi_head_attention(x, h_src, h_src, attn_weights(p + ".cross", rs), cfg_.heads,
                                     Matrix(), rs.trace, p + "/cross");
        Var sum = ad::add(x, drop(c));
        if (ctx.defined()) {
          Var cc = multi_head_attention(x, ctx, ctx, attn_weights(p + ".ctx", rs), cfg_.heads,
                                        Matrix(), rs.trace, p + "/context");
          if (rs.trace != nullptr) rs.trace->context_attention_outputs.push_back(cc);
          if (cfg_.integration == Integration::kParallelGated) {
            cc = context_gate(cc, wrap(p + ".gate.w", rs), wrap(p + ".gate.b", rs));
          }
          sum = ad::add(sum, drop(cc));
        }
        x = ln(sum, p + ".ln_cross");
        break;
      }
    }

    Var f = ffn_block(x, p + ".ffn", rs);
    x = ln(ad::add(x, drop(f)), p + ".ln_ffn");
  }
  return x;
}

Var TranslationModel::decode_logits(const std::vector<int>& prefix, const Var& h_src,
                                    const Var& ctx, RunState& rs) const {
  Var states = decode_states(prefix, h_src, ctx, rs);
  // Output projection shares the target embedding table.
  return ad::matmul(states, ad::transpose(wrap("tgt_embed", rs)));
}

Var TranslationModel::segment_embedding(RunState& rs) const { return wrap("segment_embed", rs); }

Var TranslationModel::context_position_embedding(RunState& rs) const {
  return wrap("ctx_pos_embed", rs);
}

std::vector<int> TranslationModel::concat_source(const std::vector<std::vector<int>>& context,
                                                 const std::vector<int>& current) {
  std::vector<int> out;
  for (const auto& c : context) out.insert(out.end(), c.begin(), c.end());
  out.insert(out.end(), current.begin(), current.end());
  return out;
}

}  // namespace ctxmt
