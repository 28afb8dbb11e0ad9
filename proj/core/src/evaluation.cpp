#include "ctxmt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace ctxmt {

using ad::Matrix;
using ad::Var;

namespace {

Eigen::RowVectorXd log_softmax_row(const Eigen::RowVectorXd& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

int argmax_first(const Eigen::RowVectorXd& row) {
  int best = 0;
  for (int j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) best = j;
  }
  return best;
}

struct Hypothesis {
  std::vector<int> prefix;  // starts with the start symbol
  double logp = 0.0;
};

std::vector<int> beam_decode(const TranslationModel& model, const Var& h_src, const Var& ctx,
                             int beam, int max_len, RunState& rs) {
  struct Finished {
    std::vector<int> tokens;
    double normalized = 0.0;
  };
  std::vector<Hypothesis> live{{{Vocabulary::kBosId}, 0.0}};
  std::vector<Finished> done;

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Candidate {
      size_t from;
      int token;
      double logp;
    };
    std::vector<Candidate> candidates;
    for (size_t i = 0; i < live.size(); ++i) {
      Var logits = model.decode_logits(live[i].prefix, h_src, ctx, rs);
      const Eigen::RowVectorXd lp = log_softmax_row(logits.value().row(logits.rows() - 1));
      // Only the top `beam` continuations of each hypothesis can survive.
      std::vector<int> ids(static_cast<size_t>(lp.size()));
      std::iota(ids.begin(), ids.end(), 0);
      std::partial_sort(ids.begin(), ids.begin() + std::min<size_t>(ids.size(), beam), ids.end(),
                        [&](int a, int b) { return lp(a) != lp(b) ? lp(a) > lp(b) : a < b; });
      for (int k = 0; k < std::min<int>(beam, static_cast<int>(ids.size())); ++k) {
        candidates.push_back({i, ids[static_cast<size_t>(k)], live[i].logp + lp(ids[static_cast<size_t>(k)])});
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.logp > b.logp; });

    std::vector<Hypothesis> next;
    for (const Candidate& c : candidates) {
      if (static_cast<int>(next.size()) >= beam) break;
      if (c.token == Vocabulary::kEosId) {
        std::vector<int> tokens(live[c.from].prefix.begin() + 1, live[c.from].prefix.end());
        const double len = static_cast<double>(tokens.size() + 1);  // plus the end symbol
        done.push_back({std::move(tokens), c.logp / len});
        continue;
      }
      Hypothesis h = live[c.from];
      h.prefix.push_back(c.token);
      h.logp = c.logp;
      next.push_back(std::move(h));
    }
    if (static_cast<int>(done.size()) >= beam) break;
    live = std::move(next);
  }

  // Force-finish anything still live at the length cap.
  for (const Hypothesis& h : live) {
    std::vector<int> tokens(h.prefix.begin() + 1, h.prefix.end());
    const double len = static_cast<double>(tokens.size() + 1);
    done.push_back({std::move(tokens), h.logp / len});
  }
  if (done.empty()) return {};
  const auto best = std::max_element(done.begin(), done.end(), [](const auto& a, const auto& b) {
    return a.normalized < b.normalized;
  });
  return best->tokens;
}

std::vector<int> greedy_decode(const TranslationModel& model, const Var& h_src, const Var& ctx,
                               int max_len, RunState& rs) {
  std::vector<int> prefix{Vocabulary::kBosId};
  for (int step = 0; step < max_len; ++step) {
    Var logits = model.decode_logits(prefix, h_src, ctx, rs);
    const int next = argmax_first(logits.value().row(logits.rows() - 1));
    if (next == Vocabulary::kEosId) break;
    prefix.push_back(next);
  }
  return {prefix.begin() + 1, prefix.end()};
}

}  // namespace

std::vector<std::string> translate(const TranslationModel& model, const Document& doc,
                                   const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                                   const DecodeConfig& dc) {
  if (dc.beam < 1) throw InvalidConfig("beam must be >= 1");
  const ModelConfig& cfg = model.config();
  RunState rs;  // inference mode

  std::vector<std::string> out;
  out.reserve(doc.sentences.size());

  std::vector<std::vector<int>> history;  // raw source ids, for non-cached paths
  ContextCache cache(cfg.context_size);

  for (size_t i = 0; i < doc.sentences.size(); ++i) {
    std::vector<int> src = src_vocab.encode(doc.sentences[i].source);
    src.push_back(Vocabulary::kEosId);

    Var h_src;
    Var ctx;
    const bool cached_variant = uses_cache(cfg.variant);
    if (cached_variant && dc.use_cache) {
      h_src = model.encode(src, rs);
      if (cfg.context_size > 0) {
        std::optional<Var> current;
        Var shortened = model.shorten_states(h_src, rs);
        if (includes_current(cfg.variant)) current = shortened;
        ContextAssembly assembly =
            build_context(cache, current, model, rs, includes_current(cfg.variant));
        if (!assembly.empty()) ctx = assembly.tokens;
        cache.push({shortened, static_cast<long>(i), true});
      }
    } else {
      PreparedInput in = prepare_input(model, src, history, rs);
      h_src = in.h_src;
      ctx = in.ctx;
    }

    const int max_len = dc.max_len_factor * static_cast<int>(src.size()) + dc.max_len_offset;
    const std::vector<int> tokens =
        dc.beam == 1 ? greedy_decode(model, h_src, ctx, max_len, rs)
                     : beam_decode(model, h_src, ctx, dc.beam, max_len, rs);
    out.push_back(tgt_vocab.decode(tokens));

    history.push_back(std::move(src));
    if (static_cast<int>(history.size()) > cfg.context_size) history.erase(history.begin());
  }
  // Context never leaks across documents.
  cache.reset();
  return out;
}

double score_sequence(const TranslationModel& model, const std::vector<int>& source,
                      const std::vector<std::vector<int>>& context,
                      const std::vector<int>& target) {
  if (target.empty()) throw InvalidInput("score_sequence: empty target");
  RunState rs;

  // Score through the first end symbol; ignore padding past it.
  std::vector<int> scored;
  for (int id : target) {
    scored.push_back(id);
    if (id == Vocabulary::kEosId) break;
  }
  if (scored.back() != Vocabulary::kEosId) scored.push_back(Vocabulary::kEosId);

  PreparedInput in = prepare_input(model, source, context, rs);
  std::vector<int> prefix;
  prefix.reserve(scored.size());
  prefix.push_back(Vocabulary::kBosId);
  prefix.insert(prefix.end(), scored.begin(), scored.end() - 1);

  Var logits = model.decode_logits(prefix, in.h_src, in.ctx, rs);
  double total = 0.0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const Eigen::RowVectorXd lp = log_softmax_row(logits.value().row(t));
    total += lp(scored[static_cast<size_t>(t)]);
  }
  return total;
}

double score_sequence(const TranslationModel& model, const Vocabulary& src_vocab,
                      const Vocabulary& tgt_vocab, const ContrastiveExample& ex,
                      const std::string& target) {
  std::vector<int> src = src_vocab.encode(ex.src);
  src.push_back(Vocabulary::kEosId);
  std::vector<std::vector<int>> ctx;
  ctx.reserve(ex.src_context.size());
  for (const std::string& s : ex.src_context) {
    std::vector<int> ids = src_vocab.encode(s);
    ids.push_back(Vocabulary::kEosId);
    ctx.push_back(std::move(ids));
  }
  std::vector<int> tgt = tgt_vocab.encode(target);
  tgt.push_back(Vocabulary::kEosId);
  return score_sequence(model, src, ctx, tgt);
}

std::string distance_bucket(int distance) {
  if (distance <= 3) return std::to_string(distance);
  return ">3";
}

ContrastiveResult contrastive_eval(const ContrastiveScorer& scorer,
                                   const std::vector<ContrastiveExample>& examples) {
  if (examples.empty()) throw InvalidInput("contrastive_eval: empty example set");
  ContrastiveResult r;
  for (const ContrastiveExample& ex : examples) {
    if (ex.contrastive.empty()) throw InvalidInput("contrastive_eval: example without candidates");
    const double correct_score = scorer(ex, ex.correct);
    // Strict ranking: any tie counts as a failure.
    bool won = true;
    for (const std::string& candidate : ex.contrastive) {
      if (scorer(ex, candidate) >= correct_score) {
        won = false;
        break;
      }
    }
    ++r.total;
    auto& bucket = r.by_distance[distance_bucket(ex.antecedent_distance)];
    ++bucket.total;
    if (won) {
      ++r.correct;
      ++bucket.correct;
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

ContrastiveResult contrastive_eval(const TranslationModel& model, const Vocabulary& src_vocab,
                                   const Vocabulary& tgt_vocab,
                                   const std::vector<ContrastiveExample>& examples) {
  return contrastive_eval(
      [&](const ContrastiveExample& ex, const std::string& target) {
        return score_sequence(model, src_vocab, tgt_vocab, ex, target);
      },
      examples);
}

double bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
  if (hypotheses.size() != references.size()) throw InvalidInput("bleu: list length mismatch");
  if (hypotheses.empty()) throw InvalidInput("bleu: empty corpus");

  constexpr int kMaxOrder = 4;
  long matches[kMaxOrder] = {0, 0, 0, 0};
  long totals[kMaxOrder] = {0, 0, 0, 0};
  long hyp_len = 0;
  long ref_len = 0;

  const auto ngrams = [](const std::vector<std::string>& toks, int n) {
    std::map<std::string, long> counts;
    if (static_cast<int>(toks.size()) < n) return counts;
    for (size_t i = 0; i + static_cast<size_t>(n) <= toks.size(); ++i) {
      std::string key;
      for (int j = 0; j < n; ++j) {
        if (j > 0) key += '\x1f';
        key += toks[i + static_cast<size_t>(j)];
      }
      ++counts[key];
    }
    return counts;
  };

  for (size_t i = 0; i < hypotheses.size(); ++i) {
    const std::vector<std::string> hyp = split_tokens(hypotheses[i]);
    const std::vector<std::string> ref = split_tokens(references[i]);
    hyp_len += static_cast<long>(hyp.size());
    ref_len += static_cast<long>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      const auto hyp_counts = ngrams(hyp, n);
      const auto ref_counts = ngrams(ref, n);
      for (const auto& [key, count] : hyp_counts) {
        totals[n - 1] += count;
        const auto it = ref_counts.find(key);
        if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }

  double log_precision_sum = 0.0;
  for (int n = 0; n < kMaxOrder; ++n) {
    if (matches[n] == 0 || totals[n] == 0) return 0.0;  // no smoothing
    log_precision_sum += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
  }
  if (hyp_len == 0) return 0.0;
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_precision_sum / kMaxOrder);
}

std::vector<ArchitectureMemory> memory_report(const MemoryScenario& sc,
                                              const std::vector<Variant>& architectures) {
  if (sc.sentence_len < 1 || sc.target_len < 1 || sc.context < 0 || sc.k < 1) {
    throw InvalidInput("memory_report: dimensions must be positive");
  }
  const std::int64_t m = sc.sentence_len;
  const std::int64_t t = sc.target_len;
  const std::int64_t c = sc.context;
  const std::int64_t pooled = (m + sc.k - 1) / sc.k;

  std::vector<ArchitectureMemory> out;
  out.reserve(architectures.size());
  for (Variant v : architectures) {
    ArchitectureMemory a;
    a.architecture = v;
    switch (v) {
      case Variant::kSentenceLevel:
        a.encoder_cells = m * m;
        a.decoder_cross_cells = t * m;
        break;
      case Variant::kSingleEncoder:
        a.encoder_cells = m * (c + 1) * m * (c + 1);
        a.decoder_cross_cells = t * m * (c + 1);
        break;
      case Variant::kMultiEncoder:
        a.encoder_cells = m * m + (m * c) * (m * c);
        a.decoder_cross_cells = t * (m + m * c);
        break;
      case Variant::kCachingTokens:
        a.encoder_cells = m * m;
        a.decoder_cross_cells = t * m;
        a.cached_tokens = m * c;
        a.decoder_context_cells = t * m * c;
        break;
      case Variant::kCachingSentence:
        a.encoder_cells = m * m;
        a.decoder_cross_cells = t * m;
        a.cached_tokens = c + 1;  // current sentence included
        a.decoder_context_cells = t * (c + 1);
        break;
      case Variant::kShortMax:
      case Variant::kShortAvg:
      case Variant::kShortLinear:
        a.encoder_cells = m * m;
        a.decoder_cross_cells = t * m;
        a.cached_tokens = pooled * c;
        a.decoder_context_cells = t * pooled * (c + 1);
        break;
      case Variant::kShortGroup:
      case Variant::kShortSelect:
        a.encoder_cells = m * m;
        a.decoder_cross_cells = t * m;
        a.cached_tokens = sc.k * (c + 1);  // constant in M
        a.decoder_context_cells = t * sc.k * (c + 1);
        break;
    }
    out.push_back(a);
  }
  return out;
}

std::int64_t measure_translate_peak(const TranslationModel& model, const Document& doc,
                                    const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                                    const DecodeConfig& dc) {
  const std::int64_t baseline = ad::MemProbe::live_bytes();
  ad::MemProbe::reset_peak();
  translate(model, doc, src_vocab, tgt_vocab, dc);
  return ad::MemProbe::peak_bytes() - baseline;
}

AssignmentExport export_assignments(const TranslationModel& model, const std::string& src_sentence,
                                    const Vocabulary& src_vocab) {
  const ModelConfig& cfg = model.config();
  if (cfg.variant != Variant::kShortGroup && cfg.variant != Variant::kShortSelect) {
    throw InvalidConfig("export_assignments: variant " + to_string(cfg.variant) +
                        " has no categorization matrix");
  }
  AssignmentExport e;
  e.tokens = split_tokens(src_sentence);
  if (e.tokens.empty()) throw InvalidInput("export_assignments: empty sentence");
  e.mode = shortening_mode(cfg.variant);
  e.activation = cfg.activation;

  RunState rs;
  const std::vector<int> ids = src_vocab.encode(src_sentence);
  Var h = model.encode(ids, rs);
  const NormalizationAxis axis = cfg.variant == Variant::kShortGroup
                                     ? NormalizationAxis::kGroups
                                     : NormalizationAxis::kSequence;
  Var c = categorize(h, model.shortening_params(), model.shortening_weights(rs), axis);
  e.weights = c.value();
  return e;
}

void save_assignments(const AssignmentExport& e, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write assignments: " + path);
  out << "# ctxmt assignments v1\n";
  out << "# mode=" << to_string(e.mode) << " activation=" << to_string(e.activation)
      << " k=" << e.weights.cols() << "\n";
  out << "index\ttoken";
  for (Eigen::Index g = 0; g < e.weights.cols(); ++g) out << "\tg" << g;
  out << '\n';
  out.precision(17);
  for (Eigen::Index i = 0; i < e.weights.rows(); ++i) {
    out << i << '\t' << e.tokens[static_cast<size_t>(i)];
    for (Eigen::Index g = 0; g < e.weights.cols(); ++g) out << '\t' << e.weights(i, g);
    out << '\n';
  }
}

AssignmentExport load_assignments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open assignments: " + path);
  AssignmentExport e;
  std::string line;
  std::getline(in, line);  // banner
  if (line.rfind("# ctxmt assignments", 0) != 0) throw ParseError("not an assignments file");
  std::getline(in, line);  // mode line
  {
    std::istringstream meta(line);
    std::string hash, mode_kv, act_kv, k_kv;
    meta >> hash >> mode_kv >> act_kv >> k_kv;
    e.mode = shortening_mode_from_string(mode_kv.substr(mode_kv.find('=') + 1));
    e.activation = activation_from_string(act_kv.substr(act_kv.find('=') + 1));
  }
  std::getline(in, line);  // column header
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string index, token;
    if (!std::getline(ls, index, '\t') || !std::getline(ls, token, '\t')) {
      throw ParseError("assignments: malformed row");
    }
    e.tokens.push_back(token);
    std::vector<double> w;
    std::string cell;
    while (std::getline(ls, cell, '\t')) w.push_back(std::stod(cell));
    rows.push_back(std::move(w));
  }
  if (rows.empty()) throw ParseError("assignments: no rows");
  e.weights.resize(static_cast<Eigen::Index>(rows.size()),
                   static_cast<Eigen::Index>(rows.front().size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw ParseError("assignments: ragged rows");
    for (size_t j = 0; j < rows[i].size(); ++j) {
      e.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return e;
}

}  // namespace ctxmt
