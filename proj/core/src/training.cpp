#include "ctxmt/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "ctxmt/checkpoint.hpp"

namespace ctxmt {

using ad::Matrix;
using ad::Var;

TrainConfig train_preset(Preset p) {
  TrainConfig c;
  if (p == Preset::kDesk) {
    c.warmup_steps = 200;
    c.max_tokens = 1024;
    c.update_freq = 1;
  }
  return c;
}

void validate(const TrainConfig& cfg) {
  if (cfg.learning_rate <= 0.0) throw InvalidConfig("learning rate must be positive");
  if (cfg.warmup_steps < 1) throw InvalidConfig("warmup steps must be >= 1");
  if (cfg.adam_beta1 < 0.0 || cfg.adam_beta1 >= 1.0 || cfg.adam_beta2 < 0.0 ||
      cfg.adam_beta2 >= 1.0) {
    throw InvalidConfig("adam betas must lie in [0, 1)");
  }
  if (cfg.adam_eps <= 0.0) throw InvalidConfig("adam epsilon must be positive");
  if (cfg.weight_decay < 0.0) throw InvalidConfig("weight decay must be >= 0");
  if (cfg.label_smoothing < 0.0 || cfg.label_smoothing >= 1.0) {
    throw InvalidConfig("label smoothing must lie in [0, 1)");
  }
  if (cfg.clip_norm < 0.0) throw InvalidConfig("clip norm must be >= 0");
  if (cfg.max_tokens < 1) throw InvalidConfig("max tokens must be >= 1");
  if (cfg.update_freq < 1) throw InvalidConfig("update frequency must be >= 1");
  if (cfg.patience < 1) throw InvalidConfig("patience must be >= 1");
}

std::vector<TrainExample> make_examples(const std::vector<Document>& docs,
                                        const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                                        int context_size) {
  std::vector<TrainExample> out;
  int doc_id = 0;
  for (const Document& doc : docs) {
    std::vector<std::vector<int>> sources;
    sources.reserve(doc.sentences.size());
    for (const SentencePair& pair : doc.sentences) {
      std::vector<int> ids = src_vocab.encode(pair.source);
      ids.push_back(Vocabulary::kEosId);
      sources.push_back(std::move(ids));
    }
    for (size_t i = 0; i < doc.sentences.size(); ++i) {
      TrainExample ex;
      ex.source = sources[i];
      ex.target = tgt_vocab.encode(doc.sentences[i].target);
      ex.target.push_back(Vocabulary::kEosId);
      const size_t from =
          i > static_cast<size_t>(context_size) ? i - static_cast<size_t>(context_size) : 0;
      for (size_t c = from; c < i; ++c) ex.context.push_back(sources[c]);
      ex.document_id = doc_id;
      ex.sentence_index = static_cast<int>(i);
      out.push_back(std::move(ex));
    }
    ++doc_id;
  }
  return out;
}

Var label_smoothed_nll_sum(const Var& logits, const std::vector<int>& targets, double eps,
                           long* positions, int pad_id) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw InvalidInput("label_smoothed_nll: targets length != logits rows");
  }
  if (eps < 0.0 || eps >= 1.0) throw InvalidConfig("label smoothing must lie in [0, 1)");
  const Eigen::Index v = logits.cols();
  Matrix weights = Matrix::Zero(logits.rows(), v);
  long count = 0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const int y = targets[static_cast<size_t>(t)];
    if (y == pad_id) continue;
    if (y < 0 || y >= v) throw InvalidInput("label_smoothed_nll: target id out of range");
    ++count;
    weights.row(t).setConstant(eps / static_cast<double>(v));
    weights(t, y) += 1.0 - eps;
  }
  if (positions != nullptr) *positions = count;
  Var lp = ad::log_softmax_rows(logits);
  return ad::scale(ad::sum_all(ad::mul(lp, Var::constant(std::move(weights)))), -1.0);
}

Var label_smoothed_nll(const Var& logits, const std::vector<int>& targets, double eps,
                       int pad_id) {
  long count = 0;
  Var sum = label_smoothed_nll_sum(logits, targets, eps, &count, pad_id);
  if (count == 0) throw InvalidInput("label_smoothed_nll: no non-pad positions");
  return ad::scale(sum, 1.0 / static_cast<double>(count));
}

double lr_at(long step, const TrainConfig& cfg) {
  if (step < 1) throw InvalidInput("lr_at: step must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  return cfg.learning_rate * std::min(s / w, std::sqrt(w / s));
}

LossResult sequence_loss(const TranslationModel& model, const TrainExample& ex,
                         double label_smoothing, RunState& rs) {
  PreparedInput in = prepare_input(model, ex.source, ex.context, rs);
  std::vector<int> prefix;
  prefix.reserve(ex.target.size());
  prefix.push_back(Vocabulary::kBosId);
  prefix.insert(prefix.end(), ex.target.begin(), ex.target.end() - 1);
  Var logits = model.decode_logits(prefix, in.h_src, in.ctx, rs);
  LossResult r;
  r.loss_sum = label_smoothed_nll_sum(logits, ex.target, label_smoothing, &r.positions);
  return r;
}

AdamOptimizer::AdamOptimizer(ParamStore& params, const TrainConfig& cfg)
    : params_(params), cfg_(cfg) {
  for (ad::Parameter* p : params_.all()) {
    state_.moments.emplace(p->name, std::make_pair(Matrix::Zero(p->value.rows(), p->value.cols()),
                                                   Matrix::Zero(p->value.rows(), p->value.cols())));
  }
}

double AdamOptimizer::clip_gradients() {
  double sq = 0.0;
  for (ad::Parameter* p : params_.all()) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) {
    const double s = cfg_.clip_norm / norm;
    for (ad::Parameter* p : params_.all()) p->grad *= s;
  }
  return norm;
}

void AdamOptimizer::step(double lr) {
  ++state_.step;
  const double b1 = cfg_.adam_beta1;
  const double b2 = cfg_.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
  for (ad::Parameter* p : params_.all()) {
    auto& [m, v] = state_.moments.at(p->name);
    m = b1 * m + (1.0 - b1) * p->grad;
    v = b2 * v + (1.0 - b2) * p->grad.cwiseProduct(p->grad).eval();
    const Matrix mhat = m / bc1;
    const Matrix vhat = v / bc2;
    p->value -= lr * (mhat.array() / (vhat.array().sqrt() + cfg_.adam_eps)).matrix();
    if (cfg_.weight_decay > 0.0) p->value -= lr * cfg_.weight_decay * p->value;
  }
}

bool EarlyStopping::update(double valid_loss) {
  ++evals_;
  if (valid_loss < best_) {
    best_ = valid_loss;
    best_index_ = evals_;
    bad_ = 0;
    return false;
  }
  ++bad_;
  return bad_ >= patience_;
}

double evaluate_loss(const TranslationModel& model, const std::vector<Document>& docs,
                     const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                     double label_smoothing) {
  const std::vector<TrainExample> examples =
      make_examples(docs, src_vocab, tgt_vocab, model.config().context_size);
  if (examples.empty()) throw InvalidInput("evaluate_loss: empty document list");
  RunState rs;  // eval mode: no dropout, no gradient graph
  double total = 0.0;
  long positions = 0;
  for (const TrainExample& ex : examples) {
    LossResult r = sequence_loss(model, ex, label_smoothing, rs);
    total += r.loss_sum.value()(0, 0);
    positions += r.positions;
  }
  return total / static_cast<double>(positions);
}

namespace {

// Batches are token-budgeted: an example costs max(|source|, |target|).
std::vector<std::vector<size_t>> make_batches(const std::vector<TrainExample>& examples,
                                              const std::vector<size_t>& order, int max_tokens) {
  std::vector<std::vector<size_t>> batches;
  std::vector<size_t> current;
  long budget = 0;
  for (size_t idx : order) {
    const long cost = static_cast<long>(
        std::max(examples[idx].source.size(), examples[idx].target.size()));
    if (!current.empty() && budget + cost > max_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      budget = 0;
    }
    current.push_back(idx);
    budget += cost;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

}  // namespace

TrainResult train(TranslationModel& model, const TrainConfig& cfg,
                  const std::vector<Document>& train_docs, const std::vector<Document>& valid_docs,
                  const Vocabulary& src_vocab, const Vocabulary& tgt_vocab) {
  validate(cfg);
  if (train_docs.empty()) throw InvalidInput("train: empty corpus");

  const std::vector<TrainExample> examples =
      make_examples(train_docs, src_vocab, tgt_vocab, model.config().context_size);

  std::filesystem::create_directories(cfg.out_dir);
  TrainResult result;
  result.checkpoint_path = cfg.out_dir + "/best.ckpt";
  result.metrics_path = cfg.out_dir + "/metrics.tsv";

  std::ofstream log(result.metrics_path);
  if (!log) throw Error("cannot write metrics log: " + result.metrics_path);
  log << "# step\tlr\ttrain_loss\tvalid_loss\n";

  AdamOptimizer optimizer(model.params(), cfg);
  EarlyStopping stopping(cfg.patience);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x5bf0f1ea5d1c4b7bULL);

  long step = 0;
  bool stop = false;
  for (int epoch = 1; !stop && (cfg.max_epochs == 0 || epoch <= cfg.max_epochs); ++epoch) {
    std::vector<size_t> order(examples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::mt19937_64 shuffle_rng(cfg.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::vector<std::vector<size_t>> batches = make_batches(examples, order, cfg.max_tokens);

    for (size_t b = 0; b < batches.size(); b += static_cast<size_t>(cfg.update_freq)) {
      model.params().zero_grads();
      double loss_total = 0.0;
      long positions_total = 0;
      const size_t hi = std::min(batches.size(), b + static_cast<size_t>(cfg.update_freq));
      for (size_t mb = b; mb < hi; ++mb) {
        RunState rs;
        rs.training = true;
        rs.rng = &dropout_rng;
        Var micro_loss;
        for (size_t idx : batches[mb]) {
          LossResult r = sequence_loss(model, examples[idx], cfg.label_smoothing, rs);
          positions_total += r.positions;
          micro_loss = micro_loss.defined() ? ad::add(micro_loss, r.loss_sum) : r.loss_sum;
        }
        ad::backward(micro_loss);
        loss_total += micro_loss.value()(0, 0);
      }
      if (positions_total == 0) continue;
      const double train_loss = loss_total / static_cast<double>(positions_total);
      if (!std::isfinite(train_loss)) {
        throw DivergenceError("non-finite training loss at step " + std::to_string(step + 1));
      }
      // Gradients hold d(sum)/dp; rescale to the token-weighted mean so one
      // accumulated step equals one step on the concatenated batch.
      const double inv = 1.0 / static_cast<double>(positions_total);
      for (ad::Parameter* p : model.params().all()) p->grad *= inv;
      optimizer.clip_gradients();
      ++step;
      const double lr = lr_at(step, cfg);
      optimizer.step(lr);
      if (step % cfg.log_every == 0) {
        log << step << '\t' << lr << '\t' << train_loss << "\t-\n";
      }
    }

    const double valid_loss =
        evaluate_loss(model, valid_docs, src_vocab, tgt_vocab, cfg.label_smoothing);
    if (!std::isfinite(valid_loss)) {
      throw DivergenceError("non-finite validation loss after epoch " + std::to_string(epoch));
    }
    log << step << '\t' << lr_at(std::max<long>(step, 1), cfg) << "\t-\t" << valid_loss << '\n';
    log.flush();
    result.epochs_run = epoch;
    result.steps = step;

    const bool improved = valid_loss < stopping.best();
    stop = stopping.update(valid_loss);
    if (improved) {
      result.best_valid_loss = valid_loss;
      result.best_epoch = epoch;
      save_checkpoint(result.checkpoint_path, model, src_vocab, tgt_vocab, &optimizer.state());
    }
  }

  // Leave the model at its best validation point.
  load_parameters_into(model, result.checkpoint_path);
  return result;
}

}  // namespace ctxmt
