#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctxmt/context.hpp"
#include "ctxmt/data.hpp"
#include "ctxmt/model.hpp"

namespace ctxmt {

struct TrainConfig {
  double learning_rate = 5e-4;
  int warmup_steps = 2500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  double label_smoothing = 0.1;
  double clip_norm = 0.1;
  int max_tokens = 4096;   // per micro-batch
  int update_freq = 8;     // micro-batches accumulated per optimizer step
  int patience = 5;        // evaluations without improvement before stopping
  int max_epochs = 0;      // 0: run until patience stops training
  std::uint64_t seed = 42;
  std::string out_dir = ".";
  int log_every = 10;
};

// Table-style shared hyper-parameters for the paper_base preset; the desk
// preset shrinks warmup and batching for minutes-scale runs.
TrainConfig train_preset(Preset p);
void validate(const TrainConfig& cfg);

// One sentence with its document-side context (previous source sentences
// of the same document, oldest first). All id sequences end with the end
// symbol; `target` is the output side (the decoder input prepends the
// start symbol instead).
struct TrainExample {
  std::vector<int> source;
  std::vector<int> target;
  std::vector<std::vector<int>> context;
  int document_id = 0;
  int sentence_index = 0;
};

std::vector<TrainExample> make_examples(const std::vector<Document>& docs,
                                        const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                                        int context_size);

// Label-smoothed negative log-likelihood, mean over non-pad positions:
//   (1 - eps) * (-log p[target]) + (eps / V) * sum_v(-log p[v])
ad::Var label_smoothed_nll(const ad::Var& logits, const std::vector<int>& targets, double eps,
                           int pad_id = Vocabulary::kPadId);
// Sum form plus the non-pad position count, for exact gradient
// accumulation across micro-batches.
ad::Var label_smoothed_nll_sum(const ad::Var& logits, const std::vector<int>& targets, double eps,
                               long* positions, int pad_id = Vocabulary::kPadId);

// Inverse-square-root schedule: base * min(step / warmup, sqrt(warmup / step)).
double lr_at(long step, const TrainConfig& cfg);

// Teacher-forced loss (sum form) of one example, with the variant's
// context preparation applied.
struct LossResult {
  ad::Var loss_sum;
  long positions = 0;
};
LossResult sequence_loss(const TranslationModel& model, const TrainExample& ex,
                         double label_smoothing, RunState& rs);

struct AdamState {
  long step = 0;
  // name -> (first moment, second moment)
  std::unordered_map<std::string, std::pair<ad::Matrix, ad::Matrix>> moments;
};

// Adam with decoupled weight decay over a ParamStore.
class AdamOptimizer {
 public:
  AdamOptimizer(ParamStore& params, const TrainConfig& cfg);

  // Scales gradients down to the clip norm; returns the pre-clip global norm.
  double clip_gradients();
  void step(double lr);

  AdamState& state() { return state_; }
  const AdamState& state() const { return state_; }

 private:
  ParamStore& params_;
  TrainConfig cfg_;
  AdamState state_;
};

// Stop when the validation loss fails to improve for `patience`
// consecutive evaluations.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  // Records one evaluation; true means stop now.
  bool update(double valid_loss);
  double best() const { return best_; }
  int best_index() const { return best_index_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_index_ = -1;
  int evals_ = 0;
  int bad_ = 0;
};

struct TrainResult {
  std::string checkpoint_path;  // best model
  std::string metrics_path;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int epochs_run = 0;
  long steps = 0;
};

// Document-ordered training with gradient accumulation, global-norm
// clipping, per-epoch validation and patience-based early stopping. The
// best checkpoint is kept on disk and reloaded into `model` before
// returning. Deterministic given cfg.seed.
TrainResult train(TranslationModel& model, const TrainConfig& cfg,
                  const std::vector<Document>& train_docs, const std::vector<Document>& valid_docs,
                  const Vocabulary& src_vocab, const Vocabulary& tgt_vocab);

// Mean validation loss (label-smoothed, eval mode) over a document list.
double evaluate_loss(const TranslationModel& model, const std::vector<Document>& docs,
                     const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                     double label_smoothing);

}  // namespace ctxmt
