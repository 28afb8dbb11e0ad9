#pragma once

#include <memory>
#include <optional>
#include <string>

#include "ctxmt/data.hpp"
#include "ctxmt/model.hpp"
#include "ctxmt/training.hpp"

// Self-describing binary checkpoint: a JSON header (config + vocabularies)
// followed by named raw float64 tensors, optionally including optimizer
// moments. Round-trips bit-exactly; layout documented in docs/formats.md.

namespace ctxmt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const TranslationModel& model,
                     const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                     const AdamState* optimizer = nullptr);

struct LoadedModel {
  ModelConfig config;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  std::unique_ptr<TranslationModel> model;
  std::optional<AdamState> optimizer;
};

LoadedModel load_checkpoint(const std::string& path);

// Copies parameter values from a checkpoint with an identical parameter
// set into an existing model.
void load_parameters_into(TranslationModel& model, const std::string& path);

}  // namespace ctxmt
