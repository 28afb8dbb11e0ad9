#include "ctxmt/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace ctxmt {

namespace {

constexpr char kMagic[8] = {'C', 'T', 'X', 'M', 'T', 'C', 'K', '1'};

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{
      {"variant", to_string(cfg.variant)},
      {"integration", to_string(cfg.integration)},
      {"layers", cfg.layers},
      {"heads", cfg.heads},
      {"model_dim", cfg.model_dim},
      {"ffn_dim", cfg.ffn_dim},
      {"dropout", cfg.dropout},
      {"src_vocab", cfg.src_vocab},
      {"tgt_vocab", cfg.tgt_vocab},
      {"max_positions", cfg.max_positions},
      {"context_size", cfg.context_size},
      {"grad_flow_depth", cfg.grad_flow_depth},
      {"shorten_k", cfg.shorten_k},
      {"activation", to_string(cfg.activation)},
      {"categorizer_hidden", cfg.categorizer_hidden},
      {"seed", cfg.seed},
      {"preset", to_string(cfg.preset)},
  };
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.variant = variant_from_string(j.at("variant").get<std::string>());
  cfg.integration = integration_from_string(j.at("integration").get<std::string>());
  cfg.layers = j.at("layers").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.model_dim = j.at("model_dim").get<int>();
  cfg.ffn_dim = j.at("ffn_dim").get<int>();
  cfg.dropout = j.at("dropout").get<double>();
  cfg.src_vocab = j.at("src_vocab").get<int>();
  cfg.tgt_vocab = j.at("tgt_vocab").get<int>();
  cfg.max_positions = j.at("max_positions").get<int>();
  cfg.context_size = j.at("context_size").get<int>();
  cfg.grad_flow_depth = j.at("grad_flow_depth").get<int>();
  cfg.shorten_k = j.at("shorten_k").get<int>();
  cfg.activation = activation_from_string(j.at("activation").get<std::string>());
  cfg.categorizer_hidden = j.at("categorizer_hidden").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.preset = preset_from_string(j.at("preset").get<std::string>());
  return cfg;
}

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_tensor(std::ostream& out, const std::string& name, const ad::Matrix& m) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u64(out, static_cast<std::uint64_t>(m.rows()));
  write_u64(out, static_cast<std::uint64_t>(m.cols()));
  // Column-major float64, matching Eigen's default storage.
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
}

std::pair<std::string, ad::Matrix> read_tensor(std::istream& in) {
  const std::uint32_t name_len = read_u32(in);
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  const auto rows = static_cast<Eigen::Index>(read_u64(in));
  const auto cols = static_cast<Eigen::Index>(read_u64(in));
  ad::Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw ParseError("checkpoint: truncated tensor data for " + name);
  return {std::move(name), std::move(m)};
}

}  // namespace

void save_checkpoint(const std::string& path, const TranslationModel& model,
                     const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                     const AdamState* optimizer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path);

  nlohmann::json header{
      {"config", config_to_json(model.config())},
      {"src_vocab", src_vocab.tokens()},
      {"tgt_vocab", tgt_vocab.tokens()},
      {"has_optimizer", optimizer != nullptr},
      {"optimizer_step", optimizer != nullptr ? optimizer->step : 0},
  };
  const std::string header_str = header.dump();

  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kCheckpointVersion);
  write_u64(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  const auto& params = model.params().all();
  std::uint64_t count = params.size();
  if (optimizer != nullptr) count += 2 * params.size();
  write_u64(out, count);
  for (const ad::Parameter* p : params) write_tensor(out, p->name, p->value);
  if (optimizer != nullptr) {
    for (const ad::Parameter* p : params) {
      const auto& [m, v] = optimizer->moments.at(p->name);
      write_tensor(out, "adam.m." + p->name, m);
      write_tensor(out, "adam.v." + p->name, v);
    }
  }
  if (!out) throw Error("short write on checkpoint: " + path);
}

LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint: " + path);

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("not a ctxmt checkpoint: " + path);
  }
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t header_len = read_u64(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ParseError("checkpoint: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }

  LoadedModel loaded;
  loaded.config = config_from_json(header.at("config"));
  loaded.src_vocab = Vocabulary::from_tokens(header.at("src_vocab").get<std::vector<std::string>>());
  loaded.tgt_vocab = Vocabulary::from_tokens(header.at("tgt_vocab").get<std::vector<std::string>>());
  loaded.model = std::make_unique<TranslationModel>(loaded.config);

  const bool has_optimizer = header.at("has_optimizer").get<bool>();
  if (has_optimizer) {
    loaded.optimizer.emplace();
    loaded.optimizer->step = header.at("optimizer_step").get<long>();
  }

  const std::uint64_t count = read_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    auto [name, m] = read_tensor(in);
    if (name.rfind("adam.m.", 0) == 0 || name.rfind("adam.v.", 0) == 0) {
      if (!loaded.optimizer) throw ParseError("checkpoint: unexpected optimizer tensor " + name);
      const bool is_m = name[5] == 'm';
      const std::string pname = name.substr(7);
      auto& slot = loaded.optimizer->moments[pname];
      (is_m ? slot.first : slot.second) = std::move(m);
      continue;
    }
    ad::Parameter* p = loaded.model->params().find(name);
    if (p == nullptr) throw ParseError("checkpoint: unknown parameter " + name);
    if (p->value.rows() != m.rows() || p->value.cols() != m.cols()) {
      throw ParseError("checkpoint: shape mismatch for " + name);
    }
    p->value = std::move(m);
  }
  return loaded;
}

void load_parameters_into(TranslationModel& model, const std::string& path) {
  LoadedModel loaded = load_checkpoint(path);
  for (ad::Parameter* p : model.params().all()) {
    const ad::Parameter* q = loaded.model->params().find(p->name);
    if (q == nullptr || q->value.rows() != p->value.rows() || q->value.cols() != p->value.cols()) {
      throw InvalidInput("checkpoint parameter set does not match the model: " + p->name);
    }
    p->value = q->value;
  }
}

}  // namespace ctxmt
