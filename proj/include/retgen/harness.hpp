#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "retgen/corpus.hpp"
#include "retgen/errors.hpp"
#include "retgen/index.hpp"
#include "retgen/inference.hpp"
#include "retgen/metrics.hpp"
#include "retgen/model.hpp"
#include "retgen/objectives.hpp"
#include "retgen/tokenizer.hpp"

namespace retgen {

namespace fs = std::filesystem;

struct DataPaths {
  std::string collection;
  std::string sessions_train;
  std::string sessions_eval;
  std::string adhoc;
};

struct ArtifactPaths {
  std::string checkpoint;
  std::string checkpoint_b;        // generator checkpoint in separated mode
  std::string checkpoint_no_cii;   // ablation matrix
  std::string checkpoint_no_ddm;
  std::string index;
};

struct SynthConfig {
  SynthSpec spec{.n_sessions = 200,
                 .turns_per_session = 3,
                 .collection_size = 1000,
                 .vocab_size = 256,
                 .seed = 7};
  int heldout_sessions = 20;
};

struct MixConfig {
  double adhoc = 1.0;
  double instruct = 1.0;
  double conv_search = 1.0;
};

// One config file drives every command; flags override fields.
struct ExperimentConfig {
  ModelConfig model{.vocab_size = 256,
                    .d_model = 64,
                    .n_layers = 2,
                    .n_heads = 4,
                    .max_seq_len = 256,
                    .eos_token_id = Tokenizer::kEos,
                    .seed = 1};
  LossConfig loss;
  GenerationConfig generation;
  BatchBudgets budgets;
  SynthConfig synth;
  MixConfig mix;
  DataPaths data;
  ArtifactPaths artifacts;
  std::string ablation = "full";       // full | no_cii | no_ddm
  std::string comparison = "unified";  // unified | separated
  std::string run_tag = "retgen";
  json raw = json::object();           // verbatim config for provenance

  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig from_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path.string());
    json j = json::parse(is, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw ConfigError("config file is not a JSON object: " + path.string());
    return from_json(j);
  }

  // Master seed: derives the module seeds so one flag reseeds everything.
  void apply_master_seed(uint64_t s) {
    model.seed = s ^ 0x9e3779b97f4a7c15ull;
    loss.seed = s ^ 0x6a09e667f3bcc909ull;
    synth.spec.seed = s ^ 0xbb67ae8584caa73bull;
    raw["seed"] = s;
  }

  void validate_ablation() const {
    if (ablation != "full" && ablation != "no_cii" && ablation != "no_ddm")
      throw ConfigError("ablation must be one of full|no_cii|no_ddm, got '" + ablation + "'");
    if (comparison != "unified" && comparison != "separated")
      throw ConfigError("comparison must be unified|separated, got '" + comparison + "'");
  }
};

namespace config_detail {

template <typename T>
T get_or(const json& j, const char* section, const char* field, T fallback) {
  auto sit = j.find(section);
  if (sit == j.end()) return fallback;
  if (!sit->is_object()) throw ConfigError(std::string("config section '") + section +
                                           "' must be an object");
  auto fit = sit->find(field);
  if (fit == sit->end()) return fallback;
  try {
    return fit->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + section + "." + field +
                      "' has the wrong type");
  }
}

}  // namespace config_detail

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
  using config_detail::get_or;
  ExperimentConfig c;
  c.raw = j;

  c.model.vocab_size = get_or(j, "model", "vocab_size", c.model.vocab_size);
  c.model.d_model = get_or(j, "model", "d_model", c.model.d_model);
  c.model.n_layers = get_or(j, "model", "n_layers", c.model.n_layers);
  c.model.n_heads = get_or(j, "model", "n_heads", c.model.n_heads);
  c.model.max_seq_len = get_or(j, "model", "max_seq_len", c.model.max_seq_len);
  c.model.eos_token_id = get_or(j, "model", "eos_token_id", c.model.eos_token_id);
  c.model.seed = get_or(j, "model", "seed", c.model.seed);

  c.loss.alpha = get_or(j, "loss", "alpha", c.loss.alpha);
  c.loss.enable_cii = get_or(j, "loss", "enable_cii", c.loss.enable_cii);
  c.loss.learning_rate = get_or(j, "loss", "learning_rate", c.loss.learning_rate);
  c.loss.batch_size = get_or(j, "loss", "batch_size", c.loss.batch_size);
  c.loss.epochs = get_or(j, "loss", "epochs", c.loss.epochs);
  c.loss.grad_accum_steps = get_or(j, "loss", "grad_accum_steps", c.loss.grad_accum_steps);
  c.loss.seed = get_or(j, "loss", "seed", c.loss.seed);
  c.loss.temperature = get_or(j, "loss", "temperature", c.loss.temperature);

  c.generation.max_new_tokens = get_or(j, "generation", "max_new_tokens",
                                       c.generation.max_new_tokens);
  c.generation.top_k_passages = get_or(j, "generation", "top_k_passages",
                                       c.generation.top_k_passages);
  c.generation.mode = parse_mode(get_or<std::string>(j, "generation", "mode", "rag"));
  c.generation.history_top_k = get_or(j, "generation", "history_top_k",
                                      c.generation.history_top_k);
  c.generation.run_depth = get_or(j, "generation", "run_depth", c.generation.run_depth);
  c.generation.session_decode =
      get_or(j, "generation", "session_decode", c.generation.session_decode);

  c.budgets.query = get_or(j, "budgets", "query", c.budgets.query);
  c.budgets.passage = get_or(j, "budgets", "passage", c.budgets.passage);
  c.budgets.response = get_or(j, "budgets", "response", c.budgets.response);

  c.synth.spec.n_sessions = get_or(j, "synth", "n_sessions", c.synth.spec.n_sessions);
  c.synth.spec.turns_per_session =
      get_or(j, "synth", "turns_per_session", c.synth.spec.turns_per_session);
  c.synth.spec.collection_size =
      get_or(j, "synth", "collection_size", c.synth.spec.collection_size);
  c.synth.spec.vocab_size = get_or(j, "synth", "vocab_size", c.synth.spec.vocab_size);
  c.synth.spec.seed = get_or(j, "synth", "seed", c.synth.spec.seed);
  c.synth.heldout_sessions = get_or(j, "synth", "heldout_sessions", c.synth.heldout_sessions);

  c.mix.adhoc = get_or(j, "mix", "adhoc", c.mix.adhoc);
  c.mix.instruct = get_or(j, "mix", "instruct", c.mix.instruct);
  c.mix.conv_search = get_or(j, "mix", "conv_search", c.mix.conv_search);

  c.data.collection = get_or<std::string>(j, "data", "collection", "");
  c.data.sessions_train = get_or<std::string>(j, "data", "sessions_train", "");
  c.data.sessions_eval = get_or<std::string>(j, "data", "sessions_eval", "");
  c.data.adhoc = get_or<std::string>(j, "data", "adhoc", "");

  c.artifacts.checkpoint = get_or<std::string>(j, "artifacts", "checkpoint", "");
  c.artifacts.checkpoint_b = get_or<std::string>(j, "artifacts", "checkpoint_b", "");
  c.artifacts.checkpoint_no_cii = get_or<std::string>(j, "artifacts", "checkpoint_no_cii", "");
  c.artifacts.checkpoint_no_ddm = get_or<std::string>(j, "artifacts", "checkpoint_no_ddm", "");
  c.artifacts.index = get_or<std::string>(j, "artifacts", "index", "");

  if (auto it = j.find("ablation"); it != j.end()) c.ablation = it->get<std::string>();
  if (auto it = j.find("comparison"); it != j.end()) c.comparison = it->get<std::string>();
  if (auto it = j.find("run_tag"); it != j.end()) c.run_tag = it->get<std::string>();
  if (auto it = j.find("seed"); it != j.end()) c.apply_master_seed(it->get<uint64_t>());
  c.validate_ablation();
  return c;
}

inline void require_path(const std::string& value, const char* field) {
  if (value.empty()) throw ConfigError(std::string("config field '") + field + "' is required");
}

// Every artifact gets a sidecar with the verbatim config and run facts, so
// line-oriented formats stay exactly as specified.
inline void write_meta(const fs::path& artifact, const std::string& command,
                       const ExperimentConfig& cfg, json extras = json::object()) {
  json meta{{"artifact", artifact.filename().string()},
            {"command", command},
            {"config", cfg.raw}};
  for (auto& [k, v] : extras.items()) meta[k] = v;
  std::ofstream os(artifact.string() + ".meta.json", std::ios::trunc);
  if (!os) throw ArgumentError("cannot write metadata for " + artifact.string());
  os << meta.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct GenDataResult {
  fs::path collection, sessions_train, sessions_eval, adhoc;
  int train_sessions = 0;
  int heldout_sessions = 0;
};

inline GenDataResult cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out_dir) {
  for (const char* field :
       {"n_sessions", "turns_per_session", "collection_size", "vocab_size", "seed"}) {
    const bool in_synth = cfg.raw.contains("synth") && cfg.raw["synth"].contains(field);
    const bool seeded_globally =
        std::string(field) == "seed" && cfg.raw.contains("seed");
    if (!in_synth && !seeded_globally)
      throw ConfigError(std::string("config field 'synth.") + field +
                        "' is required for gen-data");
  }
  if (cfg.synth.heldout_sessions < 0 ||
      cfg.synth.heldout_sessions >= cfg.synth.spec.n_sessions)
    throw ConfigError("synth.heldout_sessions must be in [0, n_sessions)");
  fs::create_directories(out_dir);
  SynthCorpus corpus = synth_corpus(cfg.synth.spec);
  const int n_train = cfg.synth.spec.n_sessions - cfg.synth.heldout_sessions;
  const int turns = cfg.synth.spec.turns_per_session;

  std::vector<Session> train(corpus.sessions.begin(), corpus.sessions.begin() + n_train);
  std::vector<Session> heldout(corpus.sessions.begin() + n_train, corpus.sessions.end());
  std::vector<AdHocExample> adhoc_train(
      corpus.adhoc.begin(), corpus.adhoc.begin() + static_cast<size_t>(n_train) * turns);

  GenDataResult r;
  r.collection = out_dir / "collection.jsonl";
  r.sessions_train = out_dir / "sessions_train.jsonl";
  r.sessions_eval = out_dir / "sessions_heldout.jsonl";
  r.adhoc = out_dir / "adhoc_train.jsonl";
  r.train_sessions = n_train;
  r.heldout_sessions = cfg.synth.heldout_sessions;
  save_collection(corpus.collection, r.collection);
  save_sessions(train, r.sessions_train);
  save_sessions(heldout, r.sessions_eval);
  save_adhoc(adhoc_train, r.adhoc);
  for (const auto& p : {r.collection, r.sessions_train, r.sessions_eval, r.adhoc})
    write_meta(p, "gen-data", cfg);
  return r;
}

struct LoadedData {
  Collection collection;
  std::vector<std::shared_ptr<const Session>> train_sessions;
  std::vector<AdHocExample> adhoc;
};

inline LoadedData load_training_data(const ExperimentConfig& cfg) {
  require_path(cfg.data.collection, "data.collection");
  require_path(cfg.data.sessions_train, "data.sessions_train");
  LoadedData d;
  d.collection = load_collection(cfg.data.collection);
  auto sessions = load_sessions(cfg.data.sessions_train);
  validate_sessions(sessions, d.collection);
  for (Session& s : sessions)
    d.train_sessions.push_back(std::make_shared<const Session>(std::move(s)));
  if (!cfg.data.adhoc.empty()) d.adhoc = load_adhoc(cfg.data.adhoc);
  return d;
}

// The three training streams: ad-hoc pairs, the same conversations in
// instruct form (response as positive), and the fully labeled
// conversational-search form. The no_ddm ablation zeroes the third ratio.
inline std::vector<TrainingExample> build_stream(const LoadedData& d,
                                                 const ExperimentConfig& cfg) {
  std::vector<TrainingExample> adhoc, instruct, conv;
  for (const AdHocExample& a : d.adhoc) adhoc.push_back(TrainingExample::make_adhoc(a));
  for (const auto& s : d.train_sessions) {
    for (int t = 1; t <= static_cast<int>(s->turns.size()); ++t) {
      if (!s->turns[static_cast<size_t>(t - 1)].response.empty())
        instruct.push_back(TrainingExample::make_instruct(s, t));
      if (!s->turns[static_cast<size_t>(t - 1)].gold_pids.empty() &&
          !s->turns[static_cast<size_t>(t - 1)].response.empty())
        conv.push_back(TrainingExample::make_conv_search(s, t));
    }
  }
  MixConfig mix = cfg.mix;
  if (cfg.ablation == "no_ddm") mix.conv_search = 0.0;
  return mix_datasets({std::move(adhoc), std::move(instruct), std::move(conv)},
                      {mix.adhoc, mix.instruct, mix.conv_search}, cfg.loss.seed);
}

struct TrainCommandResult {
  fs::path checkpoint;
  fs::path loss_log;
  TrainResult stats;
  uint64_t fingerprint = 0;
};

inline TrainCommandResult cmd_train(ExperimentConfig cfg, const fs::path& out_dir) {
  cfg.validate_ablation();
  if (cfg.ablation == "no_cii") cfg.loss.enable_cii = false;
  fs::create_directories(out_dir);
  LoadedData data = load_training_data(cfg);
  std::vector<TrainingExample> stream = build_stream(data, cfg);
  Tokenizer tok(cfg.model.vocab_size);
  ModelState model = ModelState::init(cfg.model);
  TrainResult result = train(model, stream, data.collection, tok, cfg.loss, cfg.budgets);

  TrainCommandResult out;
  out.checkpoint = out_dir / "checkpoint.bin";
  out.loss_log = out_dir / "loss_log.jsonl";
  out.stats = result;
  out.fingerprint = model.fingerprint();
  model.save(out.checkpoint);
  std::ofstream os(out.loss_log, std::ios::trunc);
  write_loss_log(result.log, os);
  os.close();
  json extras{{"steps", result.log.size()},
              {"conv_search_consumed", result.conv_search_consumed},
              {"ddm_active", result.ddm_active},
              {"ablation", cfg.ablation},
              {"fingerprint", out.fingerprint}};
  write_meta(out.checkpoint, "train", cfg, extras);
  write_meta(out.loss_log, "train", cfg, extras);
  return out;
}

inline fs::path cmd_index(const ExperimentConfig& cfg, const fs::path& out_dir) {
  require_path(cfg.artifacts.checkpoint, "artifacts.checkpoint");
  require_path(cfg.data.collection, "data.collection");
  fs::create_directories(out_dir);
  ModelState state = ModelState::load(cfg.artifacts.checkpoint);
  Collection collection = load_collection(cfg.data.collection);
  Tokenizer tok(cfg.model.vocab_size);
  DenseIndex index = build_index(collection, state, tok, cfg.budgets.passage);
  fs::path path = out_dir / "index.bin";
  index.save(path);
  write_meta(path, "index", cfg, json{{"fingerprint", index.fingerprint},
                                      {"passages", index.size()}});
  return path;
}

inline DenseIndex obtain_index(const ExperimentConfig& cfg, const ModelState& state,
                               const Collection& collection, const Tokenizer& tok) {
  if (!cfg.artifacts.index.empty() && fs::exists(cfg.artifacts.index)) {
    DenseIndex index = DenseIndex::load(cfg.artifacts.index);
    check_index_fingerprint(index, state);
    return index;
  }
  return build_index(collection, state, tok, cfg.budgets.passage);
}

inline std::vector<Session> load_eval_sessions(const ExperimentConfig& cfg,
                                               const Collection& collection) {
  require_path(cfg.data.sessions_eval, "data.sessions_eval");
  auto sessions = load_sessions(cfg.data.sessions_eval);
  validate_sessions(sessions, collection);
  return sessions;
}

inline fs::path cmd_search(const ExperimentConfig& cfg, const fs::path& out_dir) {
  require_path(cfg.artifacts.checkpoint, "artifacts.checkpoint");
  require_path(cfg.data.collection, "data.collection");
  fs::create_directories(out_dir);
  ModelState state = ModelState::load(cfg.artifacts.checkpoint);
  Collection collection = load_collection(cfg.data.collection);
  Tokenizer tok(cfg.model.vocab_size);
  DenseIndex index = obtain_index(cfg, state, collection, tok);
  auto sessions = load_eval_sessions(cfg, collection);
  auto run = run_retrieval(state, index, sessions, tok, cfg.budgets,
                           std::max(cfg.generation.run_depth, cfg.generation.top_k_passages));
  fs::path path = out_dir / "run.txt";
  write_run_file(run, cfg.run_tag, path);
  write_meta(path, "search", cfg, json{{"fingerprint", state.fingerprint()}});
  return path;
}

struct EvalCommandResult {
  fs::path run_file;        // empty path in zero_shot mode
  fs::path response_file;
  fs::path report_file;
  fs::path turns_tsv;
  EvalReport report;
  PipelineOutput output;
};

inline std::map<std::string, std::string> gold_response_map(const std::vector<Session>& sessions) {
  std::map<std::string, std::string> gold;
  for (const Session& s : sessions)
    for (size_t t = 0; t < s.turns.size(); ++t)
      gold[s.sid + "_" + std::to_string(t + 1)] = s.turns[t].response;
  return gold;
}

inline std::map<std::string, std::string> evidence_map(const std::vector<Session>& sessions) {
  std::map<std::string, std::string> ev;
  for (const Session& s : sessions)
    for (size_t t = 0; t < s.turns.size(); ++t)
      if (s.turns[t].evidence) ev[s.sid + "_" + std::to_string(t + 1)] = *s.turns[t].evidence;
  return ev;
}

// Evaluation pipeline. In "separated" comparison mode retrieval runs with
// the primary checkpoint and generation with checkpoint_b; "unified" uses
// one checkpoint for both ends.
inline EvalCommandResult cmd_eval(const ExperimentConfig& cfg, const fs::path& out_dir,
                                  const std::string& file_suffix = "") {
  cfg.validate_ablation();
  require_path(cfg.artifacts.checkpoint, "artifacts.checkpoint");
  require_path(cfg.data.collection, "data.collection");
  fs::create_directories(out_dir);
  ModelState retriever = ModelState::load(cfg.artifacts.checkpoint);
  Collection collection = load_collection(cfg.data.collection);
  Tokenizer tok(cfg.model.vocab_size);
  auto sessions = load_eval_sessions(cfg, collection);

  EvalCommandResult out;
  std::vector<std::string> header;
  header.push_back("mode: " + mode_name(cfg.generation.mode));
  header.push_back("comparison: " + cfg.comparison);
  header.push_back("config: " + cfg.raw.dump());

  if (cfg.comparison == "separated") {
    require_path(cfg.artifacts.checkpoint_b, "artifacts.checkpoint_b");
    ModelState generator = ModelState::load(cfg.artifacts.checkpoint_b);
    header.push_back("retriever_fingerprint: " + std::to_string(retriever.fingerprint()));
    header.push_back("generator_fingerprint: " + std::to_string(generator.fingerprint()));
    std::map<std::string, const RankedList*> rankings;
    if (cfg.generation.mode != GenerationMode::zero_shot) {
      DenseIndex index = obtain_index(cfg, retriever, collection, tok);
      out.output.run =
          run_retrieval(retriever, index, sessions, tok, cfg.budgets,
                        std::max(cfg.generation.run_depth, cfg.generation.top_k_passages));
      for (const RankedList& l : out.output.run) rankings[l.qid] = &l;
    }
    out.output.results = run_generation(generator, sessions, collection, tok, cfg.budgets,
                                        cfg.generation, rankings);
  } else {
    header.push_back("fingerprint: " + std::to_string(retriever.fingerprint()));
    const DenseIndex* index_ptr = nullptr;
    DenseIndex index;
    if (cfg.generation.mode != GenerationMode::zero_shot) {
      index = obtain_index(cfg, retriever, collection, tok);
      index_ptr = &index;
    }
    out.output = run_pipeline(retriever, index_ptr, sessions, collection, tok, cfg.budgets,
                              cfg.generation);
  }

  if (!out.output.run.empty()) {
    out.run_file = out_dir / ("run" + file_suffix + ".txt");
    write_run_file(out.output.run, cfg.run_tag, out.run_file);
    write_meta(out.run_file, "eval", cfg);
  }
  out.response_file = out_dir / ("responses" + file_suffix + ".jsonl");
  write_responses(out.output.results, out.response_file);
  write_meta(out.response_file, "eval", cfg);

  Qrels qrels = Qrels::from_sessions(sessions);
  out.report = evaluate(out.output.results, qrels, gold_response_map(sessions),
                        evidence_map(sessions));
  out.report_file = out_dir / ("report" + file_suffix + ".txt");
  std::ofstream ros(out.report_file, std::ios::trunc);
  write_report(out.report, ros, header);
  ros.close();
  write_meta(out.report_file, "eval", cfg);
  out.turns_tsv = out_dir / ("turns" + file_suffix + ".tsv");
  std::ofstream tos(out.turns_tsv, std::ios::trunc);
  write_turn_tsv(out.report, tos);
  tos.close();
  write_meta(out.turns_tsv, "eval", cfg);
  return out;
}

inline fs::path cmd_generate(const ExperimentConfig& cfg, const fs::path& out_dir) {
  // Thin alias over the evaluation pipeline that keeps only the responses.
  EvalCommandResult r = cmd_eval(cfg, out_dir, "_generate");
  return r.response_file;
}

// Ablation matrix: {full, no_cii, and no_ddm when a checkpoint is given}
// x {zero_shot, rag}, one report per cell.
inline std::vector<EvalCommandResult> cmd_ablate(const ExperimentConfig& cfg,
                                                 const fs::path& out_dir) {
  require_path(cfg.artifacts.checkpoint, "artifacts.checkpoint");
  require_path(cfg.artifacts.checkpoint_no_cii, "artifacts.checkpoint_no_cii");
  std::vector<std::pair<std::string, std::string>> variants = {
      {"full", cfg.artifacts.checkpoint}, {"no_cii", cfg.artifacts.checkpoint_no_cii}};
  if (!cfg.artifacts.checkpoint_no_ddm.empty())
    variants.emplace_back("no_ddm", cfg.artifacts.checkpoint_no_ddm);
  std::vector<EvalCommandResult> cells;
  for (const auto& [name, ckpt] : variants) {
    for (GenerationMode mode : {GenerationMode::zero_shot, GenerationMode::rag}) {
      ExperimentConfig cell = cfg;
      cell.ablation = name;
      cell.artifacts.checkpoint = ckpt;
      cell.artifacts.index.clear();  // each variant has its own embedding space
      cell.generation.mode = mode;
      cells.push_back(cmd_eval(cell, out_dir, "_" + name + "_" + mode_name(mode)));
    }
  }
  return cells;
}

struct CompareResult {
  EvalCommandResult unified;
  EvalCommandResult separated;
  fs::path summary;
};

// Unified (one checkpoint both ends) versus separated (checkpoint retrieves,
// checkpoint_b generates) on the same data and mode.
inline CompareResult cmd_compare(const ExperimentConfig& cfg, const fs::path& out_dir) {
  require_path(cfg.artifacts.checkpoint, "artifacts.checkpoint");
  require_path(cfg.artifacts.checkpoint_b, "artifacts.checkpoint_b");
  CompareResult r;
  ExperimentConfig uni = cfg;
  uni.comparison = "unified";
  r.unified = cmd_eval(uni, out_dir, "_unified");
  ExperimentConfig sep = cfg;
  sep.comparison = "separated";
  r.separated = cmd_eval(sep, out_dir, "_separated");
  r.summary = out_dir / "compare_summary.tsv";
  std::ofstream os(r.summary, std::ios::trunc);
  os << "system\tndcg3\trecall10\tf1\tf1_vs_evidence\n";
  char buf[160];
  auto row = [&](const char* name, const EvalReport& rep) {
    std::snprintf(buf, sizeof(buf), "%s\t%.6f\t%.6f\t%.6f\t%.6f\n", name, rep.mean_ndcg3,
                  rep.mean_recall10, rep.mean_f1, rep.mean_f1_vs_evidence);
    os << buf;
  };
  row("unified", r.unified.report);
  row("separated", r.separated.report);
  os.close();
  write_meta(r.summary, "compare", cfg);
  return r;
}

}  // namespace retgen
