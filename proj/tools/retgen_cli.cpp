// Unified conversational retriever-generator: data generation, joint
// training, dense indexing, retrieval, generation and evaluation behind one
// command-line front end.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "retgen/harness.hpp"

namespace {

struct SharedArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<uint64_t> seed;
  std::optional<std::string> ablation;
  std::optional<std::string> mode;
  std::optional<std::string> comparison;
};

void add_shared(CLI::App* cmd, SharedArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config (JSON)")->required();
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--seed", args.seed, "master seed override");
}

retgen::ExperimentConfig load_config(const SharedArgs& args) {
  retgen::ExperimentConfig cfg = retgen::ExperimentConfig::from_file(args.config_path);
  // precedence: flag > file > default
  if (args.seed) cfg.apply_master_seed(*args.seed);
  if (args.ablation) cfg.ablation = *args.ablation;
  if (args.mode) cfg.generation.mode = retgen::parse_mode(*args.mode);
  if (args.comparison) cfg.comparison = *args.comparison;
  cfg.validate_ablation();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unified conversational retrieval and generation"};
  app.require_subcommand(1);

  SharedArgs gen_data, train, index, search, generate, eval, ablate, compare;

  CLI::App* c_gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  add_shared(c_gen, gen_data);

  CLI::App* c_train = app.add_subcommand("train", "jointly train the unified model");
  add_shared(c_train, train);
  c_train->add_option("--ablation", train.ablation, "full|no_cii|no_ddm");

  CLI::App* c_index = app.add_subcommand("index", "encode the collection into a dense index");
  add_shared(c_index, index);

  CLI::App* c_search = app.add_subcommand("search", "retrieve per turn and write a run file");
  add_shared(c_search, search);

  CLI::App* c_generate = app.add_subcommand("generate", "generate responses");
  add_shared(c_generate, generate);
  c_generate->add_option("--mode", generate.mode,
                         "zero_shot|rag|gold_evidence|history_aware");

  CLI::App* c_eval = app.add_subcommand("eval", "end-to-end evaluation with report");
  add_shared(c_eval, eval);
  c_eval->add_option("--mode", eval.mode, "zero_shot|rag|gold_evidence|history_aware");
  c_eval->add_option("--comparison", eval.comparison, "unified|separated");

  CLI::App* c_ablate = app.add_subcommand("ablate", "ablation matrix over modes and variants");
  add_shared(c_ablate, ablate);

  CLI::App* c_compare = app.add_subcommand("compare", "unified versus separated systems");
  add_shared(c_compare, compare);
  c_compare->add_option("--mode", compare.mode, "zero_shot|rag|gold_evidence|history_aware");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_gen->parsed()) {
      auto cfg = load_config(gen_data);
      auto r = retgen::cmd_gen_data(cfg, gen_data.out_dir);
      std::printf("gen-data: %d train sessions, %d heldout, collection %s\n", r.train_sessions,
                  r.heldout_sessions, r.collection.string().c_str());
    } else if (c_train->parsed()) {
      auto cfg = load_config(train);
      auto r = retgen::cmd_train(cfg, train.out_dir);
      std::printf("train: %zu steps, conv_search_consumed=%d, checkpoint %s\n",
                  r.stats.log.size(), r.stats.conv_search_consumed,
                  r.checkpoint.string().c_str());
    } else if (c_index->parsed()) {
      auto cfg = load_config(index);
      auto p = retgen::cmd_index(cfg, index.out_dir);
      std::printf("index: %s\n", p.string().c_str());
    } else if (c_search->parsed()) {
      auto cfg = load_config(search);
      auto p = retgen::cmd_search(cfg, search.out_dir);
      std::printf("search: %s\n", p.string().c_str());
    } else if (c_generate->parsed()) {
      auto cfg = load_config(generate);
      auto p = retgen::cmd_generate(cfg, generate.out_dir);
      std::printf("generate: %s\n", p.string().c_str());
    } else if (c_eval->parsed()) {
      auto cfg = load_config(eval);
      auto r = retgen::cmd_eval(cfg, eval.out_dir);
      std::printf("eval: ndcg@3 %.5f recall@10 %.5f f1 %.5f report %s\n", r.report.mean_ndcg3,
                  r.report.mean_recall10, r.report.mean_f1, r.report_file.string().c_str());
    } else if (c_ablate->parsed()) {
      auto cfg = load_config(ablate);
      auto cells = retgen::cmd_ablate(cfg, ablate.out_dir);
      std::printf("ablate: %zu report files under %s\n", cells.size(), ablate.out_dir.c_str());
    } else if (c_compare->parsed()) {
      auto cfg = load_config(compare);
      auto r = retgen::cmd_compare(cfg, compare.out_dir);
      std::printf("compare: unified f1 %.5f vs separated f1 %.5f, summary %s\n",
                  r.unified.report.mean_f1, r.separated.report.mean_f1,
                  r.summary.string().c_str());
    }
  } catch (const retgen::Error& e) {
    std::fprintf(stderr, "ERROR kind=%s msg=\"%s\"\n", e.kind().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ERROR kind=internal msg=\"%s\"\n", e.what());
    return 1;
  }
  return 0;
}
