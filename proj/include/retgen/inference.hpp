#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "retgen/corpus.hpp"
#include "retgen/errors.hpp"
#include "retgen/index.hpp"
#include "retgen/model.hpp"
#include "retgen/tokenizer.hpp"

namespace retgen {

enum class GenerationMode { zero_shot, rag, gold_evidence, history_aware };

inline std::string mode_name(GenerationMode m) {
  switch (m) {
    case GenerationMode::zero_shot: return "zero_shot";
    case GenerationMode::rag: return "rag";
    case GenerationMode::gold_evidence: return "gold_evidence";
    case GenerationMode::history_aware: return "history_aware";
  }
  throw ArgumentError("unknown generation mode");
}

inline GenerationMode parse_mode(const std::string& s) {
  if (s == "zero_shot") return GenerationMode::zero_shot;
  if (s == "rag") return GenerationMode::rag;
  if (s == "gold_evidence") return GenerationMode::gold_evidence;
  if (s == "history_aware") return GenerationMode::history_aware;
  throw ConfigError("unknown generation mode '" + s + "'");
}

struct GenerationConfig {
  int max_new_tokens = 8;
  int top_k_passages = 10;
  GenerationMode mode = GenerationMode::rag;
  int history_top_k = 3;  // per historical turn in history_aware mode
  int run_depth = 10;     // ranked-list depth kept for the run file
  // Generated tokens condition only on the prompt representation and prior
  // generated tokens (the masking the generation objective trains). When
  // false, decoding continues under a plain causal mask instead.
  bool session_decode = true;

  void validate() const {
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be at least 1");
    if (mode != GenerationMode::zero_shot && top_k_passages < 1)
      throw ConfigError("top_k_passages must be at least 1 outside zero_shot mode");
    if (history_top_k < 1) throw ConfigError("history_top_k must be at least 1");
    if (run_depth < 1) throw ConfigError("run_depth must be at least 1");
  }
};

struct TurnResult {
  std::string qid;
  std::string sid;
  int turn_index = 0;  // 1-based ordinal within the session
  std::string response;
  RankedList ranked;                   // empty in zero_shot mode
  std::vector<std::string> pids_used;  // passages actually placed in the prompt
};

// Greedy decoding from next-token logits under a causal mask. The prompt is
// the composed context, then each passage behind a passage marker in rank
// order, closed by the end-of-sequence token whose position the generation
// objective trained as the response start. Ties in the argmax break toward
// the lowest token id. Over budget, lowest-ranked passages are dropped
// first.
inline std::vector<int> generate(const ModelState& state, const QueryContext& ctx,
                                 std::vector<std::vector<int>> passages,
                                 const GenerationConfig& cfg, size_t* passages_kept = nullptr) {
  cfg.validate();
  const ModelConfig& mc = state.config;
  auto prompt_len = [&](size_t n_passages) {
    size_t len = ctx.tokens.size() + 1;  // trailing eos
    for (size_t i = 0; i < n_passages; ++i) len += 1 + passages[i].size();
    return static_cast<int>(len);
  };
  size_t keep = passages.size();
  while (keep > 0 && prompt_len(keep) + cfg.max_new_tokens > mc.max_seq_len) --keep;
  if (prompt_len(keep) + cfg.max_new_tokens > mc.max_seq_len)
    throw ContextOverflowError("prompt of " + std::to_string(prompt_len(keep)) +
                               " tokens plus " + std::to_string(cfg.max_new_tokens) +
                               " new tokens exceeds max_seq_len " +
                               std::to_string(mc.max_seq_len));
  passages.resize(keep);
  if (passages_kept) *passages_kept = keep;

  std::vector<int> tokens = ctx.tokens;
  for (const auto& p : passages) {
    tokens.push_back(Tokenizer::kPassageMarker);
    tokens.insert(tokens.end(), p.begin(), p.end());
  }
  tokens.push_back(mc.eos_token_id);
  const int n_prompt = static_cast<int>(tokens.size());

  std::vector<int> out;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    const int t = static_cast<int>(tokens.size());
    AttentionMask mask =
        cfg.session_decode ? build_session_mask(n_prompt, t - n_prompt) : causal_mask(t);
    Tensor logits = next_token_logits(state, tokens, mask);
    int best = 0;
    for (int j = 1; j < mc.vocab_size; ++j)
      if (logits.at(t - 1, j) > logits.at(t - 1, best)) best = j;
    if (best == mc.eos_token_id) break;
    out.push_back(best);
    tokens.push_back(best);
  }
  return out;
}

// Per-turn retrieval over teacher-forced gold history.
inline std::vector<RankedList> run_retrieval(const ModelState& state, const DenseIndex& index,
                                             const std::vector<Session>& sessions,
                                             const Tokenizer& tok, const BatchBudgets& budgets,
                                             int k) {
  check_index_fingerprint(index, state);
  std::vector<RankedList> lists;
  for (const Session& s : sessions) {
    for (int n = 1; n <= static_cast<int>(s.turns.size()); ++n) {
      QueryContext ctx = compose_session_query(s, n, tok, budgets.query);
      lists.push_back(
          search(index, state, s.sid + "_" + std::to_string(n), ctx, k));
    }
  }
  return lists;
}

// Response generation given per-turn ranked lists (keyed by qid). The same
// routine serves the unified pipeline and the separated-generator
// comparison.
inline std::vector<TurnResult> run_generation(
    const ModelState& state, const std::vector<Session>& sessions, const Collection& collection,
    const Tokenizer& tok, const BatchBudgets& budgets, const GenerationConfig& cfg,
    const std::map<std::string, const RankedList*>& rankings) {
  cfg.validate();
  std::vector<TurnResult> results;
  auto passage_tokens = [&](const std::string& pid) {
    return truncate_tail(tok.encode(collection.at(pid).text), budgets.passage);
  };
  for (const Session& s : sessions) {
    for (int n = 1; n <= static_cast<int>(s.turns.size()); ++n) {
      TurnResult r;
      r.sid = s.sid;
      r.turn_index = n;
      r.qid = s.sid + "_" + std::to_string(n);
      QueryContext ctx = compose_session_query(s, n, tok, budgets.query);

      std::vector<std::string> prompt_pids;
      if (cfg.mode == GenerationMode::gold_evidence) {
        prompt_pids = s.turn(n).gold_pids;
      } else if (cfg.mode != GenerationMode::zero_shot) {
        if (cfg.mode == GenerationMode::history_aware) {
          // top results of each historical turn first, deduplicated, then
          // the current turn's list
          std::set<std::string> seen;
          for (int h = 1; h < n; ++h) {
            auto it = rankings.find(s.sid + "_" + std::to_string(h));
            if (it == rankings.end()) continue;
            int taken = 0;
            for (const ScoredPassage& sp : it->second->entries) {
              if (taken >= cfg.history_top_k) break;
              ++taken;
              if (seen.insert(sp.pid).second) prompt_pids.push_back(sp.pid);
            }
          }
          auto it = rankings.find(r.qid);
          if (it != rankings.end()) {
            int taken = 0;
            for (const ScoredPassage& sp : it->second->entries) {
              if (taken >= cfg.top_k_passages) break;
              ++taken;
              if (seen.insert(sp.pid).second) prompt_pids.push_back(sp.pid);
            }
          }
        } else {
          auto it = rankings.find(r.qid);
          if (it == rankings.end())
            throw IntegrityError("no ranked list for turn " + r.qid);
          const auto& entries = it->second->entries;
          for (size_t i = 0; i < entries.size() && static_cast<int>(i) < cfg.top_k_passages; ++i)
            prompt_pids.push_back(entries[i].pid);
        }
        auto it = rankings.find(r.qid);
        if (it != rankings.end()) r.ranked = *it->second;
      }

      std::vector<std::vector<int>> passages;
      passages.reserve(prompt_pids.size());
      for (const std::string& pid : prompt_pids) passages.push_back(passage_tokens(pid));
      size_t kept = 0;
      std::vector<int> generated = generate(state, ctx, passages, cfg, &kept);
      r.pids_used.assign(prompt_pids.begin(),
                         prompt_pids.begin() + static_cast<std::ptrdiff_t>(kept));
      r.response = tok.decode(generated);
      results.push_back(std::move(r));
    }
  }
  return results;
}

struct PipelineOutput {
  std::vector<TurnResult> results;
  std::vector<RankedList> run;  // run-file depth, empty in zero_shot mode
};

// End-to-end conversational pipeline with one model instance for both
// retrieval and generation. History context always uses gold responses.
inline PipelineOutput run_pipeline(const ModelState& state, const DenseIndex* index,
                                   const std::vector<Session>& sessions,
                                   const Collection& collection, const Tokenizer& tok,
                                   const BatchBudgets& budgets, const GenerationConfig& cfg) {
  cfg.validate();
  PipelineOutput out;
  std::map<std::string, const RankedList*> rankings;
  if (cfg.mode != GenerationMode::zero_shot) {
    if (!index) throw ArgumentError("mode " + mode_name(cfg.mode) + " requires an index");
    const int k = std::max(cfg.run_depth, cfg.top_k_passages);
    out.run = run_retrieval(state, *index, sessions, tok, budgets, k);
    for (const RankedList& list : out.run) rankings[list.qid] = &list;
  }
  out.results = run_generation(state, sessions, collection, tok, budgets, cfg, rankings);
  return out;
}

inline void write_responses(const std::vector<TurnResult>& results,
                            const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ArgumentError("cannot write responses: " + path.string());
  for (const TurnResult& r : results)
    os << nlohmann::json{{"sid", r.sid},
                         {"turn", r.turn_index},
                         {"response", r.response},
                         {"pids_used", r.pids_used}}
              .dump()
       << "\n";
}

struct ResponseRecord {
  std::string sid;
  int turn = 0;
  std::string response;
  std::vector<std::string> pids_used;
};

inline std::vector<ResponseRecord> read_responses(const std::filesystem::path& path) {
  std::vector<ResponseRecord> out;
  io_detail::for_each_line(path, [&](const std::string& line, size_t line_no) {
    json j = io_detail::parse_line(line, line_no, "responses");
    ResponseRecord r;
    r.sid = io_detail::require_field(j, "sid", line_no, "responses").get<std::string>();
    r.turn = io_detail::require_field(j, "turn", line_no, "responses").get<int>();
    r.response = io_detail::require_field(j, "response", line_no, "responses").get<std::string>();
    r.pids_used = io_detail::require_field(j, "pids_used", line_no, "responses")
                      .get<std::vector<std::string>>();
    out.push_back(std::move(r));
  });
  return out;
}

}  // namespace retgen
