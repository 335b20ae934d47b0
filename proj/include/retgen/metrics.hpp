#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "retgen/errors.hpp"
#include "retgen/index.hpp"
#include "retgen/inference.hpp"
#include "retgen/tokenizer.hpp"

namespace retgen {

// turn id -> set of relevant passage ids (binary relevance)
struct Qrels {
  std::map<std::string, std::set<std::string>> rel;

  static Qrels from_sessions(const std::vector<Session>& sessions) {
    Qrels q;
    for (const Session& s : sessions)
      for (size_t t = 0; t < s.turns.size(); ++t) {
        const auto& pids = s.turns[t].gold_pids;
        if (!pids.empty())
          q.rel[s.sid + "_" + std::to_string(t + 1)] = {pids.begin(), pids.end()};
      }
    return q;
  }
};

// Binary-gain NDCG with ranks starting at 1.
inline double ndcg_at_k(const RankedList& ranked, const std::set<std::string>& rel, int k) {
  if (rel.empty())
    throw UndefinedMetricError("ndcg undefined for empty relevance set (turn " + ranked.qid + ")");
  if (k < 1) throw ArgumentError("k must be at least 1");
  double dcg = 0;
  for (int i = 0; i < k && i < static_cast<int>(ranked.entries.size()); ++i)
    if (rel.count(ranked.entries[static_cast<size_t>(i)].pid))
      dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  double idcg = 0;
  const int ideal = std::min<int>(k, static_cast<int>(rel.size()));
  for (int i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

inline double recall_at_k(const RankedList& ranked, const std::set<std::string>& rel, int k) {
  if (rel.empty())
    throw UndefinedMetricError("recall undefined for empty relevance set (turn " + ranked.qid +
                               ")");
  if (k < 1) throw ArgumentError("k must be at least 1");
  int hits = 0;
  for (int i = 0; i < k && i < static_cast<int>(ranked.entries.size()); ++i)
    if (rel.count(ranked.entries[static_cast<size_t>(i)].pid)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(rel.size());
}

// Token-level F1 over the lowercase-whitespace tokenization, multiset
// overlap; zero when either side is empty or nothing overlaps.
inline double token_f1(const std::string& prediction, const std::string& reference) {
  const auto pred = normalize_tokens(prediction);
  const auto ref = normalize_tokens(reference);
  if (pred.empty() || ref.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : ref) ++counts[t];
  int overlap = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 2 * p * r / (p + r);
}

struct TurnMetrics {
  std::string qid;
  std::string sid;
  int turn_index = 0;
  bool scored_retrieval = false;
  double ndcg3 = 0;
  double recall10 = 0;
  double f1_response = 0;
  std::optional<double> f1_evidence;
};

struct GroupMean {
  int count = 0;
  double sum = 0;
  void add(double v) {
    ++count;
    sum += v;
  }
  double mean() const { return count ? sum / count : 0.0; }
};

struct EvalReport {
  std::vector<TurnMetrics> turns;
  double mean_ndcg3 = 0;
  double mean_recall10 = 0;
  double mean_f1 = 0;
  int retrieval_turns = 0;           // turns entering retrieval aggregates
  int excluded_no_qrels = 0;         // turns without relevance labels
  double mean_f1_vs_response = 0;    // reliability: F1(r', r) over evidence turns
  double mean_f1_vs_evidence = 0;    // reliability: F1(r', E)
  int evidence_turns = 0;
  std::map<int, GroupMean> ndcg_by_turn;    // per-turn-ordinal breakdown
  std::map<int, GroupMean> recall_by_turn;
  std::map<int, GroupMean> f1_by_turn;
};

// Scores every turn result against relevance labels, gold responses and,
// when present, evidence. Retrieval aggregates cover turns that have both
// labels and a ranked list; turns without labels are excluded and counted.
inline EvalReport evaluate(const std::vector<TurnResult>& results, const Qrels& qrels,
                           const std::map<std::string, std::string>& gold_responses,
                           const std::map<std::string, std::string>& evidence,
                           int ndcg_k = 3, int recall_k = 10) {
  std::vector<std::string> missing;
  for (const TurnResult& r : results)
    if (!gold_responses.count(r.qid)) missing.push_back(r.qid);
  if (!missing.empty()) {
    std::string ids;
    for (const auto& m : missing) ids += " " + m;
    throw IntegrityError("missing gold responses for turns:" + ids);
  }

  EvalReport report;
  GroupMean ndcg_all, recall_all, f1_all, f1_ev, f1_resp_ev;
  for (const TurnResult& r : results) {
    TurnMetrics m;
    m.qid = r.qid;
    m.sid = r.sid;
    m.turn_index = r.turn_index;
    m.f1_response = token_f1(r.response, gold_responses.at(r.qid));
    f1_all.add(m.f1_response);
    report.f1_by_turn[r.turn_index].add(m.f1_response);

    auto rel_it = qrels.rel.find(r.qid);
    if (rel_it != qrels.rel.end() && !rel_it->second.empty() && !r.ranked.entries.empty()) {
      m.scored_retrieval = true;
      m.ndcg3 = ndcg_at_k(r.ranked, rel_it->second, ndcg_k);
      m.recall10 = recall_at_k(r.ranked, rel_it->second, recall_k);
      ndcg_all.add(m.ndcg3);
      recall_all.add(m.recall10);
      report.ndcg_by_turn[r.turn_index].add(m.ndcg3);
      report.recall_by_turn[r.turn_index].add(m.recall10);
    } else if (rel_it == qrels.rel.end() || rel_it->second.empty()) {
      ++report.excluded_no_qrels;
    }

    if (auto ev = evidence.find(r.qid); ev != evidence.end()) {
      m.f1_evidence = token_f1(r.response, ev->second);
      f1_ev.add(*m.f1_evidence);
      f1_resp_ev.add(m.f1_response);
    }
    report.turns.push_back(std::move(m));
  }
  report.mean_ndcg3 = ndcg_all.mean();
  report.mean_recall10 = recall_all.mean();
  report.mean_f1 = f1_all.mean();
  report.retrieval_turns = ndcg_all.count;
  report.evidence_turns = f1_ev.count;
  report.mean_f1_vs_evidence = f1_ev.mean();
  report.mean_f1_vs_response = f1_resp_ev.mean();
  return report;
}

// Human-readable tables followed by a machine-readable line-delimited
// section of {"metric", "scope", "value"} records.
inline void write_report(const EvalReport& report, std::ostream& os,
                         const std::vector<std::string>& header_lines = {}) {
  os << "# evaluation report\n";
  os << "# token normalization: lowercase + whitespace split\n";
  for (const auto& line : header_lines) os << "# " << line << "\n";
  os << "\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-22s %10s\n", "metric", "value");
  os << buf;
  auto row = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%-22s %10.5f\n", name, v);
    os << buf;
  };
  row("ndcg@3", report.mean_ndcg3);
  row("recall@10", report.mean_recall10);
  row("f1", report.mean_f1);
  std::snprintf(buf, sizeof(buf), "%-22s %10d\n", "retrieval_turns", report.retrieval_turns);
  os << buf;
  std::snprintf(buf, sizeof(buf), "%-22s %10d\n", "excluded_no_qrels", report.excluded_no_qrels);
  os << buf;
  if (report.evidence_turns > 0) {
    row("f1(r',r) [evidence]", report.mean_f1_vs_response);
    row("f1(r',E) [evidence]", report.mean_f1_vs_evidence);
  }
  os << "\nper-turn breakdown (turn ordinal: ndcg@3 recall@10 f1)\n";
  for (const auto& [turn, f1m] : report.f1_by_turn) {
    const auto ndcg_it = report.ndcg_by_turn.find(turn);
    const auto rec_it = report.recall_by_turn.find(turn);
    std::snprintf(buf, sizeof(buf), "turn %-3d %10.5f %10.5f %10.5f\n", turn,
                  ndcg_it == report.ndcg_by_turn.end() ? 0.0 : ndcg_it->second.mean(),
                  rec_it == report.recall_by_turn.end() ? 0.0 : rec_it->second.mean(),
                  f1m.mean());
    os << buf;
  }
  os << "\n=== machine readable ===\n";
  auto emit = [&](const std::string& metric, const std::string& scope, double value) {
    os << nlohmann::json{{"metric", metric}, {"scope", scope}, {"value", value}}.dump() << "\n";
  };
  emit("ndcg@3", "all", report.mean_ndcg3);
  emit("recall@10", "all", report.mean_recall10);
  emit("f1", "all", report.mean_f1);
  emit("retrieval_turns", "all", report.retrieval_turns);
  emit("excluded_no_qrels", "all", report.excluded_no_qrels);
  if (report.evidence_turns > 0) {
    emit("f1_vs_response", "evidence_turns", report.mean_f1_vs_response);
    emit("f1_vs_evidence", "evidence_turns", report.mean_f1_vs_evidence);
  }
  for (const auto& [turn, m] : report.ndcg_by_turn)
    emit("ndcg@3", "turn_" + std::to_string(turn), m.mean());
  for (const auto& [turn, m] : report.recall_by_turn)
    emit("recall@10", "turn_" + std::to_string(turn), m.mean());
  for (const auto& [turn, m] : report.f1_by_turn)
    emit("f1", "turn_" + std::to_string(turn), m.mean());
}

// Per-turn TSV suitable for external plotting.
inline void write_turn_tsv(const EvalReport& report, std::ostream& os) {
  os << "turn\tndcg3\trecall10\tf1\tcount\n";
  for (const auto& [turn, m] : report.f1_by_turn) {
    const auto nd = report.ndcg_by_turn.find(turn);
    const auto rc = report.recall_by_turn.find(turn);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d\t%.6f\t%.6f\t%.6f\t%d\n", turn,
                  nd == report.ndcg_by_turn.end() ? 0.0 : nd->second.mean(),
                  rc == report.recall_by_turn.end() ? 0.0 : rc->second.mean(), m.mean(), m.count);
    os << buf;
  }
}

}  // namespace retgen
