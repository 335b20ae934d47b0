#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "retgen/errors.hpp"
#include "retgen/tokenizer.hpp"

namespace retgen {

using json = nlohmann::json;

struct SessionTurn {
  std::string query;
  std::string response;
  std::vector<std::string> gold_pids;
  std::optional<std::string> evidence;
};

// A conversation: ordered turns with per-turn gold labels. Turn indices are
// 1-based and dense by construction.
struct Session {
  std::string sid;
  std::vector<SessionTurn> turns;

  const SessionTurn& turn(int n) const {
    if (n < 1 || n > static_cast<int>(turns.size()))
      throw IndexError("turn " + std::to_string(n) + " out of range for session " + sid);
    return turns[static_cast<size_t>(n - 1)];
  }
};

struct Passage {
  std::string pid;
  std::string text;
};

struct Collection {
  std::vector<Passage> passages;
  std::map<std::string, int> index;

  void add(Passage p) {
    auto [it, inserted] = index.emplace(p.pid, static_cast<int>(passages.size()));
    if (!inserted) throw IntegrityError("duplicate passage id '" + p.pid + "'");
    passages.push_back(std::move(p));
  }
  bool contains(const std::string& pid) const { return index.count(pid) > 0; }
  const Passage& at(const std::string& pid) const {
    auto it = index.find(pid);
    if (it == index.end()) throw IntegrityError("unknown passage id '" + pid + "'");
    return passages[static_cast<size_t>(it->second)];
  }
  size_t size() const { return passages.size(); }
};

struct AdHocExample {
  std::string query;
  std::string pos_pid;
  std::vector<std::string> neg_pids;
};

// Tagged union over the three training-data formats. The conversational
// formats reference a session plus a 1-based turn; conv_search additionally
// guarantees both the positive passage and the gold response exist.
struct TrainingExample {
  enum class Format { adhoc, instruct, conv_search };
  Format format = Format::adhoc;
  AdHocExample adhoc;
  std::shared_ptr<const Session> session;
  int turn_index = 0;

  static TrainingExample make_adhoc(AdHocExample ex) {
    TrainingExample t;
    t.format = Format::adhoc;
    t.adhoc = std::move(ex);
    return t;
  }
  static TrainingExample make_instruct(std::shared_ptr<const Session> s, int turn) {
    TrainingExample t;
    t.format = Format::instruct;
    t.session = std::move(s);
    t.turn_index = turn;
    if (t.session->turn(turn).response.empty())
      throw ArgumentError("instruct example needs a gold response");
    return t;
  }
  static TrainingExample make_conv_search(std::shared_ptr<const Session> s, int turn) {
    TrainingExample t;
    t.format = Format::conv_search;
    t.session = std::move(s);
    t.turn_index = turn;
    const SessionTurn& st = t.session->turn(turn);
    if (st.gold_pids.empty() || st.response.empty())
      throw ArgumentError("conv_search example needs both a positive passage and a response");
    return t;
  }
};

// Token sequence for the composed session query q'_n. The representation
// position (the end-of-sequence token appended by sequence_embedding) sits
// at index tokens.size().
struct QueryContext {
  std::vector<int> tokens;
  int repr_index = 0;
};

// Serializes [q1, r1, ..., q_{n-1}, r_{n-1}, q_n] with role markers. Over
// budget, whole oldest turns are dropped first; if one history turn is left
// its response is truncated from the head; the current query is never
// truncated.
inline QueryContext compose_session_query(const Session& session, int turn_index,
                                          const Tokenizer& tok, int budget) {
  if (turn_index < 1 || turn_index > static_cast<int>(session.turns.size()))
    throw ArgumentError("turn index " + std::to_string(turn_index) +
                        " out of range for session " + session.sid);
  if (budget < 2) throw ArgumentError("query budget must allow a marker plus one token");
  const int n = turn_index;

  struct Seg {
    std::vector<int> query;     // [<q>] + tokens
    std::vector<int> response;  // [<r>] + tokens
  };
  std::vector<Seg> history;
  for (int i = 1; i < n; ++i) {
    const SessionTurn& t = session.turn(i);
    Seg s;
    s.query.push_back(Tokenizer::kQueryMarker);
    for (int id : tok.encode(t.query)) s.query.push_back(id);
    s.response.push_back(Tokenizer::kResponseMarker);
    for (int id : tok.encode(t.response)) s.response.push_back(id);
    history.push_back(std::move(s));
  }
  std::vector<int> current;
  current.push_back(Tokenizer::kQueryMarker);
  for (int id : tok.encode(session.turn(n).query)) current.push_back(id);
  if (static_cast<int>(current.size()) > budget)
    throw ContextOverflowError("current query of turn " + std::to_string(n) + " (" +
                               std::to_string(current.size()) + " tokens) exceeds budget " +
                               std::to_string(budget));

  auto total_len = [&](size_t start) {
    size_t len = current.size();
    for (size_t i = start; i < history.size(); ++i)
      len += history[i].query.size() + history[i].response.size();
    return static_cast<int>(len);
  };

  size_t start = 0;
  while (total_len(start) > budget && history.size() - start >= 2) ++start;
  if (total_len(start) > budget && start < history.size()) {
    // One history turn left and still over: trim its response from the head,
    // keeping at least one response token; otherwise drop the turn.
    Seg& last = history[start];
    const int excess = total_len(start) - budget;
    const int resp_tokens = static_cast<int>(last.response.size()) - 1;
    if (resp_tokens - excess >= 1) {
      last.response.erase(last.response.begin() + 1, last.response.begin() + 1 + excess);
    } else {
      ++start;
    }
  }

  QueryContext ctx;
  for (size_t i = start; i < history.size(); ++i) {
    ctx.tokens.insert(ctx.tokens.end(), history[i].query.begin(), history[i].query.end());
    ctx.tokens.insert(ctx.tokens.end(), history[i].response.begin(), history[i].response.end());
  }
  ctx.tokens.insert(ctx.tokens.end(), current.begin(), current.end());
  ctx.repr_index = static_cast<int>(ctx.tokens.size());
  return ctx;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct SynthSpec {
  int n_sessions = 0;
  int turns_per_session = 0;
  int collection_size = 0;
  int vocab_size = 0;
  uint64_t seed = 0;
};

struct SynthCorpus {
  Collection collection;
  std::vector<Session> sessions;
  std::vector<AdHocExample> adhoc;  // one per (session, turn), session-major order
  // Self-contained rewrite of each turn's query (current query plus the
  // session topic), used by the lexical solvability oracle and as the
  // ad-hoc query text. oracle_queries[s][t] is 0-based.
  std::vector<std::vector<std::string>> oracle_queries;
};

namespace synth_detail {

struct Pools {
  // index ranges into the word space [0, word_count)
  int ask_begin, ask_end;
  int answer_begin, answer_end;
  int pfill_begin, pfill_end;
  int content_begin, content_end;
  int topic_begin, topic_end;
  int focus_begin, focus_end;
};

inline Pools plan_pools(int word_count) {
  Pools p{};
  int ask = std::max(8, word_count / 16);
  int answer = std::max(4, word_count / 32);
  int pfill = std::max(8, word_count / 8);
  int content = std::max(12, word_count / 10);
  int used = ask + answer + pfill + content;
  int rest = word_count - used;
  if (rest < 6)
    throw ArgumentError("vocabulary too small for synthetic pools: " +
                        std::to_string(word_count) + " words");
  int topic = rest / 3;
  int focus = rest - topic;
  int at = 0;
  p.ask_begin = at; at += ask; p.ask_end = at;
  p.answer_begin = at; at += answer; p.answer_end = at;
  p.pfill_begin = at; at += pfill; p.pfill_end = at;
  p.content_begin = at; at += content; p.content_end = at;
  p.topic_begin = at; at += topic; p.topic_end = at;
  p.focus_begin = at; at += focus; p.focus_end = at;
  return p;
}

// All unordered pairs {a, b} with begin <= a < b < end, shuffled.
inline std::vector<std::pair<int, int>> shuffled_pairs(int begin, int end,
                                                       std::mt19937_64& rng) {
  std::vector<std::pair<int, int>> pairs;
  for (int a = begin; a < end; ++a)
    for (int b = a + 1; b < end; ++b) pairs.emplace_back(a, b);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  return pairs;
}

inline int draw(std::mt19937_64& rng, int begin, int end) {
  return begin + static_cast<int>(rng() % static_cast<uint64_t>(end - begin));
}

}  // namespace synth_detail

// Deterministic planted-relevance corpus. Every turn has exactly one gold
// passage containing the session topic pair and the turn focus pair; queries
// carry the focus pair (plus the topic pair only on turn one, later turns
// depend on history for it); responses are a fixed template over the gold
// passage. Filler pools for queries and passages are disjoint, so under
// token-overlap scoring against the rewritten query the gold passage wins
// strictly.
inline SynthCorpus synth_corpus(const SynthSpec& spec) {
  if (spec.n_sessions < 1 || spec.turns_per_session < 1)
    throw ArgumentError("need at least one session and one turn per session");
  const int gold_count = spec.n_sessions * spec.turns_per_session;
  if (spec.collection_size < gold_count)
    throw ArgumentError("collection_size " + std::to_string(spec.collection_size) +
                        " below one gold passage per turn (" + std::to_string(gold_count) + ")");
  Tokenizer tok(spec.vocab_size);
  auto pools = synth_detail::plan_pools(tok.word_count());
  std::mt19937_64 rng(spec.seed);

  auto topic_pairs = synth_detail::shuffled_pairs(pools.topic_begin, pools.topic_end, rng);
  auto focus_pairs = synth_detail::shuffled_pairs(pools.focus_begin, pools.focus_end, rng);
  if (static_cast<int>(topic_pairs.size()) < spec.n_sessions)
    throw ArgumentError("topic pool supports at most " + std::to_string(topic_pairs.size()) +
                        " sessions");
  if (static_cast<int>(focus_pairs.size()) < spec.collection_size)
    throw ArgumentError("focus pool supports at most " + std::to_string(focus_pairs.size()) +
                        " passages");

  auto w = [&](int idx) { return Tokenizer::word(idx); };
  auto join = [](const std::vector<std::string>& parts) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
      if (i) out.push_back(' ');
      out += parts[i];
    }
    return out;
  };

  SynthCorpus out;
  const int T = spec.turns_per_session;

  // Passage texts: golds first (session-major), then distractors.
  std::vector<std::array<int, 3>> content_of(static_cast<size_t>(spec.collection_size));
  for (int p = 0; p < spec.collection_size; ++p) {
    const auto focus = focus_pairs[static_cast<size_t>(p)];
    const bool is_gold = p < gold_count;
    const auto topic = is_gold ? topic_pairs[static_cast<size_t>(p / T)]
                               : topic_pairs[static_cast<size_t>(
                                     synth_detail::draw(rng, 0, spec.n_sessions))];
    std::array<int, 3> content{};
    for (auto& c : content) c = synth_detail::draw(rng, pools.content_begin, pools.content_end);
    content_of[static_cast<size_t>(p)] = content;
    std::vector<std::string> words;
    words.push_back(w(synth_detail::draw(rng, pools.pfill_begin, pools.pfill_end)));
    words.push_back(w(topic.first));
    words.push_back(w(focus.first));
    words.push_back(w(content[0]));
    words.push_back(w(focus.second));
    words.push_back(w(content[1]));
    words.push_back(w(topic.second));
    words.push_back(w(content[2]));
    words.push_back(w(synth_detail::draw(rng, pools.pfill_begin, pools.pfill_end)));
    char pid[16];
    std::snprintf(pid, sizeof(pid), "p%05d", p);
    out.collection.add(Passage{pid, join(words)});
  }

  out.sessions.resize(static_cast<size_t>(spec.n_sessions));
  out.oracle_queries.resize(static_cast<size_t>(spec.n_sessions));
  for (int s = 0; s < spec.n_sessions; ++s) {
    Session& session = out.sessions[static_cast<size_t>(s)];
    char sid[16];
    std::snprintf(sid, sizeof(sid), "s%04d", s);
    session.sid = sid;
    const auto topic = topic_pairs[static_cast<size_t>(s)];
    for (int t = 0; t < T; ++t) {
      const int p = s * T + t;
      const auto focus = focus_pairs[static_cast<size_t>(p)];
      const auto& content = content_of[static_cast<size_t>(p)];
      const std::string ask1 = w(synth_detail::draw(rng, pools.ask_begin, pools.ask_end));
      const std::string ask2 = w(synth_detail::draw(rng, pools.ask_begin, pools.ask_end));
      std::vector<std::string> rewritten = {ask1,           w(topic.first), w(topic.second),
                                            w(focus.first), w(focus.second), ask2};
      std::vector<std::string> query =
          t == 0 ? rewritten
                 : std::vector<std::string>{ask1, w(focus.first), w(focus.second), ask2};
      // planted tokens first so the best-determined slots decode earliest;
      // the answer word closes the template
      const std::string ans = w(pools.answer_begin + p % (pools.answer_end - pools.answer_begin));
      std::vector<std::string> response = {w(topic.first),
                                           w(topic.second),
                                           w(focus.first),
                                           w(focus.second),
                                           w(content[0]),
                                           w(content[1]),
                                           w(content[2]),
                                           ans};
      SessionTurn turn;
      turn.query = join(query);
      turn.response = join(response);
      char pid[16];
      std::snprintf(pid, sizeof(pid), "p%05d", p);
      turn.gold_pids = {pid};
      turn.evidence = out.collection.at(pid).text;
      session.turns.push_back(std::move(turn));
      out.oracle_queries[static_cast<size_t>(s)].push_back(join(rewritten));
      out.adhoc.push_back(AdHocExample{join(rewritten), pid, {}});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Line-delimited record files
// ---------------------------------------------------------------------------

namespace io_detail {

inline json parse_line(const std::string& line, size_t line_no, const char* what) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw ParseError(std::string(what) + " line " + std::to_string(line_no) +
                     ": malformed record");
  return j;
}

inline const json& require_field(const json& j, const char* field, size_t line_no,
                                 const char* what) {
  auto it = j.find(field);
  if (it == j.end())
    throw ParseError(std::string(what) + " line " + std::to_string(line_no) +
                     ": missing required field '" + field + "'");
  return *it;
}

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream is(path);
  if (!is) throw ArgumentError("cannot open " + path.string());
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    fn(line, line_no);
  }
}

}  // namespace io_detail

inline void save_collection(const Collection& c, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ArgumentError("cannot write " + path.string());
  for (const Passage& p : c.passages)
    os << json{{"pid", p.pid}, {"text", p.text}}.dump() << "\n";
}

inline Collection load_collection(const std::filesystem::path& path) {
  Collection c;
  io_detail::for_each_line(path, [&](const std::string& line, size_t line_no) {
    json j = io_detail::parse_line(line, line_no, "collection");
    Passage p;
    p.pid = io_detail::require_field(j, "pid", line_no, "collection").get<std::string>();
    p.text = io_detail::require_field(j, "text", line_no, "collection").get<std::string>();
    try {
      c.add(std::move(p));
    } catch (const IntegrityError& e) {
      throw IntegrityError(std::string(e.what()) + " at collection line " +
                           std::to_string(line_no));
    }
  });
  return c;
}

inline void save_sessions(const std::vector<Session>& sessions,
                          const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ArgumentError("cannot write " + path.string());
  for (const Session& s : sessions) {
    json turns = json::array();
    for (const SessionTurn& t : s.turns) {
      json jt{{"q", t.query}, {"r", t.response}, {"gold_pids", t.gold_pids}};
      if (t.evidence) jt["evidence"] = *t.evidence;
      turns.push_back(std::move(jt));
    }
    os << json{{"sid", s.sid}, {"turns", turns}}.dump() << "\n";
  }
}

inline std::vector<Session> load_sessions(const std::filesystem::path& path) {
  std::vector<Session> sessions;
  io_detail::for_each_line(path, [&](const std::string& line, size_t line_no) {
    json j = io_detail::parse_line(line, line_no, "session");
    Session s;
    s.sid = io_detail::require_field(j, "sid", line_no, "session").get<std::string>();
    const json& turns = io_detail::require_field(j, "turns", line_no, "session");
    if (!turns.is_array())
      throw ParseError("session line " + std::to_string(line_no) + ": 'turns' must be an array");
    for (const json& jt : turns) {
      SessionTurn t;
      t.query = io_detail::require_field(jt, "q", line_no, "session").get<std::string>();
      t.response = io_detail::require_field(jt, "r", line_no, "session").get<std::string>();
      t.gold_pids = io_detail::require_field(jt, "gold_pids", line_no, "session")
                        .get<std::vector<std::string>>();
      if (auto it = jt.find("evidence"); it != jt.end()) t.evidence = it->get<std::string>();
      if (t.query.empty())
        throw ParseError("session line " + std::to_string(line_no) + ": empty query");
      s.turns.push_back(std::move(t));
    }
    sessions.push_back(std::move(s));
  });
  return sessions;
}

inline void save_adhoc(const std::vector<AdHocExample>& examples,
                       const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ArgumentError("cannot write " + path.string());
  for (const AdHocExample& e : examples) {
    json j{{"q", e.query}, {"pos_pid", e.pos_pid}};
    if (!e.neg_pids.empty()) j["neg_pids"] = e.neg_pids;
    os << j.dump() << "\n";
  }
}

inline std::vector<AdHocExample> load_adhoc(const std::filesystem::path& path) {
  std::vector<AdHocExample> out;
  io_detail::for_each_line(path, [&](const std::string& line, size_t line_no) {
    json j = io_detail::parse_line(line, line_no, "adhoc");
    AdHocExample e;
    e.query = io_detail::require_field(j, "q", line_no, "adhoc").get<std::string>();
    e.pos_pid = io_detail::require_field(j, "pos_pid", line_no, "adhoc").get<std::string>();
    if (auto it = j.find("neg_pids"); it != j.end())
      e.neg_pids = it->get<std::vector<std::string>>();
    out.push_back(std::move(e));
  });
  return out;
}

// Gold ids must resolve once a collection is attached.
inline void validate_sessions(const std::vector<Session>& sessions, const Collection& c) {
  for (const Session& s : sessions)
    for (size_t t = 0; t < s.turns.size(); ++t)
      for (const std::string& pid : s.turns[t].gold_pids)
        if (!c.contains(pid))
          throw IntegrityError("session " + s.sid + " turn " + std::to_string(t + 1) +
                               " references unknown passage '" + pid + "'");
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

// Deterministic stride interleave: each step the source with the largest
// accumulated credit (lowest index on ties) emits its next item, so every
// prefix stays within one item of the normalized ratios. Exhausted sources
// drop out and the remainder continues. The seed is accepted for interface
// stability; the schedule itself is fully deterministic.
inline std::vector<TrainingExample> mix_datasets(
    std::vector<std::vector<TrainingExample>> sources, const std::vector<double>& ratios,
    uint64_t /*seed*/ = 0) {
  if (sources.size() != ratios.size())
    throw ArgumentError("mix_datasets needs one ratio per source");
  double total = 0;
  for (double r : ratios) {
    if (r < 0) throw ArgumentError("mixing ratios must be nonnegative");
    total += r;
  }
  if (total <= 0) throw ArgumentError("at least one mixing ratio must be positive");

  const size_t n = sources.size();
  std::vector<size_t> cursor(n, 0);
  std::vector<double> credit(n, 0.0);
  std::vector<bool> active(n);
  for (size_t i = 0; i < n; ++i) active[i] = ratios[i] > 0 && !sources[i].empty();

  std::vector<TrainingExample> out;
  for (;;) {
    double ratio_sum = 0;
    for (size_t i = 0; i < n; ++i)
      if (active[i]) ratio_sum += ratios[i];
    if (ratio_sum <= 0) break;
    for (size_t i = 0; i < n; ++i)
      if (active[i]) credit[i] += ratios[i] / ratio_sum;
    size_t pick = n;
    for (size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      if (pick == n || credit[i] > credit[pick]) pick = i;
    }
    out.push_back(std::move(sources[pick][cursor[pick]]));
    credit[pick] -= 1.0;
    if (++cursor[pick] == sources[pick].size()) {
      active[pick] = false;
      credit[pick] = 0.0;
    }
  }
  return out;
}

}  // namespace retgen
