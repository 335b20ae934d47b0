#pragma once

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "retgen/corpus.hpp"
#include "retgen/errors.hpp"
#include "retgen/model.hpp"
#include "retgen/objectives.hpp"
#include "retgen/tokenizer.hpp"

namespace retgen {

struct ScoredPassage {
  std::string pid;
  double score = 0;
};

// Ordered (passage id, score) pairs: score descending, passage id ascending
// on ties, no duplicates, at most k entries.
struct RankedList {
  std::string qid;
  std::vector<ScoredPassage> entries;
};

// Exact-scan dense index: one embedding row per passage, aligned with the
// passage-id table, stamped with the fingerprint of the encoding checkpoint.
struct DenseIndex {
  uint64_t fingerprint = 0;
  int d_model = 0;
  std::vector<std::string> pids;
  std::vector<double> embeddings;  // row-major |C| x d_model

  size_t size() const { return pids.size(); }
  const double* row(size_t i) const { return embeddings.data() + i * static_cast<size_t>(d_model); }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ArgumentError("cannot write index: " + path.string());
    os.write("RGIDX001", 8);
    ckpt::write_pod(os, fingerprint);
    ckpt::write_pod(os, static_cast<int64_t>(d_model));
    ckpt::write_pod(os, static_cast<uint64_t>(pids.size()));
    for (const std::string& pid : pids) {
      ckpt::write_pod(os, static_cast<uint32_t>(pid.size()));
      os.write(pid.data(), static_cast<std::streamsize>(pid.size()));
    }
    os.write(reinterpret_cast<const char*>(embeddings.data()),
             static_cast<std::streamsize>(embeddings.size() * sizeof(double)));
    if (!os) throw ArgumentError("index write failed: " + path.string());
  }

  static DenseIndex load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ArgumentError("cannot open index: " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, "RGIDX001", 8) != 0)
      throw ParseError("bad index magic in " + path.string());
    DenseIndex idx;
    idx.fingerprint = ckpt::read_pod<uint64_t>(is, "fingerprint");
    idx.d_model = static_cast<int>(ckpt::read_pod<int64_t>(is, "d_model"));
    const uint64_t n = ckpt::read_pod<uint64_t>(is, "row count");
    idx.pids.resize(n);
    for (auto& pid : idx.pids) {
      const uint32_t len = ckpt::read_pod<uint32_t>(is, "pid length");
      pid.assign(len, '\0');
      if (!is.read(pid.data(), len)) throw ParseError("index truncated in pid table");
    }
    idx.embeddings.resize(n * static_cast<size_t>(idx.d_model));
    if (!is.read(reinterpret_cast<char*>(idx.embeddings.data()),
                 static_cast<std::streamsize>(idx.embeddings.size() * sizeof(double))))
      throw ParseError("index truncated in embedding matrix");
    return idx;
  }
};

// Encodes every passage through the sequence embedding, tail-truncated to
// the passage budget.
inline DenseIndex build_index(const Collection& collection, const ModelState& state,
                              const Tokenizer& tok, int passage_budget) {
  if (collection.size() == 0) throw ArgumentError("cannot index an empty collection");
  DenseIndex idx;
  idx.fingerprint = state.fingerprint();
  idx.d_model = state.config.d_model;
  idx.pids.reserve(collection.size());
  idx.embeddings.reserve(collection.size() * static_cast<size_t>(idx.d_model));
  for (const Passage& p : collection.passages) {
    idx.pids.push_back(p.pid);
    Tensor emb =
        sequence_embedding(state, truncate_tail(tok.encode(p.text), passage_budget));
    idx.embeddings.insert(idx.embeddings.end(), emb.values.begin(), emb.values.end());
  }
  return idx;
}

inline void check_index_fingerprint(const DenseIndex& index, const ModelState& state) {
  if (index.fingerprint != state.fingerprint())
    throw IntegrityError("index fingerprint does not match the checkpoint; rebuild the index");
}

// Exact top-k by dot product against a query vector; ties break by
// ascending passage id.
inline RankedList search_vector(const DenseIndex& index, const std::string& qid,
                                const std::vector<double>& query, int k) {
  if (k < 1) throw ArgumentError("k must be at least 1");
  if (static_cast<int>(query.size()) != index.d_model)
    throw DimensionError("query vector length " + std::to_string(query.size()) +
                         " does not match index dimension " + std::to_string(index.d_model));
  std::vector<double> scores(index.size());
  for (size_t i = 0; i < index.size(); ++i)
    scores[i] = dot(query.data(), index.row(i), index.d_model);
  std::vector<int> order(index.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  auto better = [&](int a, int b) {
    const size_t ia = static_cast<size_t>(a), ib = static_cast<size_t>(b);
    if (scores[ia] != scores[ib]) return scores[ia] > scores[ib];
    return index.pids[ia] < index.pids[ib];
  };
  const size_t take = std::min(static_cast<size_t>(k), index.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    better);
  RankedList out;
  out.qid = qid;
  out.entries.reserve(take);
  for (size_t i = 0; i < take; ++i) {
    const size_t row = static_cast<size_t>(order[i]);
    out.entries.push_back(ScoredPassage{index.pids[row], scores[row]});
  }
  return out;
}

inline RankedList search(const DenseIndex& index, const ModelState& state, const std::string& qid,
                         const QueryContext& ctx, int k) {
  check_index_fingerprint(index, state);
  return search_vector(index, qid, sequence_embedding(state, ctx.tokens).values, k);
}

// Standard six-field run format: qid Q0 pid rank score tag.
inline void write_run_file(const std::vector<RankedList>& lists, const std::string& tag,
                           const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ArgumentError("cannot write run file: " + path.string());
  for (const RankedList& list : lists) {
    int rank = 1;
    for (const ScoredPassage& sp : list.entries) {
      char score[32];
      std::snprintf(score, sizeof(score), "%.9g", sp.score);
      os << list.qid << " Q0 " << sp.pid << " " << rank++ << " " << score << " " << tag << "\n";
    }
  }
}

inline std::vector<RankedList> read_run_file(const std::filesystem::path& path) {
  std::vector<RankedList> lists;
  std::map<std::string, size_t> by_qid;
  io_detail::for_each_line(path, [&](const std::string& line, size_t line_no) {
    std::istringstream ss(line);
    std::string qid, q0, pid, tag;
    int rank;
    double score;
    if (!(ss >> qid >> q0 >> pid >> rank >> score >> tag))
      throw ParseError("run file line " + std::to_string(line_no) + ": expected six fields");
    auto [it, inserted] = by_qid.emplace(qid, lists.size());
    if (inserted) lists.push_back(RankedList{qid, {}});
    lists[it->second].entries.push_back(ScoredPassage{pid, score});
  });
  return lists;
}

}  // namespace retgen
