#pragma once

#include <cmath>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "retgen/corpus.hpp"
#include "retgen/errors.hpp"
#include "retgen/model.hpp"
#include "retgen/tokenizer.hpp"

namespace retgen {

struct LossConfig {
  double alpha = 0.5;        // weight of the context-identification term
  bool enable_cii = true;
  double learning_rate = 0.1;
  int batch_size = 32;
  int epochs = 1;
  int grad_accum_steps = 1;
  uint64_t seed = 0;
  double temperature = 1.0;  // similarity is a raw dot product by default

  void validate() const {
    if (alpha < 0) throw ConfigError("alpha must be nonnegative");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for in-batch negatives");
    if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
    if (epochs < 0) throw ConfigError("epochs must be nonnegative");
    if (grad_accum_steps < 1) throw ConfigError("grad_accum_steps must be at least 1");
    if (temperature <= 0) throw ConfigError("temperature must be positive");
  }
};

struct BatchBudgets {
  int query = 64;
  int passage = 16;
  int response = 12;
};

// One tokenized training item. The format decides which field feeds which
// loss: ad-hoc pairs use the passage as generation target, instructional
// conversations use the response as retrieval positive (the pre-mitigation
// convention), conversational search items carry both.
struct BatchItem {
  TrainingExample::Format format = TrainingExample::Format::adhoc;
  QueryContext query;
  std::vector<int> positive_passage;  // empty for instruct items
  std::vector<int> gold_response;     // empty for adhoc items

  const std::vector<int>& retrieval_positive() const {
    if (format == TrainingExample::Format::instruct) return gold_response;
    return positive_passage;
  }
  const std::vector<int>& generation_target() const {
    if (format == TrainingExample::Format::adhoc) return positive_passage;
    return gold_response;
  }
};

using Batch = std::vector<BatchItem>;

inline std::vector<int> truncate_tail(std::vector<int> ids, int budget) {
  if (static_cast<int>(ids.size()) > budget) ids.resize(static_cast<size_t>(budget));
  return ids;
}

inline BatchItem make_batch_item(const TrainingExample& ex, const Collection& collection,
                                 const Tokenizer& tok, const BatchBudgets& budgets) {
  BatchItem item;
  item.format = ex.format;
  if (ex.format == TrainingExample::Format::adhoc) {
    Session single;
    single.sid = "adhoc";
    single.turns.push_back(SessionTurn{ex.adhoc.query, "", {}, std::nullopt});
    item.query = compose_session_query(single, 1, tok, budgets.query);
    item.positive_passage =
        truncate_tail(tok.encode(collection.at(ex.adhoc.pos_pid).text), budgets.passage);
  } else {
    item.query = compose_session_query(*ex.session, ex.turn_index, tok, budgets.query);
    const SessionTurn& turn = ex.session->turn(ex.turn_index);
    item.gold_response = truncate_tail(tok.encode(turn.response), budgets.response);
    if (ex.format == TrainingExample::Format::conv_search)
      item.positive_passage =
          truncate_tail(tok.encode(collection.at(turn.gold_pids.at(0)).text), budgets.passage);
  }
  return item;
}

// ---------------------------------------------------------------------------
// Loss graphs
// ---------------------------------------------------------------------------

namespace loss_detail {

inline std::vector<int> iota_targets(int n) {
  std::vector<int> t(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) t[static_cast<size_t>(i)] = i;
  return t;
}

// Anchor input for the context-identification term: the session query
// combined with its positive passage, behind a passage marker. This is also
// the retrieval-augmented prompt layout at inference.
inline std::vector<int> cii_anchor_tokens(const BatchItem& item) {
  std::vector<int> ids = item.query.tokens;
  ids.push_back(Tokenizer::kPassageMarker);
  ids.insert(ids.end(), item.positive_passage.begin(), item.positive_passage.end());
  return ids;
}

}  // namespace loss_detail

// InfoNCE over in-batch negatives: each item's composed query against every
// item's retrieval positive, dot-product similarity, diagonal targets.
inline Var retrieval_loss_var(Tape& tape, const ModelVars& vars, const ModelConfig& cfg,
                              const Batch& batch, double temperature = 1.0) {
  if (batch.size() < 2)
    throw PreconditionError("retrieval loss needs a batch of at least 2 for in-batch negatives");
  std::vector<Var> queries, positives;
  for (const BatchItem& item : batch) {
    if (item.retrieval_positive().empty())
      throw PreconditionError("batch item lacks a retrieval positive");
    queries.push_back(sequence_embedding_var(tape, vars, cfg, item.query.tokens));
    positives.push_back(sequence_embedding_var(tape, vars, cfg, item.retrieval_positive()));
  }
  Var scores = tape.matmul_nt(tape.stack_rows(queries), tape.stack_rows(positives));
  if (temperature != 1.0) scores = tape.scale(scores, 1.0 / temperature);
  return tape.cross_entropy(scores, loss_detail::iota_targets(static_cast<int>(batch.size())));
}

// Teacher-forced token-mean negative log-likelihood of each item's target
// under the session mask, averaged over items. Items with an empty target
// are skipped.
inline Var generation_loss_var(Tape& tape, const ModelVars& vars, const ModelConfig& cfg,
                               const Batch& batch) {
  std::vector<Var> item_losses;
  for (const BatchItem& item : batch) {
    const std::vector<int>& target = item.generation_target();
    if (target.empty()) continue;
    std::vector<int> ids = item.query.tokens;
    ids.push_back(cfg.eos_token_id);
    const int m = static_cast<int>(ids.size());
    const int len = static_cast<int>(target.size());
    ids.insert(ids.end(), target.begin(), target.end());
    if (static_cast<int>(ids.size()) > cfg.max_seq_len)
      throw TruncationError("generation item of " + std::to_string(ids.size()) +
                            " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    Var logits = next_token_logits_var(tape, vars, cfg, ids, build_session_mask(m, len));
    Var rows = tape.slice_rows(logits, m - 1, len);
    item_losses.push_back(tape.cross_entropy(rows, target));
  }
  if (item_losses.empty())
    throw PreconditionError("generation loss needs at least one item with a nonempty target");
  return tape.mean_scalars(item_losses);
}

// InfoNCE over responses: anchor is the embedding of query-plus-positive-
// passage, the positive is the item's gold response, negatives are the other
// conversational-search items' responses. Returns nothing when the batch has
// no conversational-search items (the inactive marker).
inline std::optional<Var> cii_loss_var(Tape& tape, const ModelVars& vars, const ModelConfig& cfg,
                                       const Batch& batch, double temperature = 1.0) {
  std::vector<Var> anchors, responses;
  for (const BatchItem& item : batch) {
    if (item.format != TrainingExample::Format::conv_search) continue;
    anchors.push_back(
        sequence_embedding_var(tape, vars, cfg, loss_detail::cii_anchor_tokens(item)));
    responses.push_back(sequence_embedding_var(tape, vars, cfg, item.gold_response));
  }
  if (anchors.empty()) return std::nullopt;
  Var scores = tape.matmul_nt(tape.stack_rows(anchors), tape.stack_rows(responses));
  if (temperature != 1.0) scores = tape.scale(scores, 1.0 / temperature);
  return tape.cross_entropy(scores, loss_detail::iota_targets(static_cast<int>(anchors.size())));
}

inline double retrieval_loss(const ModelState& state, const Batch& batch,
                             double temperature = 1.0) {
  Tape tape;
  ModelVars vars = ModelVars::bind(tape, state);
  return tape.value(retrieval_loss_var(tape, vars, state.config, batch, temperature)).item();
}

inline double generation_loss(const ModelState& state, const Batch& batch) {
  Tape tape;
  ModelVars vars = ModelVars::bind(tape, state);
  return tape.value(generation_loss_var(tape, vars, state.config, batch)).item();
}

// `active` reports the inactive marker: false means no conversational-search
// item was present and the returned value is exactly zero.
inline double cii_loss(const ModelState& state, const Batch& batch, bool* active = nullptr,
                       double temperature = 1.0) {
  Tape tape;
  ModelVars vars = ModelVars::bind(tape, state);
  auto v = cii_loss_var(tape, vars, state.config, batch, temperature);
  if (active) *active = v.has_value();
  return v ? tape.value(*v).item() : 0.0;
}

struct LossParts {
  double l_r = 0;
  double l_g = 0;
  double l_cii = 0;
  double total = 0;
  bool cii_active = false;
};

inline double combine_loss(double l_r, double l_g, double l_cii, const LossConfig& cfg) {
  if (!cfg.enable_cii || cfg.alpha == 0.0) return l_r + l_g;
  return l_r + l_g + cfg.alpha * l_cii;
}

struct JointLossGraph {
  Var total;
  LossParts parts;
};

// Joint objective: total = l_r + l_g + alpha * l_cii. The CII term is built
// only when it can contribute (enabled, alpha nonzero, conversational-search
// items present); otherwise the total is bit-exactly l_r + l_g and l_cii is
// reported as zero, which keeps the term-removal ablation a pure removal.
inline JointLossGraph joint_loss_var(Tape& tape, const ModelVars& vars, const ModelConfig& cfg,
                                     const Batch& batch, const LossConfig& loss_cfg) {
  loss_cfg.validate();
  JointLossGraph g;
  Var l_r = retrieval_loss_var(tape, vars, cfg, batch, loss_cfg.temperature);
  Var l_g = generation_loss_var(tape, vars, cfg, batch);
  g.parts.l_r = tape.value(l_r).item();
  g.parts.l_g = tape.value(l_g).item();
  g.total = tape.add(l_r, l_g);
  if (loss_cfg.enable_cii && loss_cfg.alpha != 0.0) {
    auto cii = cii_loss_var(tape, vars, cfg, batch, loss_cfg.temperature);
    if (cii) {
      g.parts.cii_active = true;
      g.parts.l_cii = tape.value(*cii).item();
      g.total = tape.add(g.total, tape.scale(*cii, loss_cfg.alpha));
    }
  }
  g.parts.total = tape.value(g.total).item();
  return g;
}

inline LossParts joint_loss(const ModelState& state, const Batch& batch,
                            const LossConfig& cfg) {
  Tape tape;
  ModelVars vars = ModelVars::bind(tape, state);
  return joint_loss_var(tape, vars, state.config, batch, cfg).parts;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepLog {
  int step = 0;
  double l_r = 0, l_g = 0, l_cii = 0, total = 0;
};

struct TrainResult {
  std::vector<StepLog> log;
  int conv_search_consumed = 0;
  bool ddm_active = false;
};

inline void write_loss_log(const std::vector<StepLog>& log, std::ostream& os) {
  for (const StepLog& s : log)
    os << nlohmann::json{{"step", s.step},
                         {"l_r", s.l_r},
                         {"l_g", s.l_g},
                         {"l_cii", s.l_cii},
                         {"total", s.total}}
              .dump()
       << "\n";
}

// Plain stochastic gradient descent over the joint objective with seeded
// epoch shuffling and gradient accumulation. Deterministic for a fixed
// config and seed; partial trailing batches are dropped so every step sees
// the full in-batch negative count.
inline TrainResult train(ModelState& model, const std::vector<TrainingExample>& stream,
                         const Collection& collection, const Tokenizer& tok,
                         const LossConfig& cfg, const BatchBudgets& budgets) {
  cfg.validate();
  if (stream.empty()) throw PreconditionError("training stream is empty");
  TrainResult result;
  if (cfg.epochs == 0) return result;

  std::vector<Tensor*> params;
  model.for_each_param([&](const std::string&, Tensor& t) { params.push_back(&t); });
  std::vector<Tensor> accum;
  accum.reserve(params.size());
  for (Tensor* p : params) accum.push_back(Tensor::zeros(p->shape));
  int accum_count = 0;

  auto apply_update = [&]() {
    if (accum_count == 0) return;
    const double scale = cfg.learning_rate / accum_count;
    for (size_t i = 0; i < params.size(); ++i) {
      for (size_t e = 0; e < params[i]->values.size(); ++e) {
        params[i]->values[e] -= scale * accum[i].values[e];
        accum[i].values[e] = 0.0;
      }
    }
    accum_count = 0;
  };

  std::mt19937_64 shuffle_rng(cfg.seed);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(stream.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const size_t n_batches = stream.size() / static_cast<size_t>(cfg.batch_size);
    for (size_t b = 0; b < n_batches; ++b) {
      Batch batch;
      batch.reserve(static_cast<size_t>(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i) {
        const TrainingExample& ex = stream[order[b * cfg.batch_size + i]];
        if (ex.format == TrainingExample::Format::conv_search) ++result.conv_search_consumed;
        batch.push_back(make_batch_item(ex, collection, tok, budgets));
      }
      ++step;
      Tape tape;
      ModelVars vars = ModelVars::bind(tape, model);
      JointLossGraph g;
      try {
        g = joint_loss_var(tape, vars, model.config, batch, cfg);
      } catch (const NumericError& e) {
        throw DivergenceError("non-finite values while computing losses at step " +
                              std::to_string(step) + ": " + e.what());
      }
      for (auto [value, name] : {std::pair{g.parts.l_r, "l_r"},
                                 std::pair{g.parts.l_g, "l_g"},
                                 std::pair{g.parts.l_cii, "l_cii"}}) {
        if (!std::isfinite(value))
          throw DivergenceError("non-finite " + std::string(name) + " at step " +
                                std::to_string(step));
      }
      tape.backward(g.total);
      for (size_t i = 0; i < params.size(); ++i) {
        const Tensor& grad = tape.grad(vars.flat[i]);
        for (size_t e = 0; e < grad.values.size(); ++e) accum[i].values[e] += grad.values[e];
      }
      ++accum_count;
      if (accum_count == cfg.grad_accum_steps) apply_update();
      result.log.push_back(
          StepLog{step, g.parts.l_r, g.parts.l_g, g.parts.l_cii, g.parts.total});
    }
  }
  apply_update();
  result.ddm_active = result.conv_search_consumed > 0;
  return result;
}

}  // namespace retgen
