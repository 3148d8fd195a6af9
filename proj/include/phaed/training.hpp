#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "phaed/corpus.hpp"
#include "phaed/decoder.hpp"
#include "phaed/encoder.hpp"
#include "phaed/model.hpp"
#include "phaed/vocab.hpp"

namespace phaed {

/// Token-id view of one conversation, possibly padded. Lengths give each
/// frame's real token count; padded tails hold [PAD].
struct ConversationTensors {
  std::vector<TokenIds> queries;
  std::vector<TokenIds> responses;
  std::vector<Index> query_lens;
  std::vector<Index> response_lens;

  std::size_t turn_count() const { return queries.size(); }
};

inline ConversationTensors tensors_from_conversation(const Conversation& conv) {
  ConversationTensors t;
  for (const auto& turn : conv.turns) {
    if (turn.query.turn != turn.response.turn)
      throw ContractViolation("query/response turn indices misaligned");
    t.queries.push_back(turn.query.ids);
    t.responses.push_back(turn.response.ids);
    t.query_lens.push_back(static_cast<Index>(turn.query.ids.size()));
    t.response_lens.push_back(static_cast<Index>(turn.response.ids.size()));
  }
  return t;
}

/// Row `row` of a batch, keeping the padded widths. Valid turns form a
/// prefix because batches align conversations by turn index.
inline ConversationTensors tensors_from_batch_row(const Batch& batch, std::size_t row) {
  ConversationTensors t;
  for (const auto& turn : batch.turns) {
    if (!turn.valid[row]) break;
    auto take = [&](const PaddedUtterances& padded, std::vector<TokenIds>& ids,
                    std::vector<Index>& lens) {
      TokenIds frame(static_cast<std::size_t>(padded.ids.cols()));
      for (Index c = 0; c < padded.ids.cols(); ++c)
        frame[static_cast<std::size_t>(c)] = padded.ids(static_cast<Index>(row), c);
      ids.push_back(std::move(frame));
      lens.push_back(padded.lengths[row]);
    };
    take(turn.queries, t.queries, t.query_lens);
    take(turn.responses, t.responses, t.response_lens);
  }
  return t;
}

template <typename S>
struct TeacherForced {
  EncodedConversation<S> enc;
  /// Per turn: log-probability rows for positions 0..len-2, each predicting
  /// the next frame token.
  std::vector<ad::VarId> pred_logp;
};

/// The states each turn contributed to the response memory: one vector of
/// per-layer matrices per turn, in turn order.
template <typename S>
using MemorySchedule = std::vector<std::vector<Mat<S>>>;

/// Encodes all queries, then runs the decoder over every gold response frame
/// in turn order, threading the response memory. The [SOU] seed is input
/// only; every following frame token (role token, content, [EOU]) is a
/// prediction target.
///
/// The analytic gradient treats cached states as constants, so the loss seen
/// by a finite-difference probe must do the same: `memory_override` feeds the
/// memory from a previously recorded schedule instead of this pass's own
/// states, and `record` captures a pass's states to build such a schedule.
template <typename S>
TeacherForced<S> teacher_forced_forward(ad::Tape<S>& tape, const ModelP<ad::VarId>& m,
                                        const ModelConfig& cfg, const ConversationTensors& conv,
                                        bool retain_attention = false,
                                        const MemorySchedule<S>* memory_override = nullptr,
                                        MemorySchedule<S>* record = nullptr) {
  if (conv.queries.size() != conv.responses.size() || conv.queries.empty())
    throw ContractViolation("conversation needs aligned, non-empty query/response lists");
  if (memory_override && memory_override->size() != conv.responses.size())
    throw ContractViolation("memory schedule does not cover every turn");

  TeacherForced<S> tf;
  tf.enc = encode_queries<S>(tape, m, cfg, conv.queries, conv.query_lens, retain_attention);

  ResponseMemory<S> memory(cfg.layers, cfg.memory_len());
  for (std::size_t t = 0; t < conv.responses.size(); ++t) {
    const TokenIds& resp = conv.responses[t];
    const Index valid = conv.response_lens[t];
    ad::VarId b =
        input_representation(tape, m.emb, cfg, resp, static_cast<int>(t) + 1);
    DecoderForward<S> dec = decoder_forward(tape, m, cfg, b, valid, memory, tf.enc.s_hat[t],
                                            tf.enc.query_lens[t]);
    ad::VarId logits = output_logits(tape, m, dec.h_top);
    const Index len = static_cast<Index>(resp.size());
    ad::VarId pred = ad::slice_rows(tape, logits, 0, len - 1);
    tf.pred_logp.push_back(ad::log_softmax_rows(tape, pred));
    if (record) record->push_back(dec.memory_states);
    memory.append(memory_override ? (*memory_override)[t] : std::move(dec.memory_states));
  }
  return tf;
}

template <typename S>
struct TurnLoss {
  S nll = S(0);
  Index predicted_tokens = 0;
};

template <typename S>
struct ConversationLoss {
  ad::VarId total_node = ad::kNoVar;  // 1x1, differentiable
  S total = S(0);                     // summed negative log-likelihood
  Index predicted_tokens = 0;
  std::vector<TurnLoss<S>> turns;
};

/// Summed NLL over all predicted positions of all turns, teacher-forced.
/// Padded positions carry zero weight, so the padded and exact-length forms
/// of the same conversation agree.
template <typename S>
ConversationLoss<S> conversation_loss(ad::Tape<S>& tape, const ModelP<ad::VarId>& m,
                                      const ModelConfig& cfg, const ConversationTensors& conv,
                                      const MemorySchedule<S>* memory_override = nullptr,
                                      MemorySchedule<S>* record = nullptr) {
  TeacherForced<S> tf =
      teacher_forced_forward(tape, m, cfg, conv, false, memory_override, record);
  ConversationLoss<S> out;
  for (std::size_t t = 0; t < conv.responses.size(); ++t) {
    const TokenIds& resp = conv.responses[t];
    const Index valid = conv.response_lens[t];
    const Index rows = static_cast<Index>(resp.size()) - 1;
    std::vector<Index> targets(static_cast<std::size_t>(rows), 0);
    std::vector<S> weights(static_cast<std::size_t>(rows), S(0));
    for (Index i = 0; i + 1 < valid; ++i) {
      targets[static_cast<std::size_t>(i)] = static_cast<Index>(resp[static_cast<std::size_t>(i) + 1]);
      weights[static_cast<std::size_t>(i)] = S(1);
    }
    ad::VarId nll = ad::nll_of_rows(tape, tf.pred_logp[t], std::move(targets), std::move(weights));
    out.turns.push_back({tape.value(nll)(0, 0), valid - 1});
    out.predicted_tokens += valid - 1;
    out.total_node = out.total_node == ad::kNoVar ? nll : ad::add(tape, out.total_node, nll);
  }
  out.total = tape.value(out.total_node)(0, 0);
  return out;
}

/// Teacher-forced gold-token log-probabilities with the metadata perplexity
/// needs (speaker-token targets are flagged for exclusion).
struct TokenScore {
  double logp = 0;
  TokenId token = 0;
  bool is_speaker = false;
};

template <typename S>
std::vector<TokenScore> score_conversation(const PhaedModel<S>& model,
                                           const ConversationTensors& conv) {
  ad::Tape<S> tape;
  ModelP<ad::VarId> m = model.lift(tape, false);
  TeacherForced<S> tf = teacher_forced_forward(tape, m, model.config(), conv);
  std::vector<TokenScore> scores;
  for (std::size_t t = 0; t < conv.responses.size(); ++t) {
    const auto& lp = tape.value(tf.pred_logp[t]);
    const TokenIds& resp = conv.responses[t];
    for (Index i = 0; i + 1 < conv.response_lens[t]; ++i) {
      TokenId target = resp[static_cast<std::size_t>(i) + 1];
      scores.push_back({static_cast<double>(lp(i, target)), target,
                        Vocabulary::is_speaker_token(target)});
    }
  }
  return scores;
}

template <typename S>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const TrainingConfig& cfg) : cfg_(cfg) {}

  /// grads must be in model traversal order (as produced by lift + backward).
  void step(PhaedModel<S>& model, const std::vector<std::pair<std::string, Mat<S>>>& grads) {
    if (slots_.empty()) {
      model.for_each([&](const std::string& name, const Mat<S>& p) {
        slots_.push_back({name, {Mat<S>::Zero(p.rows(), p.cols()), Mat<S>::Zero(p.rows(), p.cols())}});
      });
    }
    if (grads.size() != slots_.size())
      throw ContractViolation("gradient list does not match parameter registry");
    ++step_count_;
    const S b1 = static_cast<S>(cfg_.adam_beta1);
    const S b2 = static_cast<S>(cfg_.adam_beta2);
    const S eps = static_cast<S>(cfg_.adam_eps);
    const S lr = static_cast<S>(cfg_.learning_rate);
    const S corr1 = S(1) - std::pow(b1, static_cast<S>(step_count_));
    const S corr2 = S(1) - std::pow(b2, static_cast<S>(step_count_));

    std::size_t i = 0;
    model.for_each([&](const std::string& name, Mat<S>& p) {
      if (grads[i].first != name)
        throw ContractViolation("gradient order mismatch at " + name);
      const Mat<S>& g = grads[i].second;
      auto& slot = slots_[i].second;
      slot.m = b1 * slot.m + (S(1) - b1) * g;
      slot.v = (b2 * slot.v.array() + (S(1) - b2) * g.array().square()).matrix();
      Mat<S> m_hat = slot.m / corr1;
      Mat<S> v_hat = slot.v / corr2;
      p.array() -= lr * m_hat.array() / (v_hat.array().sqrt() + eps);
      ++i;
    });
  }

  Index step_count() const { return step_count_; }

  struct Slot {
    Mat<S> m, v;
  };
  const std::vector<std::pair<std::string, Slot>>& slots() const { return slots_; }
  void restore(std::vector<std::pair<std::string, Slot>> slots, Index step_count) {
    slots_ = std::move(slots);
    step_count_ = step_count;
  }

 private:
  TrainingConfig cfg_;
  std::vector<std::pair<std::string, Slot>> slots_;
  Index step_count_ = 0;
};

template <typename S>
struct StepResult {
  double loss_sum = 0;       // Eq.-style summed NLL over the batch
  Index tokens = 0;          // predicted positions
  double loss_per_token = 0; // optimized objective
};

/// One optimizer step on the batch-mean per-token NLL. Conversations in the
/// batch run on their padded tensors; masks keep padding out of attention and
/// loss.
template <typename S>
StepResult<S> train_step(PhaedModel<S>& model, AdamOptimizer<S>& opt, const Batch& batch,
                         Index step_index, Index batch_index) {
  ad::Tape<S> tape;
  std::vector<std::pair<std::string, ad::VarId>> names;
  ModelP<ad::VarId> m = model.lift(tape, true, &names);

  ad::VarId total = ad::kNoVar;
  Index tokens = 0;
  for (std::size_t row = 0; row < batch.conv_index.size(); ++row) {
    ConversationTensors conv = tensors_from_batch_row(batch, row);
    if (conv.turn_count() == 0) continue;
    ConversationLoss<S> loss = conversation_loss(tape, m, model.config(), conv);
    tokens += loss.predicted_tokens;
    total = total == ad::kNoVar ? loss.total_node : ad::add(tape, total, loss.total_node);
  }
  if (total == ad::kNoVar || tokens == 0)
    throw ContractViolation("batch contains no predicted tokens");

  StepResult<S> result;
  result.loss_sum = static_cast<double>(tape.value(total)(0, 0));
  result.tokens = tokens;
  result.loss_per_token = result.loss_sum / static_cast<double>(tokens);
  if (!std::isfinite(result.loss_sum))
    throw TrainError("non-finite loss at step " + std::to_string(step_index) + " (batch " +
                     std::to_string(batch_index) + ")");

  ad::VarId objective = ad::scale(tape, total, S(1) / static_cast<S>(tokens));
  tape.backward(objective);

  std::vector<std::pair<std::string, Mat<S>>> grads;
  grads.reserve(names.size());
  for (const auto& [name, id] : names) grads.emplace_back(name, tape.grad_or_zero(id));
  opt.step(model, grads);
  return result;
}

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0;
  double max_analytic = 0;  // largest |analytic| in the group, for context
};

/// Central finite differences against the tape gradients for every parameter
/// group, on one conversation. Meant for float64 at desk scale.
///
/// The probe loss keeps the response memory at the base model's contents:
/// training truncates the gradient there, so the derivative being verified is
/// the partial one with cached states held fixed.
template <typename S>
std::vector<GradCheckGroup> gradient_check(PhaedModel<S>& model,
                                           const ConversationTensors& conv) {
  std::vector<std::pair<std::string, Mat<S>>> analytic;
  MemorySchedule<S> base_memory;
  {
    ad::Tape<S> tape;
    std::vector<std::pair<std::string, ad::VarId>> names;
    ModelP<ad::VarId> m = model.lift(tape, true, &names);
    ConversationLoss<S> loss =
        conversation_loss<S>(tape, m, model.config(), conv, nullptr, &base_memory);
    tape.backward(loss.total_node);
    for (const auto& [name, id] : names) analytic.emplace_back(name, tape.grad_or_zero(id));
  }

  auto loss_value = [&]() {
    ad::Tape<S> tape;
    ModelP<ad::VarId> m = model.lift(tape, false);
    return conversation_loss(tape, m, model.config(), conv, &base_memory).total;
  };

  const S base_eps = std::cbrt(std::numeric_limits<S>::epsilon());
  const S floor = S(1e-4);
  std::vector<GradCheckGroup> report;
  std::size_t group_idx = 0;
  model.for_each([&](const std::string& name, Mat<S>& p) {
    const Mat<S>& g = analytic[group_idx].second;
    GradCheckGroup group{name, 0, 0};
    for (Index i = 0; i < p.rows(); ++i) {
      for (Index j = 0; j < p.cols(); ++j) {
        S saved = p(i, j);
        S h = base_eps * std::max(S(1), std::abs(saved));
        p(i, j) = saved + h;
        S up = loss_value();
        p(i, j) = saved - h;
        S down = loss_value();
        p(i, j) = saved;
        S numeric = (up - down) / (2 * h);
        S a = g(i, j);
        S denom = std::max({std::abs(a), std::abs(numeric), floor});
        group.max_rel_err =
            std::max(group.max_rel_err, static_cast<double>(std::abs(a - numeric) / denom));
        group.max_analytic = std::max(group.max_analytic, static_cast<double>(std::abs(a)));
      }
    }
    report.push_back(std::move(group));
    ++group_idx;
  });
  return report;
}

}  // namespace phaed
