#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "phaed/training.hpp"

using namespace phaed;

namespace {

ModelConfig train_cfg() {
  ModelConfig cfg;
  cfg.d_s = 4;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.d_ff = 6;
  cfg.r_max = 2;
  cfg.c_max = 2;
  cfg.vocab_size = 12;
  cfg.t_max = 8;
  cfg.i_max = 12;
  cfg.precision = Precision::kFloat64;
  return cfg;
}

Utterance utter(Role role, TokenIds content, int turn) {
  TokenIds frame = {Vocabulary::kSou,
                    role == Role::kQuery ? Vocabulary::kSpeakerQ : Vocabulary::kSpeakerR};
  frame.insert(frame.end(), content.begin(), content.end());
  frame.push_back(Vocabulary::kEou);
  return {role, std::move(frame), turn};
}

Conversation make_conv(const std::vector<std::pair<TokenIds, TokenIds>>& turns) {
  Conversation conv;
  int t = 1;
  for (const auto& [q, r] : turns) {
    conv.turns.push_back({utter(Role::kQuery, q, t), utter(Role::kResponse, r, t)});
    ++t;
  }
  return conv;
}

const Conversation kConvA = make_conv({{{6}, {7}}, {{8, 9}, {10, 6}}});
const Conversation kConvB = make_conv({{{11}, {7, 8, 9}}});

TrainingConfig fast_train() {
  TrainingConfig t;
  t.learning_rate = 0.01;
  return t;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("conversation tensors mirror the encoded turns") {
    ConversationTensors t = tensors_from_conversation(kConvA);
    REQUIRE(t.turn_count() == 2);
    CHECK(t.queries[0] == TokenIds{2, 4, 6, 3});
    CHECK(t.responses[1] == TokenIds{2, 5, 10, 6, 3});
    CHECK(t.query_lens == std::vector<Index>{4, 5});
    CHECK(t.response_lens == std::vector<Index>{4, 5});
  }

  TEST_CASE("an all-zero model pays log-vocabulary per predicted token") {
    ModelConfig cfg = train_cfg();
    PhaedModel<double> model(cfg);
    ad::Tape<double> tape;
    ModelP<ad::VarId> m = model.lift(tape, false);
    ConversationLoss<double> loss =
        conversation_loss(tape, m, cfg, tensors_from_conversation(kConvA));
    CHECK(loss.predicted_tokens == 3 + 4);
    CHECK(loss.total ==
          doctest::Approx(7.0 * std::log(12.0)).epsilon(1e-12));
  }

  TEST_CASE("per-turn losses decompose the total") {
    ModelConfig cfg = train_cfg();
    PhaedModel<double> model(cfg);
    model.init_params(17);
    ad::Tape<double> tape;
    ModelP<ad::VarId> m = model.lift(tape, false);
    ConversationLoss<double> loss =
        conversation_loss(tape, m, cfg, tensors_from_conversation(kConvA));
    REQUIRE(loss.turns.size() == 2);
    CHECK(loss.turns[0].nll + loss.turns[1].nll == loss.total);
    CHECK(loss.turns[0].predicted_tokens == 3);
    CHECK(loss.turns[1].predicted_tokens == 4);
    CHECK(loss.total > 0);
  }

  TEST_CASE("padded batch rows reproduce the exact-length loss bit for bit") {
    ModelConfig cfg = train_cfg();
    PhaedModel<double> model(cfg);
    model.init_params(29);
    std::vector<Conversation> convs = {kConvA, kConvB};
    std::vector<Batch> batches = batch_conversations(convs, 2);
    REQUIRE(batches.size() == 1);

    for (std::size_t row = 0; row < 2; ++row) {
      ConversationTensors padded = tensors_from_batch_row(batches[0], row);
      ConversationTensors exact = tensors_from_conversation(convs[row]);
      REQUIRE(padded.turn_count() == exact.turn_count());

      ad::Tape<double> tp;
      ModelP<ad::VarId> mp = model.lift(tp, false);
      ConversationLoss<double> lp = conversation_loss(tp, mp, cfg, padded);
      ad::Tape<double> te;
      ModelP<ad::VarId> me = model.lift(te, false);
      ConversationLoss<double> le = conversation_loss(te, me, cfg, exact);

      CHECK(lp.total == le.total);
      CHECK(lp.predicted_tokens == le.predicted_tokens);
      for (std::size_t t = 0; t < lp.turns.size(); ++t)
        CHECK(lp.turns[t].nll == le.turns[t].nll);
    }
  }

  TEST_CASE("no gradient flows into earlier turns through the response memory") {
    ModelConfig cfg = train_cfg();
    PhaedModel<double> model(cfg);
    model.init_params(37);
    ConversationTensors conv =
        tensors_from_conversation(make_conv({{{6}, {7}}, {{8}, {9}}, {{10}, {11, 6}}}));

    ad::Tape<double> tape;
    ModelP<ad::VarId> m = model.lift(tape, true);
    EncodedConversation<double> enc = encode_queries(tape, m, cfg, conv.queries);
    ResponseMemory<double> memory(cfg.layers, cfg.memory_len());
    std::vector<ad::VarId> resp_inputs, nlls;
    for (std::size_t t = 0; t < conv.responses.size(); ++t) {
      const TokenIds& resp = conv.responses[t];
      const Index len = static_cast<Index>(resp.size());
      ad::VarId b = input_representation(tape, m.emb, cfg, resp, static_cast<int>(t) + 1);
      resp_inputs.push_back(b);
      DecoderForward<double> dec =
          decoder_forward(tape, m, cfg, b, len, memory, enc.s_hat[t], enc.query_lens[t]);
      ad::VarId pred = ad::slice_rows(tape, output_logits(tape, m, dec.h_top), 0, len - 1);
      ad::VarId lp = ad::log_softmax_rows(tape, pred);
      std::vector<Index> targets;
      std::vector<double> weights;
      for (Index i = 0; i + 1 < len; ++i) {
        targets.push_back(static_cast<Index>(resp[static_cast<std::size_t>(i) + 1]));
        weights.push_back(1.0);
      }
      nlls.push_back(ad::nll_of_rows(tape, lp, std::move(targets), std::move(weights)));
      memory.append(std::move(dec.memory_states));
    }

    tape.backward(nlls[2]);  // only the last turn's loss
    CHECK(tape.grad_or_zero(resp_inputs[0]).isZero(0.0));
    CHECK(tape.grad_or_zero(resp_inputs[1]).isZero(0.0));
    CHECK(!tape.grad_or_zero(resp_inputs[2]).isZero(0.0));
  }

  TEST_CASE("scoring flags speaker targets and reproduces the loss") {
    ModelConfig cfg = train_cfg();
    PhaedModel<double> model(cfg);
    model.init_params(53);
    ConversationTensors conv = tensors_from_conversation(kConvA);
    std::vector<TokenScore> scores = score_conversation(model, conv);
    REQUIRE(scores.size() == 7);
    CHECK(scores[0].token == Vocabulary::kSpeakerR);
    CHECK(scores[0].is_speaker);
    CHECK(!scores[1].is_speaker);
    CHECK(scores[2].token == Vocabulary::kEou);

    ad::Tape<double> tape;
    ModelP<ad::VarId> m = model.lift(tape, false);
    ConversationLoss<double> loss = conversation_loss(tape, m, cfg, conv);
    double neg_sum = 0;
    for (const auto& s : scores) neg_sum -= s.logp;
    CHECK(neg_sum == doctest::Approx(loss.total).epsilon(1e-12));
  }

  TEST_CASE("training steps reduce the loss on a fixed batch") {
    ModelConfig cfg = train_cfg();
    PhaedModel<double> model(cfg);
    model.init_params(61);
    AdamOptimizer<double> opt(fast_train());
    Batch batch = batch_conversations({kConvA, kConvB}, 2)[0];

    StepResult<double> r1 = train_step(model, opt, batch, 1, 0);
    StepResult<double> r2 = train_step(model, opt, batch, 2, 0);
    StepResult<double> r3 = train_step(model, opt, batch, 3, 0);
    CHECK(r1.tokens == 7 + 5);
    CHECK(r1.loss_per_token == doctest::Approx(r1.loss_sum / 12.0));
    CHECK(r2.loss_per_token < r1.loss_per_token);
    CHECK(r3.loss_per_token < r2.loss_per_token);
    CHECK(opt.step_count() == 3);
  }

  TEST_CASE("a zero learning rate leaves every parameter untouched") {
    ModelConfig cfg = train_cfg();
    PhaedModel<double> model(cfg);
    model.init_params(71);
    std::vector<Mat<double>> before;
    model.for_each([&](const std::string&, const Mat<double>& p) { before.push_back(p); });

    TrainingConfig tc;
    tc.learning_rate = 0.0;
    AdamOptimizer<double> opt(tc);
    Batch batch = batch_conversations({kConvA}, 1)[0];
    train_step(model, opt, batch, 1, 0);

    std::size_t i = 0;
    model.for_each([&](const std::string&, const Mat<double>& p) {
      CHECK(p == before[i]);
      ++i;
    });
  }

  TEST_CASE("identical seeds give identical training trajectories") {
    ModelConfig cfg = train_cfg();
    PhaedModel<double> m1(cfg), m2(cfg);
    m1.init_params(5);
    m2.init_params(5);
    AdamOptimizer<double> o1(fast_train()), o2(fast_train());
    Batch batch = batch_conversations({kConvA, kConvB}, 2)[0];
    for (int step = 1; step <= 3; ++step) {
      StepResult<double> r1 = train_step(m1, o1, batch, step, 0);
      StepResult<double> r2 = train_step(m2, o2, batch, step, 0);
      CHECK(r1.loss_sum == r2.loss_sum);
    }
    CHECK(m1.params().emb.token == m2.params().emb.token);
    CHECK(*m1.params().w_out == *m2.params().w_out);
  }

  TEST_CASE("a poisoned parameter turns into a training error naming the step") {
    ModelConfig cfg = train_cfg();
    PhaedModel<double> model(cfg);
    model.init_params(83);
    model.params().emb.pos(0, 0) = std::numeric_limits<double>::quiet_NaN();
    AdamOptimizer<double> opt(fast_train());
    Batch batch = batch_conversations({kConvA}, 1)[0];
    CHECK_THROWS_WITH_AS(train_step(model, opt, batch, 12, 3), doctest::Contains("step 12"),
                         TrainError);
  }

  TEST_CASE("tape gradients agree with finite differences everywhere") {
    ModelConfig cfg;
    cfg.d_s = 4;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.d_ff = 4;
    cfg.r_max = 1;
    cfg.c_max = 1;
    cfg.vocab_size = 8;
    cfg.t_max = 4;
    cfg.i_max = 8;
    cfg.precision = Precision::kFloat64;
    PhaedModel<double> model(cfg);
    model.init_params(97);
    ConversationTensors conv =
        tensors_from_conversation(make_conv({{{6}, {7}}, {{7, 6}, {6}}}));

    std::vector<GradCheckGroup> report = gradient_check(model, conv);
    CHECK(!report.empty());
    bool any_signal = false;
    for (const auto& g : report) {
      INFO(g.name << " rel err " << g.max_rel_err);
      CHECK(g.max_rel_err < 1e-4);
      any_signal = any_signal || g.max_analytic > 0;
    }
    CHECK(any_signal);
  }
}
