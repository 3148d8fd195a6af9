#include <doctest.h>

#include <sstream>

#include "phaed/corpus.hpp"
#include "phaed/errors.hpp"

using namespace phaed;

namespace {

std::vector<RawConversation> parse(const std::string& text, CorpusFormat fmt,
                                   Index max_len = kDefaultMaxUtteranceLen) {
  WhitespaceLowercaseTokenizer tok;
  std::istringstream in(text);
  return parse_corpus(in, fmt, tok, max_len, "test");
}

RawConversation raw_conv(std::vector<std::vector<std::string>> utts) {
  return RawConversation{std::move(utts)};
}

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("vocabulary reserves fixed ids and maps unknowns to [UNK]") {
    Vocabulary v;
    CHECK(v.size() == Vocabulary::kReservedCount);
    CHECK(v.id_of("[PAD]") == Vocabulary::kPad);
    CHECK(Vocabulary::kPad == 0);
    CHECK(v.id_of("[SOU]") == Vocabulary::kSou);
    CHECK(v.id_of("never-seen") == Vocabulary::kUnk);
    TokenId a = v.add_token("apple");
    CHECK(a == Vocabulary::kReservedCount);
    CHECK(v.token_of(a) == "apple");
    CHECK(v.id_of("apple") == a);
    CHECK_THROWS_AS(v.token_of(99), CapacityError);
    CHECK_THROWS_AS(v.add_token("apple"), ContractViolation);

    auto rebuilt = Vocabulary::from_content_tokens(v.content_tokens());
    CHECK(rebuilt.size() == v.size());
    CHECK(rebuilt.id_of("apple") == a);
  }

  TEST_CASE("tokenizer lowercases and splits on whitespace") {
    WhitespaceLowercaseTokenizer tok;
    auto t = tok.tokenize("  Hello\tWORLD again ");
    REQUIRE(t.size() == 3);
    CHECK(t[0] == "hello");
    CHECK(t[1] == "world");
    CHECK(t[2] == "again");
    CHECK(tok.tokenize("").empty());
    CHECK(tok.tokenize("   ").empty());
  }

  TEST_CASE("jsonl parsing pairs utterances") {
    auto corpus = parse(R"({"dialogue": ["a b", "c", "d", "e f g"]})"
                        "\n",
                        CorpusFormat::kJsonl);
    REQUIRE(corpus.size() == 1);
    REQUIRE(corpus[0].utterances.size() == 4);  // T=2
    CHECK(corpus[0].utterances[0] == std::vector<std::string>{"a", "b"});
    CHECK(corpus[0].utterances[3] == std::vector<std::string>{"e", "f", "g"});
  }

  TEST_CASE("odd utterance count drops the trailing query") {
    auto corpus = parse(R"({"dialogue": ["q1", "r1", "q2", "r2", "q3"]})", CorpusFormat::kJsonl);
    REQUIRE(corpus.size() == 1);
    CHECK(corpus[0].utterances.size() == 4);  // T=2, "q3" dropped
    CHECK(corpus[0].utterances[3] == std::vector<std::string>{"r2"});
  }

  TEST_CASE("long utterances are truncated at the tail") {
    std::string long_utt;
    for (int i = 0; i < 60; ++i) long_utt += "w" + std::to_string(i) + " ";
    auto corpus = parse(R"({"dialogue": [")" + long_utt + R"(", "ok"]})", CorpusFormat::kJsonl);
    REQUIRE(corpus[0].utterances[0].size() == 50);
    CHECK(corpus[0].utterances[0].front() == "w0");
    CHECK(corpus[0].utterances[0].back() == "w49");  // tail truncation keeps the head
  }

  TEST_CASE("parse errors carry the line number") {
    std::string text = "{\"dialogue\": [\"a\", \"b\"]}\nnot json\n";
    CHECK_THROWS_WITH_AS(parse(text, CorpusFormat::kJsonl), doctest::Contains("test:2"),
                         ParseError);

    std::string bad_shape = "{\"dialog\": []}\n";
    CHECK_THROWS_AS(parse(bad_shape, CorpusFormat::kJsonl), ParseError);

    std::string too_short = "{\"dialogue\": [\"only one\"]}\n";
    CHECK_THROWS_WITH_AS(parse(too_short, CorpusFormat::kJsonl), doctest::Contains("test:1"),
                         ParseError);
  }

  TEST_CASE("empty input raises the empty-corpus error") {
    CHECK_THROWS_AS(parse("", CorpusFormat::kJsonl), EmptyCorpusError);
    CHECK_THROWS_AS(parse("\n  \n", CorpusFormat::kJsonl), EmptyCorpusError);
  }

  TEST_CASE("eou-separated lines parse one conversation per line") {
    std::string text =
        "Hi there __eou__ hello __eou__\n"
        "\n"
        "How are you ? __eou__ fine __eou__ and you ? __eou__ good __eou__\n";
    auto corpus = parse(text, CorpusFormat::kEouSeparated);
    REQUIRE(corpus.size() == 2);
    CHECK(corpus[0].utterances.size() == 2);
    CHECK(corpus[0].utterances[0] == std::vector<std::string>{"hi", "there"});
    CHECK(corpus[1].utterances.size() == 4);
    CHECK(corpus[1].utterances[2] == std::vector<std::string>{"and", "you", "?"});
  }

  TEST_CASE("vocabulary ranks by frequency then first occurrence") {
    // "y" occurs twice, "x" once: y outranks x despite later first use.
    auto corpus = parse("x y __eou__ y __eou__\n", CorpusFormat::kEouSeparated);
    Vocabulary v = build_vocab(corpus, 8);
    CHECK(v.id_of("y") == Vocabulary::kReservedCount);
    CHECK(v.id_of("x") == Vocabulary::kReservedCount + 1);
  }

  TEST_CASE("vocabulary max_size caps total size including reserved ids") {
    auto corpus = parse("a a b __eou__ ok __eou__\n", CorpusFormat::kEouSeparated);
    Vocabulary v = build_vocab(corpus, 7);
    CHECK(v.size() == 7);  // 6 reserved + "a" only
    CHECK(v.contains("a"));
    CHECK(!v.contains("b"));
    CHECK(v.id_of("b") == Vocabulary::kUnk);

    CHECK_THROWS_AS(build_vocab(corpus, 6), ConfigError);
    CHECK_THROWS_AS(build_vocab({}, 10), EmptyCorpusError);
  }

  TEST_CASE("ties at equal frequency keep first-occurrence order") {
    auto corpus = parse("b a __eou__ a b __eou__\n", CorpusFormat::kEouSeparated);
    Vocabulary v = build_vocab(corpus, 8);
    CHECK(v.id_of("b") < v.id_of("a"));
  }

  TEST_CASE("encoding wraps utterances in the speaker frame") {
    auto raw = raw_conv({{"hello"}, {}});
    Vocabulary v = build_vocab({raw}, 16);
    Conversation conv = encode_conversation(raw, v);
    REQUIRE(conv.turns.size() == 1);
    const auto& q = conv.turns[0].query;
    const auto& r = conv.turns[0].response;
    CHECK(q.role == Role::kQuery);
    CHECK(q.turn == 1);
    REQUIRE(q.ids.size() == 4);
    CHECK(q.ids[0] == Vocabulary::kSou);
    CHECK(q.ids[1] == Vocabulary::kSpeakerQ);
    CHECK(q.ids[2] == v.id_of("hello"));
    CHECK(q.ids[3] == Vocabulary::kEou);
    // Empty response content degenerates to the bare frame.
    REQUIRE(r.ids.size() == 3);
    CHECK(r.ids[0] == Vocabulary::kSou);
    CHECK(r.ids[1] == Vocabulary::kSpeakerR);
    CHECK(r.ids[2] == Vocabulary::kEou);
    CHECK(r.turn == 1);
  }

  TEST_CASE("encoding without speaker tokens omits the role id only") {
    auto raw = raw_conv({{"hello"}, {"hi"}});
    Vocabulary v = build_vocab({raw}, 16);
    Conversation conv = encode_conversation(raw, v, false);
    const auto& q = conv.turns[0].query;
    REQUIRE(q.ids.size() == 3);
    CHECK(q.ids[0] == Vocabulary::kSou);
    CHECK(q.ids[1] == v.id_of("hello"));
    CHECK(q.ids[2] == Vocabulary::kEou);
  }

  TEST_CASE("unknown words encode as [UNK]") {
    auto known = raw_conv({{"alpha"}, {"beta"}});
    Vocabulary v = build_vocab({known}, 16);
    Conversation conv = encode_conversation(raw_conv({{"gamma"}, {"beta"}}), v);
    CHECK(conv.turns[0].query.ids[2] == Vocabulary::kUnk);
    CHECK(conv.turns[0].response.ids[2] == v.id_of("beta"));
  }

  TEST_CASE("decode(encode) round-trips in-vocabulary content") {
    auto raw = raw_conv({{"the", "quick", "fox"}, {"jumps", "over"}});
    Vocabulary v = build_vocab({raw}, 32);
    Conversation conv = encode_conversation(raw, v);
    CHECK(decode_content(conv.turns[0].query.ids, v) ==
          std::vector<std::string>{"the", "quick", "fox"});
    CHECK(decode_content(conv.turns[0].response.ids, v) ==
          std::vector<std::string>{"jumps", "over"});
  }

  TEST_CASE("corpus stats match hand counts") {
    // Two dialogues: 2 utterances of 2+1 tokens, 4 utterances of 1+1+2+3 tokens.
    auto c1 = raw_conv({{"a", "b"}, {"c"}});
    auto c2 = raw_conv({{"d"}, {"e"}, {"f", "g"}, {"h", "i", "j"}});
    CorpusStats s = corpus_stats({c1, c2});
    CHECK(s.dialogue_count == 2);
    CHECK(s.avg_utterances_per_dialogue == doctest::Approx(3.0));  // (2+4)/2
    CHECK(s.avg_tokens_per_utterance == doctest::Approx(10.0 / 6.0));
  }

  TEST_CASE("batching pads, masks, and aligns by turn") {
    auto r1 = raw_conv({{"a", "b", "c"}, {"d"}, {"e"}, {"f"}});            // T=2
    auto r2 = raw_conv({{"g"}, {"h", "i", "j", "k", "l"}, {"m"}, {"n"}, {"o"}, {"p"}});  // T=3
    Vocabulary v = build_vocab({r1, r2}, 64);
    std::vector<Conversation> convs = {encode_conversation(r1, v), encode_conversation(r2, v)};

    auto batches = batch_conversations(convs, 2);
    REQUIRE(batches.size() == 1);
    const Batch& b = batches[0];
    REQUIRE(b.turns.size() == 3);  // aligned to the longer conversation
    CHECK(b.conv_index == std::vector<std::size_t>{0, 1});

    // Turn validity: first conversation runs out after turn 2.
    CHECK(b.turns[0].valid == std::vector<std::uint8_t>{1, 1});
    CHECK(b.turns[1].valid == std::vector<std::uint8_t>{1, 1});
    CHECK(b.turns[2].valid == std::vector<std::uint8_t>{0, 1});

    // Queries of turn 1: frames are 3+3=6 and 1+3=4 tokens; padded to 6.
    const auto& q0 = b.turns[0].queries;
    CHECK(q0.ids.rows() == 2);
    CHECK(q0.ids.cols() == 6);
    CHECK(q0.lengths == std::vector<Index>{6, 4});
    CHECK(q0.ids(1, 4) == Vocabulary::kPad);
    CHECK(q0.ids(1, 5) == Vocabulary::kPad);
    Mask m = q0.token_mask();
    CHECK(m(0, 5) == 1);
    CHECK(m(1, 3) == 1);
    CHECK(m(1, 4) == 0);

    // The conversation past its end has zero length and an all-pad row.
    const auto& q2 = b.turns[2].queries;
    CHECK(q2.lengths[0] == 0);
    CHECK(q2.token_mask().row(0).maxCoeff() == 0);
    for (Index c = 0; c < q2.ids.cols(); ++c) CHECK(q2.ids(0, c) == Vocabulary::kPad);

    // Splitting into two batches of one works too.
    auto singles = batch_conversations(convs, 1);
    CHECK(singles.size() == 2);
    CHECK(singles[1].turns.size() == 3);
    CHECK_THROWS_AS(batch_conversations(convs, 0), ConfigError);
  }
}
