#include "ptie/vocab.hpp"

#include <gtest/gtest.h>

#include "ptie/common.hpp"

using namespace ptie;

TEST(Charset, Standard100Layout) {
  const Charset cs = Charset::standard100();
  EXPECT_EQ(cs.cls(), 100);
  EXPECT_EQ(cs.printable_count(), 97);
  EXPECT_NE(cs.start_id(), cs.end_id());
  EXPECT_NE(cs.end_id(), cs.pad_id());
  EXPECT_EQ(cs.id_of('0'), 0);
  EXPECT_EQ(cs.id_of('9'), 9);
  EXPECT_EQ(cs.id_of('A'), 10);
  EXPECT_EQ(cs.id_of('a'), 36);
  // Bijection over the printables.
  for (int id = 0; id < cs.printable_count(); ++id)
    EXPECT_EQ(cs.id_of(cs.symbol(id)), id);
}

TEST(Charset, SerializeRoundTrip) {
  const Charset cs = Charset::standard100();
  const Charset back = Charset::deserialize(cs.serialized());
  EXPECT_TRUE(cs == back);
}

TEST(Encode, ReversedGroundTruth) {
  const Charset cs = Charset::standard100();
  const TokenSeq fwd = encode(cs, "academy", 0, 12);
  const TokenSeq rev = encode(cs, "academy", 1, 12);
  // rev interior must spell "ymedaca"
  const std::string expect = "ymedaca";
  for (size_t i = 0; i < expect.size(); ++i)
    EXPECT_EQ(rev.ids[i + 1], cs.id_of(expect[i]));
  EXPECT_EQ(fwd.ids.front(), cs.start_id());
  EXPECT_EQ(rev.ids.front(), cs.start_id());
  EXPECT_EQ(fwd.ids[8], cs.end_id());
  EXPECT_EQ(rev.ids[8], cs.end_id());
  // interiors are mirror images
  for (int i = 0; i < 7; ++i) EXPECT_EQ(rev.ids[1 + i], fwd.ids[7 - i]);
}

TEST(Encode, SingleCharPalindrome) {
  const Charset cs = Charset::standard100();
  EXPECT_EQ(encode(cs, "a", 0, 8).ids, encode(cs, "a", 1, 8).ids);
}

TEST(Encode, Errors) {
  const Charset cs = Charset::standard100();
  EXPECT_THROW(encode(cs, std::string("a b"), 0, 16), VocabError);  // space unknown
  EXPECT_THROW(encode(cs, "toolongword", 0, 8), DataError);
}

TEST(DecodeTokens, StripsFramingAndPad) {
  const Charset cs = Charset::standard100();
  std::vector<int64_t> ids = {cs.start_id(), cs.id_of('b'), cs.id_of('o'), cs.id_of('y'),
                              cs.end_id(), cs.pad_id()};
  EXPECT_EQ(decode_tokens(cs, ids), "boy");
  EXPECT_EQ(decode_tokens(cs, {cs.start_id(), cs.end_id()}), "");
}

TEST(Vocab, EncodeDecodeRoundTripProperty) {
  const Charset cs = Charset::standard100();
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int len = 1 + static_cast<int>(rng.below(20));
    std::string text;
    for (int i = 0; i < len; ++i)
      text.push_back(cs.symbol(rng.below(cs.printable_count())));
    const int j = static_cast<int>(rng.below(2));
    const TokenSeq seq = encode(cs, text, j, 24);
    std::string round = decode_tokens(cs, seq.ids);
    if (j == 1) std::reverse(round.begin(), round.end());
    EXPECT_EQ(round, text);
    // Re-encoding the decoded text is a fixed point.
    EXPECT_EQ(encode(cs, round, j, 24).ids, seq.ids);
    // Double reversal is the identity.
    std::string rr = text;
    std::reverse(rr.begin(), rr.end());
    std::reverse(rr.begin(), rr.end());
    EXPECT_EQ(rr, text);
  }
}

TEST(NormalizeEval, RuleApplications) {
  EXPECT_EQ(normalize_eval("STOP!"), "stop");
  EXPECT_EQ(normalize_eval("a1B2"), "a1b2");
  EXPECT_EQ(normalize_eval("#?!"), "");
}

TEST(NormalizeEval, IdempotentProperty) {
  const Charset cs = Charset::standard100();
  Rng rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    std::string text;
    const int len = static_cast<int>(rng.below(16));
    for (int i = 0; i < len; ++i)
      text.push_back(cs.symbol(rng.below(cs.printable_count())));
    const std::string once = normalize_eval(text);
    EXPECT_EQ(normalize_eval(once), once);
  }
}

TEST(NormalizeEval, ComparisonInvariantUnderCaseAndPunct) {
  EXPECT_EQ(normalize_eval("Stop!"), normalize_eval("sToP"));
  EXPECT_EQ(normalize_eval("[boy]"), normalize_eval("BOY"));
}
