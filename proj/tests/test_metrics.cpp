#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "support/oracles.hpp"
#include "vtt/error.hpp"
#include "vtt/metrics.hpp"
#include "vtt/tokenizer.hpp"

namespace vtt {
namespace {

Words w(const std::string& s) { return normalize_words(s); }

TEST(NGrams, Counts) {
  EXPECT_TRUE(ngram_counts(w("a b"), 4).empty());
  const auto c = ngram_counts(w("a a a"), 2);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.at({"a", "a"}), 2u);
}

TEST(Bleu, PerfectMatchAndEmpty) {
  const auto s = w("a man is playing a guitar");
  EXPECT_DOUBLE_EQ(bleu4(s, {s}), 1.0);
  EXPECT_EQ(bleu4({}, {s}), 0.0);
}

TEST(Bleu, ClippedUnigramPrecision) {
  // p1 = 2/7, every higher order has zero matches.
  const auto cand = w("the the the the the the the");
  const auto ref = w("the cat is on the mat");
  EXPECT_EQ(bleu4(cand, {ref}), 0.0);
  // Smoothed: p1 = 2/7, p2..p4 = 1/(6+1), 1/(5+1), 1/(4+1); lengths 7 >= 6.
  const double expect = std::pow(2.0 / 7.0 * 1.0 / 7.0 * 1.0 / 6.0 * 1.0 / 5.0, 0.25);
  EXPECT_NEAR(bleu4(cand, {ref}, true), expect, 1e-15);
  const auto st = oracle::bleu_stats(cand, {ref});
  EXPECT_EQ(st.matched[0], 2.0);
  EXPECT_EQ(st.total[0], 7.0);
}

TEST(Bleu, BrevityPenaltyPicksClosestShorterOnTie) {
  const auto cand = w("a b c d e");
  const auto r4 = w("a b c d");
  const auto r6 = w("a b c d e f");
  // Closest lengths 4 and 6 tie at distance 1; 4 wins, so no penalty.
  EXPECT_EQ(bleu4(cand, {r6, r4}), oracle::bleu(cand, {r6, r4}));
  EXPECT_EQ(oracle::bleu_stats(cand, {r6, r4}).ref_len, 4.0);
}

TEST(Idf, Definition) {
  const std::vector<std::vector<Words>> corpus = {{w("a b")}, {w("a c")}, {w("a d"), w("a b")}};
  const auto idf = compute_idf(corpus);
  EXPECT_EQ(idf.n_docs, 3u);
  EXPECT_EQ(idf.idf({"a"}), 0.0);
  EXPECT_NEAR(idf.idf({"c"}), std::log(3.0), 1e-15);
  EXPECT_NEAR(idf.idf({"b"}), std::log(1.5), 1e-15);
  EXPECT_EQ(idf.df.at({"a", "b"}), 2u);
  // Brute-force the whole table.
  const auto brute = oracle::doc_freq(corpus);
  std::size_t entries = 0;
  for (const auto& t : brute.df) entries += t.size();
  EXPECT_EQ(idf.df.size(), entries);
  for (const auto& [g, df] : idf.df) {
    EXPECT_GE(df, 1u);
    EXPECT_LE(df, 3u);
    EXPECT_EQ(static_cast<double>(df), brute.df[g.size() - 1].at(oracle::join_gram(g, 0, g.size())));
  }
  EXPECT_THROW(compute_idf({}), ContractError);
}

TEST(Cider, DisjointCorpusSelfMatchIsTen) {
  const std::vector<std::vector<Words>> refs = {{w("a cat sits on a mat")}, {w("dogs run fast outside")}};
  const auto idf = compute_idf(refs);
  for (auto variant : {CiderVariant::kPlain, CiderVariant::kD}) {
    const auto s = cider({refs[0][0], refs[1][0]}, refs, idf, variant);
    EXPECT_NEAR(s.corpus, 10.0, 1e-12);
  }
}

TEST(Cider, EmptyAndCommonOnlyScoreZero) {
  const std::vector<std::vector<Words>> refs = {{w("the cat")}, {w("the dog")}};
  const auto idf = compute_idf(refs);
  EXPECT_EQ(cider_sentence({}, refs[0], idf, CiderVariant::kD), 0.0);
  EXPECT_EQ(cider_sentence(w("the the"), refs[0], idf, CiderVariant::kPlain), 0.0);
}

// Both metrics against the brute-force implementation on random corpora.
TEST(MetricOracle, RandomCorpora) {
  Rng rng(2718);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = oracle::random_corpus(rng);
    const auto idf = compute_idf(c.refs);
    const auto df = oracle::doc_freq(c.refs);
    for (std::size_t i = 0; i < c.candidates.size(); ++i) {
      const auto& cand = c.candidates[i];
      EXPECT_NEAR(bleu4(cand, c.refs[i]), oracle::bleu(cand, c.refs[i]), 1e-9);
      EXPECT_NEAR(bleu4(cand, c.refs[i], true), oracle::bleu(cand, c.refs[i], true), 1e-9);
      EXPECT_NEAR(cider_sentence(cand, c.refs[i], idf, CiderVariant::kPlain),
                  oracle::cider_one(cand, c.refs[i], df, false), 1e-9);
      EXPECT_NEAR(cider_sentence(cand, c.refs[i], idf, CiderVariant::kD),
                  oracle::cider_one(cand, c.refs[i], df, true), 1e-9);
    }
    EXPECT_NEAR(corpus_bleu4(c.candidates, c.refs), oracle::corpus_bleu(c.candidates, c.refs), 1e-9);
  }
}

TEST(MetricProperties, RangesAndReferenceOrder) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = oracle::random_corpus(rng);
    const auto idf = compute_idf(c.refs);
    for (std::size_t i = 0; i < c.candidates.size(); ++i) {
      auto refs = c.refs[i];
      const double b = bleu4(c.candidates[i], refs);
      const double cp = cider_sentence(c.candidates[i], refs, idf, CiderVariant::kPlain);
      const double cd = cider_sentence(c.candidates[i], refs, idf, CiderVariant::kD);
      EXPECT_GE(b, 0.0);
      EXPECT_LE(b, 1.0);
      EXPECT_GE(cp, 0.0);
      EXPECT_LE(cp, 10.0 + 1e-12);
      EXPECT_GE(cd, 0.0);
      EXPECT_LE(cd, 10.0 + 1e-12);
      std::reverse(refs.begin(), refs.end());
      EXPECT_NEAR(bleu4(c.candidates[i], refs), b, 1e-15);
      EXPECT_NEAR(cider_sentence(c.candidates[i], refs, idf, CiderVariant::kPlain), cp, 1e-12);
      EXPECT_NEAR(cider_sentence(c.candidates[i], refs, idf, CiderVariant::kD), cd, 1e-12);
    }
  }
}

// BLEU can only lose matches. For CIDEr the claim needs distinct candidate
// n-grams: every new gram is unseen (maximal idf, count 1), so dot products
// shrink and norms grow. With repeated grams the norm can shrink instead.
TEST(MetricProperties, ReplacingMatchesWithUnseenTokensNeverHelps) {
  Rng rng(32);
  const std::vector<std::string> alphabet = {"a", "cat", "dog", "the", "runs", "on", "mat", "red"};
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = oracle::random_corpus(rng);
    const auto idf = compute_idf(c.refs);
    for (std::size_t i = 0; i < c.candidates.size(); ++i) {
      auto cand = alphabet;
      rng.shuffle(cand.begin(), cand.end());
      cand.resize(static_cast<std::size_t>(rng.uniform_int(1, 8)));
      double b = bleu4(cand, c.refs[i]);
      double cp = cider_sentence(cand, c.refs[i], idf, CiderVariant::kPlain);
      double cd = cider_sentence(cand, c.refs[i], idf, CiderVariant::kD);
      for (std::size_t j = 0; j < cand.size(); ++j) {
        bool matching = false;
        for (const auto& r : c.refs[i]) matching = matching || std::count(r.begin(), r.end(), cand[j]) > 0;
        if (!matching) continue;
        cand[j] = "zzz" + std::to_string(j);
        const double b2 = bleu4(cand, c.refs[i]);
        const double cp2 = cider_sentence(cand, c.refs[i], idf, CiderVariant::kPlain);
        const double cd2 = cider_sentence(cand, c.refs[i], idf, CiderVariant::kD);
        EXPECT_LE(b2, b + 1e-12);
        EXPECT_LE(cp2, cp + 1e-12);
        EXPECT_LE(cd2, cd + 1e-12);
        b = b2;
        cp = cp2;
        cd = cd2;
      }
    }
  }
}

TEST(MetricProperties, PlainEqualsDOnExactMatches) {
  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = oracle::random_corpus(rng);
    for (auto& refs : c.refs) refs.resize(1);
    const auto idf = compute_idf(c.refs);
    for (std::size_t i = 0; i < c.refs.size(); ++i) {
      const auto& cand = c.refs[i][0];
      EXPECT_NEAR(cider_sentence(cand, c.refs[i], idf, CiderVariant::kPlain),
                  cider_sentence(cand, c.refs[i], idf, CiderVariant::kD), 1e-12);
    }
  }
}

TEST(ScoreCaptions, ComposesMetricCalls) {
  const std::vector<std::string> ids = {"v1", "v2", "v3"};
  const std::vector<std::string> caps = {"A cat sits.", "a dog runs", "birds"};
  const std::vector<std::vector<std::string>> refs = {
      {"a cat sits .", "the cat is sitting"}, {"a dog is running", "dogs run"}, {"two birds fly"}};
  const auto report = score_captions(ids, caps, refs);
  const auto ref_words = tokenize_references(refs);
  const auto idf = compute_idf(ref_words);
  std::vector<Words> cands;
  for (const auto& c : caps) cands.push_back(normalize_words(c));
  EXPECT_EQ(report.bleu4, corpus_bleu4(cands, ref_words));
  EXPECT_EQ(report.cider, cider(cands, ref_words, idf, CiderVariant::kPlain).corpus);
  EXPECT_EQ(report.cider_d, cider(cands, ref_words, idf, CiderVariant::kD).corpus);
  ASSERT_EQ(report.per_sample.size(), 3u);
  EXPECT_EQ(report.per_sample[1].bleu4, bleu4(cands[1], ref_words[1]));
  EXPECT_EQ(report.per_sample[0].caption, "A cat sits.");
}

}  // namespace
}  // namespace vtt
