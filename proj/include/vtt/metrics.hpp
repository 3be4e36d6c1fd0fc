#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace vtt {

/// A caption as metric tokens (normalized words, not subword pieces).
using Words = std::vector<std::string>;
using NGram = std::vector<std::string>;
using NGramTable = std::map<NGram, std::size_t>;

inline constexpr std::size_t kMaxNGram = 4;

/// Sliding-window n-gram counts; empty when the sequence is shorter than n.
NGramTable ngram_counts(const Words& tokens, std::size_t n);

/// Sentence-level BLEU-4 against one or more references: clipped modified
/// precisions p1..p4, geometric mean, brevity penalty against the closest
/// reference length (shorter wins ties). Without smoothing any zero match
/// count yields 0. With `smoothed`, orders that have candidate n-grams but
/// no matches use (0 + 1) / (total + 1).
double bleu4(const Words& candidate, const std::vector<Words>& refs, bool smoothed = false);

/// Corpus-level BLEU-4: clipped counts, candidate lengths and closest
/// reference lengths are pooled over all videos before combining.
double corpus_bleu4(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& refs);

/// Document frequencies of n-grams (n = 1..4) over per-video reference sets.
struct IdfTable {
  std::map<NGram, std::size_t> df;
  std::size_t n_docs = 0;

  /// ln(n_docs / max(1, df(g))).
  double idf(const NGram& g) const;
};

IdfTable compute_idf(const std::vector<std::vector<Words>>& refs_corpus);

enum class CiderVariant { kPlain, kD };

/// Per-video CIDEr: 10 * mean over n of the average (over references) cosine
/// between TF-IDF vectors. The D variant clips candidate weights at the
/// reference weights and applies a Gaussian length penalty with sigma = 6.
double cider_sentence(const Words& candidate, const std::vector<Words>& refs, const IdfTable& idf,
                      CiderVariant variant);

struct CiderScores {
  double corpus = 0.0;              // mean over videos
  std::vector<double> per_video;
};

CiderScores cider(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& refs,
                  const IdfTable& idf, CiderVariant variant);

struct SampleScore {
  std::string id;
  std::string caption;
  double bleu4 = 0.0;  // sentence level, unsmoothed
  double cider = 0.0;
  double cider_d = 0.0;
};

struct MetricReport {
  double bleu4 = 0.0;  // corpus level
  double cider = 0.0;
  double cider_d = 0.0;
  std::vector<SampleScore> per_sample;
};

/// Scores captions against references. Text is normalized into words first;
/// IDF statistics come from the given references.
MetricReport score_captions(const std::vector<std::string>& ids, const std::vector<std::string>& captions,
                            const std::vector<std::vector<std::string>>& references);

/// Normalized words of every reference of every video.
std::vector<std::vector<Words>> tokenize_references(const std::vector<std::vector<std::string>>& references);

}  // namespace vtt
