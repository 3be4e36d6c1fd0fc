#include "vtt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

#include "vtt/error.hpp"
#include "vtt/tokenizer.hpp"

namespace vtt {

NGramTable ngram_counts(const Words& tokens, std::size_t n) {
  if (n < 1 || n > kMaxNGram) throw ContractError("ngram_counts: n must be in [1, 4]");
  NGramTable table;
  if (tokens.size() < n) return table;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++table[NGram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                  tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return table;
}

namespace {

struct BleuStats {
  std::size_t matches[kMaxNGram] = {};
  std::size_t totals[kMaxNGram] = {};
  std::size_t cand_len = 0;
  std::size_t ref_len = 0;
};

std::size_t closest_ref_length(std::size_t cand_len, const std::vector<Words>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = std::llabs(static_cast<long long>(r.size()) - static_cast<long long>(cand_len));
    const auto bd = std::llabs(static_cast<long long>(best) - static_cast<long long>(cand_len));
    if (d < bd || (d == bd && r.size() < best)) best = r.size();
  }
  return best;
}

BleuStats bleu_stats(const Words& candidate, const std::vector<Words>& refs) {
  if (refs.empty()) throw ContractError("bleu4: no references");
  BleuStats s;
  s.cand_len = candidate.size();
  s.ref_len = closest_ref_length(candidate.size(), refs);
  for (std::size_t n = 1; n <= kMaxNGram; ++n) {
    const auto cand = ngram_counts(candidate, n);
    NGramTable max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : cand) {
      s.totals[n - 1] += c;
      const auto it = max_ref.find(g);
      if (it != max_ref.end()) s.matches[n - 1] += std::min(c, it->second);
    }
  }
  return s;
}

double combine_bleu(const BleuStats& s, bool smoothed) {
  if (s.cand_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxNGram; ++n) {
    if (s.totals[n] == 0) return 0.0;
    double p;
    if (s.matches[n] == 0) {
      if (!smoothed) return 0.0;
      p = 1.0 / static_cast<double>(s.totals[n] + 1);
    } else {
      p = static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]);
    }
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(s.cand_len);
  const double r = static_cast<double>(s.ref_len);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(kMaxNGram));
}

}  // namespace

double bleu4(const Words& candidate, const std::vector<Words>& refs, bool smoothed) {
  return combine_bleu(bleu_stats(candidate, refs), smoothed);
}

double corpus_bleu4(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& refs) {
  if (candidates.size() != refs.size()) throw ContractError("corpus_bleu4: candidate/reference count mismatch");
  BleuStats total;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto s = bleu_stats(candidates[i], refs[i]);
    for (std::size_t n = 0; n < kMaxNGram; ++n) {
      total.matches[n] += s.matches[n];
      total.totals[n] += s.totals[n];
    }
    total.cand_len += s.cand_len;
    total.ref_len += s.ref_len;
  }
  return combine_bleu(total, false);
}

// ---------------------------------------------------------------------------
// CIDEr

double IdfTable::idf(const NGram& g) const {
  const auto it = df.find(g);
  const double d = it == df.end() ? 1.0 : static_cast<double>(it->second);
  return std::log(static_cast<double>(n_docs) / d);
}

IdfTable compute_idf(const std::vector<std::vector<Words>>& refs_corpus) {
  if (refs_corpus.empty()) throw ContractError("compute_idf: empty reference corpus");
  IdfTable table;
  table.n_docs = refs_corpus.size();
  for (const auto& refs : refs_corpus) {
    std::set<NGram> seen;
    for (const auto& r : refs)
      for (std::size_t n = 1; n <= kMaxNGram; ++n)
        for (const auto& [g, _] : ngram_counts(r, n)) seen.insert(g);
    for (const auto& g : seen) ++table.df[g];
  }
  return table;
}

namespace {

struct TfIdf {
  std::map<NGram, double> weights[kMaxNGram];
  double norms[kMaxNGram] = {};
  std::size_t length = 0;
};

TfIdf tfidf(const Words& words, const IdfTable& idf) {
  TfIdf v;
  v.length = words.size();
  for (std::size_t n = 1; n <= kMaxNGram; ++n) {
    double sq = 0.0;
    for (const auto& [g, c] : ngram_counts(words, n)) {
      const double w = static_cast<double>(c) * idf.idf(g);
      v.weights[n - 1][g] = w;
      sq += w * w;
    }
    v.norms[n - 1] = std::sqrt(sq);
  }
  return v;
}

constexpr double kCiderSigma = 6.0;

double pair_similarity(const TfIdf& cand, const TfIdf& ref, std::size_t n, CiderVariant variant) {
  if (cand.norms[n] == 0.0 || ref.norms[n] == 0.0) return 0.0;
  double dot = 0.0;
  for (const auto& [g, wc] : cand.weights[n]) {
    const auto it = ref.weights[n].find(g);
    if (it == ref.weights[n].end()) continue;
    dot += variant == CiderVariant::kD ? std::min(wc, it->second) * it->second : wc * it->second;
  }
  double sim = dot / (cand.norms[n] * ref.norms[n]);
  if (variant == CiderVariant::kD) {
    const double delta = static_cast<double>(cand.length) - static_cast<double>(ref.length);
    sim *= std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
  }
  return sim;
}

}  // namespace

double cider_sentence(const Words& candidate, const std::vector<Words>& refs, const IdfTable& idf,
                      CiderVariant variant) {
  if (refs.empty()) throw ContractError("cider: no references");
  if (idf.n_docs == 0) throw ContractError("cider: empty IDF table");
  const auto cand = tfidf(candidate, idf);
  double total = 0.0;
  for (const auto& r : refs) {
    const auto ref = tfidf(r, idf);
    double mean_n = 0.0;
    for (std::size_t n = 0; n < kMaxNGram; ++n) mean_n += pair_similarity(cand, ref, n, variant);
    total += mean_n / static_cast<double>(kMaxNGram);
  }
  return 10.0 * total / static_cast<double>(refs.size());
}

CiderScores cider(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& refs,
                  const IdfTable& idf, CiderVariant variant) {
  if (candidates.size() != refs.size()) throw ContractError("cider: candidate/reference count mismatch");
  CiderScores out;
  out.per_video.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    out.per_video.push_back(cider_sentence(candidates[i], refs[i], idf, variant));
  double sum = 0.0;
  for (double s : out.per_video) sum += s;
  out.corpus = candidates.empty() ? 0.0 : sum / static_cast<double>(candidates.size());
  return out;
}

std::vector<std::vector<Words>> tokenize_references(const std::vector<std::vector<std::string>>& references) {
  std::vector<std::vector<Words>> out;
  out.reserve(references.size());
  for (const auto& refs : references) {
    std::vector<Words> words;
    for (const auto& r : refs) words.push_back(normalize_words(r));
    out.push_back(std::move(words));
  }
  return out;
}

MetricReport score_captions(const std::vector<std::string>& ids, const std::vector<std::string>& captions,
                            const std::vector<std::vector<std::string>>& references) {
  if (ids.size() != captions.size() || captions.size() != references.size()) {
    throw ContractError("score_captions: ids, captions and references differ in length");
  }
  MetricReport report;
  if (captions.empty()) return report;
  const auto refs = tokenize_references(references);
  std::vector<Words> cands;
  cands.reserve(captions.size());
  for (const auto& c : captions) cands.push_back(normalize_words(c));

  const auto idf = compute_idf(refs);
  const auto plain = cider(cands, refs, idf, CiderVariant::kPlain);
  const auto d = cider(cands, refs, idf, CiderVariant::kD);
  report.bleu4 = corpus_bleu4(cands, refs);
  report.cider = plain.corpus;
  report.cider_d = d.corpus;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    report.per_sample.push_back(
        {ids[i], captions[i], bleu4(cands[i], refs[i], false), plain.per_video[i], d.per_video[i]});
  }
  return report;
}

}  // namespace vtt
