#include "vtt/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include "vtt/error.hpp"

namespace vtt {

namespace {

bool is_continuation(std::string_view piece) {
  return piece.size() > kContinuationPrefix.size() && piece.starts_with(kContinuationPrefix);
}

// Byte length of the UTF-8 sequence starting with `lead`. Malformed leads
// are treated as single bytes.
std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

std::vector<std::string> code_points(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size();) {
    const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) {
      throw FormatError("vocabulary: empty token at line " + std::to_string(i + 1));
    }
    auto [it, inserted] = id_of_.emplace(tokens_[i], static_cast<int>(i));
    if (!inserted) {
      throw FormatError("vocabulary: duplicate token '" + tokens_[i] + "' at line " +
                        std::to_string(i + 1) + " (first seen at line " +
                        std::to_string(it->second + 1) + ")");
    }
  }
  const auto pad_it = id_of_.find(std::string(kPadToken));
  if (pad_it != id_of_.end() && pad_it->second != 0) {
    throw FormatError("vocabulary: [PAD] must be the first entry, found at line " +
                      std::to_string(pad_it->second + 1));
  }
  if (pad_it == id_of_.end() && !tokens_.empty()) {
    throw FormatError("vocabulary: [PAD] missing; it must be the first entry");
  }
  auto resolve = [this](std::string_view name) {
    if (auto id = find(name)) return *id;
    tokens_.emplace_back(name);
    const int id = static_cast<int>(tokens_.size() - 1);
    id_of_.emplace(tokens_.back(), id);
    return id;
  };
  pad_ = resolve(kPadToken);
  unk_ = resolve(kUnkToken);
  bos_ = resolve(kBosToken);
  eos_ = resolve(kEosToken);
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ContractError("vocabulary: id " + std::to_string(id) + " outside [0, " +
                        std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  const auto it = id_of_.find(std::string(token));
  if (it == id_of_.end()) return std::nullopt;
  return it->second;
}

Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  if (in.bad()) throw IoError("error while reading " + path.string());
  return Vocabulary(std::move(tokens));
}

void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  for (const auto& t : vocab.tokens()) out << t << '\n';
  if (!out) throw IoError("error while writing " + path.string());
}

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return words;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : normalize_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size) {
  std::map<std::string, std::size_t> word_freq;
  for (const auto& line : corpus)
    for (auto& w : normalize_words(line)) ++word_freq[w];

  std::set<std::string> alphabet;
  for (const auto& [word, _] : word_freq)
    for (auto& cp : code_points(word)) alphabet.insert(cp);

  const std::size_t base = 4 + 2 * alphabet.size();
  if (target_size < base) {
    throw CapacityError("build_vocab: target size " + std::to_string(target_size) +
                        " cannot hold 4 specials and " + std::to_string(alphabet.size()) +
                        " characters in both forms (need " + std::to_string(base) + ")");
  }

  std::vector<std::string> tokens{std::string(kPadToken), std::string(kUnkToken),
                                  std::string(kBosToken), std::string(kEosToken)};
  for (const auto& c : alphabet) tokens.push_back(c);
  for (const auto& c : alphabet) tokens.push_back(std::string(kContinuationPrefix) + c);
  std::set<std::string> present(tokens.begin(), tokens.end());

  // Current segmentation of every distinct word.
  std::vector<std::pair<std::vector<std::string>, std::size_t>> segmented;
  for (const auto& [word, freq] : word_freq) {
    auto cps = code_points(word);
    for (std::size_t i = 1; i < cps.size(); ++i) cps[i] = std::string(kContinuationPrefix) + cps[i];
    segmented.emplace_back(std::move(cps), freq);
  }

  auto merged_piece = [](const std::string& left, const std::string& right) {
    return left + right.substr(kContinuationPrefix.size());
  };

  while (tokens.size() < target_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_freq;
    for (const auto& [pieces, freq] : segmented)
      for (std::size_t i = 0; i + 1 < pieces.size(); ++i) pair_freq[{pieces[i], pieces[i + 1]}] += freq;
    if (pair_freq.empty()) break;

    // Highest frequency; ties to the smallest merged string, then the pair.
    auto best = pair_freq.begin();
    std::string best_piece = merged_piece(best->first.first, best->first.second);
    for (auto it = std::next(pair_freq.begin()); it != pair_freq.end(); ++it) {
      std::string piece = merged_piece(it->first.first, it->first.second);
      if (it->second > best->second || (it->second == best->second && piece < best_piece)) {
        best = it;
        best_piece = std::move(piece);
      }
    }

    const auto [left, right] = best->first;
    for (auto& [pieces, _] : segmented) {
      std::vector<std::string> next;
      next.reserve(pieces.size());
      for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (i + 1 < pieces.size() && pieces[i] == left && pieces[i + 1] == right) {
          next.push_back(best_piece);
          ++i;
        } else {
          next.push_back(pieces[i]);
        }
      }
      pieces = std::move(next);
    }
    if (present.insert(best_piece).second) tokens.push_back(best_piece);
  }
  return Vocabulary(std::move(tokens));
}

TokenSequence encode(std::string_view text, const Vocabulary& vocab) {
  TokenSequence ids{vocab.bos()};
  for (const auto& word : normalize_words(text)) {
    const auto cps = code_points(word);
    // Byte offsets of code point boundaries.
    std::vector<std::size_t> bounds{0};
    for (const auto& cp : cps) bounds.push_back(bounds.back() + cp.size());

    std::vector<int> pieces;
    std::size_t start = 0;
    bool failed = false;
    while (start < cps.size()) {
      std::optional<int> match;
      std::size_t end = cps.size();
      for (; end > start; --end) {
        std::string candidate = word.substr(bounds[start], bounds[end] - bounds[start]);
        if (start > 0) candidate = std::string(kContinuationPrefix) + candidate;
        if ((match = vocab.find(candidate))) break;
      }
      if (!match) {
        failed = true;
        break;
      }
      pieces.push_back(*match);
      start = end;
    }
    if (failed) {
      ids.push_back(vocab.unk());
    } else {
      ids.insert(ids.end(), pieces.begin(), pieces.end());
    }
  }
  ids.push_back(vocab.eos());
  return ids;
}

std::string decode(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    const std::string& piece = vocab.token(id);
    if (vocab.is_special(id)) continue;
    if (is_continuation(piece)) {
      out += piece.substr(kContinuationPrefix.size());
    } else {
      if (!out.empty()) out.push_back(' ');
      out += piece;
    }
  }
  return out;
}

}  // namespace vtt
