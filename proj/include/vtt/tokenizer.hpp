#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vtt {

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kBosToken = "[BOS]";
inline constexpr std::string_view kEosToken = "[EOS]";
inline constexpr std::string_view kContinuationPrefix = "##";

/// Caption token ids: BOS, pieces..., EOS.
using TokenSequence = std::vector<int>;

/// WordPiece inventory. Ids are dense and equal to insertion order; [PAD]
/// is always id 0.
class Vocabulary {
 public:
  /// Validates uniqueness and appends any missing special tokens.
  /// Throws FormatError on duplicates or a misplaced [PAD].
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const;
  std::optional<int> find(std::string_view token) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int pad() const { return pad_; }
  int unk() const { return unk_; }
  int bos() const { return bos_; }
  int eos() const { return eos_; }
  bool is_special(int id) const { return id == pad_ || id == unk_ || id == bos_ || id == eos_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> id_of_;
  int pad_ = 0, unk_ = 0, bos_ = 0, eos_ = 0;
};

/// One token per line, line index = id (BERT convention).
Vocabulary load_vocab(const std::filesystem::path& path);
void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path);

/// Frequency-driven subword inventory for corpora without a pretrained
/// vocabulary. Contains the specials, every observed character in both
/// word-initial and "##" continuation form, then the most frequent adjacent
/// merges until `target_size` entries exist (or no merge remains). Ties go to
/// the lexicographically smallest merged piece.
Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size);

/// Lowercases ASCII letters, splits on whitespace and splits every ASCII
/// punctuation character off as its own word.
std::vector<std::string> normalize_words(std::string_view text);

/// Normalized words joined by single spaces.
std::string normalize_text(std::string_view text);

/// Greedy longest-match-first WordPiece segmentation wrapped in BOS/EOS.
/// Words with no matching prefix become a single [UNK].
TokenSequence encode(std::string_view text, const Vocabulary& vocab);

/// Drops special tokens and glues "##" pieces onto the preceding piece.
std::string decode(std::span<const int> ids, const Vocabulary& vocab);

}  // namespace vtt
