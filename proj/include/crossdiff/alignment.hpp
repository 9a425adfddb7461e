#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "crossdiff/synthdata.hpp"

namespace crossdiff {

// Text normalization used for window comparison: case-fold + surrounding
// whitespace trim + canonical composition. Composition and folding cover
// ASCII/Latin-1 plus the combining marks the fixtures exercise; smart quotes
// and emoji deliberately stay distinct from their ASCII look-alikes.
std::string normalize_text(const std::string& utf8);

std::vector<uint32_t> utf8_to_codepoints(const std::string& s);
int64_t codepoint_count(const std::string& s);

// Codepoints outside plain content (smart quotes, box drawing, arrows, math
// operators, emoji, variation selectors); used to classify failure reasons.
bool contains_special_characters(const std::string& utf8);

enum class TokenizerKind : uint8_t { Char = 0, Word = 1, GreedyMerge = 2 };

// Vocabulary-backed fixture tokenizer: char-level, whitespace word-level, or
// greedy longest-match over a fixed merge table. decode() of a slice is the
// concatenation of the slice's token texts, so decode distributes over
// concatenation by construction.
class FixtureTokenizer {
public:
  FixtureTokenizer(TokenizerKind kind, std::vector<std::string> vocab,
                   std::vector<int32_t> special_ids = {}, bool allow_extend = false);

  static FixtureTokenizer char_tokenizer();
  static FixtureTokenizer word_tokenizer();
  static FixtureTokenizer merge_tokenizer(std::vector<std::string> merges);

  std::vector<int32_t> encode(const std::string& text);
  std::string decode(const std::vector<int32_t>& ids, int64_t begin, int64_t end) const;
  std::string token_text(int32_t id) const;
  bool non_content(int32_t id) const;
  TokenizerKind kind() const { return kind_; }
  const std::vector<std::string>& vocab() const { return vocab_; }

private:
  int32_t id_for(const std::string& text);

  TokenizerKind kind_;
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int32_t> lookup_;
  std::vector<int32_t> special_;
  bool allow_extend_;
};

struct TokenStream {
  std::vector<int32_t> tokens;
  const FixtureTokenizer* tokenizer = nullptr;
};

enum class FailureReason : uint8_t { Divergence = 0, WindowOverflow = 1, SpecialCharacters = 2 };
const char* failure_reason_name(FailureReason r);

struct AlignedPair {
  int64_t idx_a;  // final-token position in A for the matched window
  int64_t idx_b;
};

struct AlignmentFailure {
  int64_t pos_a = 0;
  int64_t pos_b = 0;
  FailureReason reason = FailureReason::Divergence;
};

struct AlignmentResult {
  std::vector<AlignedPair> pairs;
  int64_t consumed_a = 0;
  int64_t consumed_b = 0;
  std::optional<AlignmentFailure> failure;

  bool fully_aligned(int64_t len_a, int64_t len_b) const {
    return !failure && consumed_a == len_a && consumed_b == len_b;
  }
};

// Greedy cross-tokenizer alignment: skip non-content tokens, direct 1-1 match
// on normalized decoded text, and on mismatch grow the window whose
// normalized text is shorter (A first on equal lengths) until the texts match
// or neither side can grow. Successful windows record the final-token index
// on each side. Failures are data, not exceptions.
AlignmentResult align(const TokenStream& a, const TokenStream& b, int64_t max_window = 16);

// Gathers activation rows at the recorded final-token indices.
ActivationPairBatch extract_aligned_activations(const AlignmentResult& result, const Mat& acts_a,
                                                const Mat& acts_b);

struct CorpusStats {
  int64_t total = 0;
  int64_t success = 0;
  std::map<FailureReason, int64_t> failure_reasons;

  std::optional<double> success_rate() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(success) / static_cast<double>(total);
  }
};

CorpusStats alignment_stats(const std::vector<AlignmentResult>& results,
                            const std::vector<std::pair<int64_t, int64_t>>& stream_lengths);

}  // namespace crossdiff
