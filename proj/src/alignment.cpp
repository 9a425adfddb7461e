#include "crossdiff/alignment.hpp"

#include <algorithm>

#include "crossdiff/errors.hpp"

namespace crossdiff {

std::vector<uint32_t> utf8_to_codepoints(const std::string& s) {
  std::vector<uint32_t> out;
  size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    uint32_t cp = 0xFFFD;
    size_t len = 1;
    if (c < 0x80) {
      cp = c;
    } else if ((c >> 5) == 0x6 && i + 1 < s.size()) {
      cp = (c & 0x1F) << 6 | (s[i + 1] & 0x3F);
      len = 2;
    } else if ((c >> 4) == 0xE && i + 2 < s.size()) {
      cp = (c & 0x0F) << 12 | (s[i + 1] & 0x3F) << 6 | (s[i + 2] & 0x3F);
      len = 3;
    } else if ((c >> 3) == 0x1E && i + 3 < s.size()) {
      cp = (c & 0x07) << 18 | (s[i + 1] & 0x3F) << 12 | (s[i + 2] & 0x3F) << 6 | (s[i + 3] & 0x3F);
      len = 4;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

namespace {

void append_utf8(std::string& s, uint32_t cp) {
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    s.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool is_whitespace_cp(uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' || cp == '\v' ||
         cp == 0x00A0;
}

// Canonical composition table for the Latin subset the fixtures use.
uint32_t compose(uint32_t base, uint32_t mark) {
  struct Entry {
    uint32_t base, mark, out;
  };
  static const Entry table[] = {
      {'a', 0x300, 0xE0}, {'a', 0x301, 0xE1}, {'a', 0x302, 0xE2}, {'a', 0x303, 0xE3},
      {'a', 0x308, 0xE4}, {'e', 0x300, 0xE8}, {'e', 0x301, 0xE9}, {'e', 0x302, 0xEA},
      {'e', 0x308, 0xEB}, {'i', 0x300, 0xEC}, {'i', 0x301, 0xED}, {'i', 0x302, 0xEE},
      {'i', 0x308, 0xEF}, {'o', 0x300, 0xF2}, {'o', 0x301, 0xF3}, {'o', 0x302, 0xF4},
      {'o', 0x303, 0xF5}, {'o', 0x308, 0xF6}, {'u', 0x300, 0xF9}, {'u', 0x301, 0xFA},
      {'u', 0x302, 0xFB}, {'u', 0x308, 0xFC}, {'n', 0x303, 0xF1}, {'c', 0x327, 0xE7},
      {'A', 0x300, 0xC0}, {'A', 0x301, 0xC1}, {'A', 0x302, 0xC2}, {'A', 0x303, 0xC3},
      {'A', 0x308, 0xC4}, {'E', 0x300, 0xC8}, {'E', 0x301, 0xC9}, {'E', 0x302, 0xCA},
      {'E', 0x308, 0xCB}, {'I', 0x300, 0xCC}, {'I', 0x301, 0xCD}, {'I', 0x302, 0xCE},
      {'I', 0x308, 0xCF}, {'O', 0x300, 0xD2}, {'O', 0x301, 0xD3}, {'O', 0x302, 0xD4},
      {'O', 0x303, 0xD5}, {'O', 0x308, 0xD6}, {'U', 0x300, 0xD9}, {'U', 0x301, 0xDA},
      {'U', 0x302, 0xDB}, {'U', 0x308, 0xDC}, {'N', 0x303, 0xD1}, {'C', 0x327, 0xC7},
  };
  for (const Entry& e : table) {
    if (e.base == base && e.mark == mark) return e.out;
  }
  return 0;
}

uint32_t fold_case(uint32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;  // Latin-1 capitals
  return cp;
}

}  // namespace

std::string normalize_text(const std::string& utf8) {
  std::vector<uint32_t> cps = utf8_to_codepoints(utf8);

  // Canonical composition, one combining mark per base.
  std::vector<uint32_t> composed;
  composed.reserve(cps.size());
  for (uint32_t cp : cps) {
    if (!composed.empty()) {
      const uint32_t c = compose(composed.back(), cp);
      if (c != 0) {
        composed.back() = c;
        continue;
      }
    }
    composed.push_back(cp);
  }

  for (uint32_t& cp : composed) cp = fold_case(cp);

  size_t begin = 0, end = composed.size();
  while (begin < end && is_whitespace_cp(composed[begin])) ++begin;
  while (end > begin && is_whitespace_cp(composed[end - 1])) --end;

  std::string out;
  for (size_t i = begin; i < end; ++i) append_utf8(out, composed[i]);
  return out;
}

int64_t codepoint_count(const std::string& s) {
  return static_cast<int64_t>(utf8_to_codepoints(s).size());
}

bool contains_special_characters(const std::string& utf8) {
  for (uint32_t cp : utf8_to_codepoints(utf8)) {
    if ((cp >= 0x2010 && cp <= 0x2027) ||  // dashes, smart quotes
        (cp >= 0x2190 && cp <= 0x22FF) ||  // arrows, math operators
        (cp >= 0x2500 && cp <= 0x257F) ||  // box drawing
        (cp >= 0xFE00 && cp <= 0xFE0F) ||  // variation selectors
        cp == 0x200D ||                    // zero-width joiner
        cp >= 0x1F000) {                   // emoji and symbol planes
      return true;
    }
  }
  return false;
}

const char* failure_reason_name(FailureReason r) {
  switch (r) {
    case FailureReason::Divergence: return "divergence";
    case FailureReason::WindowOverflow: return "window_overflow";
    case FailureReason::SpecialCharacters: return "special_characters";
  }
  return "?";
}

FixtureTokenizer::FixtureTokenizer(TokenizerKind kind, std::vector<std::string> vocab,
                                   std::vector<int32_t> special_ids, bool allow_extend)
    : kind_(kind), vocab_(std::move(vocab)), special_(std::move(special_ids)),
      allow_extend_(allow_extend) {
  for (size_t i = 0; i < vocab_.size(); ++i) lookup_[vocab_[i]] = static_cast<int32_t>(i);
}

FixtureTokenizer FixtureTokenizer::char_tokenizer() {
  return FixtureTokenizer(TokenizerKind::Char, {}, {}, true);
}

FixtureTokenizer FixtureTokenizer::word_tokenizer() {
  return FixtureTokenizer(TokenizerKind::Word, {}, {}, true);
}

FixtureTokenizer FixtureTokenizer::merge_tokenizer(std::vector<std::string> merges) {
  return FixtureTokenizer(TokenizerKind::GreedyMerge, std::move(merges), {}, true);
}

int32_t FixtureTokenizer::id_for(const std::string& text) {
  auto it = lookup_.find(text);
  if (it != lookup_.end()) return it->second;
  if (!allow_extend_) throw config_error("tokenizer: token text not in fixed vocabulary: '" + text + "'");
  const int32_t id = static_cast<int32_t>(vocab_.size());
  vocab_.push_back(text);
  lookup_[text] = id;
  return id;
}

std::vector<int32_t> FixtureTokenizer::encode(const std::string& text) {
  std::vector<int32_t> out;
  const std::vector<uint32_t> cps = utf8_to_codepoints(text);
  if (kind_ == TokenizerKind::Char) {
    for (uint32_t cp : cps) {
      std::string t;
      append_utf8(t, cp);
      out.push_back(id_for(t));
    }
  } else if (kind_ == TokenizerKind::Word) {
    size_t i = 0;
    while (i < cps.size()) {
      const bool ws = is_whitespace_cp(cps[i]);
      std::string run;
      while (i < cps.size() && is_whitespace_cp(cps[i]) == ws) append_utf8(run, cps[i++]);
      out.push_back(id_for(run));
    }
  } else {
    // Greedy longest-match against the merge table; unmatched codepoints fall
    // back to single-char tokens.
    std::string rest;
    for (uint32_t cp : cps) append_utf8(rest, cp);
    size_t pos = 0;
    while (pos < rest.size()) {
      size_t best_len = 0;
      int32_t best_id = -1;
      for (size_t v = 0; v < vocab_.size(); ++v) {
        const std::string& cand = vocab_[v];
        if (cand.size() > best_len && cand.size() <= rest.size() - pos &&
            rest.compare(pos, cand.size(), cand) == 0) {
          best_len = cand.size();
          best_id = static_cast<int32_t>(v);
        }
      }
      if (best_id < 0) {
        const std::vector<uint32_t> one = utf8_to_codepoints(rest.substr(pos, 4));
        std::string t;
        append_utf8(t, one.empty() ? 0xFFFD : one[0]);
        best_id = id_for(t);
        best_len = t.size();
      }
      out.push_back(best_id);
      pos += best_len;
    }
  }
  return out;
}

std::string FixtureTokenizer::decode(const std::vector<int32_t>& ids, int64_t begin,
                                     int64_t end) const {
  std::string out;
  for (int64_t i = begin; i < end; ++i) {
    const int32_t id = ids[i];
    if (id < 0 || id >= static_cast<int32_t>(vocab_.size()))
      throw shape_error("tokenizer: token id out of range");
    out += vocab_[id];
  }
  return out;
}

std::string FixtureTokenizer::token_text(int32_t id) const {
  if (id < 0 || id >= static_cast<int32_t>(vocab_.size()))
    throw shape_error("tokenizer: token id out of range");
  return vocab_[id];
}

bool FixtureTokenizer::non_content(int32_t id) const {
  if (std::find(special_.begin(), special_.end(), id) != special_.end()) return true;
  const std::string& t = vocab_[id];
  for (uint32_t cp : utf8_to_codepoints(t)) {
    if (!is_whitespace_cp(cp)) return false;
  }
  return true;
}

namespace {

FailureReason classify_failure(const std::string& wa, const std::string& wb, bool overflow_limited) {
  if (contains_special_characters(wa) || contains_special_characters(wb))
    return FailureReason::SpecialCharacters;
  if (overflow_limited) return FailureReason::WindowOverflow;
  return FailureReason::Divergence;
}

}  // namespace

AlignmentResult align(const TokenStream& a, const TokenStream& b, int64_t max_window) {
  if (max_window < 1) throw config_error("align: max_window must be >= 1");
  const int64_t na = static_cast<int64_t>(a.tokens.size());
  const int64_t nb = static_cast<int64_t>(b.tokens.size());
  AlignmentResult res;
  int64_t pa = 0, pb = 0;

  auto skip_non_content = [&]() {
    while (pa < na && a.tokenizer->non_content(a.tokens[pa])) ++pa;
    while (pb < nb && b.tokenizer->non_content(b.tokens[pb])) ++pb;
  };

  while (true) {
    skip_non_content();
    if (pa >= na || pb >= nb) break;

    const std::string sa = normalize_text(a.tokenizer->decode(a.tokens, pa, pa + 1));
    const std::string sb = normalize_text(b.tokenizer->decode(b.tokens, pb, pb + 1));
    if (sa == sb) {
      res.pairs.push_back({pa, pb});
      ++pa;
      ++pb;
      continue;
    }

    // Window expansion: grow the side whose normalized text is shorter (A
    // first on ties) until the texts match or neither side can grow.
    int64_t ea = pa + 1, eb = pb + 1;
    bool found = false;
    bool overflow_limited = false;
    std::string wa_raw = a.tokenizer->decode(a.tokens, pa, ea);
    std::string wb_raw = b.tokenizer->decode(b.tokens, pb, eb);
    while (true) {
      const std::string wa = normalize_text(wa_raw);
      const std::string wb = normalize_text(wb_raw);
      if (wa == wb) {
        res.pairs.push_back({ea - 1, eb - 1});
        pa = ea;
        pb = eb;
        found = true;
        break;
      }
      const bool can_a = ea < na && (ea - pa) < max_window;
      const bool can_b = eb < nb && (eb - pb) < max_window;
      if ((ea < na && (ea - pa) >= max_window) || (eb < nb && (eb - pb) >= max_window)) {
        overflow_limited = true;
      }
      if (codepoint_count(wa) <= codepoint_count(wb) && can_a) {
        wa_raw += a.tokenizer->decode(a.tokens, ea, ea + 1);
        ++ea;
      } else if (can_b) {
        wb_raw += b.tokenizer->decode(b.tokens, eb, eb + 1);
        ++eb;
      } else {
        break;
      }
    }
    if (!found) {
      res.failure = AlignmentFailure{pa, pb, classify_failure(wa_raw, wb_raw, overflow_limited)};
      res.consumed_a = pa;
      res.consumed_b = pb;
      return res;
    }
  }

  // One-sided leftover content is a tail divergence: the paired stream ended.
  if (pa < na || pb < nb) {
    const std::string left = pa < na ? a.tokenizer->decode(a.tokens, pa, std::min(na, pa + 4))
                                     : b.tokenizer->decode(b.tokens, pb, std::min(nb, pb + 4));
    res.failure = AlignmentFailure{pa, pb, classify_failure(left, "", false)};
  }
  res.consumed_a = pa;
  res.consumed_b = pb;
  return res;
}

ActivationPairBatch extract_aligned_activations(const AlignmentResult& result, const Mat& acts_a,
                                                const Mat& acts_b) {
  const int64_t n = static_cast<int64_t>(result.pairs.size());
  ActivationPairBatch out;
  out.x_a = Mat(n, acts_a.cols);
  out.x_b = Mat(n, acts_b.cols);
  for (int64_t i = 0; i < n; ++i) {
    const auto& p = result.pairs[i];
    if (p.idx_a < 0 || p.idx_a >= acts_a.rows || p.idx_b < 0 || p.idx_b >= acts_b.rows)
      throw shape_error("extract_aligned_activations: pair index out of bounds");
    std::copy(acts_a.row(p.idx_a), acts_a.row(p.idx_a) + acts_a.cols, out.x_a.row(i));
    std::copy(acts_b.row(p.idx_b), acts_b.row(p.idx_b) + acts_b.cols, out.x_b.row(i));
  }
  return out;
}

CorpusStats alignment_stats(const std::vector<AlignmentResult>& results,
                            const std::vector<std::pair<int64_t, int64_t>>& stream_lengths) {
  if (results.size() != stream_lengths.size())
    throw shape_error("alignment_stats: results/lengths size mismatch");
  CorpusStats stats;
  stats.total = static_cast<int64_t>(results.size());
  for (size_t i = 0; i < results.size(); ++i) {
    const AlignmentResult& r = results[i];
    if (r.fully_aligned(stream_lengths[i].first, stream_lengths[i].second)) {
      stats.success++;
    } else {
      const FailureReason reason = r.failure ? r.failure->reason : FailureReason::Divergence;
      stats.failure_reasons[reason]++;
    }
  }
  return stats;
}

}  // namespace crossdiff
