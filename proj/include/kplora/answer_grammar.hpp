#pragma once

#include <cctype>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kplora/types.hpp"

namespace kplora {

inline constexpr std::string_view kUnknownClass = "unknown";

enum class ParseMode { strict, recover };

struct ParsePolicy {
  ParseMode mode = ParseMode::strict;
  // Pad instances with fewer than 12 pairs by repeating the last pair instead
  // of dropping them. Recover mode only; always produces a warning.
  bool pad_short = false;
  // Class words that start an instance during recovery.
  ClassVocab vocab = default_class_vocab();
};

struct ParseDiagnostic {
  std::size_t offset = 0;
  std::string message;
};

struct ParseResult {
  std::vector<ToolInstance> instances;
  std::vector<ParseDiagnostic> warnings;
  std::optional<ParseDiagnostic> fatal;

  bool ok() const noexcept { return !fatal.has_value(); }
};

namespace grammar_detail {

inline bool is_digit(char c) { return c >= '0' && c <= '9'; }
inline bool is_alpha(char c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z'); }
inline bool is_word(char c) { return is_alpha(c) || is_digit(c) || c == '_'; }
inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline double round_half_up_real(double v) { return std::floor(v + 0.5); }

// Recursive-descent parser for the canonical grammar. Every failure records
// the byte offset where the input first deviates.
class StrictParser {
public:
  explicit StrictParser(std::string_view text) : text_(text) {}

  ParseResult run() {
    ParseResult result;
    if (text_.empty()) return fail(result, 0, "empty answer");
    while (true) {
      ToolInstance inst;
      if (!line(inst)) return fail(result, pos_, error_);
      result.instances.push_back(std::move(inst));
      if (pos_ == text_.size()) break;
      if (text_[pos_] != '\n') return fail(result, pos_, "expected newline or end of text");
      ++pos_;
    }
    return result;
  }

private:
  static ParseResult fail(ParseResult& r, std::size_t offset, std::string msg) {
    r.instances.clear();
    r.fatal = ParseDiagnostic{offset, std::move(msg)};
    return r;
  }

  bool error(std::string msg) {
    error_ = std::move(msg);
    return false;
  }

  bool expect(std::string_view lit) {
    if (text_.substr(pos_, lit.size()) != lit)
      return error("expected '" + std::string(lit) + "'");
    pos_ += lit.size();
    return true;
  }

  bool name(std::string& out) {
    const std::size_t start = pos_;
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == ':' || c == '\n' || c == '(' || c == ')' || c == ',') break;
      if (!(is_word(c) || c == ' ' || c == '-')) return error("invalid character in class name");
      ++pos_;
    }
    if (pos_ == start) return error("expected class name");
    if (text_[start] == ' ' || text_[pos_ - 1] == ' ') {
      pos_ = text_[start] == ' ' ? start : pos_ - 1;
      return error("class name has surrounding spaces");
    }
    out.assign(text_.substr(start, pos_ - start));
    return true;
  }

  bool integer(double& out) {
    if (pos_ >= text_.size() || !is_digit(text_[pos_])) return error("expected digit");
    if (text_[pos_] == '0' && pos_ + 1 < text_.size() && is_digit(text_[pos_ + 1]))
      return error("leading zero");
    double v = 0.0;
    while (pos_ < text_.size() && is_digit(text_[pos_])) v = v * 10.0 + (text_[pos_++] - '0');
    out = v;
    return true;
  }

  bool pair(Keypoint& kp) {
    return expect("(") && integer(kp.x) && expect(", ") && integer(kp.y) && expect(")");
  }

  bool line(ToolInstance& inst) {
    if (!name(inst.class_name) || !expect(": ")) return false;
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
      if (k && !expect(", ")) return false;
      if (!pair(inst.keypoints[k])) return false;
    }
    return true;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::string error_;
};

struct FoundPair {
  std::size_t offset;
  Keypoint point;
};

struct FoundClass {
  std::size_t offset;
  std::string name;
};

// Scans a number at `i`: [+-]?digits(.digits)?. Returns the end offset, or
// npos. With `allow_fraction` false the fractional part is not consumed.
inline std::size_t scan_number(std::string_view t, std::size_t i, bool allow_fraction,
                               double& value) {
  std::size_t p = i;
  bool negative = false;
  if (p < t.size() && (t[p] == '+' || t[p] == '-')) negative = t[p++] == '-';
  if (p >= t.size() || !is_digit(t[p])) return std::string_view::npos;
  double v = 0.0;
  while (p < t.size() && is_digit(t[p])) v = v * 10.0 + (t[p++] - '0');
  if (allow_fraction && p + 1 < t.size() && t[p] == '.' && is_digit(t[p + 1])) {
    ++p;
    double scale = 0.1;
    while (p < t.size() && is_digit(t[p])) {
      v += (t[p++] - '0') * scale;
      scale *= 0.1;
    }
  }
  value = negative ? -v : v;
  return p;
}

// A pair is `x <spaces> , <spaces> y` where x does not continue a word or a
// decimal and y is not followed by a word character.
inline std::vector<FoundPair> scan_pairs(std::string_view t) {
  std::vector<FoundPair> out;
  std::size_t i = 0;
  while (i < t.size()) {
    const char c = t[i];
    const bool starts = is_digit(c) || ((c == '+' || c == '-') && i + 1 < t.size() && is_digit(t[i + 1]));
    const bool boundary = i == 0 || !(is_word(t[i - 1]) || t[i - 1] == '.');
    if (!starts || !boundary) {
      ++i;
      continue;
    }
    double x = 0.0, y = 0.0;
    std::size_t p = scan_number(t, i, true, x);
    while (p < t.size() && is_space(t[p])) ++p;
    if (p < t.size() && t[p] == ',') {
      ++p;
      while (p < t.size() && is_space(t[p])) ++p;
      std::size_t end = scan_number(t, p, true, y);
      if (end != std::string_view::npos && end < t.size() && is_word(t[end])) {
        // Fall back to the integer part when a fraction is followed by a word.
        end = scan_number(t, p, false, y);
        if (end != std::string_view::npos && end < t.size() && is_word(t[end]))
          end = std::string_view::npos;
      }
      if (end != std::string_view::npos) {
        out.push_back({i, {round_half_up_real(x), round_half_up_real(y)}});
        i = end;
        continue;
      }
    }
    ++i;
  }
  return out;
}

inline bool iequals_at(std::string_view t, std::size_t i, std::string_view word) {
  if (i + word.size() > t.size()) return false;
  for (std::size_t k = 0; k < word.size(); ++k) {
    if (std::tolower(static_cast<unsigned char>(t[i + k])) !=
        std::tolower(static_cast<unsigned char>(word[k])))
      return false;
  }
  return true;
}

// Whole-word, case-insensitive occurrences of vocabulary names.
inline std::vector<FoundClass> scan_classes(std::string_view t, const ClassVocab& vocab) {
  std::vector<FoundClass> out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!is_word(t[i]) || (i > 0 && is_word(t[i - 1]))) continue;
    const std::string* best = nullptr;
    for (const auto& name : vocab.names()) {
      if (name.empty() || !iequals_at(t, i, name)) continue;
      const std::size_t end = i + name.size();
      if (end < t.size() && is_word(t[end])) continue;
      if (!best || name.size() > best->size()) best = &name;
    }
    if (best) {
      out.push_back({i, *best});
      i += best->size() - 1;
    }
  }
  return out;
}

inline ParseResult recover(std::string_view text, const ParsePolicy& policy,
                           const ParseDiagnostic& strict_failure) {
  ParseResult result;
  const auto pairs = scan_pairs(text);
  if (pairs.empty()) {
    result.fatal = ParseDiagnostic{0, "no coordinate pairs found"};
    return result;
  }
  result.warnings.push_back(
      {strict_failure.offset, "non-canonical syntax: " + strict_failure.message});

  struct Segment {
    std::size_t offset;
    std::string name;
    std::vector<Keypoint> points;
  };
  std::vector<Segment> segments;
  const auto classes = scan_classes(text, policy.vocab);
  std::size_t next_class = 0;
  for (const auto& p : pairs) {
    while (next_class < classes.size() && classes[next_class].offset < p.offset) {
      segments.push_back({classes[next_class].offset, classes[next_class].name, {}});
      ++next_class;
    }
    if (segments.empty()) segments.push_back({p.offset, std::string(kUnknownClass), {}});
    segments.back().points.push_back(p.point);
  }

  for (auto& seg : segments) {
    if (seg.points.empty()) continue;
    const std::size_t n = seg.points.size();
    if (seg.name == kUnknownClass)
      result.warnings.push_back({seg.offset, "pairs found before any class name; class set to 'unknown'"});
    if (n > kKeypointCount) {
      result.warnings.push_back({seg.offset, "instance '" + seg.name + "' has " + std::to_string(n) +
                                                 " pairs; keeping the first 12"});
      seg.points.resize(kKeypointCount);
    } else if (n < kKeypointCount) {
      if (!policy.pad_short) {
        result.warnings.push_back({seg.offset, "instance '" + seg.name + "' has only " +
                                                   std::to_string(n) + " pairs; dropped"});
        continue;
      }
      result.warnings.push_back({seg.offset, "instance '" + seg.name + "' has only " +
                                                 std::to_string(n) +
                                                 " pairs; padded by repeating the last pair"});
      seg.points.resize(kKeypointCount, seg.points.back());
    }
    ToolInstance inst;
    inst.class_name = seg.name;
    for (std::size_t k = 0; k < kKeypointCount; ++k) inst.keypoints[k] = seg.points[k];
    result.instances.push_back(std::move(inst));
  }
  return result;
}

}  // namespace grammar_detail

// Parses raw model output into tool instances. Strict mode accepts only the
// canonical answer grammar. Recover mode returns the strict result when it
// succeeds and otherwise extracts comma-separated numeric pairs, assigning
// them to the most recent class-name mention.
inline ParseResult parse_prediction(std::string_view text, const ParsePolicy& policy = {}) {
  ParseResult strict = grammar_detail::StrictParser(text).run();
  if (strict.ok() || policy.mode == ParseMode::strict) return strict;
  return grammar_detail::recover(text, policy, *strict.fatal);
}

enum class ViolationKind { out_of_bounds, unknown_class };

struct Violation {
  ViolationKind kind;
  std::size_t instance = 0;
  std::size_t keypoint = 0;  // meaningful for out_of_bounds only
  std::string message;
};

inline std::vector<Violation> validate_instances(const ParseResult& result, int width, int height,
                                                 const ClassVocab& vocab = default_class_vocab()) {
  std::vector<Violation> out;
  for (std::size_t i = 0; i < result.instances.size(); ++i) {
    const auto& inst = result.instances[i];
    if (!vocab.contains(inst.class_name))
      out.push_back({ViolationKind::unknown_class, i, 0,
                     "instance " + std::to_string(i) + ": unknown class '" + inst.class_name + "'"});
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
      const auto& p = inst.keypoints[k];
      if (p.x < 0.0 || p.x > width || p.y < 0.0 || p.y > height)
        out.push_back({ViolationKind::out_of_bounds, i, k,
                       "instance " + std::to_string(i) + " keypoint " + std::to_string(k) +
                           " outside " + std::to_string(width) + "x" + std::to_string(height)});
    }
  }
  return out;
}

}  // namespace kplora
