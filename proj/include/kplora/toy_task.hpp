#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include "kplora/answer_grammar.hpp"
#include "kplora/dataset_builder.hpp"
#include "kplora/error.hpp"
#include "kplora/rng.hpp"
#include "kplora/types.hpp"

namespace kplora {

// Token ids: 0..3 special, 4..19 characters, then one token per class name
// in vocabulary order.
class Vocab {
public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kFirstChar = 4;
  static constexpr std::string_view kChars = "0123456789(),: \n";

  explicit Vocab(ClassVocab classes = default_class_vocab()) : classes_(std::move(classes)) {
    for (const auto& name : classes_.names())
      if (name.empty()) throw ConfigError("class names in the token vocabulary must be non-empty");
  }

  int size() const noexcept {
    return kFirstChar + static_cast<int>(kChars.size()) + static_cast<int>(classes_.size());
  }
  const ClassVocab& classes() const noexcept { return classes_; }

  int char_id(char c) const {
    const auto p = kChars.find(c);
    return p == std::string_view::npos ? -1 : kFirstChar + static_cast<int>(p);
  }
  int class_id(std::size_t index) const {
    return kFirstChar + static_cast<int>(kChars.size()) + static_cast<int>(index);
  }

  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < text.size()) {
      std::size_t best = SIZE_MAX, best_len = 0;
      for (std::size_t c = 0; c < classes_.size(); ++c) {
        const auto& name = classes_.names()[c];
        if (name.size() > best_len && text.substr(i, name.size()) == name) {
          best = c;
          best_len = name.size();
        }
      }
      if (best != SIZE_MAX) {
        ids.push_back(class_id(best));
        i += best_len;
        continue;
      }
      const int id = char_id(text[i]);
      if (id < 0)
        throw FormatError("character '" + std::string(1, text[i]) + "' is not in the vocabulary", i);
      ids.push_back(id);
      ++i;
    }
    return ids;
  }

  std::string token_text(int id) const {
    switch (id) {
      case kPad: return "<pad>";
      case kBos: return "<bos>";
      case kEos: return "<eos>";
      case kSep: return "<sep>";
      default: break;
    }
    const int c = id - kFirstChar;
    if (c >= 0 && c < static_cast<int>(kChars.size())) return std::string(1, kChars[c]);
    const int k = c - static_cast<int>(kChars.size());
    if (k >= 0 && k < static_cast<int>(classes_.size())) return classes_.names()[k];
    throw ContractError("token id " + std::to_string(id) + " is outside the vocabulary");
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) out += token_text(id);
    return out;
  }

private:
  ClassVocab classes_;
};

// How the observation string relates to the answer. `mirror` reports every
// coordinate v as (lo + hi) - v, which is its own inverse on [lo, hi].
enum class ObservationTransform { identity, mirror };

struct ToyTaskConfig {
  int width = 100;
  int height = 100;
  int coord_min = 10;
  int coord_max = 89;
  ObservationTransform transform = ObservationTransform::mirror;
};

struct ToySample {
  std::string sample_id;
  ToolInstance truth;
  std::string observation;
  std::string answer;
};

inline double apply_transform(double v, const ToyTaskConfig& cfg) {
  return cfg.transform == ObservationTransform::mirror ? (cfg.coord_min + cfg.coord_max) - v : v;
}

inline ToolInstance transform_instance(ToolInstance t, const ToyTaskConfig& cfg) {
  for (auto& k : t.keypoints) {
    k.x = apply_transform(k.x, cfg);
    k.y = apply_transform(k.y, cfg);
  }
  return t;
}

// Both supported transforms are involutions.
inline ToolInstance invert_observation(std::string_view observation, const ToyTaskConfig& cfg) {
  const ParseResult parsed = parse_prediction(observation, {ParseMode::strict});
  if (!parsed.ok() || parsed.instances.size() != 1)
    throw FormatError("observation is not a single canonical instance",
                      parsed.fatal ? parsed.fatal->offset : 0);
  return transform_instance(parsed.instances.front(), cfg);
}

// Scenes with one tool whose 12 keypoints sit on the integer grid
// [coord_min, coord_max]^2. Deterministic in (n, seed, cfg, classes).
inline std::vector<ToySample> make_toy_task(std::size_t n, std::uint64_t seed,
                                            const ToyTaskConfig& cfg = {},
                                            const ClassVocab& classes = default_class_vocab()) {
  if (cfg.coord_min < 0 || cfg.coord_max > std::min(cfg.width, cfg.height) || cfg.coord_min > cfg.coord_max)
    throw ConfigError("toy coordinate range must lie inside the image");
  Rng rng(seed);
  std::vector<ToySample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ToySample s;
    char id[64];
    std::snprintf(id, sizeof id, "toy-%llu-%05zu", static_cast<unsigned long long>(seed), i);
    s.sample_id = id;
    s.truth.class_name = classes.names()[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(classes.size()) - 1))];
    for (auto& k : s.truth.keypoints) {
      k.x = static_cast<double>(rng.uniform_int(cfg.coord_min, cfg.coord_max));
      k.y = static_cast<double>(rng.uniform_int(cfg.coord_min, cfg.coord_max));
    }
    s.answer = serialize_answer({s.truth});
    s.observation = serialize_answer({transform_instance(s.truth, cfg)});
    out.push_back(std::move(s));
  }
  return out;
}

// Ground truth for evaluation, in the annotation schema.
inline Dataset toy_ground_truth(const std::vector<ToySample>& samples, const ToyTaskConfig& cfg = {},
                                const ClassVocab& classes = default_class_vocab()) {
  Dataset ds;
  ds.classes = classes.names();
  for (const auto& s : samples)
    ds.samples.push_back({s.sample_id, "toy/" + s.sample_id + ".txt", cfg.width, cfg.height, {s.truth}});
  return ds;
}

// <bos> observation <sep> answer <eos>. The loss covers every token after
// <sep>, i.e. the answer and the closing <eos>.
struct TokenizedExample {
  std::vector<int> tokens;
  std::size_t answer_start = 0;  // index of the first answer token in `tokens`

  std::vector<int> prompt() const {
    return std::vector<int>(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(answer_start));
  }
};

inline TokenizedExample encode_example(const ToySample& s, const Vocab& vocab) {
  TokenizedExample ex;
  ex.tokens.push_back(Vocab::kBos);
  for (int id : vocab.tokenize(s.observation)) ex.tokens.push_back(id);
  ex.tokens.push_back(Vocab::kSep);
  ex.answer_start = ex.tokens.size();
  for (int id : vocab.tokenize(s.answer)) ex.tokens.push_back(id);
  ex.tokens.push_back(Vocab::kEos);
  return ex;
}

}  // namespace kplora
