#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace kplora {

inline constexpr std::size_t kKeypointCount = 12;
inline constexpr std::size_t kClassCount = 14;

struct Keypoint {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

using KeypointArray = std::array<Keypoint, kKeypointCount>;

struct ToolInstance {
  std::string class_name;
  KeypointArray keypoints{};

  friend bool operator==(const ToolInstance&, const ToolInstance&) = default;
};

struct ImageSample {
  std::string image_id;
  std::string image_path;
  int width = 0;
  int height = 0;
  std::vector<ToolInstance> instances;
};

struct Dataset {
  std::vector<std::string> classes;
  std::vector<ImageSample> samples;

  std::size_t instance_count() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.instances.size();
    return n;
  }
};

// Ordered class vocabulary. Order matters: the toy language model assigns
// token ids in this order.
class ClassVocab {
public:
  ClassVocab() = default;
  explicit ClassVocab(std::vector<std::string> names) : names_(std::move(names)) {}

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t size() const noexcept { return names_.size(); }
  bool empty() const noexcept { return names_.empty(); }

  bool contains(std::string_view name) const {
    return std::find(names_.begin(), names_.end(), name) != names_.end();
  }

private:
  std::vector<std::string> names_;
};

// Fourteen single-word instrument identifiers used by the fixtures and the
// toy task when no annotation file supplies its own list.
inline ClassVocab default_class_vocab() {
  return ClassVocab({"Scissors", "Forceps", "Scalpel", "NeedleHolder", "Retractor",
                     "Clamp", "Hook", "Probe", "Tweezers", "Dissector", "Trocar",
                     "Suction", "Stapler", "Grasper"});
}

}  // namespace kplora
