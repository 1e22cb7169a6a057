#pragma once

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kplora/error.hpp"
#include "kplora/types.hpp"

namespace kplora {

// Sent verbatim with every image; byte-exact.
inline constexpr std::string_view kFixedPrompt =
    "What is/are this/these tool(s) and find 12 keypoints?";

struct InstructionRecord {
  std::string sample_id;
  std::string image_ref;
  std::string prompt;
  std::string answer;

  friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

struct EmissionStats {
  std::size_t records = 0;
  std::size_t instances = 0;

  friend bool operator==(const EmissionStats&, const EmissionStats&) = default;
};

// Round half up, the single rounding rule used for every rendered coordinate.
inline long long round_half_up(double v) { return static_cast<long long>(std::floor(v + 0.5)); }

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, std::strerror(errno));
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError(path, "read failed");
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, std::strerror(errno));
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) throw IoError(path, "write failed");
}

namespace detail {

inline const nlohmann::json& member(const nlohmann::json& obj, const char* key,
                                    const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw SchemaError(where + ": missing field '" + key + "'");
  return obj.at(key);
}

inline std::string string_member(const nlohmann::json& obj, const char* key,
                                 const std::string& where) {
  const auto& v = member(obj, key, where);
  if (!v.is_string()) throw SchemaError(where + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

inline int positive_int_member(const nlohmann::json& obj, const char* key,
                               const std::string& where) {
  const auto& v = member(obj, key, where);
  if (!v.is_number_integer() || v.get<long long>() <= 0 || v.get<long long>() > INT32_MAX)
    throw SchemaError(where + ": field '" + key + "' must be a positive integer");
  return v.get<int>();
}

}  // namespace detail

// Parses an annotation document held in memory. `class_vocab` overrides the
// document's own "classes" list when non-empty.
inline Dataset parse_annotations(const std::string& text, const ClassVocab& class_vocab = {}) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("malformed annotation JSON: ") + e.what(),
                      e.byte == 0 ? 0 : e.byte - 1);
  }
  if (!doc.is_object()) throw SchemaError("annotation document must be a JSON object");

  Dataset ds;
  const auto& classes = detail::member(doc, "classes", "document");
  if (!classes.is_array()) throw SchemaError("document: 'classes' must be an array");
  for (const auto& c : classes) {
    if (!c.is_string()) throw SchemaError("document: class names must be strings");
    ds.classes.push_back(c.get<std::string>());
  }
  if (!class_vocab.empty()) ds.classes = class_vocab.names();
  if (ds.classes.size() != kClassCount)
    throw SchemaError("class vocabulary must hold " + std::to_string(kClassCount) +
                      " entries, got " + std::to_string(ds.classes.size()));
  const ClassVocab vocab(ds.classes);

  const auto& images = detail::member(doc, "images", "document");
  if (!images.is_array()) throw SchemaError("document: 'images' must be an array");

  std::set<std::string> seen_ids;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    const std::string where = "images[" + std::to_string(i) + "]";
    ImageSample sample;
    sample.image_id = detail::string_member(img, "image_id", where);
    const std::string sid = "sample '" + sample.image_id + "'";
    if (!seen_ids.insert(sample.image_id).second)
      throw SchemaError(sid + ": duplicate image_id");
    sample.image_path = detail::string_member(img, "image_path", sid);
    sample.width = detail::positive_int_member(img, "width", sid);
    sample.height = detail::positive_int_member(img, "height", sid);

    const auto& instances = detail::member(img, "instances", sid);
    if (!instances.is_array() || instances.empty())
      throw SchemaError(sid + ": 'instances' must be a non-empty array");
    for (std::size_t j = 0; j < instances.size(); ++j) {
      const auto& inst = instances[j];
      const std::string iw = sid + " instance " + std::to_string(j);
      ToolInstance tool;
      tool.class_name = detail::string_member(inst, "class_name", iw);
      if (!vocab.contains(tool.class_name))
        throw VocabularyError(iw + ": unknown class name '" + tool.class_name + "'");
      const auto& kps = detail::member(inst, "keypoints", iw);
      if (!kps.is_array() || kps.size() != kKeypointCount)
        throw SchemaError(iw + ": expected " + std::to_string(kKeypointCount) +
                          " keypoints, got " + std::to_string(kps.is_array() ? kps.size() : 0));
      for (std::size_t k = 0; k < kKeypointCount; ++k) {
        const auto& p = kps[k];
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
          throw SchemaError(iw + ": keypoint " + std::to_string(k) + " must be [x, y]");
        const double x = p[0].get<double>();
        const double y = p[1].get<double>();
        if (!(x >= 0.0 && x <= sample.width && y >= 0.0 && y <= sample.height))
          throw SchemaError(iw + ": keypoint " + std::to_string(k) + " lies outside the " +
                            std::to_string(sample.width) + "x" + std::to_string(sample.height) +
                            " image");
        tool.keypoints[k] = {x, y};
      }
      sample.instances.push_back(std::move(tool));
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

inline Dataset load_annotations(const std::string& path, const ClassVocab& class_vocab = {}) {
  return parse_annotations(read_text_file(path), class_vocab);
}

inline nlohmann::ordered_json annotations_to_json(const Dataset& ds) {
  nlohmann::ordered_json doc;
  doc["classes"] = ds.classes;
  doc["images"] = nlohmann::ordered_json::array();
  for (const auto& s : ds.samples) {
    nlohmann::ordered_json img;
    img["image_id"] = s.image_id;
    img["image_path"] = s.image_path;
    img["width"] = s.width;
    img["height"] = s.height;
    img["instances"] = nlohmann::ordered_json::array();
    for (const auto& t : s.instances) {
      nlohmann::ordered_json inst;
      inst["class_name"] = t.class_name;
      inst["keypoints"] = nlohmann::ordered_json::array();
      for (const auto& k : t.keypoints) inst["keypoints"].push_back({k.x, k.y});
      img["instances"].push_back(std::move(inst));
    }
    doc["images"].push_back(std::move(img));
  }
  return doc;
}

inline void save_annotations(const Dataset& ds, const std::string& path) {
  write_text_file(path, annotations_to_json(ds).dump(1) + "\n");
}

// Canonical multi-instance order: ascending centroid x of the rounded
// keypoints, ties broken by centroid y. Stable for full ties.
inline std::vector<ToolInstance> canonical_order(std::vector<ToolInstance> instances) {
  auto centroid = [](const ToolInstance& t) {
    long long sx = 0, sy = 0;
    for (const auto& k : t.keypoints) {
      sx += round_half_up(k.x);
      sy += round_half_up(k.y);
    }
    return std::pair{sx, sy};  // sums order the same way as means
  };
  std::stable_sort(instances.begin(), instances.end(),
                   [&](const ToolInstance& a, const ToolInstance& b) {
                     return centroid(a) < centroid(b);
                   });
  return instances;
}

// One line per instance, in input order:
//   Name: (x1, y1), (x2, y2), ..., (x12, y12)
inline std::string serialize_answer(const std::vector<ToolInstance>& instances) {
  std::string out;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (i) out += '\n';
    out += instances[i].class_name;
    out += ": ";
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
      if (k) out += ", ";
      const auto& p = instances[i].keypoints[k];
      out += '(';
      out += std::to_string(round_half_up(p.x));
      out += ", ";
      out += std::to_string(round_half_up(p.y));
      out += ')';
    }
  }
  return out;
}

inline InstructionRecord build_instruction_record(const ImageSample& sample) {
  return {sample.image_id, sample.image_path, std::string(kFixedPrompt),
          serialize_answer(canonical_order(sample.instances))};
}

inline nlohmann::ordered_json record_to_json(const InstructionRecord& r) {
  nlohmann::ordered_json j;
  j["sample_id"] = r.sample_id;
  j["images"] = {r.image_ref};
  j["messages"] = nlohmann::ordered_json::array();
  j["messages"].push_back({{"role", "user"}, {"content", "<image> " + r.prompt}});
  j["messages"].push_back({{"role", "assistant"}, {"content", r.answer}});
  return j;
}

// Inverse of record_to_json; throws FormatError/SchemaError on bad lines.
inline std::vector<InstructionRecord> parse_instruction_jsonl(const std::string& text) {
  std::vector<InstructionRecord> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    if (!line.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed JSONL record: ") + e.what(),
                          pos + (e.byte == 0 ? 0 : e.byte - 1));
      }
      InstructionRecord r;
      const std::string where = "record at byte " + std::to_string(pos);
      r.sample_id = detail::string_member(j, "sample_id", where);
      const auto& images = detail::member(j, "images", where);
      const auto& msgs = detail::member(j, "messages", where);
      if (!images.is_array() || images.size() != 1 || !images[0].is_string())
        throw SchemaError(where + ": 'images' must hold one path");
      if (!msgs.is_array() || msgs.size() != 2)
        throw SchemaError(where + ": 'messages' must hold a user and an assistant turn");
      r.image_ref = images[0].get<std::string>();
      std::string user = detail::string_member(msgs[0], "content", where);
      constexpr std::string_view tag = "<image> ";
      if (user.rfind(tag, 0) != 0) throw SchemaError(where + ": user turn lacks the image tag");
      r.prompt = user.substr(tag.size());
      r.answer = detail::string_member(msgs[1], "content", where);
      out.push_back(std::move(r));
    }
    pos = end + 1;
  }
  return out;
}

inline EmissionStats emit_dataset(const Dataset& ds, const std::string& out_path) {
  std::string body;
  EmissionStats stats;
  for (const auto& s : ds.samples) {
    body += record_to_json(build_instruction_record(s)).dump();
    body += '\n';
    ++stats.records;
    stats.instances += s.instances.size();
  }
  write_text_file(out_path, body);
  return stats;
}

}  // namespace kplora
