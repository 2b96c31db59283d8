#pragma once

// Scene files, report serialization helpers and PGM heatmaps.
//
// A scene is one JSON document:
//   {
//     "schema_version": 1,
//     "channels": C, "height": H3, "width": W3,
//     "features": {"p3": [C*H3*W3], "p4": [...], "p5": [...]},   // channel-major
//     "prompts": [
//       {"embeddings": [L*C], "valid": [L bools], "mask": [H3*W3 of 0/1], "positive": bool},
//       ...
//     ]
//   }

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "expalign/gradients.hpp"
#include "expalign/tensor.hpp"

namespace expalign {

inline constexpr int kSchemaVersion = 1;

using Json = nlohmann::ordered_json;

/// Malformed input. `line` and `column` are 1-based and 0 when unknown;
/// `field` is a JSON pointer to the offending value when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line_, std::size_t column_, std::string field_)
      : std::runtime_error(what), line(line_), column(column_), field(std::move(field_)) {}

  std::size_t line;
  std::size_t column;
  std::string field;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

[[noreturn]] inline void field_error(const std::string& path, const std::string& what) {
  throw ParseError("scene field " + path + ": " + what, 0, 0, path);
}

inline const Json& member(const Json& obj, const std::string& path, const char* key) {
  if (!obj.is_object()) field_error(path, "expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) field_error(path + "/" + key, "missing");
  return *it;
}

inline int positive_int(const Json& v, const std::string& path) {
  if (!v.is_number_integer() || v.get<long long>() <= 0 || v.get<long long>() > 1 << 20)
    field_error(path, "expected a positive integer");
  return v.get<int>();
}

inline std::vector<double> number_array(const Json& v, const std::string& path,
                                        std::size_t expected) {
  if (!v.is_array()) field_error(path, "expected an array of numbers");
  if (v.size() != expected)
    field_error(path, "expected " + std::to_string(expected) + " values, found " +
                          std::to_string(v.size()));
  std::vector<double> out;
  out.reserve(expected);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) field_error(path + "/" + std::to_string(i), "expected a number");
    const double x = v[i].get<double>();
    if (!std::isfinite(x)) field_error(path + "/" + std::to_string(i), "non-finite value");
    out.push_back(x);
  }
  return out;
}

}  // namespace detail

inline Json scene_to_json(const Sample& s) {
  check_sample(s);
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["channels"] = s.features[0].channels;
  j["height"] = s.features[0].height;
  j["width"] = s.features[0].width;
  j["features"] = {{"p3", s.features[0].values},
                   {"p4", s.features[1].values},
                   {"p5", s.features[2].values}};
  Json prompts = Json::array();
  for (int p = 0; p < s.prompts(); ++p) {
    const auto m = s.masks.slice(p);
    std::vector<int> mask(m.begin(), m.end());
    std::vector<bool> valid(s.tokens[p].valid.begin(), s.tokens[p].valid.end());
    const bool positive = std::find(s.labels.positives.begin(), s.labels.positives.end(), p) !=
                          s.labels.positives.end();
    prompts.push_back({{"embeddings", s.tokens[p].embeddings},
                       {"valid", valid},
                       {"mask", mask},
                       {"positive", positive}});
  }
  j["prompts"] = std::move(prompts);
  return j;
}

inline Sample scene_from_json(const Json& j) {
  using detail::field_error;
  using detail::member;
  const auto& version = member(j, "", "schema_version");
  if (!version.is_number_integer() || version.get<int>() != kSchemaVersion)
    field_error("/schema_version", "unsupported schema version");
  const int C = detail::positive_int(member(j, "", "channels"), "/channels");
  const int H = detail::positive_int(member(j, "", "height"), "/height");
  const int W = detail::positive_int(member(j, "", "width"), "/width");
  if (H % 4 != 0 || W % 4 != 0) field_error("/height", "height and width must be multiples of 4");

  Sample s;
  const auto& feats = member(j, "", "features");
  const char* names[] = {"p3", "p4", "p5"};
  for (int sc = 0; sc < 3; ++sc) {
    FeatureMap fm(3 + sc, C, H >> sc, W >> sc);
    const std::string path = std::string("/features/") + names[sc];
    fm.values = detail::number_array(member(feats, "/features", names[sc]), path, fm.values.size());
    s.features[sc] = std::move(fm);
  }

  const auto& prompts = member(j, "", "prompts");
  if (!prompts.is_array() || prompts.empty()) field_error("/prompts", "expected a nonempty array");
  const int P = static_cast<int>(prompts.size());
  s.masks = InstanceMaskSet(P, H, W);
  s.labels.total_prompts = P;
  for (int p = 0; p < P; ++p) {
    const std::string base = "/prompts/" + std::to_string(p);
    const auto& pj = prompts[static_cast<std::size_t>(p)];
    const auto& valid = member(pj, base, "valid");
    if (!valid.is_array() || valid.empty()) field_error(base + "/valid", "expected a nonempty array");
    const int L = static_cast<int>(valid.size());
    TokenBatch t(L, C);
    t.embeddings = detail::number_array(member(pj, base, "embeddings"), base + "/embeddings",
                                        t.embeddings.size());
    for (int l = 0; l < L; ++l) {
      if (!valid[static_cast<std::size_t>(l)].is_boolean())
        field_error(base + "/valid/" + std::to_string(l), "expected a boolean");
      t.valid[l] = valid[static_cast<std::size_t>(l)].get<bool>();
    }
    if (!t.any_valid()) field_error(base + "/valid", "at least one token must be valid");
    s.tokens.push_back(std::move(t));

    const auto mask = detail::number_array(member(pj, base, "mask"), base + "/mask",
                                           static_cast<std::size_t>(H) * W);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] != 0.0 && mask[i] != 1.0)
        field_error(base + "/mask/" + std::to_string(i), "mask values must be 0 or 1");
      s.masks.values[static_cast<std::size_t>(p) * mask.size() + i] = mask[i] != 0.0;
    }
    const auto& positive = member(pj, base, "positive");
    if (!positive.is_boolean()) field_error(base + "/positive", "expected a boolean");
    if (positive.get<bool>()) s.labels.positives.push_back(p);
  }
  if (s.labels.positives.empty()) field_error("/prompts", "at least one prompt must be positive");
  return s;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

/// Parses JSON text, reporting syntax errors with their line and column.
inline Json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = detail::line_column(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ParseError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) +
                         ": malformed JSON",
                     line, col, "");
  }
}

inline Sample load_scene(const std::string& path) {
  const Json j = parse_json_text(read_text_file(path), path);
  try {
    return scene_from_json(j);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.line, e.column, e.field);
  }
}

/// Serialized report text: two-space indentation, trailing newline.
inline std::string dump_report(const Json& j) { return j.dump(2) + "\n"; }

// Heatmaps.

struct HeatmapBounds {
  double min = 0.0;
  double max = 0.0;
};

/// 8-bit min-max quantization of one map; a constant map is all zeros.
inline std::vector<std::uint8_t> quantize(std::span<const double> v, HeatmapBounds& bounds) {
  bounds.min = *std::min_element(v.begin(), v.end());
  bounds.max = *std::max_element(v.begin(), v.end());
  const double range = bounds.max - bounds.min;
  std::vector<std::uint8_t> out(v.size(), 0);
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround((v[i] - bounds.min) / range * 255.0));
  return out;
}

inline double dequantize(std::uint8_t q, const HeatmapBounds& b) {
  return b.min + (b.max - b.min) * static_cast<double>(q) / 255.0;
}

inline std::string pgm_bytes(int width, int height, const std::vector<std::uint8_t>& pixels) {
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(pixels.begin(), pixels.end());
  return out;
}

/// Writes one PGM per prompt plus `<stem>.json` recording the bounds.
/// Returns the sidecar document.
inline Json write_heatmaps(const AlignmentMap& m, const std::string& dir, const std::string& stem) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  Json side;
  side["schema_version"] = kSchemaVersion;
  side["width"] = m.width;
  side["height"] = m.height;
  side["levels"] = 255;
  Json maps = Json::array();
  for (int p = 0; p < m.prompts; ++p) {
    HeatmapBounds b;
    const auto pixels = quantize(m.slice(p), b);
    const std::string file = stem + "_prompt" + std::to_string(p) + ".pgm";
    write_text_file((std::filesystem::path(dir) / file).string(), pgm_bytes(m.width, m.height, pixels));
    maps.push_back({{"prompt", p}, {"file", file}, {"min", b.min}, {"max", b.max}});
  }
  side["maps"] = std::move(maps);
  write_text_file((std::filesystem::path(dir) / (stem + ".json")).string(), dump_report(side));
  return side;
}

/// Reads a binary PGM written by write_heatmaps.
inline std::vector<std::uint8_t> read_pgm(const std::string& path, int& width, int& height) {
  const std::string bytes = read_text_file(path);
  std::istringstream in(bytes);
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval != 255 || width <= 0 || height <= 0)
    throw ParseError(path + ": not an 8-bit binary PGM", 1, 1, "");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (bytes.size() < offset + n) throw ParseError(path + ": truncated PGM", 0, 0, "");
  return {bytes.begin() + static_cast<std::ptrdiff_t>(offset),
          bytes.begin() + static_cast<std::ptrdiff_t>(offset + n)};
}

}  // namespace expalign
