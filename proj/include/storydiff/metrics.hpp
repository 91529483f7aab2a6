#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "storydiff/synthetic.hpp"

namespace storydiff {

/// Mean pairwise identity-feature cosine over all unordered pairs.
double character_similarity(std::span<const Tensor> images);

/// Attributes recovered from pixels, compared against a decoded prompt.
struct AttributeGuess {
  int hue = 0;
  ShapeKind shape = ShapeKind::Circle;
  Accessory accessory = Accessory::None;
  int activity = 0;
};

/// Nearest-attribute classification. Activity prototypes are canonical
/// renders of the hinted identity, so the pose is judged against the
/// character the prompt asked for.
AttributeGuess classify_attributes(const Tensor& image, const CharacterIdentity& identity_hint);

/// Fraction of the four prompt attributes recovered, averaged over images.
double prompt_adherence(std::span<const Tensor> images, const std::vector<std::vector<int>>& prompts);

/// Mean over pixels of the RGB Euclidean distance.
double pixel_distance(const Tensor& a, const Tensor& b);
double pixel_mse(const Tensor& a, const Tensor& b);

// Clip metrics over [L, 16, 16, 3], L >= 2.
double first_frame_similarity(const Tensor& clip);
double frames_similarity(const Tensor& clip);
double first_frame_distance(const Tensor& clip);
double frames_distance(const Tensor& clip);

/// Frame i of a [L, 16, 16, 3] clip.
Tensor clip_frame(const Tensor& clip, int i);

struct MetricReport {
  std::vector<std::pair<std::string, double>> metrics;  // fixed insertion order
  nlohmann::ordered_json items = nlohmann::ordered_json::array();
  std::uint64_t seed = 0;
  std::string config_hash;

  void set(const std::string& name, double value);
  double get(const std::string& name) const;
  nlohmann::ordered_json to_json() const;
  /// Two-column table in insertion order.
  std::string table() const;
};

}  // namespace storydiff
