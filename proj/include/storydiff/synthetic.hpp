#pragma once

#include <Eigen/Core>

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "storydiff/rng.hpp"
#include "storydiff/tensor.hpp"

namespace storydiff {

inline constexpr int kImageSize = 16;
inline constexpr int kImageChannels = 3;
inline constexpr int kHueCount = 8;
inline constexpr int kShapeCount = 3;
inline constexpr int kAccessoryCount = 3;
inline constexpr int kActivityCount = 8;
inline constexpr int kBackgroundCount = 4;
inline constexpr int kIdentityCount = kHueCount * kShapeCount * kAccessoryCount;

enum class ShapeKind { Circle, Square, Triangle };
enum class Accessory { Hat, None, Scarf };

struct CharacterIdentity {
  int body_hue = 0;  // 0..7
  ShapeKind shape = ShapeKind::Circle;
  Accessory accessory = Accessory::None;

  int index() const;  // 0..71
  static CharacterIdentity from_index(int index);
  friend bool operator==(const CharacterIdentity&, const CharacterIdentity&) = default;
};

/// Rigid placement of the character; activities map to fixed poses.
struct Pose {
  float dx = 0.0f;
  float dy = 0.0f;
  float scale = 1.0f;
  float rotation_deg = 0.0f;

  static Pose lerp(const Pose& a, const Pose& b, float alpha);
};

Pose activity_pose(int activity);

struct SceneSpec {
  CharacterIdentity identity;
  int activity = 0;    // 0..7
  int background = 0;  // 0..3
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

/// Pure rasterisation to [16, 16, 3] in [-1, 1].
Tensor render_scene(const SceneSpec& spec);
Tensor render_pose(const CharacterIdentity& identity, const Pose& pose, int background);

/// Per-pixel labels of a render, for locality tests: 0 background, 1 body,
/// 2 hat, 3 scarf.
std::vector<int> render_labels(const CharacterIdentity& identity, const Pose& pose);

// Closed prompt vocabulary: 8 hues, 3 shapes, 3 accessories, 8 activities.
class Vocabulary {
 public:
  static const std::vector<std::string>& words();
  static int size() { return static_cast<int>(words().size()); }
  static std::optional<int> find(std::string_view word);
  static const std::string& word(int id);

  static int hue_token(int hue) { return hue; }
  static int shape_token(ShapeKind s) { return kHueCount + static_cast<int>(s); }
  static int accessory_token(Accessory a) { return kHueCount + kShapeCount + static_cast<int>(a); }
  static int activity_token(int activity) { return kHueCount + kShapeCount + kAccessoryCount + activity; }
};

/// [body_hue, shape, accessory, activity] token ids.
std::vector<int> prompt_tokens(const SceneSpec& spec);
std::vector<int> identity_tokens(const CharacterIdentity& identity);

/// Inverse of prompt_tokens for any ordering of the four attribute tokens.
std::optional<SceneSpec> decode_prompt(const std::vector<int>& tokens, int background = 0);

struct ImageExample {
  Tensor image;
  std::vector<int> prompt;
  SceneSpec spec;
};

std::vector<ImageExample> make_image_dataset(int n, RngStream& rng);

struct TransitionClip {
  Tensor frames;  // [L, 16, 16, 3]
  SceneSpec start;
  SceneSpec end;

  int length() const { return frames.dim(0); }
  Tensor frame(int i) const;
};

/// Frame i renders the pose lerped at i / (L - 1).
TransitionClip make_transition(const SceneSpec& start, const SceneSpec& end, int length);
std::vector<TransitionClip> make_transition_dataset(int n, int length, RngStream& rng);

inline constexpr int kFeatureDim = 16;
using IdentityFeature = Eigen::Matrix<float, kFeatureDim, 1>;

/// Hand-designed measurements of the character in an image.
struct CharacterAnalysis {
  IdentityFeature feature;
  Eigen::Vector3f body_color;     // mean over body pixels, [-1, 1]
  Eigen::Vector3f background;     // border median
  Eigen::Vector2f centroid;       // pixel units, of body + scarf pixels
  float area = 0.0f;              // body + scarf pixels
  float spread_ratio = 0.0f;      // pi * r_max^2 / area
  std::array<float, 3> shape_iou{};  // best template IoU per ShapeKind
  float hat_evidence = 0.0f;      // [0, 1]
  float scarf_evidence = 0.0f;    // [0, 1]
  bool fallback_mask = false;     // no foreground found, whole image used
};

CharacterAnalysis analyze_character(const Tensor& image);
IdentityFeature identity_feature(const Tensor& image);

double cosine_similarity(const IdentityFeature& a, const IdentityFeature& b);

/// Reference colours of the palette in [-1, 1].
Eigen::Vector3f hue_color(int hue);
Eigen::Vector3f background_color(int background);

/// Base body centre for an unshifted pose.
Eigen::Vector2f canvas_anchor();

}  // namespace storydiff
