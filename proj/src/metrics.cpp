#include "storydiff/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <sstream>

namespace storydiff {

namespace {

constexpr std::size_t kPixels = static_cast<std::size_t>(kImageSize) * kImageSize;

void require_image(const Tensor& t, const char* what) {
  if (t.size() != kPixels * kImageChannels) {
    throw DimensionError(std::string(what) + ": expected a 16x16x3 image, got " + shape_string(t.shape()));
  }
}

int clip_length(const Tensor& clip) {
  if (clip.rank() != 4 || clip.dim(1) != kImageSize || clip.dim(2) != kImageSize || clip.dim(3) != kImageChannels) {
    throw DimensionError("expected a [L, 16, 16, 3] clip, got " + shape_string(clip.shape()));
  }
  if (clip.dim(0) < 2) throw ContractError("clip metrics need at least 2 frames");
  return clip.dim(0);
}

Eigen::Vector3f pose_stats(const CharacterAnalysis& a) {
  return {a.centroid.x(), a.centroid.y(), std::sqrt(a.area)};
}

using Prototypes = std::array<Eigen::Vector3f, kActivityCount>;

const Prototypes& activity_prototypes(const CharacterIdentity& identity) {
  static std::mutex mu;
  static std::map<int, Prototypes> cache;
  std::lock_guard lock(mu);
  auto it = cache.find(identity.index());
  if (it == cache.end()) {
    Prototypes p;
    for (int a = 0; a < kActivityCount; ++a) {
      p[static_cast<std::size_t>(a)] = pose_stats(analyze_character(render_scene({identity, a, 0})));
    }
    it = cache.emplace(identity.index(), p).first;
  }
  return it->second;
}

}  // namespace

double character_similarity(std::span<const Tensor> images) {
  if (images.size() < 2) throw ContractError("character_similarity needs at least 2 images");
  std::vector<IdentityFeature> feats;
  for (const Tensor& im : images) {
    require_image(im, "character_similarity");
    feats.push_back(identity_feature(im));
  }
  double total = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    for (std::size_t j = i + 1; j < feats.size(); ++j, ++pairs) total += cosine_similarity(feats[i], feats[j]);
  }
  return total / pairs;
}

AttributeGuess classify_attributes(const Tensor& image, const CharacterIdentity& identity_hint) {
  require_image(image, "classify_attributes");
  const CharacterAnalysis a = analyze_character(image);
  AttributeGuess g;

  float best = INFINITY;
  for (int h = 0; h < kHueCount; ++h) {
    const float d = (a.body_color - hue_color(h)).squaredNorm();
    if (d < best) best = d, g.hue = h;
  }
  g.shape = static_cast<ShapeKind>(std::max_element(a.shape_iou.begin(), a.shape_iou.end()) - a.shape_iou.begin());
  if (a.hat_evidence >= 0.5f && a.hat_evidence >= a.scarf_evidence) {
    g.accessory = Accessory::Hat;
  } else if (a.scarf_evidence >= 0.5f) {
    g.accessory = Accessory::Scarf;
  }

  const Prototypes& protos = activity_prototypes(identity_hint);
  const Eigen::Vector3f s = pose_stats(a);
  best = INFINITY;
  for (int k = 0; k < kActivityCount; ++k) {
    const float d = (s - protos[static_cast<std::size_t>(k)]).squaredNorm();
    if (d < best) best = d, g.activity = k;
  }
  return g;
}

double prompt_adherence(std::span<const Tensor> images, const std::vector<std::vector<int>>& prompts) {
  if (images.empty()) throw ContractError("prompt_adherence: no images");
  if (images.size() != prompts.size()) {
    throw ContractError("prompt_adherence: " + std::to_string(images.size()) + " images vs " +
                        std::to_string(prompts.size()) + " prompts");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto spec = decode_prompt(prompts[i]);
    if (!spec) throw ContractError("prompt_adherence: prompt " + std::to_string(i) + " does not name all four attributes");
    const AttributeGuess g = classify_attributes(images[i], spec->identity);
    total += 0.25 * ((g.hue == spec->identity.body_hue) + (g.shape == spec->identity.shape) +
                     (g.accessory == spec->identity.accessory) + (g.activity == spec->activity));
  }
  return total / static_cast<double>(images.size());
}

double pixel_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "pixel_distance");
  if (a.size() % kImageChannels != 0 || a.empty()) throw DimensionError("pixel_distance: not RGB data");
  const std::size_t n = a.size() / kImageChannels;
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    double sq = 0.0;
    for (std::size_t c = 0; c < kImageChannels; ++c) {
      const double d = static_cast<double>(a[p * 3 + c]) - b[p * 3 + c];
      sq += d * d;
    }
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(n);
}

double pixel_mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "pixel_mse");
  if (a.empty()) throw DimensionError("pixel_mse: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    total += d * d;
  }
  return total / static_cast<double>(a.size());
}

Tensor clip_frame(const Tensor& clip, int i) {
  const int len = clip.dim(0);
  if (i < 0 || i >= len) throw ContractError("frame index " + std::to_string(i) + " out of range");
  return clip.reshaped({len, static_cast<int>(kPixels * kImageChannels)})
      .rows_slice(i, 1)
      .reshaped({kImageSize, kImageSize, kImageChannels});
}

double first_frame_similarity(const Tensor& clip) {
  const int len = clip_length(clip);
  const IdentityFeature first = identity_feature(clip_frame(clip, 0));
  double total = 0.0;
  for (int i = 1; i < len; ++i) total += cosine_similarity(first, identity_feature(clip_frame(clip, i)));
  return total / (len - 1);
}

double frames_similarity(const Tensor& clip) {
  const int len = clip_length(clip);
  double total = 0.0;
  IdentityFeature prev = identity_feature(clip_frame(clip, 0));
  for (int i = 1; i < len; ++i) {
    IdentityFeature cur = identity_feature(clip_frame(clip, i));
    total += cosine_similarity(prev, cur);
    prev = cur;
  }
  return total / (len - 1);
}

double first_frame_distance(const Tensor& clip) {
  const int len = clip_length(clip);
  const Tensor first = clip_frame(clip, 0);
  double total = 0.0;
  for (int i = 1; i < len; ++i) total += pixel_distance(first, clip_frame(clip, i));
  return total / (len - 1);
}

double frames_distance(const Tensor& clip) {
  const int len = clip_length(clip);
  double total = 0.0;
  for (int i = 1; i < len; ++i) total += pixel_distance(clip_frame(clip, i - 1), clip_frame(clip, i));
  return total / (len - 1);
}

void MetricReport::set(const std::string& name, double value) {
  for (auto& [k, v] : metrics) {
    if (k == name) {
      v = value;
      return;
    }
  }
  metrics.emplace_back(name, value);
}

double MetricReport::get(const std::string& name) const {
  for (const auto& [k, v] : metrics) {
    if (k == name) return v;
  }
  throw ContractError("no metric named " + name);
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [k, v] : metrics) m[k] = v;
  j["metrics"] = m;
  j["items"] = items;
  return j;
}

std::string MetricReport::table() const {
  std::size_t width = 6;
  for (const auto& [k, v] : metrics) width = std::max(width, k.size());
  std::ostringstream out;
  char buf[64];
  for (const auto& [k, v] : metrics) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    out << k << std::string(width - k.size() + 2, ' ') << buf << '\n';
  }
  return out.str();
}

}  // namespace storydiff
