#include "storydiff/synthetic.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

namespace storydiff {

namespace {

constexpr float kBaseRadius = 3.2f;

// body area at unit scale divided by kBaseRadius^2
constexpr std::array<double, kShapeCount> kShapeUnitArea = {
    3.14159265 * 1.1 * 1.1,          // circle, radius 1.1 r
    4 * 0.95 * 0.95,                 // square, half side 0.95 r
    1.29903811 * 1.35 * 1.35,        // triangle, circumradius 1.35 r
};

// palette in [0, 1]; converted with 2v - 1
constexpr std::array<std::array<float, 3>, kHueCount> kHues = {{
    {0.90f, 0.15f, 0.15f},  // red
    {0.95f, 0.55f, 0.10f},  // orange
    {0.90f, 0.85f, 0.10f},  // yellow
    {0.15f, 0.80f, 0.20f},  // green
    {0.10f, 0.80f, 0.85f},  // cyan
    {0.15f, 0.30f, 0.95f},  // blue
    {0.60f, 0.20f, 0.85f},  // purple
    {0.95f, 0.40f, 0.70f},  // pink
}};

constexpr std::array<std::array<float, 3>, kBackgroundCount> kBackgrounds = {{
    {0.55f, 0.50f, 0.40f},
    {0.40f, 0.45f, 0.55f},
    {0.42f, 0.52f, 0.42f},
    {0.50f, 0.42f, 0.50f},
}};

constexpr std::array<float, 3> kHatColor = {0.05f, 0.05f, 0.05f};
constexpr std::array<float, 3> kScarfColor = {1.0f, 1.0f, 1.0f};

// dx, dy, scale, rotation
constexpr std::array<std::array<float, 4>, kActivityCount> kPoses = {{
    {0.0f, 0.0f, 1.00f, 0.0f},     // standing
    {2.0f, 0.0f, 1.00f, 0.0f},     // walking
    {-2.0f, 0.0f, 1.00f, 20.0f},   // running
    {0.0f, -1.0f, 1.00f, 0.0f},    // jumping
    {0.0f, 1.5f, 0.85f, 0.0f},     // sitting
    {-2.0f, 1.5f, 0.85f, 0.0f},    // reading
    {2.0f, -1.0f, 1.15f, -20.0f},  // waving
    {0.0f, 0.0f, 1.15f, 45.0f},    // dancing
}};

Eigen::Vector3f to_signed(const std::array<float, 3>& c) { return {2 * c[0] - 1, 2 * c[1] - 1, 2 * c[2] - 1}; }

bool inside_body(ShapeKind shape, float ux, float uy, float r) {
  switch (shape) {
    case ShapeKind::Circle: {
      const float rc = 1.1f * r;
      return ux * ux + uy * uy <= rc * rc;
    }
    case ShapeKind::Square: {
      const float h = 0.95f * r;
      return std::abs(ux) <= h && std::abs(uy) <= h;
    }
    case ShapeKind::Triangle: {
      const float half = 0.5f * 1.35f * r;  // inradius of the equilateral triangle
      constexpr float s = 0.8660254f;
      return uy <= half && (-s * ux - 0.5f * uy) <= half && (s * ux - 0.5f * uy) <= half;
    }
  }
  return false;
}

/// Raw measurements; the feature is assembled separately so shape prototypes
/// can be calibrated from canonical renders with the same code path.
CharacterAnalysis measure(const Tensor& image) {
  if (image.shape() != Shape{kImageSize, kImageSize, kImageChannels}) {
    throw DimensionError("expected a [16, 16, 3] image, got " + shape_string(image.shape()));
  }
  CharacterAnalysis a;
  const auto px = [&](int y, int x, int ch) { return image[(static_cast<std::size_t>(y) * kImageSize + x) * 3 + ch]; };

  for (int ch = 0; ch < 3; ++ch) {
    std::vector<float> border;
    for (int i = 0; i < kImageSize; ++i) {
      border.push_back(px(0, i, ch));
      border.push_back(px(kImageSize - 1, i, ch));
      if (i > 0 && i < kImageSize - 1) {
        border.push_back(px(i, 0, ch));
        border.push_back(px(i, kImageSize - 1, ch));
      }
    }
    auto mid = border.begin() + static_cast<std::ptrdiff_t>(border.size() / 2);
    std::nth_element(border.begin(), mid, border.end());
    a.background[ch] = *mid;
  }

  int dark = 0, bright = 0;
  std::vector<Eigen::Vector2f> character;
  Eigen::Vector3d body_sum = Eigen::Vector3d::Zero();
  int body_count = 0;
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const Eigen::Vector3f c(px(y, x, 0), px(y, x, 1), px(y, x, 2));
      if ((c - a.background).cwiseAbs().maxCoeff() <= 0.4f) continue;
      if (c.maxCoeff() < -0.6f) {
        ++dark;
      } else if (c.minCoeff() > 0.6f) {
        ++bright;
        character.emplace_back(x + 0.5f, y + 0.5f);
      } else {
        body_sum += c.cast<double>();
        ++body_count;
        character.emplace_back(x + 0.5f, y + 0.5f);
      }
    }
  }

  if (body_count == 0) {
    a.fallback_mask = true;
    body_sum.setZero();
    character.clear();
    for (int y = 0; y < kImageSize; ++y) {
      for (int x = 0; x < kImageSize; ++x) {
        body_sum += Eigen::Vector3d(px(y, x, 0), px(y, x, 1), px(y, x, 2));
        character.emplace_back(x + 0.5f, y + 0.5f);
      }
    }
    body_count = kImageSize * kImageSize;
    dark = bright = 0;
  }
  a.body_color = (body_sum / body_count).cast<float>();

  Eigen::Vector2d centroid = Eigen::Vector2d::Zero();
  for (const auto& p : character) centroid += p.cast<double>();
  centroid /= static_cast<double>(character.size());
  double r2 = 0.0;
  for (const auto& p : character) r2 = std::max(r2, (p.cast<double>() - centroid).squaredNorm());
  a.centroid = centroid.cast<float>();
  a.area = static_cast<float>(character.size());
  a.spread_ratio = static_cast<float>(std::numbers::pi * std::max(r2, 0.25) / a.area);

  // best template IoU per shape over rotation, scale and half-pixel offsets,
  // with the scale search centred on the one implied by the mask area
  std::vector<char> mask(kImageSize * kImageSize, 0);
  for (const auto& p : character) {
    mask[static_cast<std::size_t>(static_cast<int>(p.y()) * kImageSize + static_cast<int>(p.x()))] = 1;
  }
  for (int s = 0; s < kShapeCount; ++s) {
    const auto shape = static_cast<ShapeKind>(s);
    const double unit_area = kShapeUnitArea[static_cast<std::size_t>(s)] * kBaseRadius * kBaseRadius;
    const double scale0 = std::sqrt(a.area / unit_area);
    float best = 0.0f;
    for (int deg = -45; deg <= 45; deg += 5) {
      if (shape == ShapeKind::Circle && deg != 0) continue;
      const float th = static_cast<float>(deg * std::numbers::pi / 180.0);
      const float ct = std::cos(th), st = std::sin(th);
      for (int si = -2; si <= 2; ++si) {
        const float r = kBaseRadius * static_cast<float>(scale0 * (1.0 + 0.05 * si));
        for (int oy = -1; oy <= 1; ++oy) {
          for (int ox = -1; ox <= 1; ++ox) {
            const float cx = a.centroid.x() + 0.5f * ox;
            const float cy = a.centroid.y() + 0.5f * oy;
            int inter = 0, uni = 0;
            for (int y = 0; y < kImageSize; ++y) {
              for (int x = 0; x < kImageSize; ++x) {
                const float px = x + 0.5f - cx, py = y + 0.5f - cy;
                const bool in_t = inside_body(shape, ct * px + st * py, -st * px + ct * py, r);
                const bool in_m = mask[static_cast<std::size_t>(y * kImageSize + x)] != 0;
                inter += in_t && in_m;
                uni += in_t || in_m;
              }
            }
            if (uni > 0) best = std::max(best, static_cast<float>(inter) / static_cast<float>(uni));
          }
        }
      }
    }
    a.shape_iou[static_cast<std::size_t>(s)] = best;
  }
  a.hat_evidence = std::min(1.0f, static_cast<float>(dark) / 6.0f);
  a.scarf_evidence = std::min(1.0f, static_cast<float>(bright) / 4.0f);
  return a;
}

}  // namespace

int CharacterIdentity::index() const {
  return (body_hue * kShapeCount + static_cast<int>(shape)) * kAccessoryCount + static_cast<int>(accessory);
}

CharacterIdentity CharacterIdentity::from_index(int index) {
  if (index < 0 || index >= kIdentityCount) throw ContractError("identity index out of range");
  return {index / (kShapeCount * kAccessoryCount), static_cast<ShapeKind>((index / kAccessoryCount) % kShapeCount),
          static_cast<Accessory>(index % kAccessoryCount)};
}

Pose Pose::lerp(const Pose& a, const Pose& b, float alpha) {
  const auto mix = [alpha](float u, float v) { return u + alpha * (v - u); };
  return {mix(a.dx, b.dx), mix(a.dy, b.dy), mix(a.scale, b.scale), mix(a.rotation_deg, b.rotation_deg)};
}

Pose activity_pose(int activity) {
  if (activity < 0 || activity >= kActivityCount) throw ContractError("activity out of range");
  const auto& p = kPoses[static_cast<std::size_t>(activity)];
  return {p[0], p[1], p[2], p[3]};
}

Eigen::Vector2f canvas_anchor() { return {8.0f, 8.8f}; }

Eigen::Vector3f hue_color(int hue) { return to_signed(kHues.at(static_cast<std::size_t>(hue))); }
Eigen::Vector3f background_color(int background) {
  return to_signed(kBackgrounds.at(static_cast<std::size_t>(background)));
}

std::vector<int> render_labels(const CharacterIdentity& identity, const Pose& pose) {
  std::vector<int> labels(kImageSize * kImageSize, 0);
  const Eigen::Vector2f center = canvas_anchor() + Eigen::Vector2f(pose.dx, pose.dy);
  const float r = kBaseRadius * pose.scale;
  const float th = pose.rotation_deg * static_cast<float>(std::numbers::pi) / 180.0f;
  const float ct = std::cos(th), st = std::sin(th);
  int top = kImageSize;
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const float px = x + 0.5f - center.x();
      const float py = y + 0.5f - center.y();
      const float ux = ct * px + st * py;
      const float uy = -st * px + ct * py;
      if (inside_body(identity.shape, ux, uy, r)) {
        labels[static_cast<std::size_t>(y * kImageSize + x)] = 1;
        top = std::min(top, y);
      }
    }
  }
  if (identity.accessory == Accessory::Hat) {
    for (int y = std::max(0, top - 2); y < top; ++y) {
      for (int x = 0; x < kImageSize; ++x) {
        if (std::abs(x + 0.5f - center.x()) <= 2.2f) labels[static_cast<std::size_t>(y * kImageSize + x)] = 2;
      }
    }
  } else if (identity.accessory == Accessory::Scarf) {
    const float band_top = center.y() + 0.15f * r;
    for (int y = 0; y < kImageSize; ++y) {
      const float cy = y + 0.5f;
      if (cy < band_top || cy >= band_top + 1.6f) continue;
      for (int x = 0; x < kImageSize; ++x) {
        auto& l = labels[static_cast<std::size_t>(y * kImageSize + x)];
        if (l == 1) l = 3;
      }
    }
  }
  return labels;
}

Tensor render_pose(const CharacterIdentity& identity, const Pose& pose, int background) {
  if (identity.body_hue < 0 || identity.body_hue >= kHueCount) throw ContractError("hue out of range");
  if (background < 0 || background >= kBackgroundCount) throw ContractError("background out of range");
  const std::vector<int> labels = render_labels(identity, pose);
  const std::array<Eigen::Vector3f, 4> colors = {background_color(background), hue_color(identity.body_hue),
                                                 to_signed(kHatColor), to_signed(kScarfColor)};
  Tensor img({kImageSize, kImageSize, kImageChannels});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Eigen::Vector3f& c = colors[static_cast<std::size_t>(labels[i])];
    for (int ch = 0; ch < 3; ++ch) img[i * 3 + static_cast<std::size_t>(ch)] = c[ch];
  }
  return img;
}

Tensor render_scene(const SceneSpec& spec) {
  return render_pose(spec.identity, activity_pose(spec.activity), spec.background);
}

const std::vector<std::string>& Vocabulary::words() {
  static const std::vector<std::string> w = {
      "red",      "orange",  "yellow",  "green",   "cyan",    "blue",    "purple",  "pink",
      "circle",   "square",  "triangle", "hat",    "plain",   "scarf",   "standing", "walking",
      "running",  "jumping", "sitting", "reading", "waving",  "dancing"};
  return w;
}

std::optional<int> Vocabulary::find(std::string_view word) {
  std::string lower(word);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  const auto& w = words();
  const auto it = std::find(w.begin(), w.end(), lower);
  if (it == w.end()) return std::nullopt;
  return static_cast<int>(it - w.begin());
}

const std::string& Vocabulary::word(int id) {
  if (id < 0 || id >= size()) throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
  return words()[static_cast<std::size_t>(id)];
}

std::vector<int> identity_tokens(const CharacterIdentity& identity) {
  return {Vocabulary::hue_token(identity.body_hue), Vocabulary::shape_token(identity.shape),
          Vocabulary::accessory_token(identity.accessory)};
}

std::vector<int> prompt_tokens(const SceneSpec& spec) {
  std::vector<int> t = identity_tokens(spec.identity);
  t.push_back(Vocabulary::activity_token(spec.activity));
  return t;
}

std::optional<SceneSpec> decode_prompt(const std::vector<int>& tokens, int background) {
  std::optional<int> hue, shape, accessory, activity;
  const auto set_once = [](std::optional<int>& slot, int v) {
    if (slot) return false;
    slot = v;
    return true;
  };
  for (int t : tokens) {
    bool ok = false;
    if (t >= 0 && t < kHueCount) {
      ok = set_once(hue, t);
    } else if (t >= kHueCount && t < kHueCount + kShapeCount) {
      ok = set_once(shape, t - kHueCount);
    } else if (t >= kHueCount + kShapeCount && t < kHueCount + kShapeCount + kAccessoryCount) {
      ok = set_once(accessory, t - kHueCount - kShapeCount);
    } else if (t >= kHueCount + kShapeCount + kAccessoryCount && t < Vocabulary::size()) {
      ok = set_once(activity, t - kHueCount - kShapeCount - kAccessoryCount);
    }
    if (!ok) return std::nullopt;
  }
  if (!hue || !shape || !accessory || !activity) return std::nullopt;
  return SceneSpec{{*hue, static_cast<ShapeKind>(*shape), static_cast<Accessory>(*accessory)}, *activity, background};
}

std::vector<ImageExample> make_image_dataset(int n, RngStream& rng) {
  if (n < 1) throw ContractError("make_image_dataset: n must be >= 1");
  std::vector<ImageExample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    SceneSpec s;
    s.identity.body_hue = static_cast<int>(rng.below(kHueCount));
    s.identity.shape = static_cast<ShapeKind>(rng.below(kShapeCount));
    s.identity.accessory = static_cast<Accessory>(rng.below(kAccessoryCount));
    s.activity = static_cast<int>(rng.below(kActivityCount));
    s.background = static_cast<int>(rng.below(kBackgroundCount));
    out.push_back({render_scene(s), prompt_tokens(s), s});
  }
  return out;
}

Tensor TransitionClip::frame(int i) const {
  const int per = kImageSize * kImageSize * kImageChannels;
  std::vector<float> d(frames.data().begin() + static_cast<std::ptrdiff_t>(i) * per,
                       frames.data().begin() + static_cast<std::ptrdiff_t>(i + 1) * per);
  return Tensor({kImageSize, kImageSize, kImageChannels}, std::move(d));
}

TransitionClip make_transition(const SceneSpec& start, const SceneSpec& end, int length) {
  if (length < 2) throw ContractError("transition length must be >= 2, got " + std::to_string(length));
  if (!(start.identity == end.identity) || start.background != end.background) {
    throw ContractError("transition endpoints must share identity and background");
  }
  const Pose a = activity_pose(start.activity);
  const Pose b = activity_pose(end.activity);
  const int per = kImageSize * kImageSize * kImageChannels;
  Tensor frames({length, kImageSize, kImageSize, kImageChannels});
  for (int i = 0; i < length; ++i) {
    const float alpha = static_cast<float>(i) / static_cast<float>(length - 1);
    const Tensor f = render_pose(start.identity, Pose::lerp(a, b, alpha), start.background);
    std::copy(f.data().begin(), f.data().end(), frames.data().begin() + static_cast<std::ptrdiff_t>(i) * per);
  }
  return {std::move(frames), start, end};
}

std::vector<TransitionClip> make_transition_dataset(int n, int length, RngStream& rng) {
  if (length < 2) throw ContractError("transition length must be >= 2, got " + std::to_string(length));
  std::vector<TransitionClip> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) {
    SceneSpec s;
    s.identity = CharacterIdentity::from_index(static_cast<int>(rng.below(kIdentityCount)));
    s.background = static_cast<int>(rng.below(kBackgroundCount));
    s.activity = static_cast<int>(rng.below(kActivityCount));
    SceneSpec e = s;
    e.activity = (s.activity + 1 + static_cast<int>(rng.below(kActivityCount - 1))) % kActivityCount;
    out.push_back(make_transition(s, e, length));
  }
  return out;
}

CharacterAnalysis analyze_character(const Tensor& image) {
  CharacterAnalysis a = measure(image);

  IdentityFeature& f = a.feature;
  f.setZero();
  const Eigen::Vector3f chroma = a.body_color - Eigen::Vector3f::Constant(a.body_color.mean());
  f.segment<3>(0) = 2.0f * chroma;
  f.segment<3>(3) = 0.5f * a.body_color;
  const float top = *std::max_element(a.shape_iou.begin(), a.shape_iou.end());
  for (int s = 0; s < kShapeCount; ++s) f[6 + s] = std::exp((a.shape_iou[static_cast<std::size_t>(s)] - top) / 0.05f);
  f[9] = a.hat_evidence;
  f[10] = a.scarf_evidence;
  f[11] = std::max(0.0f, 1.0f - a.hat_evidence - a.scarf_evidence);
  f[12] = 0.5f * std::log(a.spread_ratio);
  f[13] = 0.5f * (a.body_color.maxCoeff() - a.body_color.minCoeff());
  f[14] = 0.25f * a.body_color.norm();
  f[15] = a.fallback_mask ? 0.0f : 0.25f;
  return a;
}

IdentityFeature identity_feature(const Tensor& image) { return analyze_character(image).feature; }

double cosine_similarity(const IdentityFeature& a, const IdentityFeature& b) {
  const double na = a.cast<double>().squaredNorm();
  const double nb = b.cast<double>().squaredNorm();
  if (na == 0.0 || nb == 0.0) return na == nb ? 1.0 : 0.0;
  // sqrt(na * nb) rather than sqrt(na) * sqrt(nb) so that a == b gives exactly 1
  return std::clamp(a.cast<double>().dot(b.cast<double>()) / std::sqrt(na * nb), -1.0, 1.0);
}

}  // namespace storydiff
