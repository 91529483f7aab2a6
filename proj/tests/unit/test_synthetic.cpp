#include <set>

#include "doctest.h"
#include "storydiff/synthetic.hpp"

using namespace storydiff;

namespace {

constexpr int kPixels = kImageSize * kImageSize;

bool pixel_equal(const Tensor& a, const Tensor& b, int p) {
  for (int c = 0; c < 3; ++c) {
    if (a[static_cast<std::size_t>(p * 3 + c)] != b[static_cast<std::size_t>(p * 3 + c)]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("identity index round trip and vocabulary tokens") {
  std::set<int> seen;
  for (int i = 0; i < kIdentityCount; ++i) {
    const CharacterIdentity id = CharacterIdentity::from_index(i);
    REQUIRE(id.index() == i);
    seen.insert(id.body_hue * 100 + static_cast<int>(id.shape) * 10 + static_cast<int>(id.accessory));
  }
  CHECK(seen.size() == 72);
  CHECK_THROWS_AS(CharacterIdentity::from_index(72), ContractError);
  CHECK(Vocabulary::size() == kHueCount + kShapeCount + kAccessoryCount + kActivityCount);
  for (int t = 0; t < Vocabulary::size(); ++t) REQUIRE(Vocabulary::find(Vocabulary::word(t)) == t);
  CHECK_FALSE(Vocabulary::find("dragon").has_value());
}

TEST_CASE("every prompt decodes back to its scene in any token order") {
  for (int i = 0; i < kIdentityCount; ++i) {
    for (int act = 0; act < kActivityCount; ++act) {
      const SceneSpec spec{CharacterIdentity::from_index(i), act, 2};
      std::vector<int> toks = prompt_tokens(spec);
      REQUIRE(toks.size() == 4);
      REQUIRE(decode_prompt(toks, 2) == spec);
      std::reverse(toks.begin(), toks.end());
      REQUIRE(decode_prompt(toks, 2) == spec);
    }
  }
  CHECK_FALSE(decode_prompt({0, 1, 8, 11}).has_value());  // two hues
  CHECK_FALSE(decode_prompt({0, 8}).has_value());
}

TEST_CASE("rendering is pure and in range") {
  const SceneSpec spec{CharacterIdentity::from_index(17), 3, 1};
  const Tensor a = render_scene(spec);
  CHECK(a.shape() == Shape{16, 16, 3});
  CHECK(a == render_scene(spec));
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i] >= -1.0f);
    REQUIRE(a[i] <= 1.0f);
  }
}

TEST_CASE("background changes only touch background pixels") {
  for (int i = 0; i < kIdentityCount; i += 5) {
    const CharacterIdentity id = CharacterIdentity::from_index(i);
    const int act = i % kActivityCount;
    const std::vector<int> labels = render_labels(id, activity_pose(act));
    const Tensor a = render_scene({id, act, 0});
    const Tensor b = render_scene({id, act, 3});
    for (int p = 0; p < kPixels; ++p) {
      if (labels[static_cast<std::size_t>(p)] != 0) REQUIRE(pixel_equal(a, b, p));
      else REQUIRE_FALSE(pixel_equal(a, b, p));
    }
  }
}

TEST_CASE("adding an accessory only changes the accessory region") {
  for (int hue = 0; hue < kHueCount; ++hue) {
    for (ShapeKind shape : {ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle}) {
      for (Accessory acc : {Accessory::Hat, Accessory::Scarf}) {
        const CharacterIdentity plain{hue, shape, Accessory::None};
        const CharacterIdentity dressed{hue, shape, acc};
        const std::vector<int> labels = render_labels(dressed, activity_pose(0));
        const Tensor a = render_scene({plain, 0, 1});
        const Tensor b = render_scene({dressed, 0, 1});
        const int region = acc == Accessory::Hat ? 2 : 3;
        int changed = 0;
        for (int p = 0; p < kPixels; ++p) {
          if (labels[static_cast<std::size_t>(p)] != region) REQUIRE(pixel_equal(a, b, p));
          else changed += !pixel_equal(a, b, p);
        }
        CHECK(changed > 0);
      }
    }
  }
}

TEST_CASE("image dataset: determinism, bijective prompts and uniform hues") {
  RngStream r1(3), r2(3);
  const auto a = make_image_dataset(10000, r1);
  const auto b = make_image_dataset(50, r2);
  for (std::size_t i = 0; i < b.size(); ++i) {
    REQUIRE(a[i].spec == b[i].spec);
    REQUIRE(a[i].image == b[i].image);
  }
  std::vector<int> counts(kHueCount, 0);
  for (const ImageExample& e : a) {
    REQUIRE(e.prompt == prompt_tokens(e.spec));
    REQUIRE(decode_prompt(e.prompt, e.spec.background) == e.spec);
    ++counts[static_cast<std::size_t>(e.spec.identity.body_hue)];
  }
  const double p = 1.0 / kHueCount, n = 10000;
  const double sigma = std::sqrt(n * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - n * p) < 3 * sigma);
  CHECK_THROWS_AS(make_image_dataset(0, r1), ContractError);
}

TEST_CASE("transition clips interpolate the pose") {
  const CharacterIdentity id = CharacterIdentity::from_index(40);
  const SceneSpec s{id, 1, 2}, e{id, 6, 2};

  const TransitionClip still = make_transition(s, s, 5);
  for (int i = 1; i < 5; ++i) CHECK(still.frame(i) == still.frame(0));

  const TransitionClip two = make_transition(s, e, 2);
  CHECK(two.frame(0) == render_scene(s));
  CHECK(two.frame(1) == render_scene(e));

  const TransitionClip three = make_transition(s, e, 3);
  const Pose pa = activity_pose(1), pb = activity_pose(6);
  const Pose mid{(pa.dx + pb.dx) / 2, (pa.dy + pb.dy) / 2, (pa.scale + pb.scale) / 2,
                 (pa.rotation_deg + pb.rotation_deg) / 2};
  CHECK(three.frame(1) == render_pose(id, mid, 2));
  CHECK(three.frame(2) == render_scene(e));

  CHECK_THROWS_AS(make_transition(s, e, 1), ContractError);
  RngStream rng(5);
  CHECK_THROWS_AS(make_transition_dataset(4, 1, rng), ContractError);
  for (const TransitionClip& c : make_transition_dataset(40, 8, rng)) {
    REQUIRE(c.length() == 8);
    REQUIRE(c.start.identity == c.end.identity);
    REQUIRE(c.start.activity != c.end.activity);
    REQUIRE(c.frame(0) == render_scene(c.start));
    REQUIRE(c.frame(7) == render_scene(c.end));
  }
}

TEST_CASE("identity features separate identities across the full grid") {
  std::vector<std::vector<IdentityFeature>> feats(kIdentityCount);
  for (int i = 0; i < kIdentityCount; ++i) {
    for (int act = 0; act < kActivityCount; ++act) {
      feats[static_cast<std::size_t>(i)].push_back(
          identity_feature(render_scene({CharacterIdentity::from_index(i), act, act % kBackgroundCount})));
    }
  }
  double same_floor = 1.0, cross_ceiling = -1.0, hue_ceiling = -1.0;
  for (int i = 0; i < kIdentityCount; ++i) {
    const auto& fi = feats[static_cast<std::size_t>(i)];
    for (int a = 0; a < kActivityCount; ++a) {
      for (int b = a + 1; b < kActivityCount; ++b) same_floor = std::min(same_floor, cosine_similarity(fi[a], fi[b]));
    }
    for (int j = i + 1; j < kIdentityCount; ++j) {
      const auto& fj = feats[static_cast<std::size_t>(j)];
      const CharacterIdentity ii = CharacterIdentity::from_index(i), jj = CharacterIdentity::from_index(j);
      for (int a = 0; a < kActivityCount; ++a) {
        for (int b = 0; b < kActivityCount; ++b) {
          const double c = cosine_similarity(fi[a], fj[b]);
          cross_ceiling = std::max(cross_ceiling, c);
          if (ii.shape == jj.shape && ii.accessory == jj.accessory) hue_ceiling = std::max(hue_ceiling, c);
        }
      }
    }
  }
  MESSAGE("same-identity floor " << same_floor << ", cross-identity ceiling " << cross_ceiling);
  CHECK(same_floor > 0.9);
  CHECK(hue_ceiling < same_floor);
  CHECK(cross_ceiling < same_floor);
}

TEST_CASE("identity feature of a degenerate image is defined") {
  const Tensor black({16, 16, 3}, -1.0f);
  const CharacterAnalysis a = analyze_character(black);
  CHECK(a.fallback_mask);
  CHECK(a.feature.allFinite());
  CHECK(identity_feature(Tensor({16, 16, 3}, 0.3f)).allFinite());
  CHECK_THROWS(identity_feature(Tensor({8, 8, 3})));
}
