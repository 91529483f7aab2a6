#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "storydiff/csa.hpp"
#include "storydiff/metrics.hpp"
#include "storydiff/motion.hpp"

namespace storydiff {

using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kConfigSchemaVersion = 1;

struct StoryConfig {
  int schema_version = kConfigSchemaVersion;
  std::string story;                 // one prompt per line
  std::string identity_prefix;       // words added to every prompt
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string image_checkpoint = "checkpoints/image.tsr";
  std::string motion_checkpoint = "checkpoints/motion.tsr";

  bool csa_enabled = true;
  CsaConfig csa;
  std::vector<int> csa_layers;       // empty: all
  bool csa_on_uncond = true;

  int steps = 50;
  float guidance = 5.0f;
  float video_guidance = 7.5f;
  bool clip_denoised = true;         // clamp DDIM x0 estimates to [-1,1]
  int frames = 8;

  int dataset_size = 8192;
  int train_steps = 3000;
  int batch_size = 32;
  float learning_rate = 1e-3f;
  int motion_clips = 512;
  int motion_train_steps = 1500;
  int motion_batch_clips = 4;
  bool direct_regression = false;

  std::vector<float> rate_list{0.0f, 0.3f, 0.5f, 1.0f};

  /// Every field, defaults included.
  Json to_json() const;
  /// Missing keys keep their defaults; unknown keys and wrong types are errors.
  static StoryConfig from_json(const Json& j);
  static StoryConfig from_text(const std::string& text, const std::string& source = "<config>");
  static StoryConfig load(const std::filesystem::path& path);
  std::string hash() const;
};

/// One prompt per non-empty line, each word looked up in the closed vocabulary.
std::vector<std::vector<int>> split_story(const std::string& text, const std::string& identity_prefix = "");
std::string prompt_text(const std::vector<int>& tokens);

/// Checkpoint loaders; both throw IoError naming the missing path.
DenoiserParams load_image_model(const StoryConfig& cfg);
MotionModel load_motion_model(const StoryConfig& cfg);

// Pipeline steps. Each writes into cfg.out_dir and returns the manifest it wrote.
Json run_make_dataset(const StoryConfig& cfg);
Json run_train_image(const StoryConfig& cfg);
Json run_train_motion(const StoryConfig& cfg);
Json run_generate_story(const StoryConfig& cfg);
Json run_generate_transitions(const StoryConfig& cfg);
Json run_metrics(const StoryConfig& cfg);
MetricReport run_ablation_sampling_rate(const StoryConfig& cfg, const std::vector<float>& rates);

/// Re-runs the command recorded in a manifest into `out_dir` and reports
/// whether every output digest matches.
bool reproduce_manifest(const std::filesystem::path& manifest, const std::filesystem::path& out_dir);

}  // namespace storydiff
