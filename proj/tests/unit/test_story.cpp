#include <unistd.h>

#include "doctest.h"
#include "storydiff/diffusion.hpp"
#include "storydiff/io.hpp"
#include "storydiff/story.hpp"

using namespace storydiff;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("storydiff_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

StoryConfig tiny_pipeline(const fs::path& root) {
  StoryConfig c;
  c.story = "red circle hat walking\nred circle hat reading\njumping\n";
  c.identity_prefix = "red circle hat";
  c.seed = 42;
  c.out_dir = (root / "out").string();
  c.image_checkpoint = (root / "ckpt" / "image.tsr").string();
  c.motion_checkpoint = (root / "ckpt" / "motion.tsr").string();
  c.steps = 3;
  c.frames = 3;
  c.dataset_size = 16;
  c.train_steps = 2;
  c.batch_size = 2;
  c.motion_clips = 4;
  c.motion_train_steps = 2;
  c.motion_batch_clips = 1;
  return c;
}

}  // namespace

TEST_CASE("config round trip materialises every default") {
  StoryConfig c;
  c.story = "blue square none sitting";
  c.seed = 9;
  c.csa.tile_size = 3;
  c.csa_layers = {0, 2};
  c.rate_list = {0.0f, 0.25f};
  const Json j = c.to_json();
  CHECK(j.contains("video_guidance"));
  CHECK(j["csa"]["tile_size"] == 3);
  const StoryConfig back = StoryConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.hash() == c.hash());

  const StoryConfig partial = StoryConfig::from_text(R"({"seed": 5})");
  CHECK(partial.seed == 5);
  CHECK(partial.steps == 50);
  CHECK(partial.csa.sampling_rate == 0.5f);
  CHECK(partial.csa.tile_size == 4);
}

TEST_CASE("config hash ignores the output directory only") {
  StoryConfig a;
  StoryConfig b = a;
  b.out_dir = "elsewhere";
  CHECK(a.hash() == b.hash());
  b.seed = 1;
  CHECK(a.hash() != b.hash());
  CHECK(a.hash().size() == 16);
}

TEST_CASE("config errors name the key or position") {
  const auto message = [](const std::string& text) {
    try {
      StoryConfig::from_text(text, "story.json");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("{\"seed\": 1,\n  \"steps\": }").find("story.json:2:") != std::string::npos);
  CHECK(message(R"({"sed": 1})").find("'sed'") != std::string::npos);
  CHECK(message(R"({"csa": {"tile": 2}})").find("csa.tile") != std::string::npos);
  CHECK(message(R"({"steps": "many"})").find("'steps'") != std::string::npos);
  CHECK(message(R"({"steps": 0})").find("steps") != std::string::npos);
  CHECK(message(R"({"schema_version": 2})").find("schema_version") != std::string::npos);
  CHECK(message(R"({"csa": {"sampling_rate": 1.5}})") != "no error");
  CHECK(message("[1, 2]") != "no error");
  CHECK_THROWS_WITH_AS(StoryConfig::load("/nonexistent/story.json"), doctest::Contains("/nonexistent/story.json"),
                       ConfigError);
}

TEST_CASE("story splitting") {
  const auto p = split_story("red circle hat walking\n\nred circle hat reading\n");
  REQUIRE(p.size() == 2);
  CHECK(std::vector<int>(p[0].begin(), p[0].begin() + 3) == std::vector<int>(p[1].begin(), p[1].begin() + 3));
  CHECK(prompt_text(p[1]) == "red circle hat reading");

  const auto prefixed = split_story("walking\nred reading", "red circle hat");
  CHECK(prompt_text(prefixed[0]) == "red circle hat walking");
  CHECK(prompt_text(prefixed[1]) == "circle hat red reading");  // words already present are not repeated

  CHECK(split_story("blue square scarf jumping").size() == 1);
  CHECK_THROWS_AS(split_story(""), ContractError);
  CHECK_THROWS_AS(split_story("\n \n"), ContractError);
  CHECK_THROWS_WITH(split_story("red circle\nred dragon"), doctest::Contains("line 2: unknown word 'dragon'"));
}

TEST_CASE("a long story keeps the per-call token count bounded") {
  RngStream rng(3);
  DenoiserConfig small;
  small.width = 16;
  small.heads = 2;
  small.blocks = 1;
  const DenoiserParams p = DenoiserParams::init(small, rng);
  std::string text;
  for (int i = 0; i < 12; ++i) text += "green triangle scarf " + Vocabulary::word(Vocabulary::activity_token(i % 8)) + "\n";
  const auto prompts = split_story(text);
  REQUIRE(prompts.size() == 12);
  SamplerOptions opt;
  opt.steps = 2;
  opt.guidance = 1.0f;  // one pass, one step: the trace counts a single forward
  opt.csa = CsaConfig{};
  CsaTrace trace;
  opt.trace = &trace;
  ddim_sample(p, DiffusionSchedule::linear(), prompts, opt, RngStream(4));
  CHECK(trace.windows == 9);
  const int n = small.tokens_per_image();
  CHECK(trace.max_kv_length == n + sample_count(4 * n, 0.5f));
  CHECK(trace.max_window_tokens <= 4 * n + sample_count(4 * n, 0.5f));
}

TEST_CASE("pipeline: dataset, training, story, transitions, metrics, ablation and reproduction") {
  const fs::path root = scratch_dir("pipeline");
  const StoryConfig cfg = tiny_pipeline(root);

  CHECK_THROWS_WITH_AS(run_generate_story(cfg), doctest::Contains("image.tsr"), IoError);

  const Json ds = run_make_dataset(cfg);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "dataset" / "manifest.json"));
  CHECK_FALSE(ds["outputs"].empty());

  const Json ti = run_train_image(cfg);
  CHECK(fs::exists(cfg.image_checkpoint));
  CHECK(ti["loss_curve"].size() == 1);
  run_train_motion(cfg);
  CHECK(fs::exists(cfg.motion_checkpoint));

  const Json story = run_generate_story(cfg);
  CHECK(story["images"].size() == 3);
  CHECK(story["config_hash"] == cfg.hash());
  CHECK(story["images"][2]["prompt"] == "red circle hat jumping");
  CHECK(story["csa_trace"]["windows"].get<int>() > 0);
  const Tensor img = read_ppm(fs::path(cfg.out_dir) / "story" / "image_000.ppm");
  CHECK(img.shape() == Shape{16, 16, 3});

  const Json again = run_generate_story(cfg);
  CHECK(again["outputs"] == story["outputs"]);

  const Json trans = run_generate_transitions(cfg);
  REQUIRE(trans["clips"].size() == 2);
  CHECK(trans["clips"][0]["frames"].size() == 3);
  CHECK(trans["clips"][0]["start_mse"].get<double>() >= 0.0);
  CHECK(trans["clips"][0]["prompt"] == "red circle hat");
  CHECK(fs::exists(fs::path(cfg.out_dir) / "transitions" / "clip_001" / "frame_002.ppm"));

  const Json metrics = run_metrics(cfg);
  CHECK(metrics["metrics"].contains("character_similarity"));
  CHECK(metrics["metrics"].contains("frames_distance"));
  const double sim = metrics["metrics"]["character_similarity"].get<double>();
  CHECK(sim >= -1.0);
  CHECK(sim <= 1.0);

  const MetricReport ab = run_ablation_sampling_rate(cfg, {0.0f, 0.5f});
  REQUIRE(ab.metrics.size() == 3);
  CHECK(ab.metrics[0].first == "vanilla");
  CHECK(ab.metrics[1].first == "rate_0.00");
  CHECK(ab.get("rate_0.00") == ab.get("vanilla"));
  CHECK(run_ablation_sampling_rate(cfg, {0.0f, 0.5f}).to_json() == ab.to_json());

  const fs::path story_manifest = fs::path(cfg.out_dir) / "story" / "manifest.json";
  CHECK(reproduce_manifest(story_manifest, root / "replay_story"));
  CHECK(reproduce_manifest(fs::path(cfg.out_dir) / "transitions" / "manifest.json", root / "replay_trans"));
  CHECK(reproduce_manifest(fs::path(cfg.out_dir) / "train_image.json", root / "replay_train"));

  // a tampered digest is detected
  Json tampered = Json::parse(read_file(story_manifest));
  tampered["outputs"][0]["digest"] = "0000000000000000";
  write_file(root / "tampered.json", tampered.dump(2));
  CHECK_FALSE(reproduce_manifest(root / "tampered.json", root / "replay_tampered"));

  StoryConfig one = cfg;
  one.story = "red circle hat walking";
  one.out_dir = (root / "single").string();
  run_generate_story(one);
  CHECK_THROWS_AS(run_generate_transitions(one), ContractError);

  fs::remove_all(root);
}
