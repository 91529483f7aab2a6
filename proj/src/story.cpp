#include "storydiff/story.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

#include "storydiff/diffusion.hpp"
#include "storydiff/io.hpp"
#include "storydiff/motion.hpp"

namespace storydiff {

namespace fs = std::filesystem;

namespace {

enum : std::uint64_t {
  kDatasetStream = 1,
  kInitStream = 2,
  kTrainStream = 3,
  kClipStream = 4,
  kMotionInitStream = 5,
  kMotionTrainStream = 6,
  kStoryStream = 7,
  kTransitionStream = 8,
};

RngStream stream(const StoryConfig& cfg, std::uint64_t tag) { return RngStream(cfg.seed).child(tag); }

void progress(const std::string& line) { std::clog << line << std::endl; }

template <typename T>
T typed(const Json& j, const std::string& key, const char* expected) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw 0;
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) throw 0;
    } else if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) throw 0;
      if constexpr (std::is_unsigned_v<T>) {
        if (!j.is_number_unsigned()) throw 0;
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) throw 0;
    }
    return j.get<T>();
  } catch (int) {
    throw ConfigError("config key '" + key + "': expected " + expected + ", got " + j.dump());
  }
}

std::string line_col(const std::string& text, std::size_t byte) {
  int line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return std::to_string(line) + ":" + std::to_string(col);
}

Tensor batch_image(const Tensor& images, int i) {
  return images.rows_slice(i * kImageSize * kImageSize, kImageSize * kImageSize)
      .reshaped({kImageSize, kImageSize, kImageChannels});
}

std::string numbered(const char* prefix, int i, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%03d%s", prefix, i, suffix);
  return buf;
}

void write_manifest(const fs::path& path, const Json& manifest) { write_file(path, manifest.dump(2) + "\n"); }

Json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ":" + line_col(text, e.byte) + ": " + e.what());
  }
}

Json base_manifest(const std::string& command, const StoryConfig& cfg) {
  Json m;
  m["command"] = command;
  m["config_hash"] = cfg.hash();
  m["seed"] = cfg.seed;
  m["config"] = cfg.to_json();
  m["outputs"] = Json::array();
  return m;
}

void add_output(Json& manifest, const fs::path& root, const std::string& rel) {
  manifest["outputs"].push_back({{"file", rel}, {"digest", file_digest(root / rel)}});
}

SamplerOptions sampler_options(const StoryConfig& cfg, std::optional<float> rate) {
  SamplerOptions o;
  o.steps = cfg.steps;
  o.guidance = cfg.guidance;
  o.clip_x0 = cfg.clip_denoised;
  if (rate) {
    o.csa = cfg.csa;
    o.csa->sampling_rate = *rate;
    o.csa_layers = cfg.csa_layers;
    o.csa_on_uncond = cfg.csa_on_uncond;
  }
  return o;
}

std::vector<std::vector<int>> story_prompts(const StoryConfig& cfg) {
  return split_story(cfg.story, cfg.identity_prefix);
}

std::vector<Tensor> split_batch(const Tensor& images) {
  std::vector<Tensor> out;
  for (int i = 0; i < images.dim(0); ++i) out.push_back(batch_image(images, i));
  return out;
}

bool all_decodable(const std::vector<std::vector<int>>& prompts) {
  for (const auto& p : prompts) {
    if (!decode_prompt(p)) return false;
  }
  return true;
}

fs::path story_dir(const StoryConfig& cfg) { return fs::path(cfg.out_dir) / "story"; }
fs::path transitions_dir(const StoryConfig& cfg) { return fs::path(cfg.out_dir) / "transitions"; }

}  // namespace

DenoiserParams load_image_model(const StoryConfig& cfg) {
  if (!fs::exists(cfg.image_checkpoint)) throw IoError("image checkpoint not found: " + cfg.image_checkpoint);
  RngStream init(0);
  DenoiserParams p = DenoiserParams::init(DenoiserConfig{}, init);
  load_checkpoint(cfg.image_checkpoint, p.parameters());
  return p;
}

MotionModel load_motion_model(const StoryConfig& cfg) {
  if (!fs::exists(cfg.motion_checkpoint)) throw IoError("motion checkpoint not found: " + cfg.motion_checkpoint);
  RngStream init(0);
  MotionConfig mc;
  mc.frames = cfg.frames;
  MotionModel m = MotionModel::init(mc, init);
  for (const auto& [name, t] : load_checkpoint(cfg.motion_checkpoint, m.all_parameters())) {
    if (name == "meta.trained_steps") m.trained_steps = static_cast<long>(t[0]);
  }
  return m;
}

Json StoryConfig::to_json() const {
  Json j;
  j["schema_version"] = schema_version;
  j["story"] = story;
  j["identity_prefix"] = identity_prefix;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["image_checkpoint"] = image_checkpoint;
  j["motion_checkpoint"] = motion_checkpoint;
  j["csa"] = {{"enabled", csa_enabled},
              {"sampling_rate", csa.sampling_rate},
              {"tile_size", csa.tile_size},
              {"include_self", csa.include_self},
              {"per_image_sampling", csa.per_image_sampling},
              {"layers", csa_layers},
              {"on_uncond", csa_on_uncond}};
  j["steps"] = steps;
  j["guidance"] = guidance;
  j["video_guidance"] = video_guidance;
  j["clip_denoised"] = clip_denoised;
  j["frames"] = frames;
  j["dataset_size"] = dataset_size;
  j["train_steps"] = train_steps;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["motion_clips"] = motion_clips;
  j["motion_train_steps"] = motion_train_steps;
  j["motion_batch_clips"] = motion_batch_clips;
  j["direct_regression"] = direct_regression;
  j["rate_list"] = rate_list;
  return j;
}

StoryConfig StoryConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  StoryConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "schema_version") {
      c.schema_version = typed<int>(v, key, "integer");
      if (c.schema_version != kConfigSchemaVersion) {
        throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version) + " (expected " +
                          std::to_string(kConfigSchemaVersion) + ")");
      }
    } else if (key == "story") {
      if (v.is_array()) {
        std::string text;
        for (const auto& line : v) text += typed<std::string>(line, key, "string or list of strings") + "\n";
        c.story = text;
      } else {
        c.story = typed<std::string>(v, key, "string or list of strings");
      }
    } else if (key == "identity_prefix") {
      c.identity_prefix = typed<std::string>(v, key, "string");
    } else if (key == "seed") {
      c.seed = typed<std::uint64_t>(v, key, "unsigned integer");
    } else if (key == "out_dir") {
      c.out_dir = typed<std::string>(v, key, "string");
    } else if (key == "image_checkpoint") {
      c.image_checkpoint = typed<std::string>(v, key, "string");
    } else if (key == "motion_checkpoint") {
      c.motion_checkpoint = typed<std::string>(v, key, "string");
    } else if (key == "csa") {
      if (!v.is_object()) throw ConfigError("config key 'csa': expected object");
      for (const auto& [k, w] : v.items()) {
        const std::string full = "csa." + k;
        if (k == "enabled") c.csa_enabled = typed<bool>(w, full, "boolean");
        else if (k == "sampling_rate") c.csa.sampling_rate = typed<float>(w, full, "number");
        else if (k == "tile_size") c.csa.tile_size = typed<int>(w, full, "integer");
        else if (k == "include_self") c.csa.include_self = typed<bool>(w, full, "boolean");
        else if (k == "per_image_sampling") c.csa.per_image_sampling = typed<bool>(w, full, "boolean");
        else if (k == "on_uncond") c.csa_on_uncond = typed<bool>(w, full, "boolean");
        else if (k == "layers") {
          if (!w.is_array()) throw ConfigError("config key 'csa.layers': expected list of integers");
          c.csa_layers.clear();
          for (const auto& l : w) c.csa_layers.push_back(typed<int>(l, full, "integer"));
        } else {
          throw ConfigError("unknown config key '" + full + "'");
        }
      }
    } else if (key == "steps") {
      c.steps = typed<int>(v, key, "integer");
    } else if (key == "guidance") {
      c.guidance = typed<float>(v, key, "number");
    } else if (key == "video_guidance") {
      c.video_guidance = typed<float>(v, key, "number");
    } else if (key == "clip_denoised") {
      c.clip_denoised = typed<bool>(v, key, "boolean");
    } else if (key == "frames") {
      c.frames = typed<int>(v, key, "integer");
    } else if (key == "dataset_size") {
      c.dataset_size = typed<int>(v, key, "integer");
    } else if (key == "train_steps") {
      c.train_steps = typed<int>(v, key, "integer");
    } else if (key == "batch_size") {
      c.batch_size = typed<int>(v, key, "integer");
    } else if (key == "learning_rate") {
      c.learning_rate = typed<float>(v, key, "number");
    } else if (key == "motion_clips") {
      c.motion_clips = typed<int>(v, key, "integer");
    } else if (key == "motion_train_steps") {
      c.motion_train_steps = typed<int>(v, key, "integer");
    } else if (key == "motion_batch_clips") {
      c.motion_batch_clips = typed<int>(v, key, "integer");
    } else if (key == "direct_regression") {
      c.direct_regression = typed<bool>(v, key, "boolean");
    } else if (key == "rate_list") {
      if (!v.is_array()) throw ConfigError("config key 'rate_list': expected list of numbers");
      c.rate_list.clear();
      for (const auto& r : v) c.rate_list.push_back(typed<float>(r, key, "number"));
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  try {
    c.csa.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("config key 'csa': ") + e.what());
  }
  if (c.steps < 1 || c.steps > 1000) throw ConfigError("config key 'steps': must lie in [1, 1000]");
  if (c.frames < 2 || c.frames > kMaxClipFrames) throw ConfigError("config key 'frames': must lie in [2, 16]");
  if (c.batch_size < 1 || c.motion_batch_clips < 1) throw ConfigError("batch sizes must be positive");
  for (int l : c.csa_layers) {
    if (l < 0) throw ConfigError("config key 'csa.layers': negative layer index");
  }
  for (float r : c.rate_list) {
    if (!(r >= 0.0f && r <= 1.0f)) throw ConfigError("config key 'rate_list': rates must lie in [0, 1]");
  }
  return c;
}

StoryConfig StoryConfig::from_text(const std::string& text, const std::string& source) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(source + ":" + line_col(text, e.byte == 0 ? 0 : e.byte - 1) + ": " + e.what());
  }
  try {
    return from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

StoryConfig StoryConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return from_text(read_file(path), path.string());
}

std::string StoryConfig::hash() const {
  Json j = to_json();
  j.erase("out_dir");  // the same run written elsewhere keeps its hash
  return hex64(fnv1a64(j.dump()));
}

std::vector<std::vector<int>> split_story(const std::string& text, const std::string& identity_prefix) {
  const auto tokenize = [](const std::string& line, int line_no) {
    std::vector<int> out;
    std::istringstream words(line);
    std::string w;
    while (words >> w) {
      const auto id = Vocabulary::find(w);
      if (!id) {
        throw ConfigError((line_no > 0 ? "line " + std::to_string(line_no) : std::string("identity prefix")) +
                          ": unknown word '" + w + "'");
      }
      out.push_back(*id);
    }
    return out;
  };
  const std::vector<int> prefix = tokenize(identity_prefix, 0);
  std::vector<std::vector<int>> prompts;
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    std::vector<int> words = tokenize(line, line_no);
    if (words.empty()) continue;
    std::vector<int> prompt;
    for (int t : prefix) {
      if (std::find(words.begin(), words.end(), t) == words.end()) prompt.push_back(t);
    }
    prompt.insert(prompt.end(), words.begin(), words.end());
    prompts.push_back(std::move(prompt));
  }
  if (prompts.empty()) throw ContractError("story text has no prompts");
  return prompts;
}

std::string prompt_text(const std::vector<int>& tokens) {
  std::string out;
  for (int t : tokens) {
    if (!out.empty()) out += ' ';
    out += Vocabulary::word(t);
  }
  return out;
}

Json run_make_dataset(const StoryConfig& cfg) {
  const fs::path dir = fs::path(cfg.out_dir) / "dataset";
  fs::create_directories(dir);
  RngStream rng = stream(cfg, kDatasetStream);
  const std::vector<ImageExample> data = make_image_dataset(cfg.dataset_size, rng);
  Tensor images({cfg.dataset_size, kImageSize, kImageSize, kImageChannels});
  Tensor prompts({cfg.dataset_size, 4});
  const std::size_t per = static_cast<std::size_t>(kImageSize) * kImageSize * kImageChannels;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::copy(data[i].image.data().begin(), data[i].image.data().end(), images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    for (std::size_t k = 0; k < 4; ++k) prompts[i * 4 + k] = static_cast<float>(data[i].prompt[k]);
  }
  RngStream clip_rng = stream(cfg, kClipStream);
  const std::vector<TransitionClip> clips = make_transition_dataset(cfg.motion_clips, cfg.frames, clip_rng);
  Tensor clip_frames({cfg.motion_clips, cfg.frames, kImageSize, kImageSize, kImageChannels});
  for (std::size_t i = 0; i < clips.size(); ++i) {
    std::copy(clips[i].frames.data().begin(), clips[i].frames.data().end(),
              clip_frames.data().begin() + static_cast<std::ptrdiff_t>(i * clips[i].frames.size()));
  }

  Json m = base_manifest("make-dataset", cfg);
  write_file(dir / "images.tsr", encode_named_tensors({{"images", images}, {"prompts", prompts}}));
  write_file(dir / "clips.tsr", encode_named_tensors({{"frames", clip_frames}}));
  add_output(m, cfg.out_dir, "dataset/images.tsr");
  add_output(m, cfg.out_dir, "dataset/clips.tsr");
  Json preview = Json::array();
  for (int i = 0; i < std::min(16, cfg.dataset_size); ++i) {
    const std::string rel = "dataset/" + numbered("preview_", i, ".ppm");
    write_ppm(fs::path(cfg.out_dir) / rel, data[static_cast<std::size_t>(i)].image);
    add_output(m, cfg.out_dir, rel);
    preview.push_back({{"file", rel}, {"prompt", prompt_text(data[static_cast<std::size_t>(i)].prompt)},
                       {"background", data[static_cast<std::size_t>(i)].spec.background}});
  }
  m["previews"] = preview;
  write_manifest(dir / "manifest.json", m);
  return m;
}

Json run_train_image(const StoryConfig& cfg) {
  RngStream data_rng = stream(cfg, kDatasetStream);
  const std::vector<ImageExample> data = make_image_dataset(cfg.dataset_size, data_rng);
  RngStream init = stream(cfg, kInitStream);
  DenoiserParams p = DenoiserParams::init(DenoiserConfig{}, init);
  const DiffusionSchedule sched = DiffusionSchedule::linear();
  Adam adam({cfg.learning_rate});
  RngStream rng = stream(cfg, kTrainStream);
  Json curve = Json::array();
  double window = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int s = 0; s < cfg.train_steps; ++s) {
    std::vector<ImageExample> batch;
    for (int i = 0; i < cfg.batch_size; ++i) batch.push_back(data[rng.below(data.size())]);
    window += train_step(p, adam, sched, batch, rng);
    if ((s + 1) % 50 == 0 || s + 1 == cfg.train_steps) {
      const int n = (s % 50) + 1;
      curve.push_back({{"step", s + 1}, {"loss", window / n}});
      window = 0.0;
      if ((s + 1) % 250 == 0) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        progress("train-image step " + std::to_string(s + 1) + "/" + std::to_string(cfg.train_steps) + " loss " +
                 std::to_string(curve.back()["loss"].get<double>()) + " (" + std::to_string(static_cast<int>(secs)) + "s)");
      }
    }
  }
  save_checkpoint(cfg.image_checkpoint, p.parameters(),
                  {{"meta.train_steps", Tensor::scalar(static_cast<float>(cfg.train_steps))}});
  Json m = base_manifest("train-image", cfg);
  m["outputs"].push_back({{"file", "checkpoint"}, {"digest", file_digest(cfg.image_checkpoint)}});
  m["parameter_count"] = p.parameter_count();
  m["loss_curve"] = curve;
  write_manifest(fs::path(cfg.out_dir) / "train_image.json", m);
  return m;
}

Json run_train_motion(const StoryConfig& cfg) {
  RngStream clip_rng = stream(cfg, kClipStream);
  const std::vector<TransitionClip> clips = make_transition_dataset(cfg.motion_clips, cfg.frames, clip_rng);
  RngStream init = stream(cfg, kMotionInitStream);
  MotionConfig mc;
  mc.frames = cfg.frames;
  MotionModel model = MotionModel::init(mc, init);
  const DiffusionSchedule sched = DiffusionSchedule::linear();
  Adam adam({cfg.learning_rate});
  RngStream rng = stream(cfg, kMotionTrainStream);
  MotionTrainOptions opt;
  opt.direct_regression = cfg.direct_regression;
  Json curve = Json::array();
  double window = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int s = 0; s < cfg.motion_train_steps; ++s) {
    std::vector<TransitionClip> batch;
    for (int i = 0; i < cfg.motion_batch_clips; ++i) batch.push_back(clips[rng.below(clips.size())]);
    window += train_motion_step(model, adam, sched, batch, rng, opt);
    if ((s + 1) % 50 == 0 || s + 1 == cfg.motion_train_steps) {
      const int n = (s % 50) + 1;
      curve.push_back({{"step", s + 1}, {"loss", window / n}});
      window = 0.0;
      if ((s + 1) % 250 == 0) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        progress("train-motion step " + std::to_string(s + 1) + "/" + std::to_string(cfg.motion_train_steps) +
                 " loss " + std::to_string(curve.back()["loss"].get<double>()) + " (" +
                 std::to_string(static_cast<int>(secs)) + "s)");
      }
    }
  }
  save_checkpoint(cfg.motion_checkpoint, model.all_parameters(),
                  {{"meta.trained_steps", Tensor::scalar(static_cast<float>(model.trained_steps))}});
  Json m = base_manifest("train-motion", cfg);
  m["outputs"].push_back({{"file", "checkpoint"}, {"digest", file_digest(cfg.motion_checkpoint)}});
  m["loss_curve"] = curve;
  write_manifest(fs::path(cfg.out_dir) / "train_motion.json", m);
  return m;
}

Json run_generate_story(const StoryConfig& cfg) {
  const auto prompts = story_prompts(cfg);
  const DenoiserParams p = load_image_model(cfg);
  const DiffusionSchedule sched = DiffusionSchedule::linear();
  CsaTrace trace;
  SamplerOptions opt = sampler_options(cfg, cfg.csa_enabled ? std::optional(cfg.csa.sampling_rate) : std::nullopt);
  opt.trace = &trace;
  const Tensor images = ddim_sample(p, sched, prompts, opt, stream(cfg, kStoryStream));

  const fs::path dir = story_dir(cfg);
  fs::create_directories(dir);
  Json m = base_manifest("generate-story", cfg);
  m["checkpoint_digest"] = file_digest(cfg.image_checkpoint);
  Json items = Json::array();
  const std::vector<Tensor> frames = split_batch(images);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::string rel = "story/" + numbered("image_", static_cast<int>(i), ".ppm");
    write_ppm(fs::path(cfg.out_dir) / rel, frames[i]);
    add_output(m, cfg.out_dir, rel);
    items.push_back({{"file", rel}, {"prompt", prompt_text(prompts[i])}});
  }
  m["images"] = items;
  m["csa_trace"] = {{"windows", trace.windows},
                    {"attention_calls", trace.attention_calls},
                    {"max_window_tokens", trace.max_window_tokens},
                    {"max_kv_length", trace.max_kv_length}};
  Json metrics;
  if (frames.size() >= 2) metrics["character_similarity"] = character_similarity(frames);
  if (all_decodable(prompts)) metrics["prompt_adherence"] = prompt_adherence(frames, prompts);
  m["metrics"] = metrics;
  write_manifest(dir / "manifest.json", m);
  return m;
}

Json run_generate_transitions(const StoryConfig& cfg) {
  const fs::path story_manifest = story_dir(cfg) / "manifest.json";
  if (!fs::exists(story_manifest)) throw IoError("story manifest not found: " + story_manifest.string());
  const Json story = read_json(story_manifest);
  std::vector<Tensor> images;
  std::vector<std::vector<int>> prompts;
  for (const auto& item : story["images"]) {
    images.push_back(read_ppm(fs::path(cfg.out_dir) / item["file"].get<std::string>()));
    prompts.push_back(split_story(item["prompt"].get<std::string>()).front());
  }
  if (images.size() < 2) throw ContractError("transitions need at least 2 story images");

  const MotionModel model = load_motion_model(cfg);
  const DiffusionSchedule sched = DiffusionSchedule::linear();
  std::vector<TransitionRequest> requests;
  for (std::size_t i = 0; i + 1 < images.size(); ++i) {
    std::vector<int> identity;
    for (int t : prompts[i]) {
      if (t < Vocabulary::activity_token(0)) identity.push_back(t);
    }
    requests.push_back({images[i], images[i + 1], identity});
  }
  TransitionOptions opt;
  opt.frames = cfg.frames;
  opt.steps = cfg.steps;
  opt.guidance = cfg.video_guidance;
  opt.clip_x0 = cfg.clip_denoised;
  const std::vector<Tensor> clips = generate_transitions(model, sched, requests, opt, stream(cfg, kTransitionStream));

  Json m = base_manifest("generate-transitions", cfg);
  m["checkpoint_digest"] = file_digest(cfg.motion_checkpoint);
  m["story_manifest"] = "story/manifest.json";
  Json items = Json::array();
  for (std::size_t c = 0; c < clips.size(); ++c) {
    const std::string clip_dir = "transitions/" + numbered("clip_", static_cast<int>(c), "");
    Json frames = Json::array();
    for (int f = 0; f < cfg.frames; ++f) {
      const std::string rel = clip_dir + "/" + numbered("frame_", f, ".ppm");
      write_ppm(fs::path(cfg.out_dir) / rel, clip_frame(clips[c], f));
      add_output(m, cfg.out_dir, rel);
      frames.push_back(rel);
    }
    items.push_back({{"frames", frames},
                     {"length", cfg.frames},
                     {"prompt", prompt_text(requests[c].prompt)},
                     {"start", story["images"][c]["file"]},
                     {"end", story["images"][c + 1]["file"]},
                     {"start_mse", pixel_mse(clip_frame(clips[c], 0), requests[c].start)},
                     {"end_mse", pixel_mse(clip_frame(clips[c], cfg.frames - 1), requests[c].end)}});
  }
  m["clips"] = items;
  fs::create_directories(transitions_dir(cfg));
  write_manifest(transitions_dir(cfg) / "manifest.json", m);
  return m;
}

Json run_metrics(const StoryConfig& cfg) {
  const fs::path story_manifest = story_dir(cfg) / "manifest.json";
  if (!fs::exists(story_manifest)) throw IoError("story manifest not found: " + story_manifest.string());
  const Json story = read_json(story_manifest);
  MetricReport report;
  report.seed = cfg.seed;
  report.config_hash = cfg.hash();
  std::vector<Tensor> images;
  std::vector<std::vector<int>> prompts;
  for (const auto& item : story["images"]) {
    images.push_back(read_ppm(fs::path(cfg.out_dir) / item["file"].get<std::string>()));
    prompts.push_back(split_story(item["prompt"].get<std::string>()).front());
  }
  if (images.size() >= 2) report.set("character_similarity", character_similarity(images));
  if (all_decodable(prompts)) report.set("prompt_adherence", prompt_adherence(images, prompts));

  const fs::path trans_manifest = transitions_dir(cfg) / "manifest.json";
  if (fs::exists(trans_manifest)) {
    const Json trans = read_json(trans_manifest);
    double ffs = 0, fs_ = 0, ffd = 0, fd = 0;
    int n = 0;
    for (const auto& clip : trans["clips"]) {
      std::vector<Tensor> frames;
      for (const auto& f : clip["frames"]) frames.push_back(read_ppm(fs::path(cfg.out_dir) / f.get<std::string>()));
      Tensor stacked({static_cast<int>(frames.size()), kImageSize, kImageSize, kImageChannels});
      for (std::size_t i = 0; i < frames.size(); ++i) {
        std::copy(frames[i].data().begin(), frames[i].data().end(),
                  stacked.data().begin() + static_cast<std::ptrdiff_t>(i * frames[i].size()));
      }
      const double a = first_frame_similarity(stacked), b = frames_similarity(stacked);
      const double c = first_frame_distance(stacked), d = frames_distance(stacked);
      report.items.push_back({{"clip", n}, {"first_frame_similarity", a}, {"frames_similarity", b},
                              {"first_frame_distance", c}, {"frames_distance", d}});
      ffs += a, fs_ += b, ffd += c, fd += d, ++n;
    }
    if (n > 0) {
      report.set("first_frame_similarity", ffs / n);
      report.set("frames_similarity", fs_ / n);
      report.set("first_frame_distance", ffd / n);
      report.set("frames_distance", fd / n);
    }
  }
  Json m = report.to_json();
  m["command"] = "metrics";
  m["config"] = cfg.to_json();
  write_manifest(fs::path(cfg.out_dir) / "metrics.json", m);
  return m;
}

MetricReport run_ablation_sampling_rate(const StoryConfig& cfg, const std::vector<float>& rates) {
  const auto prompts = story_prompts(cfg);
  if (prompts.size() < 2) throw ContractError("the sampling-rate ablation needs at least 2 prompts");
  const DenoiserParams p = load_image_model(cfg);
  const DiffusionSchedule sched = DiffusionSchedule::linear();
  const RngStream rng = stream(cfg, kStoryStream);
  MetricReport report;
  report.seed = cfg.seed;
  report.config_hash = cfg.hash();

  const auto run = [&](std::optional<float> rate, const std::string& name) {
    const Tensor images = ddim_sample(p, sched, prompts, sampler_options(cfg, rate), rng);
    const std::vector<Tensor> frames = split_batch(images);
    const double sim = character_similarity(frames);
    report.set(name, sim);
    Json item = {{"name", name}, {"character_similarity", sim}};
    if (rate) item["sampling_rate"] = *rate;
    if (all_decodable(prompts)) item["prompt_adherence"] = prompt_adherence(frames, prompts);
    report.items.push_back(item);
  };
  run(std::nullopt, "vanilla");
  for (float r : rates) {
    char name[32];
    std::snprintf(name, sizeof name, "rate_%.2f", static_cast<double>(r));
    run(r, name);
  }
  Json m = report.to_json();
  m["command"] = "ablate";
  m["config"] = cfg.to_json();
  m["rates"] = rates;
  write_manifest(fs::path(cfg.out_dir) / "ablation.json", m);
  return report;
}

bool reproduce_manifest(const fs::path& manifest_path, const fs::path& out_dir) {
  const Json original = read_json(manifest_path);
  StoryConfig cfg = StoryConfig::from_json(original.at("config"));
  cfg.out_dir = out_dir.string();
  const std::string command = original.at("command").get<std::string>();
  Json again;
  if (command == "make-dataset") {
    again = run_make_dataset(cfg);
  } else if (command == "generate-story") {
    again = run_generate_story(cfg);
  } else if (command == "generate-transitions") {
    const fs::path story = manifest_path.parent_path().parent_path() / original.at("story_manifest").get<std::string>();
    if (!reproduce_manifest(story, out_dir)) return false;
    again = run_generate_transitions(cfg);
  } else if (command == "train-image") {
    cfg.image_checkpoint = (out_dir / "image.tsr").string();
    again = run_train_image(cfg);
  } else if (command == "train-motion") {
    cfg.motion_checkpoint = (out_dir / "motion.tsr").string();
    again = run_train_motion(cfg);
  } else {
    throw ConfigError("manifest command '" + command + "' cannot be reproduced");
  }
  return again.at("outputs") == original.at("outputs");
}

}  // namespace storydiff
