#pragma once

#include <string>
#include <vector>

#include "camera.hpp"
#include "image.hpp"
#include "text.hpp"

namespace tpd::data {

// Uncaptioned per-scene variation; kept inside the attribute classes' decision
// margins so the probe stays exact.
struct Nuisance {
  double hue_jitter_deg = 0.0;  // +-12
  double value = 1.0;           // albedo brightness, 0.72..1.0
  double size_mul = 1.0;        // 0.96..1.04
  double elong_mul = 1.0;       // 0.97..1.03
};

// Analytic "head": axially symmetric ellipsoid (hue ~ hair color, horizontal
// radius ~ gender, vertical elongation ~ age) plus an optional dark torus on
// the front face (eyewear) and a gray horizontal band (expression).
struct SceneSpec {
  text::Attributes attrs;
  Nuisance nuis;

  double hue_deg(const text::Vocabulary& v) const;
  double horizontal_radius(const text::Vocabulary& v) const;
  double vertical_radius(const text::Vocabulary& v) const;
  bool has_torus(const text::Vocabulary& v) const;
  bool has_stripe(const text::Vocabulary& v) const;
};

// word -> appearance bindings (fixed; lab vocabularies must use these words)
double hair_hue_deg(const std::string& word);
double age_elongation(const std::string& word);
double gender_size(const std::string& word);
bool eyewear_torus(const std::string& word);
bool expression_stripe(const std::string& word);

void hsv_to_rgb(double h_deg, double s, double v, float out[3]);

SceneSpec make_scene(const text::Attributes& attrs, uint64_t nuisance_seed);

// Flat-albedo raycast of the analytic scene (exact ellipsoid intersection,
// sphere-traced torus); renders identically from its definition at any pose.
Image render_scene(const SceneSpec& spec, const text::Vocabulary& vocab,
                   const tri::CameraPose& pose, int res);

struct CorpusItem {
  int64_t scene_id = 0;
  SceneSpec spec;
  std::vector<std::string> captions;  // 3 paraphrases
  tri::CameraPose pose;
  std::string image_path;
};

struct Corpus {
  uint64_t seed = 0;
  std::vector<CorpusItem> items;
};

tri::CameraPose sample_orbit_pose(Rng& rng, double radius, double fov, int image_size);
tri::CameraPose frontal_pose(double radius, double fov, int image_size);

Corpus make_corpus(int n, uint64_t seed, const text::Vocabulary& vocab, double radius, double fov,
                   int image_size);

// Renders PNGs into dir/images and writes dir/manifest.jsonl.
void write_corpus(const Corpus& corpus, const text::Vocabulary& vocab, const std::string& dir,
                  int image_res);
Corpus load_manifest(const std::string& manifest_path, const text::Vocabulary& vocab);

}  // namespace tpd::data
