#include "scene.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>

namespace tpd::data {

namespace {
struct Binding {
  const char* word;
  double value;
};
const Binding kHueBindings[] = {{"red", 0},    {"yellow", 60},  {"green", 120},
                                {"cyan", 180}, {"blue", 240},   {"purple", 300}};
const Binding kAgeBindings[] = {{"young", 0.82}, {"middle-aged", 1.0}, {"old", 1.25}};
const Binding kSizeBindings[] = {{"woman", 0.42}, {"man", 0.58}};

double lookup(const Binding* b, size_t n, const std::string& w, const char* what) {
  for (size_t i = 0; i < n; ++i)
    if (w == b[i].word) return b[i].value;
  throw ConfigError(std::string("no appearance binding for ") + what + " word '" + w + "'");
}
}  // namespace

double hair_hue_deg(const std::string& w) { return lookup(kHueBindings, 6, w, "hair"); }
double age_elongation(const std::string& w) { return lookup(kAgeBindings, 3, w, "age"); }
double gender_size(const std::string& w) { return lookup(kSizeBindings, 2, w, "gender"); }
bool eyewear_torus(const std::string& w) {
  if (w == "glasses") return true;
  if (w == "bare") return false;
  throw ConfigError("no appearance binding for eyewear word '" + w + "'");
}
bool expression_stripe(const std::string& w) {
  if (w == "smiling") return true;
  if (w == "neutral") return false;
  throw ConfigError("no appearance binding for expression word '" + w + "'");
}

double SceneSpec::hue_deg(const text::Vocabulary& v) const {
  double h = hair_hue_deg(v.value_word(0, attrs.v[0])) + nuis.hue_jitter_deg;
  return h < 0 ? h + 360.0 : (h >= 360.0 ? h - 360.0 : h);
}
double SceneSpec::horizontal_radius(const text::Vocabulary& v) const {
  return gender_size(v.value_word(2, attrs.v[2])) * nuis.size_mul;
}
double SceneSpec::vertical_radius(const text::Vocabulary& v) const {
  return horizontal_radius(v) * age_elongation(v.value_word(1, attrs.v[1])) * nuis.elong_mul;
}
bool SceneSpec::has_torus(const text::Vocabulary& v) const {
  return eyewear_torus(v.value_word(3, attrs.v[3]));
}
bool SceneSpec::has_stripe(const text::Vocabulary& v) const {
  return expression_stripe(v.value_word(4, attrs.v[4]));
}

void hsv_to_rgb(double h_deg, double s, double v, float out[3]) {
  double h = h_deg / 60.0;
  int i = int(std::floor(h)) % 6;
  double f = h - std::floor(h);
  double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r, g, b;
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  out[0] = float(r);
  out[1] = float(g);
  out[2] = float(b);
}

SceneSpec make_scene(const text::Attributes& attrs, uint64_t nuisance_seed) {
  if (!attrs.complete()) throw ContractError("make_scene: attributes must be complete");
  SceneSpec s;
  s.attrs = attrs;
  Rng rng = Rng::derive(nuisance_seed, 0x6e756973ull);
  s.nuis.hue_jitter_deg = rng.uniform(-12.0, 12.0);
  s.nuis.value = rng.uniform(0.72, 1.0);
  s.nuis.size_mul = rng.uniform(0.96, 1.04);
  s.nuis.elong_mul = rng.uniform(0.97, 1.03);
  return s;
}

namespace {

struct SceneGeom {
  double a, b;           // horizontal / vertical semi-axes
  bool torus, stripe;
  float head_rgb[3];
  float stripe_rgb[3];
  double stripe_y, stripe_h;
  Vec3 torus_center;
  double torus_R, torus_r;
};

SceneGeom build_geom(const SceneSpec& spec, const text::Vocabulary& vocab) {
  SceneGeom g;
  g.a = spec.horizontal_radius(vocab);
  g.b = spec.vertical_radius(vocab);
  g.torus = spec.has_torus(vocab);
  g.stripe = spec.has_stripe(vocab);
  hsv_to_rgb(spec.hue_deg(vocab), 0.85, spec.nuis.value, g.head_rgb);
  float sg = float(0.5 * spec.nuis.value);
  g.stripe_rgb[0] = g.stripe_rgb[1] = g.stripe_rgb[2] = sg;
  g.stripe_y = -0.28 * g.b;
  g.stripe_h = 0.11 * g.b;
  g.torus_center = {0.0, 0.18 * g.b, 0.92 * g.a};
  g.torus_R = 0.38 * g.a;
  g.torus_r = 0.13 * g.a;
  return g;
}

// exact ray-ellipsoid intersection in the scaled space
bool hit_ellipsoid(const SceneGeom& g, const Vec3& o, const Vec3& d, double& t_hit) {
  Vec3 os{o.x / g.a, o.y / g.b, o.z / g.a};
  Vec3 ds{d.x / g.a, d.y / g.b, d.z / g.a};
  double A = ds.dot(ds), B = 2.0 * os.dot(ds), C = os.dot(os) - 1.0;
  double disc = B * B - 4 * A * C;
  if (disc < 0) return false;
  double sq = std::sqrt(disc);
  double t0 = (-B - sq) / (2 * A);
  double t1 = (-B + sq) / (2 * A);
  double t = t0 > 1e-6 ? t0 : (t1 > 1e-6 ? t1 : -1);
  if (t < 0) return false;
  t_hit = t;
  return true;
}

double torus_sdf(const SceneGeom& g, const Vec3& p) {
  Vec3 q = p - g.torus_center;  // axis along z
  double ring = std::sqrt(q.x * q.x + q.y * q.y) - g.torus_R;
  return std::sqrt(ring * ring + q.z * q.z) - g.torus_r;
}

bool hit_torus(const SceneGeom& g, const Vec3& o, const Vec3& d, double t_max, double& t_hit) {
  double t = 1e-4;
  for (int i = 0; i < 192 && t < t_max; ++i) {
    Vec3 p = o + d * t;
    double s = torus_sdf(g, p);
    if (s < 1e-4) {
      t_hit = t;
      return true;
    }
    t += s;
  }
  return false;
}

}  // namespace

Image render_scene(const SceneSpec& spec, const text::Vocabulary& vocab,
                   const tri::CameraPose& pose, int res) {
  SceneGeom g = build_geom(spec, vocab);
  tri::CameraPose p = pose;
  p.image_size = res;
  tri::RaySamples rays = tri::camera_rays(p, 2, p.radius - 1.2, p.radius + 1.2, 0, false);
  Image img;
  img.h = img.w = res;
  img.rgb.assign(size_t(res * res * 3), 1.0f);
  parallel_for(int64_t(res) * res, 512, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      Vec3 o{rays.origins[size_t(i * 3)], rays.origins[size_t(i * 3) + 1],
             rays.origins[size_t(i * 3) + 2]};
      Vec3 d{rays.dirs[size_t(i * 3)], rays.dirs[size_t(i * 3) + 1],
             rays.dirs[size_t(i * 3) + 2]};
      double t_ell = 0, t_tor = 0;
      bool he = hit_ellipsoid(g, o, d, t_ell);
      bool ht = g.torus && hit_torus(g, o, d, he ? t_ell : p.radius + 1.2, t_tor);
      float* px = &img.rgb[size_t(i * 3)];
      if (ht && (!he || t_tor < t_ell)) {
        px[0] = px[1] = px[2] = 0.08f;
      } else if (he) {
        Vec3 hp = o + d * t_ell;
        if (g.stripe && std::fabs(hp.y - g.stripe_y) < g.stripe_h) {
          px[0] = g.stripe_rgb[0];
          px[1] = g.stripe_rgb[1];
          px[2] = g.stripe_rgb[2];
        } else {
          px[0] = g.head_rgb[0];
          px[1] = g.head_rgb[1];
          px[2] = g.head_rgb[2];
        }
      }
    }
  });
  return img;
}

tri::CameraPose frontal_pose(double radius, double fov, int image_size) {
  tri::CameraPose p;
  p.azimuth = 0;
  p.elevation = 10.0 * M_PI / 180.0;
  p.radius = radius;
  p.fov = fov;
  p.image_size = image_size;
  return p;
}

tri::CameraPose sample_orbit_pose(Rng& rng, double radius, double fov, int image_size) {
  tri::CameraPose p;
  p.azimuth = rng.uniform(-0.7, 0.7);
  p.elevation = rng.uniform(0.0, 0.35);
  p.radius = radius;
  p.fov = fov;
  p.image_size = image_size;
  return p;
}

Corpus make_corpus(int n, uint64_t seed, const text::Vocabulary& vocab, double radius, double fov,
                   int image_size) {
  if (n < 1) throw ContractError("make_corpus: n must be >= 1");
  Corpus c;
  c.seed = seed;
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, 0x636f7270ull, uint64_t(i));
    CorpusItem item;
    item.scene_id = i;
    text::Attributes attrs = text::sample_attributes(vocab, rng);
    item.spec = make_scene(attrs, rng.next_u64());
    item.captions = text::caption_paraphrases(attrs, vocab);
    item.pose = sample_orbit_pose(rng, radius, fov, image_size);
    char buf[64];
    std::snprintf(buf, sizeof buf, "images/scene_%05d.png", i);
    item.image_path = buf;
    c.items.push_back(std::move(item));
  }
  return c;
}

void write_corpus(const Corpus& corpus, const text::Vocabulary& vocab, const std::string& dir,
                  int image_res) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw IoError("cannot create corpus directory: " + dir);
  std::ofstream mf(fs::path(dir) / "manifest.jsonl");
  if (!mf) throw IoError("cannot write corpus manifest");
  for (const auto& item : corpus.items) {
    Image img = render_scene(item.spec, vocab, item.pose, image_res);
    write_image(img, (fs::path(dir) / item.image_path).string());
    nlohmann::json j;
    j["scene_id"] = item.scene_id;
    nlohmann::json attrs;
    for (int s = 0; s < text::kNumSlots; ++s)
      attrs[text::kSlotNames[s]] = vocab.value_word(s, item.spec.attrs.v[size_t(s)]);
    j["attributes"] = attrs;
    j["captions"] = item.captions;
    j["pose"] = {{"azimuth", item.pose.azimuth},
                 {"elevation", item.pose.elevation},
                 {"radius", item.pose.radius},
                 {"fov", item.pose.fov}};
    j["image_path"] = item.image_path;
    j["nuisance"] = {{"hue_jitter_deg", item.spec.nuis.hue_jitter_deg},
                     {"value", item.spec.nuis.value},
                     {"size_mul", item.spec.nuis.size_mul},
                     {"elong_mul", item.spec.nuis.elong_mul}};
    mf << j.dump() << "\n";
  }
}

Corpus load_manifest(const std::string& manifest_path, const text::Vocabulary& vocab) {
  std::ifstream f(manifest_path);
  if (!f) throw IoError("cannot open corpus manifest: " + manifest_path);
  Corpus c;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw IoError("manifest parse error: " + std::string(e.what()));
    }
    CorpusItem item;
    item.scene_id = j["scene_id"].get<int64_t>();
    for (int s = 0; s < text::kNumSlots; ++s) {
      std::string w = j["attributes"][text::kSlotNames[s]].get<std::string>();
      int slot, val;
      if (!vocab.slot_value(w, slot, val) || slot != s)
        throw ConfigError("manifest attribute '" + w + "' not in vocabulary slot " +
                          text::kSlotNames[s]);
      item.spec.attrs.v[size_t(s)] = val;
    }
    item.captions = j["captions"].get<std::vector<std::string>>();
    item.pose.azimuth = j["pose"]["azimuth"].get<double>();
    item.pose.elevation = j["pose"]["elevation"].get<double>();
    item.pose.radius = j["pose"]["radius"].get<double>();
    item.pose.fov = j["pose"]["fov"].get<double>();
    item.image_path = j["image_path"].get<std::string>();
    const auto& nj = j["nuisance"];
    item.spec.nuis.hue_jitter_deg = nj["hue_jitter_deg"].get<double>();
    item.spec.nuis.value = nj["value"].get<double>();
    item.spec.nuis.size_mul = nj["size_mul"].get<double>();
    item.spec.nuis.elong_mul = nj["elong_mul"].get<double>();
    c.items.push_back(std::move(item));
  }
  if (c.items.empty()) throw IoError("manifest is empty: " + manifest_path);
  return c;
}

}  // namespace tpd::data
