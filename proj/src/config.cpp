#include "config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

namespace tpd::harness {

namespace {

struct Field {
  const char* key;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

int to_int(const std::string& k, const std::string& v) {
  try {
    size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (...) {
    throw ConfigError("config: key '" + k + "' expects an integer, got '" + v + "'");
  }
}

uint64_t to_u64(const std::string& k, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (...) {
    throw ConfigError("config: key '" + k + "' expects an unsigned integer, got '" + v + "'");
  }
}

double to_double(const std::string& k, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (...) {
    throw ConfigError("config: key '" + k + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + k + "' expects true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

#define F_INT(name)                                                                   \
  {#name, [](Config& c, const std::string& v) { c.name = to_int(#name, v); },         \
   [](const Config& c) { return std::to_string(c.name); }}
#define F_U64(name)                                                                   \
  {#name, [](Config& c, const std::string& v) { c.name = to_u64(#name, v); },         \
   [](const Config& c) { return std::to_string(c.name); }}
#define F_DBL(name)                                                                   \
  {#name, [](Config& c, const std::string& v) { c.name = to_double(#name, v); },      \
   [](const Config& c) { return fmt_double(c.name); }}
#define F_BOOL(name)                                                                  \
  {#name, [](Config& c, const std::string& v) { c.name = to_bool(#name, v); },        \
   [](const Config& c) { return c.name ? "true" : "false"; }}
#define F_STR(name)                                                                   \
  {#name, [](Config& c, const std::string& v) { c.name = v; },                        \
   [](const Config& c) { return c.name; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      F_INT(plane_res), F_INT(plane_channels), F_INT(z_dim), F_INT(w_dim), F_INT(text_dim),
      F_INT(max_words), F_INT(adapter_count), F_INT(decoder_hidden), F_DBL(density_bias),
      F_INT(train_render_res), F_INT(eval_render_res), F_INT(ray_samples), F_DBL(radius),
      F_DBL(fov), F_DBL(near_offset), F_DBL(far_offset), F_INT(schedule_T), F_DBL(beta_start),
      F_DBL(beta_end), F_DBL(t_min_frac), F_DBL(t_max_frac), F_DBL(cfg_g), F_STR(rescale_mode),
      F_STR(teacher), F_DBL(teacher_sigma), F_INT(teacher_components), F_INT(denoiser_steps),
      F_STR(codec), F_INT(stage1_steps), F_INT(stage2_steps), F_INT(batch_size), F_INT(grad_accum),
      F_DBL(lambda_sds), F_DBL(gan_weight), F_DBL(lr_g), F_DBL(lr_d), F_DBL(adam_beta1),
      F_DBL(adam_beta2), F_DBL(adapter_lr_mul), F_DBL(mapping_lr_mul), F_INT(r1_every),
      F_DBL(r1_gamma), F_U64(seed), F_INT(corpus_n), F_U64(corpus_seed), F_STR(corpus_manifest),
      F_STR(vocab_file), F_INT(corpus_image_res), F_INT(snapshot_every),
      F_DBL(partial_prompt_prob), F_STR(dsds_pose), F_BOOL(freeze_g), F_BOOL(freeze_d),
      F_BOOL(no_dsds), F_BOOL(clip_style_loss), F_BOOL(global_only), F_BOOL(local_only),
      F_BOOL(no_gate), F_BOOL(no_3d_aware), F_BOOL(adapter_max_pool), F_STR(precision),
      F_INT(eval_scenes), F_INT(diversity_samples),
  };
  return f;
}

#undef F_INT
#undef F_U64
#undef F_DBL
#undef F_BOOL
#undef F_STR

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::parse_text(const std::string& text) {
  Config c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    bool found = false;
    for (const auto& f : fields()) {
      if (key == f.key) {
        f.set(c, val);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_text(os.str());
}

std::string Config::to_text() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << "=" << f.get(*this) << "\n";
  return os.str();
}

void Config::validate() const {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  check(plane_res >= 8 && (plane_res & (plane_res - 1)) == 0, "plane_res must be a power of two >= 8");
  check(plane_channels >= 1 && plane_channels <= 64, "plane_channels in [1,64]");
  check(z_dim >= 1 && w_dim >= 1 && text_dim >= 4, "latent dims must be positive");
  check(max_words >= 1, "max_words >= 1");
  check(adapter_count >= 0 && adapter_count <= 8, "adapter_count in [0,8]");
  check(decoder_hidden >= 1, "decoder_hidden >= 1");
  check(train_render_res >= 8 && eval_render_res >= 8, "render resolutions >= 8");
  check(train_render_res % 8 == 0, "train_render_res must be a multiple of 8");
  check(ray_samples >= 2, "ray_samples >= 2");
  check(radius > 0 && fov > 0 && fov < M_PI, "bad camera radius/fov");
  check(near_offset > 0 && far_offset > 0 && near_offset < radius, "bad near/far offsets");
  check(schedule_T >= 2, "schedule_T >= 2");
  check(beta_start > 0 && beta_end < 1 && beta_start <= beta_end, "bad beta range");
  check(t_min_frac >= 0 && t_max_frac <= 1 && t_min_frac < t_max_frac, "bad t fraction range");
  check(cfg_g >= 0, "cfg_g >= 0");
  check(rescale_mode == "off" || rescale_mode == "norm_match", "rescale_mode: off|norm_match");
  check(teacher == "analytic" || teacher == "learned", "teacher: analytic|learned");
  check(teacher_sigma > 0, "teacher_sigma > 0");
  check(teacher_components >= 1, "teacher_components >= 1");
  check(codec == "identity" || codec == "channel_mix", "codec: identity|channel_mix");
  check(stage1_steps >= 0 && stage2_steps >= 0, "stage steps >= 0");
  check(batch_size >= 1, "batch_size >= 1");
  check(grad_accum >= 1, "grad_accum >= 1");
  check(lambda_sds >= 0 && gan_weight >= 0, "loss weights >= 0");
  check(lr_g > 0 && lr_d > 0, "learning rates > 0");
  check(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1, "bad adam betas");
  check(r1_every >= 1, "r1_every >= 1");
  check(r1_gamma >= 0, "r1_gamma >= 0");
  check(corpus_n >= 1, "corpus_n >= 1");
  check(corpus_image_res >= 8, "corpus_image_res >= 8");
  check(snapshot_every >= 1, "snapshot_every >= 1");
  check(partial_prompt_prob >= 0 && partial_prompt_prob <= 1, "partial_prompt_prob in [0,1]");
  check(dsds_pose == "frontal" || dsds_pose == "orbit", "dsds_pose: frontal|orbit");
  check(precision == "f32" || precision == "f64", "precision: f32|f64");
  check(eval_scenes >= 1, "eval_scenes >= 1");
  check(diversity_samples >= 2, "diversity_samples >= 2");
  check(!(global_only && local_only), "global_only and local_only are mutually exclusive");
  check(!(no_dsds && clip_style_loss), "no_dsds and clip_style_loss are mutually exclusive");
}

ad::Scalar Config::scalar() const {
  return precision == "f64" ? ad::Scalar::F64 : ad::Scalar::F32;
}

}  // namespace tpd::harness
