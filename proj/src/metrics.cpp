#include "metrics.hpp"

#include <algorithm>
#include <cmath>

namespace tpd::metrics {

using namespace tpd::ad;

namespace {

struct RankedValue {
  int value_index;
  double binding;
};

std::vector<RankedValue> ranked_bindings(const text::Vocabulary& vocab, int slot,
                                         double (*bind)(const std::string&)) {
  std::vector<RankedValue> out;
  for (int i = 0; i < vocab.num_values(slot); ++i)
    out.push_back({i, bind(vocab.value_word(slot, i))});
  std::sort(out.begin(), out.end(),
            [](const RankedValue& a, const RankedValue& b) { return a.binding < b.binding; });
  return out;
}

double circ_dist_deg(double a, double b) {
  double d = std::fabs(a - b);
  while (d > 360.0) d -= 360.0;
  return std::min(d, 360.0 - d);
}

}  // namespace

Probe::Probe(const text::Vocabulary& vocab, double radius, double fov) : vocab_(&vocab) {
  for (int i = 0; i < vocab.num_values(0); ++i)
    hue_centers_.push_back(data::hair_hue_deg(vocab.value_word(0, i)));
  auto ages = ranked_bindings(vocab, 1, data::age_elongation);
  for (size_t i = 0; i + 1 < ages.size(); ++i)
    aspect_edges_.push_back(0.5 * (ages[i].binding + ages[i + 1].binding));
  auto sizes = ranked_bindings(vocab, 2, data::gender_size);
  double th = std::tan(fov * 0.5);
  auto width_frac = [&](double a) { return a / (std::sqrt(radius * radius - a * a) * th); };
  for (size_t i = 0; i + 1 < sizes.size(); ++i)
    width_edges_.push_back(0.5 * (width_frac(sizes[i].binding) + width_frac(sizes[i + 1].binding)));
}

std::vector<uint8_t> Probe::foreground_mask(const Image& img) const {
  std::vector<uint8_t> mask(size_t(img.h * img.w), 0);
  for (size_t i = 0; i < mask.size(); ++i) {
    const float* p = &img.rgb[i * 3];
    double d = std::max({1.0 - p[0], 1.0 - p[1], 1.0 - p[2]});
    mask[i] = d > 0.12 ? 1 : 0;
  }
  return mask;
}

ProbeResult Probe::attribute_probe(const Image& img) const {
  ProbeResult r;
  r.features.assign(11, 0.0);
  const text::Vocabulary& vocab = *vocab_;
  std::vector<uint8_t> fg = foreground_mask(img);
  int64_t n_fg = 0, n_dark = 0, n_gray = 0, n_col = 0;
  double sin_acc = 0, cos_acc = 0;
  std::array<double, 8> hue_hist{};
  int min_r = img.h, max_r = -1, min_c = img.w, max_c = -1;
  std::vector<int> row_count(size_t(img.h), 0), col_count(size_t(img.w), 0);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      size_t i = size_t(y * img.w + x);
      if (!fg[i]) continue;
      ++n_fg;
      ++row_count[size_t(y)];
      ++col_count[size_t(x)];
      const float* p = &img.rgb[i * 3];
      double mx = std::max({p[0], p[1], p[2]});
      double mn = std::min({p[0], p[1], p[2]});
      double sat = mx > 1e-6 ? (mx - mn) / mx : 0.0;
      if (mx < 0.3) {
        ++n_dark;
      } else if (sat < 0.3 && mx <= 0.85) {
        ++n_gray;
      } else {
        ++n_col;
        // hue from rgb
        double h;
        double d = mx - mn;
        if (d < 1e-9) h = 0;
        else if (mx == p[0]) h = 60.0 * std::fmod((p[1] - p[2]) / d + 6.0, 6.0);
        else if (mx == p[1]) h = 60.0 * ((p[2] - p[0]) / d + 2.0);
        else h = 60.0 * ((p[0] - p[1]) / d + 4.0);
        double rad = h * M_PI / 180.0;
        sin_acc += std::sin(rad);
        cos_acc += std::cos(rad);
        hue_hist[size_t(int(h / 45.0)) % 8] += 1.0;
      }
    }
  if (n_fg < 4) return r;  // "empty" verdict
  r.empty = false;
  r.fg_frac = double(n_fg) / double(img.h * img.w);
  r.dark_frac = double(n_dark) / double(n_fg);
  r.gray_frac = double(n_gray) / double(n_fg);

  // robust extents: rows/cols holding at least 2 foreground pixels
  for (int y = 0; y < img.h; ++y)
    if (row_count[size_t(y)] >= 2) {
      min_r = std::min(min_r, y);
      max_r = std::max(max_r, y);
    }
  for (int x = 0; x < img.w; ++x)
    if (col_count[size_t(x)] >= 2) {
      min_c = std::min(min_c, x);
      max_c = std::max(max_c, x);
    }
  double height = std::max(1, max_r - min_r + 1);
  double width = std::max(1, max_c - min_c + 1);
  double aspect = height / width;
  double width_frac = width / double(img.w);

  // hair: nearest hue center (ties break toward the lower value index)
  double mean_hue = std::atan2(sin_acc, cos_acc) * 180.0 / M_PI;
  if (mean_hue < 0) mean_hue += 360.0;
  int best_h = 0;
  double best_d = 1e18;
  for (size_t i = 0; i < hue_centers_.size(); ++i) {
    double d = circ_dist_deg(mean_hue, hue_centers_[i]);
    if (d < best_d - 1e-12) {
      best_d = d;
      best_h = int(i);
    }
  }
  r.attrs.v[0] = n_col > 0 ? best_h : 0;

  auto classify_ranked = [](double x, const std::vector<double>& edges,
                            const std::vector<RankedValue>& ranked) {
    size_t k = 0;
    while (k < edges.size() && x >= edges[k]) ++k;
    return ranked[k].value_index;
  };
  r.attrs.v[1] = classify_ranked(aspect, aspect_edges_, ranked_bindings(vocab, 1, data::age_elongation));
  r.attrs.v[2] = classify_ranked(width_frac, width_edges_, ranked_bindings(vocab, 2, data::gender_size));

  // eyewear / expression: find the value index carrying the marker
  auto flag_value = [&](int slot, bool flag, bool (*bind)(const std::string&)) {
    for (int i = 0; i < vocab.num_values(slot); ++i)
      if (bind(vocab.value_word(slot, i)) == flag) return i;
    return 0;
  };
  r.attrs.v[3] = flag_value(3, r.dark_frac > 0.02, data::eyewear_torus);
  r.attrs.v[4] = flag_value(4, r.gray_frac > 0.03, data::expression_stripe);

  double hist_total = 0;
  for (double h : hue_hist) hist_total += h;
  for (int i = 0; i < 8; ++i)
    r.features[size_t(i)] = hist_total > 0 ? hue_hist[size_t(i)] / hist_total : 0.0;
  r.features[8] = aspect;
  r.features[9] = r.fg_frac;
  r.features[10] = r.dark_frac > 0.02 ? 1.0 : 0.0;
  return r;
}

std::array<tri::CameraPose, 3> eval_views(double radius, double fov, int image_size) {
  auto mk = [&](double az_deg) {
    tri::CameraPose p;
    p.azimuth = az_deg * M_PI / 180.0;
    p.elevation = 10.0 * M_PI / 180.0;
    p.radius = radius;
    p.fov = fov;
    p.image_size = image_size;
    return p;
  };
  return {mk(0.0), mk(15.0), mk(-15.0)};
}

std::vector<double> embed_image(const ProbeResult& pr, const text::Vocabulary& vocab) {
  if (pr.empty) return std::vector<double>(size_t(vocab.text_dim), 0.0);
  return text::encode_text(text::canonical_caption(pr.attrs, vocab), vocab).eot;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("cosine: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0 || nb <= 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

double msc_score(const GenerateFn& gen, const std::string& prompt, uint64_t z_seed,
                 const std::array<tri::CameraPose, 3>& views, const Probe& probe) {
  std::vector<double> prompt_emb = text::encode_text(prompt, probe.vocab()).eot;
  double acc = 0;
  for (const auto& view : views) {
    Image img = gen(prompt, z_seed, view);
    acc += cosine(embed_image(probe.attribute_probe(img), probe.vocab()), prompt_emb);
  }
  return acc / 3.0;
}

double diversity_of_images(const std::vector<Image>& imgs, const Probe& probe) {
  if (imgs.size() < 2) throw ContractError("diversity: need at least 2 samples");
  std::vector<std::vector<uint8_t>> masks;
  for (const auto& im : imgs) masks.push_back(probe.foreground_mask(im));
  double acc = 0;
  int64_t pairs = 0;
  for (size_t i = 0; i < imgs.size(); ++i)
    for (size_t j = i + 1; j < imgs.size(); ++j) {
      double d2 = 0;
      int64_t cnt = 0;
      for (size_t p = 0; p < masks[i].size(); ++p) {
        if (!(masks[i][p] | masks[j][p])) continue;
        ++cnt;
        for (int c = 0; c < 3; ++c)
          d2 += sqr(double(imgs[i].rgb[p * 3 + size_t(c)]) - double(imgs[j].rgb[p * 3 + size_t(c)]));
      }
      acc += cnt > 0 ? std::sqrt(d2 / double(cnt)) : 0.0;
      ++pairs;
    }
  return acc / double(pairs);
}

double diversity_score(const GenerateFn& gen, const std::string& prompt, int n_z,
                       const tri::CameraPose& pose, const Probe& probe, uint64_t z_seed_base) {
  if (n_z < 2) throw ContractError("diversity_score: n_z must be >= 2");
  std::vector<Image> imgs;
  for (int i = 0; i < n_z; ++i) imgs.push_back(gen(prompt, z_seed_base + uint64_t(i), pose));
  return diversity_of_images(imgs, probe);
}

double mode_coverage(const std::vector<distill::Vec>& samples,
                     const std::vector<distill::MixtureComponent>& comps) {
  if (comps.empty()) throw ContractError("mode_coverage: empty mixture");
  int covered = 0;
  for (const auto& c : comps) {
    bool hit = false;
    for (const auto& s : samples) {
      if (s.size() != c.mean.size()) throw ContractError("mode_coverage: dimension mismatch");
      double d2 = 0;
      for (size_t i = 0; i < s.size(); ++i) d2 += sqr(s[i] - c.mean[i]);
      double rmsd = std::sqrt(d2 / double(s.size()));
      if (rmsd <= 2.0 * c.sigma) {
        hit = true;
        break;
      }
    }
    if (hit) ++covered;
  }
  return double(covered) / double(comps.size());
}

// ---------------------------------------------------------------------------
// Frechet distance (Jacobi eigensolver, no external linear algebra)
// ---------------------------------------------------------------------------

namespace {

// cyclic Jacobi on a symmetric matrix; returns eigenvalues, A becomes Q
void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& evals,
                  std::vector<double>& q) {
  q.assign(size_t(n * n), 0.0);
  for (int i = 0; i < n; ++i) q[size_t(i * n + i)] = 1.0;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += sqr(a[size_t(i * n + j)]);
    if (off < 1e-24) break;
    for (int p = 0; p < n - 1; ++p)
      for (int qi = p + 1; qi < n; ++qi) {
        double apq = a[size_t(p * n + qi)];
        if (std::fabs(apq) < 1e-30) continue;
        double app = a[size_t(p * n + p)], aqq = a[size_t(qi * n + qi)];
        double theta = 0.5 * (aqq - app) / apq;
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1));
        double c = 1.0 / std::sqrt(t * t + 1), s = t * c;
        for (int k = 0; k < n; ++k) {
          double akp = a[size_t(k * n + p)], akq = a[size_t(k * n + qi)];
          a[size_t(k * n + p)] = c * akp - s * akq;
          a[size_t(k * n + qi)] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          double apk = a[size_t(p * n + k)], aqk = a[size_t(qi * n + k)];
          a[size_t(p * n + k)] = c * apk - s * aqk;
          a[size_t(qi * n + k)] = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          double qkp = q[size_t(k * n + p)], qkq = q[size_t(k * n + qi)];
          q[size_t(k * n + p)] = c * qkp - s * qkq;
          q[size_t(k * n + qi)] = s * qkp + c * qkq;
        }
      }
  }
  evals.resize(size_t(n));
  for (int i = 0; i < n; ++i) evals[size_t(i)] = a[size_t(i * n + i)];
}

// B = Q f(L) Q^T for symmetric input
std::vector<double> sym_func(const std::vector<double>& m, int n, double (*f)(double)) {
  std::vector<double> a = m, evals, q;
  jacobi_eigen(a, n, evals, q);
  std::vector<double> out(size_t(n * n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int k = 0; k < n; ++k)
        acc += q[size_t(i * n + k)] * f(std::max(0.0, evals[size_t(k)])) * q[size_t(j * n + k)];
      out[size_t(i * n + j)] = acc;
    }
  return out;
}

std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b, int n) {
  std::vector<double> c(size_t(n * n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      double av = a[size_t(i * n + k)];
      for (int j = 0; j < n; ++j) c[size_t(i * n + j)] += av * b[size_t(k * n + j)];
    }
  return c;
}

void fit_gaussian(const std::vector<std::vector<double>>& feats, std::vector<double>& mu,
                  std::vector<double>& cov, double eps_reg) {
  if (feats.empty()) throw ContractError("fid_analog: empty feature set");
  int n = int(feats[0].size());
  mu.assign(size_t(n), 0.0);
  for (const auto& f : feats)
    for (int i = 0; i < n; ++i) mu[size_t(i)] += f[size_t(i)];
  for (auto& m : mu) m /= double(feats.size());
  cov.assign(size_t(n * n), 0.0);
  for (const auto& f : feats)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        cov[size_t(i * n + j)] += (f[size_t(i)] - mu[size_t(i)]) * (f[size_t(j)] - mu[size_t(j)]);
  double denom = std::max<size_t>(1, feats.size() - 1);
  for (auto& c : cov) c /= double(denom);
  for (int i = 0; i < n; ++i) cov[size_t(i * n + i)] += eps_reg;
}

}  // namespace

double fid_analog(const std::vector<std::vector<double>>& feats_a,
                  const std::vector<std::vector<double>>& feats_b, double eps_reg) {
  std::vector<double> mu_a, cov_a, mu_b, cov_b;
  fit_gaussian(feats_a, mu_a, cov_a, eps_reg);
  fit_gaussian(feats_b, mu_b, cov_b, eps_reg);
  int n = int(mu_a.size());
  if (mu_b.size() != mu_a.size()) throw ContractError("fid_analog: feature dims differ");
  double mean_term = 0;
  for (int i = 0; i < n; ++i) mean_term += sqr(mu_a[size_t(i)] - mu_b[size_t(i)]);
  // tr(sqrtm(Sa Sb)) = tr(sqrtm(sqrt(Sa) Sb sqrt(Sa)))
  std::vector<double> sa_half = sym_func(cov_a, n, [](double x) { return std::sqrt(x); });
  std::vector<double> inner = matmul_sq(matmul_sq(sa_half, cov_b, n), sa_half, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double s = 0.5 * (inner[size_t(i * n + j)] + inner[size_t(j * n + i)]);
      inner[size_t(i * n + j)] = inner[size_t(j * n + i)] = s;
    }
  std::vector<double> a = inner, evals, q;
  jacobi_eigen(a, n, evals, q);
  double tr_sqrt = 0;
  for (double l : evals) tr_sqrt += std::sqrt(std::max(0.0, l));
  double tr_a = 0, tr_b = 0;
  for (int i = 0; i < n; ++i) {
    tr_a += cov_a[size_t(i * n + i)];
    tr_b += cov_b[size_t(i * n + i)];
  }
  double fid = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
  return std::max(0.0, fid);
}

double rp_analog(const GenerateFn& gen, const data::Corpus& corpus, const Probe& probe,
                 int max_scenes, int n_distractors, uint64_t seed,
                 const tri::CameraPose& eval_pose) {
  const text::Vocabulary& vocab = probe.vocab();
  int n = std::min<int>(max_scenes, int(corpus.items.size()));
  if (n < 1) throw ContractError("rp_analog: empty corpus");
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    const auto& item = corpus.items[size_t(i)];
    const std::string& prompt = item.captions[0];
    Image img = gen(prompt, hash64(seed, uint64_t(i)), eval_pose);
    std::vector<double> e_img = embed_image(probe.attribute_probe(img), vocab);
    double true_sim = cosine(e_img, text::encode_text(prompt, vocab).eot);
    Rng rng = Rng::derive(seed, 0x7270ull, uint64_t(i));
    int rank_above = 0;
    int made = 0;
    while (made < n_distractors) {
      text::Attributes d = text::sample_attributes(vocab, rng);
      if (d == item.spec.attrs) continue;
      ++made;
      double sim = cosine(e_img, text::encode_text(canonical_caption(d, vocab), vocab).eot);
      if (sim > true_sim) ++rank_above;
    }
    if (rank_above == 0) ++hits;
  }
  return double(hits) / double(n);
}

MixReport prompt_mix_eval(const GenerateFn& gen, const std::string& base_prompt,
                          const std::vector<std::string>& additions, const Probe& probe,
                          uint64_t z_seed, const tri::CameraPose& pose) {
  MixReport rep;
  std::string prompt = base_prompt;
  int prev = -1;
  for (size_t k = 0; k <= additions.size(); ++k) {
    if (k > 0) prompt += ", " + additions[k - 1];
    MixStep step;
    step.prompt = prompt;
    step.target = text::parse_attributes(prompt, probe.vocab());
    Image img = gen(prompt, z_seed, pose);
    ProbeResult pr = probe.attribute_probe(img);
    step.probed = pr.attrs;
    for (int s = 0; s < text::kNumSlots; ++s) {
      if (!step.target.specified(s)) continue;
      ++step.mentioned;
      if (!pr.empty && pr.attrs.v[size_t(s)] == step.target.v[size_t(s)]) ++step.satisfied;
    }
    if (prev >= 0 && step.satisfied < prev) rep.monotone = false;
    prev = step.satisfied;
    rep.steps.push_back(std::move(step));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// differentiable CLIP-style loss
// ---------------------------------------------------------------------------

Tensor clip_style_loss(const Tensor& image, const text::TokenSet& tokens, const Probe& probe) {
  const text::Vocabulary& vocab = probe.vocab();
  Scalar dt = image.dtype();
  int64_t h = image.dim(0), w = image.dim(1);
  Tensor ones = Tensor::full(image.shape(), 1.0, dt);
  Tensor d2 = reduce_sum(square(sub(ones, image)), {2}, true);          // (H,W,1)
  Tensor m = sigmoid(mul_scalar(add_scalar(d2, -0.06), 60.0));           // soft fg
  Tensor area = sum_all(m);
  Tensor area_safe = add_scalar(area, 1.0);
  Tensor inv_area = rsqrt(square(area_safe), 0.0);                       // 1/(area+1)
  Tensor wsum = reduce_sum(mul(image, expand(m, 2, 3)), {0, 1}, false);  // (3)
  Tensor mean_rgb = mul(wsum, expand(reshape(inv_area, {1}), 0, 3));

  // soft hue class against the binding colors at mid brightness
  int kh = vocab.num_values(0);
  std::vector<Tensor> hue_d2;
  for (int k = 0; k < kh; ++k) {
    float rgb[3];
    data::hsv_to_rgb(data::hair_hue_deg(vocab.value_word(0, k)), 0.85, 0.86, rgb);
    Tensor target = Tensor::from_vector({3}, {rgb[0], rgb[1], rgb[2]}, dt);
    hue_d2.push_back(reshape(sum_all(square(sub(mean_rgb, target))), {1, 1}));
  }
  Tensor hue_logits = mul_scalar(concat(hue_d2, 1), -40.0);  // (1,K)
  Tensor hue_w = softmax_rows(hue_logits);

  // soft size class from the foreground area fraction
  int kg = vocab.num_values(2);
  double th = std::tan(0.3);  // uses the default evaluation framing
  std::vector<Tensor> size_d2;
  Tensor area_frac = mul_scalar(area, 1.0 / double(h * w));
  for (int k = 0; k < kg; ++k) {
    double a = data::gender_size(vocab.value_word(2, k));
    double wf = a / (std::sqrt(2.7 * 2.7 - a * a) * th);
    double af = M_PI / 4.0 * wf * wf;
    size_d2.push_back(reshape(square(add_scalar(area_frac, -af)), {1, 1}));
  }
  Tensor size_logits = mul_scalar(concat(size_d2, 1), -200.0);
  Tensor size_w = softmax_rows(size_logits);

  auto emb_matrix = [&](int slot) {
    int kv = vocab.num_values(slot);
    std::vector<double> flat;
    for (int k = 0; k < kv; ++k) {
      const auto& e = vocab.embedding(vocab.value_word(slot, k));
      flat.insert(flat.end(), e.begin(), e.end());
    }
    return Tensor::from_vector({kv, vocab.text_dim}, flat, dt);
  };
  Tensor img_emb = add(matmul(hue_w, emb_matrix(0)), matmul(size_w, emb_matrix(2)));  // (1,D)

  std::vector<double> pe(size_t(vocab.text_dim), 0.0);
  for (const auto& word : tokens.words)
    for (int i = 0; i < vocab.text_dim; ++i) pe[size_t(i)] += word[size_t(i)];
  double pn = 0;
  for (double x : pe) pn += x * x;
  if (pn > 0)
    for (double& x : pe) x /= std::sqrt(pn);
  Tensor prompt_emb = Tensor::from_vector({1, int64_t(pe.size())}, pe, dt);

  Tensor dot = sum_all(mul(img_emb, prompt_emb));
  Tensor inv_norm = rsqrt(sum_all(square(img_emb)), 1e-8);
  Tensor cos = mul(dot, inv_norm);
  return add_scalar(neg(cos), 1.0);
}

}  // namespace tpd::metrics
