#include "trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>

namespace tpd::distill {

using namespace tpd::ad;
using harness::Model;

DsdsDiag dsds_step(Model& model, const DsdsSamplers& samplers, const Teacher& teacher,
                   const NoiseSchedule& sched, Adam& opt, const DsdsOpts& opts,
                   int64_t step_index) {
  int B = opts.batch;
  if (B < 1) throw ContractError("dsds_step: batch must be >= 1");
  std::vector<GradSink> sinks(size_t(B));
  std::vector<double> rmss(size_t(B)), losses(size_t(B));
  DsdsDiag diag;
  diag.ts.assign(size_t(B), 0);
  LatentCodec identity = LatentCodec::identity();
  const LatentCodec& codec = opts.codec ? *opts.codec : identity;
  parallel_for(B, 1, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      Rng rng = Rng::derive(opts.base_seed, uint64_t(step_index), uint64_t(i));
      Tape tape;
      Tensor z = samplers.sample_z(rng);
      std::string prompt = samplers.sample_prompt(rng);
      text::TokenSet tokens = text::encode_text(prompt, model.vocab);
      text::Attributes attrs = text::parse_attributes(prompt, model.vocab);
      tri::CameraPose pose = samplers.sample_pose(rng);
      uint64_t ray_seed = rng.next_u64();
      Tensor img = model.forward_image(z, tokens, pose, opts.render_res, ray_seed,
                                       opts.jitter_rays);
      Tensor latent = codec.encode(img);
      SdsSample s = sds_gradient(teacher, sched, latent.to_vector(), &attrs, rng, opts.cfg_g,
                                 opts.rescale, opts.t_lo, opts.t_hi);
      Tensor g = Tensor::from_vector(latent.shape(), s.grad, latent.dtype());
      Tensor loss = mul_scalar(inner(latent, g), opts.lambda);
      losses[size_t(i)] = loss.item();
      rmss[size_t(i)] = s.rms_residual;
      diag.ts[size_t(i)] = s.t;
      backward_into(loss, sinks[size_t(i)]);
    }
  });
  for (int i = 0; i < B; ++i) {
    for (auto& item : model.params.items) {
      auto it = sinks[size_t(i)].find(item.tensor.payload());
      if (it == sinks[size_t(i)].end()) continue;
      Payload* p = item.tensor.payload();
      if (!p->grad) {
        p->grad = std::make_unique<Storage>(p->value.dt);
        p->grad->resize(p->value.size(), 0.0);
      }
      for (size_t j = 0; j < it->second.size(); ++j)
        p->grad->set(j, p->grad->get(j) + it->second.get(j));
    }
  }
  opt.step(model.params, 1.0 / double(B));
  model.params.zero_grads();
  for (int i = 0; i < B; ++i) {
    diag.mean_sds_rms += rmss[size_t(i)] / double(B);
    diag.mean_loss += losses[size_t(i)] / double(B);
  }
  return diag;
}

}  // namespace tpd::distill

namespace tpd::harness {

using namespace tpd::ad;
using namespace tpd::distill;

namespace {

void enumerate_combos(const text::Vocabulary& vocab, int slot, text::Attributes& cur,
                      std::vector<text::Attributes>& out) {
  if (slot == text::kNumSlots) {
    out.push_back(cur);
    return;
  }
  for (int v = 0; v < vocab.num_values(slot); ++v) {
    cur.v[size_t(slot)] = v;
    enumerate_combos(vocab, slot + 1, cur, out);
  }
}

std::vector<text::Attributes> all_combos(const text::Vocabulary& vocab) {
  std::vector<text::Attributes> out;
  text::Attributes cur;
  enumerate_combos(vocab, 0, cur, out);
  return out;
}

Vec image_to_vec(const Image& img) {
  return Vec(img.rgb.begin(), img.rgb.end());
}

struct TrainerImpl {
  Model& model;
  const Config& cfg;
  std::string out_dir;

  gan::Discriminator disc;
  ParamStore d_params;
  Adam opt_g, opt_d;
  data::Corpus corpus;
  std::vector<Image> real_cache;  // corpus images at training resolution
  std::unique_ptr<AnalyticMixtureTeacher> ana_teacher;
  std::unique_ptr<LearnedDenoiserTeacher> learned_teacher;
  const Teacher* teacher = nullptr;
  NoiseSchedule sched;
  std::unique_ptr<metrics::Probe> probe;
  std::vector<std::string> probe_prompts;
  std::vector<text::Attributes> probe_attrs;
  LatentCodec codec;
  std::ofstream metrics_out;
  double acc_d = 0, acc_g = 0, acc_sds = 0;
  int64_t n_d = 0, n_g = 0, n_sds = 0;
  int accum_count = 0;
  int64_t teacher_calls_after_stage1 = 0;

  TrainerImpl(Model& m, const std::string& dir) : model(m), cfg(m.cfg), out_dir(dir) {}

  Rng item_rng(uint64_t tag, int64_t step, int64_t item) {
    return Rng::derive(hash64(cfg.seed, tag), uint64_t(step), uint64_t(item));
  }

  std::string sample_training_prompt(Rng& rng) {
    if (cfg.partial_prompt_prob > 0 && rng.uniform() < cfg.partial_prompt_prob) {
      text::Attributes a = text::sample_attributes(model.vocab, rng);
      int kept = 0;
      text::Attributes partial;
      for (int s = 0; s < text::kNumSlots; ++s) {
        if (rng.uniform() < 0.55) {
          partial.v[size_t(s)] = a.v[size_t(s)];
          ++kept;
        }
      }
      if (kept == 0) partial.v[2] = a.v[2];
      return text::canonical_caption(partial, model.vocab);
    }
    return text::sample_prompt(model.vocab, rng);
  }

  void setup() {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir);

    if (!cfg.corpus_manifest.empty()) {
      corpus = data::load_manifest(cfg.corpus_manifest, model.vocab);
    } else {
      corpus = data::make_corpus(cfg.corpus_n, cfg.corpus_seed, model.vocab, cfg.radius, cfg.fov,
                                 cfg.corpus_image_res);
      data::write_corpus(corpus, model.vocab, (fs::path(out_dir) / "corpus").string(),
                         cfg.corpus_image_res);
    }
    real_cache.reserve(corpus.items.size());
    for (const auto& item : corpus.items)
      real_cache.push_back(data::render_scene(item.spec, model.vocab, item.pose,
                                              cfg.train_render_res));

    disc = gan::Discriminator::init(cfg.train_render_res, hash64(cfg.seed, 0xd15cull),
                                    cfg.scalar());
    disc.register_params(d_params);

    opt_g.lr = cfg.lr_g;
    opt_g.beta1 = cfg.adam_beta1;
    opt_g.beta2 = cfg.adam_beta2;
    opt_g.group_lr_mul = {{"mapping", cfg.mapping_lr_mul}, {"adapter", cfg.adapter_lr_mul}};
    opt_g.reset(model.params);
    opt_d.lr = cfg.lr_d;
    opt_d.beta1 = cfg.adam_beta1;
    opt_d.beta2 = cfg.adam_beta2;
    opt_d.reset(d_params);

    sched = NoiseSchedule::linear(cfg.schedule_T, cfg.beta_start, cfg.beta_end);
    codec = cfg.codec == "channel_mix" ? LatentCodec::channel_mix() : LatentCodec::identity();

    // analytic mixture over every complete attribute combination: per
    // condition, nuisance-variant frontal renders at training resolution
    auto t = std::make_unique<AnalyticMixtureTeacher>();
    t->sched = sched;
    t->dim_ = cfg.train_render_res * cfg.train_render_res * 3;
    tri::CameraPose front = data::frontal_pose(cfg.radius, cfg.fov, cfg.train_render_res);
    for (const auto& attrs : all_combos(model.vocab)) {
      std::vector<MixtureComponent> comps;
      for (int k = 0; k < cfg.teacher_components; ++k) {
        uint64_t ns = hash64(cfg.corpus_seed, hash_str(attrs.key(model.vocab)), uint64_t(k));
        data::SceneSpec spec = data::make_scene(attrs, ns);
        MixtureComponent c;
        c.mean = image_to_vec(data::render_scene(spec, model.vocab, front, cfg.train_render_res));
        c.weight = 1.0 / double(cfg.teacher_components);
        c.sigma = cfg.teacher_sigma;
        comps.push_back(std::move(c));
      }
      t->conditions.emplace_back(attrs, std::move(comps));
    }
    ana_teacher = std::move(t);

    if (cfg.teacher == "learned") {
      auto lt = std::make_unique<LearnedDenoiserTeacher>();
      lt->sched = sched;
      lt->vocab = &model.vocab;
      lt->net = DenoiserNet::init(cfg.train_render_res, cfg.text_dim, hash64(cfg.seed, 0xf00dull),
                                  cfg.scalar());
      std::vector<std::pair<Vec, text::Attributes>> dataset;
      for (const auto& [attrs, comps] : ana_teacher->conditions)
        for (const auto& c : comps) dataset.emplace_back(c.mean, attrs);
      train_denoiser(*lt, dataset, cfg.denoiser_steps, 4, 2e-3, 0.1, hash64(cfg.seed, 0xdeull));
      learned_teacher = std::move(lt);
      teacher = learned_teacher.get();
    } else {
      teacher = ana_teacher.get();
    }
    teacher->save_json((fs::path(out_dir) / "teacher.json").string());

    probe = std::make_unique<metrics::Probe>(model.vocab, cfg.radius, cfg.fov);
    for (const auto& item : corpus.items) {
      bool seen = false;
      for (const auto& a : probe_attrs) seen = seen || a == item.spec.attrs;
      if (!seen) {
        probe_attrs.push_back(item.spec.attrs);
        probe_prompts.push_back(text::canonical_caption(item.spec.attrs, model.vocab));
      }
      if (probe_prompts.size() >= 2) break;
    }

    metrics_out.open(fs::path(out_dir) / "metrics.jsonl");
    if (!metrics_out) throw IoError("cannot write metrics log");
  }

  void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string("training aborted: non-finite ") + what);
  }

  void d_step(int64_t step) {
    // fakes rendered outside the discriminator tape (no generator grads)
    Rng rng = item_rng(0xd57eull, step, 0);
    std::vector<Image> fakes;
    std::vector<const Image*> reals;
    for (int b = 0; b < cfg.batch_size; ++b) {
      reals.push_back(&real_cache[size_t(rng.uniform_int(0, int64_t(real_cache.size()) - 1))]);
      Tensor z = Tensor::randn({1, cfg.z_dim}, rng, cfg.scalar());
      std::string prompt = sample_training_prompt(rng);
      tri::CameraPose pose = data::sample_orbit_pose(rng, cfg.radius, cfg.fov,
                                                     cfg.train_render_res);
      uint64_t ray_seed = rng.next_u64();
      text::TokenSet tokens = text::encode_text(prompt, model.vocab);
      fakes.push_back(Image::from_tensor(
          model.forward_image(z, tokens, pose, cfg.train_render_res, ray_seed, true)));
    }
    Tape tape;
    Tensor loss;
    for (int b = 0; b < cfg.batch_size; ++b) {
      Tensor lr = disc.forward(reals[size_t(b)]->to_tensor(cfg.scalar()));
      Tensor lf = disc.forward(fakes[size_t(b)].to_tensor(cfg.scalar()));
      Tensor dl = gan::d_loss(lr, lf);
      loss = loss.defined() ? add(loss, dl) : dl;
    }
    loss = mul_scalar(loss, 1.0 / double(cfg.batch_size));
    if (cfg.r1_gamma > 0 && step % cfg.r1_every == 0) {
      Tensor real = reals[0]->to_tensor(cfg.scalar());
      Tensor pen = gan::r1_fd_surrogate(disc, real, rng, 1e-3);
      loss = add(loss, mul_scalar(pen, 0.5 * cfg.r1_gamma));
    }
    double lv = loss.item();
    check_finite(lv, "discriminator loss");
    acc_d += lv;
    ++n_d;
    backward(loss);
    if (!cfg.freeze_d) opt_d.step(d_params);
    d_params.zero_grads();
  }

  void g_step(int64_t step, bool stage2) {
    int B = cfg.batch_size;
    bool use_gan = cfg.gan_weight > 0;
    bool use_sds = stage2 && !cfg.no_dsds && !cfg.clip_style_loss && cfg.lambda_sds > 0;
    bool use_clip = stage2 && cfg.clip_style_loss && cfg.lambda_sds > 0;
    int phases = (use_gan ? B : 0) + ((use_sds || use_clip) ? B : 0);
    if (phases == 0) return;
    std::vector<GradSink> sinks(size_t(phases));
    std::vector<double> lvals(size_t(phases), 0.0), rmss;
    rmss.assign(size_t(B), 0.0);
    int sds_offset = use_gan ? B : 0;

    parallel_for(phases, 1, [&](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        bool gan_phase = use_gan && i < B;
        int item = int(gan_phase ? i : i - sds_offset);
        if (gan_phase) {
          Rng rng = item_rng(0x6741ull, step, item);
          Tape tape;
          Tensor z = Tensor::randn({1, cfg.z_dim}, rng, cfg.scalar());
          std::string prompt = sample_training_prompt(rng);
          text::TokenSet tokens = text::encode_text(prompt, model.vocab);
          tri::CameraPose pose = data::sample_orbit_pose(rng, cfg.radius, cfg.fov,
                                                         cfg.train_render_res);
          uint64_t ray_seed = rng.next_u64();
          Tensor img = model.forward_image(z, tokens, pose, cfg.train_render_res, ray_seed, true);
          Tensor loss = mul_scalar(gan::g_loss(disc.forward(img)), cfg.gan_weight);
          lvals[size_t(i)] = loss.item();
          backward_into(loss, sinks[size_t(i)]);
        } else {
          Rng rng = item_rng(0x5d5dull, step, item);
          Tape tape;
          Tensor z = Tensor::randn({1, cfg.z_dim}, rng, cfg.scalar());
          std::string prompt = sample_training_prompt(rng);
          text::TokenSet tokens = text::encode_text(prompt, model.vocab);
          text::Attributes attrs = text::parse_attributes(prompt, model.vocab);
          tri::CameraPose pose =
              cfg.dsds_pose == "frontal"
                  ? data::frontal_pose(cfg.radius, cfg.fov, cfg.train_render_res)
                  : data::sample_orbit_pose(rng, cfg.radius, cfg.fov, cfg.train_render_res);
          uint64_t ray_seed = rng.next_u64();
          Tensor img = model.forward_image(z, tokens, pose, cfg.train_render_res, ray_seed, true);
          Tensor loss;
          if (use_clip) {
            loss = mul_scalar(metrics::clip_style_loss(img, tokens, *probe), cfg.lambda_sds);
          } else {
            Tensor latent = codec.encode(img);
            SdsSample s = sds_gradient(*teacher, sched, latent.to_vector(), &attrs, rng,
                                       cfg.cfg_g, rescale_mode_from_string(cfg.rescale_mode),
                                       sched.t_min(cfg.t_min_frac), sched.t_max(cfg.t_max_frac));
            rmss[size_t(item)] = s.rms_residual;
            Tensor g = Tensor::from_vector(latent.shape(), s.grad, latent.dtype());
            loss = mul_scalar(inner(latent, g), cfg.lambda_sds);
          }
          lvals[size_t(i)] = loss.item();
          backward_into(loss, sinks[size_t(i)]);
        }
      }
    });
    for (double lv : lvals) check_finite(lv, "generator loss");
    for (auto& sink : sinks) {
      for (auto& item : model.params.items) {
        auto it = sink.find(item.tensor.payload());
        if (it == sink.end()) continue;
        Payload* p = item.tensor.payload();
        if (!p->grad) {
          p->grad = std::make_unique<Storage>(p->value.dt);
          p->grad->resize(p->value.size(), 0.0);
        }
        for (size_t j = 0; j < it->second.size(); ++j)
          p->grad->set(j, p->grad->get(j) + it->second.get(j));
      }
    }
    if (use_gan)
      for (int i = 0; i < B; ++i) {
        acc_g += lvals[size_t(i)];
        ++n_g;
      }
    if (use_sds)
      for (int i = 0; i < B; ++i) {
        acc_sds += rmss[size_t(i)];
        ++n_sds;
      }
    ++accum_count;
    if (accum_count >= cfg.grad_accum) {
      if (!cfg.freeze_g) opt_g.step(model.params, 1.0 / double(B * accum_count));
      model.params.zero_grads();
      accum_count = 0;
    }
  }

  void snapshot(int64_t step) {
    metrics::GenerateFn gen = model.generate_fn(cfg.train_render_res);
    tri::CameraPose front = data::frontal_pose(cfg.radius, cfg.fov, cfg.train_render_res);
    double div = 0;
    for (const auto& p : probe_prompts)
      div += metrics::diversity_score(gen, p, cfg.diversity_samples, front, *probe, 1000);
    div /= double(std::max<size_t>(1, probe_prompts.size()));

    double cov = 0;
    if (!probe_prompts.empty()) {
      std::vector<Vec> samples;
      for (int i = 0; i < cfg.diversity_samples; ++i)
        samples.push_back(image_to_vec(gen(probe_prompts[0], 1000 + uint64_t(i), front)));
      cov = metrics::mode_coverage(samples, ana_teacher->components_of(probe_attrs[0]));
    }
    double msc = probe_prompts.empty()
                     ? 0.0
                     : metrics::msc_score(gen, probe_prompts[0], 42,
                                          metrics::eval_views(cfg.radius, cfg.fov,
                                                              cfg.train_render_res),
                                          *probe);
    nlohmann::json j;
    j["step"] = step;
    j["d_loss"] = n_d ? acc_d / double(n_d) : 0.0;
    j["g_loss"] = n_g ? acc_g / double(n_g) : 0.0;
    j["sds_rms"] = n_sds ? acc_sds / double(n_sds) : 0.0;
    j["diversity"] = div;
    j["coverage"] = cov;
    j["msc"] = msc;
    metrics_out << j.dump() << "\n";
    metrics_out.flush();
    acc_d = acc_g = acc_sds = 0;
    n_d = n_g = n_sds = 0;
  }

  TrainOutputs run() {
    namespace fs = std::filesystem;
    setup();
    int64_t total = cfg.stage1_steps + cfg.stage2_steps;
    for (int64_t step = 0; step < total; ++step) {
      if (step % cfg.snapshot_every == 0) snapshot(step);
      bool stage2 = step >= cfg.stage1_steps;
      if (step == cfg.stage1_steps) teacher_calls_after_stage1 = teacher->call_count();
      if (cfg.gan_weight > 0) d_step(step);
      g_step(step, stage2);
    }
    if (cfg.stage2_steps == 0) teacher_calls_after_stage1 = teacher->call_count();
    snapshot(total);
    TrainOutputs out;
    out.steps = total;
    out.teacher_calls_stage1 = teacher_calls_after_stage1;
    Checkpoint ck = model.to_checkpoint(uint64_t(total));
    ck.add_store(d_params);
    out.checkpoint_path = (fs::path(out_dir) / "checkpoint.tpd").string();
    out.metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
    checkpoint_save(ck, out.checkpoint_path);
    return out;
  }
};

}  // namespace

TrainOutputs two_stage_train(Model& model, const std::string& out_dir) {
  TrainerImpl impl(model, out_dir);
  return impl.run();
}

}  // namespace tpd::harness
