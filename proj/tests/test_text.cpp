#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <set>

#include "text.hpp"

using namespace tpd;
using namespace tpd::text;
using namespace tpd::ad;

TEST_CASE("encode_text: deterministic, bitwise") {
  Vocabulary v = Vocabulary::builtin();
  auto a = encode_text("a young woman with red hair, glasses, smiling look", v);
  auto b = encode_text("a young woman with red hair, glasses, smiling look", v);
  CHECK(a.eot == b.eot);
  CHECK(a.words == b.words);
}

TEST_CASE("encode_text: empty prompt errors") {
  Vocabulary v = Vocabulary::builtin();
  CHECK_THROWS_AS(encode_text("   ", v), ContractError);
}

TEST_CASE("encode_text: one changed known word moves the eot") {
  Vocabulary v = Vocabulary::builtin();
  auto a = encode_text("a young woman with red hair", v);
  auto b = encode_text("a young woman with blue hair", v);
  double d2 = 0;
  for (size_t i = 0; i < a.eot.size(); ++i) d2 += sqr(a.eot[i] - b.eot[i]);
  CHECK(d2 > 1e-8);
}

TEST_CASE("encode_text: unknown words share the unknown embedding") {
  Vocabulary v = Vocabulary::builtin();
  auto t = encode_text("flying purple4 zork quux", v);
  for (const auto& w : t.words) CHECK(w == v.unknown_embedding());
}

TEST_CASE("encode_text: truncation at max_words") {
  Vocabulary v = Vocabulary::builtin();
  std::string prompt;
  for (int i = 0; i < 40; ++i) prompt += "word ";
  auto t = encode_text(prompt, v);
  CHECK(int(t.words.size()) == v.max_words);
}

TEST_CASE("eot is injective over all slot-value combinations (exhaustive)") {
  Vocabulary v = Vocabulary::builtin();
  std::vector<std::vector<double>> eots;
  Attributes a;
  for (int h = 0; h < v.num_values(0); ++h)
    for (int g = 0; g < v.num_values(1); ++g)
      for (int s = 0; s < v.num_values(2); ++s)
        for (int e = 0; e < v.num_values(3); ++e)
          for (int x = 0; x < v.num_values(4); ++x) {
            a.v = {h, g, s, e, x};
            eots.push_back(encode_text(canonical_caption(a, v), v).eot);
          }
  CHECK(int64_t(eots.size()) == v.num_combos());
  for (size_t i = 0; i < eots.size(); ++i)
    for (size_t j = i + 1; j < eots.size(); ++j) {
      double d2 = 0;
      for (size_t k = 0; k < eots[i].size(); ++k) d2 += sqr(eots[i][k] - eots[j][k]);
      CHECK(d2 > 1e-12);
    }
}

TEST_CASE("captions parse back to their attributes, all templates") {
  Vocabulary v = Vocabulary::builtin();
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Attributes a = sample_attributes(v, rng);
    for (const auto& cap : caption_paraphrases(a, v)) {
      Attributes p = parse_attributes(cap, v);
      CHECK(p == a);
    }
  }
}

TEST_CASE("sample_prompt: reproducible and uniform over slot values") {
  Vocabulary v = Vocabulary::builtin();
  {
    Rng r1(9), r2(9);
    CHECK(sample_prompt(v, r1) == sample_prompt(v, r2));
  }
  Rng rng(11);
  int n = 10000;
  std::vector<int> hair_counts(size_t(v.num_values(0)), 0);
  for (int i = 0; i < n; ++i) {
    Attributes a = parse_attributes(sample_prompt(v, rng), v);
    CHECK(a.complete());
    ++hair_counts[size_t(a.v[0])];
  }
  double expect = double(n) / v.num_values(0);
  double sigma = std::sqrt(expect * (1.0 - 1.0 / v.num_values(0)));
  for (int c : hair_counts) CHECK(std::fabs(c - expect) < 3.0 * sigma);
}

TEST_CASE("vocabulary json round-trip") {
  Vocabulary v = Vocabulary::builtin();
  std::string path = "/tmp/tpd_vocab_test.json";
  v.save_json(path);
  Vocabulary w = Vocabulary::load_json(path);
  CHECK(w.embed_seed == v.embed_seed);
  for (int s = 0; s < kNumSlots; ++s) CHECK(w.slots[size_t(s)] == v.slots[size_t(s)]);
  CHECK(w.embedding("red") == v.embedding("red"));
  std::remove(path.c_str());
}

TEST_CASE("embeddings: unit norm and pairwise distinct") {
  Vocabulary v = Vocabulary::builtin();
  std::vector<std::string> words;
  for (int s = 0; s < kNumSlots; ++s)
    for (const auto& w : v.slots[size_t(s)]) words.push_back(w);
  for (const auto& w : words) {
    double n2 = 0;
    for (double x : v.embedding(w)) n2 += x * x;
    CHECK(n2 == doctest::Approx(1.0).epsilon(1e-9));
  }
  for (size_t i = 0; i < words.size(); ++i)
    for (size_t j = i + 1; j < words.size(); ++j) CHECK(v.embedding(words[i]) != v.embedding(words[j]));
}

TEST_CASE("map_semantics: deterministic; zero fusion head gives zero w_t; text sensitivity") {
  Vocabulary v = Vocabulary::builtin();
  Rng rng(21);
  SemanticsMapper m = SemanticsMapper::init(v.text_dim, 64, rng, Scalar::F32);
  Tensor w = Tensor::randn({1, 64}, rng);
  auto t1 = encode_text("a young woman with red hair", v);
  auto t2 = encode_text("an old man with blue hair", v);
  Tensor e1 = eot_tensor(t1, Scalar::F32), e2 = eot_tensor(t2, Scalar::F32);

  Tensor a = m.map(w, e1, true);
  Tensor b = m.map(w, e1, true);
  CHECK(a.to_vector() == b.to_vector());

  Tensor c = m.map(w, e2, true);
  double d2 = 0;
  for (int64_t i = 0; i < a.numel(); ++i) d2 += sqr(a.at(i) - c.at(i));
  CHECK(d2 > 1e-12);

  SemanticsMapper zm = m;
  zm.fuse_w = Tensor::zeros(m.fuse_w.shape());
  zm.fuse_b = Tensor::zeros(m.fuse_b.shape());
  Tensor z = zm.map(w, e1, true);
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == 0.0);
}

TEST_CASE("map_semantics gradients pass grad_check at 1e-3") {
  Vocabulary v = Vocabulary::builtin();
  Rng rng(31);
  SemanticsMapper m = SemanticsMapper::init(v.text_dim, 16, rng, Scalar::F32);
  auto f = [&](const std::vector<Tensor>& in) {
    SemanticsMapper mm = m;
    mm.fuse_w = in[2];
    return ad::sum_all(ad::square(mm.map(in[0], in[1], true)));
  };
  Rng prng(32);
  std::vector<Tensor> pts = {Tensor::randn({1, 16}, prng), Tensor::randn({1, 32}, prng),
                             m.fuse_w.clone()};
  // small step: keeps the central differences clear of lrelu kinks
  auto rep = grad_check(f, pts, 1e-5, 1e-3);
  CHECK_MESSAGE(rep.pass, rep.worst);
}

TEST_CASE("partial prompts parse with unspecified slots") {
  Vocabulary v = Vocabulary::builtin();
  Attributes a = parse_attributes("a woman with red hair", v);
  CHECK(a.v[0] == 0);
  CHECK(a.v[2] == 0);
  CHECK(a.v[1] == -1);
  CHECK(a.v[3] == -1);
  Attributes full;
  full.v = {0, 1, 0, 1, 1};
  CHECK(full.matches(a));
  full.v = {1, 1, 0, 1, 1};
  CHECK(!full.matches(a));
}
