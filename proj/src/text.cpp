#include "text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace tpd::text {

using namespace tpd::ad;

const char* const kSlotNames[kNumSlots] = {"hair", "age", "gender", "eyewear", "expression"};

namespace {

std::vector<double> seeded_unit_vec(uint64_t seed, int dim) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(dim));
  double norm2 = 0;
  for (auto& x : v) {
    x = rng.gaussian();
    norm2 += x * x;
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  return v;
}

std::vector<std::string> tokenize(const std::string& prompt) {
  std::string clean;
  clean.reserve(prompt.size());
  for (char c : prompt) {
    if (c == ',' || c == '.' || c == ';') {
      clean.push_back(' ');
    } else {
      clean.push_back(char(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  std::istringstream is(clean);
  std::vector<std::string> words;
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

}  // namespace

Vocabulary Vocabulary::builtin() {
  Vocabulary v;
  v.slots[0] = {"red", "yellow", "green", "cyan", "blue", "purple"};
  v.slots[1] = {"young", "middle-aged", "old"};
  v.slots[2] = {"woman", "man"};
  v.slots[3] = {"bare", "glasses"};
  v.slots[4] = {"neutral", "smiling"};
  v.finalize();
  return v;
}

Vocabulary Vocabulary::load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open vocabulary file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return load_json_text(os.str());
}

Vocabulary Vocabulary::load_json_text(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const std::exception& e) {
    throw ConfigError("vocabulary json parse error: " + std::string(e.what()));
  }
  Vocabulary v;
  if (j.contains("embed_seed")) v.embed_seed = j["embed_seed"].get<uint64_t>();
  if (j.contains("text_dim")) v.text_dim = j["text_dim"].get<int>();
  if (j.contains("max_words")) v.max_words = j["max_words"].get<int>();
  if (!j.contains("slots")) throw ConfigError("vocabulary json: missing 'slots'");
  for (int s = 0; s < kNumSlots; ++s) {
    const char* name = kSlotNames[s];
    if (!j["slots"].contains(name))
      throw ConfigError(std::string("vocabulary json: missing slot '") + name + "'");
    v.slots[size_t(s)] = j["slots"][name].get<std::vector<std::string>>();
    if (v.slots[size_t(s)].empty())
      throw ConfigError(std::string("vocabulary json: slot '") + name + "' is empty");
  }
  v.finalize();
  return v;
}

std::string Vocabulary::to_json_text() const {
  nlohmann::json j;
  j["embed_seed"] = embed_seed;
  j["text_dim"] = text_dim;
  j["max_words"] = max_words;
  for (int s = 0; s < kNumSlots; ++s) j["slots"][kSlotNames[s]] = slots[size_t(s)];
  return j.dump(2) + "\n";
}

void Vocabulary::save_json(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write vocabulary file: " + path);
  f << to_json_text();
}

void Vocabulary::finalize() {
  if (text_dim < 4) throw ConfigError("vocabulary: text_dim too small");
  embeds_.clear();
  std::vector<std::string> all;
  for (auto& s : slots)
    for (auto& w : s) all.push_back(w);
  std::sort(all.begin(), all.end());
  for (size_t i = 1; i < all.size(); ++i)
    if (all[i] == all[i - 1]) throw ConfigError("vocabulary: duplicate word '" + all[i] + "'");
  for (auto& w : all)
    embeds_.emplace_back(w, seeded_unit_vec(hash64(embed_seed, hash_str(w)), text_dim));
  unknown_ = seeded_unit_vec(hash64(embed_seed, 0x756e6b6e6f776eull), text_dim);
  // fixed aggregator weights
  Rng rng(hash64(embed_seed, 0xe07e07ull));
  double s = 1.0 / std::sqrt(double(text_dim));
  auto fill = [&](std::vector<double>& v, size_t n, double scale) {
    v.resize(n);
    for (auto& x : v) x = rng.gaussian() * scale;
  };
  fill(eot_w1_, size_t(text_dim) * size_t(text_dim), s);
  fill(eot_b1_, size_t(text_dim), 0.1);
  fill(eot_w2_, size_t(text_dim) * size_t(text_dim), s);
  fill(eot_b2_, size_t(text_dim), 0.1);
  finalized_ = true;
}

bool Vocabulary::is_known(const std::string& word) const {
  auto it = std::lower_bound(embeds_.begin(), embeds_.end(), word,
                             [](const auto& a, const std::string& b) { return a.first < b; });
  return it != embeds_.end() && it->first == word;
}

const std::vector<double>& Vocabulary::embedding(const std::string& word) const {
  auto it = std::lower_bound(embeds_.begin(), embeds_.end(), word,
                             [](const auto& a, const std::string& b) { return a.first < b; });
  if (it != embeds_.end() && it->first == word) return it->second;
  return unknown_;
}

bool Vocabulary::slot_value(const std::string& word, int& slot, int& value) const {
  for (int s = 0; s < kNumSlots; ++s) {
    const auto& vals = slots[size_t(s)];
    for (size_t i = 0; i < vals.size(); ++i)
      if (vals[i] == word) {
        slot = s;
        value = int(i);
        return true;
      }
  }
  return false;
}

int64_t Vocabulary::num_combos() const {
  int64_t n = 1;
  for (auto& s : slots) n *= int64_t(s.size());
  return n;
}

const std::string& Vocabulary::value_word(int slot, int value) const {
  return slots[size_t(slot)].at(size_t(value));
}

std::vector<double> Vocabulary::eot_of_words(
    const std::vector<std::vector<double>>& words) const {
  if (!finalized_) throw ContractError("vocabulary not finalized");
  std::vector<double> mean(size_t(text_dim), 0.0);
  for (const auto& w : words)
    for (int i = 0; i < text_dim; ++i) mean[size_t(i)] += w[size_t(i)];
  for (auto& x : mean) x /= double(std::max<size_t>(1, words.size()));
  std::vector<double> h(static_cast<size_t>(text_dim)), out(static_cast<size_t>(text_dim));
  for (int i = 0; i < text_dim; ++i) {
    double acc = eot_b1_[size_t(i)];
    for (int j = 0; j < text_dim; ++j) acc += eot_w1_[size_t(i * text_dim + j)] * mean[size_t(j)];
    h[size_t(i)] = acc > 0 ? acc : 0.2 * acc;
  }
  for (int i = 0; i < text_dim; ++i) {
    double acc = eot_b2_[size_t(i)];
    for (int j = 0; j < text_dim; ++j) acc += eot_w2_[size_t(i * text_dim + j)] * h[size_t(j)];
    out[size_t(i)] = acc;
  }
  return out;
}

bool Attributes::complete() const {
  for (int s = 0; s < kNumSlots; ++s)
    if (v[size_t(s)] < 0) return false;
  return true;
}

std::string Attributes::key(const Vocabulary& vocab) const {
  std::string k;
  for (int s = 0; s < kNumSlots; ++s) {
    if (s) k += "|";
    k += v[size_t(s)] >= 0 ? vocab.value_word(s, v[size_t(s)]) : std::string("*");
  }
  return k;
}

bool Attributes::matches(const Attributes& partial) const {
  for (int s = 0; s < kNumSlots; ++s)
    if (partial.v[size_t(s)] >= 0 && partial.v[size_t(s)] != v[size_t(s)]) return false;
  return true;
}

TokenSet encode_text(const std::string& prompt, const Vocabulary& vocab) {
  std::vector<std::string> words = tokenize(prompt);
  if (words.empty()) throw ContractError("encode_text: empty prompt");
  if (int(words.size()) > vocab.max_words) words.resize(size_t(vocab.max_words));
  TokenSet t;
  t.prompt_text = prompt;
  for (auto& w : words) t.words.push_back(vocab.embedding(w));
  t.eot = vocab.eot_of_words(t.words);
  return t;
}

Attributes parse_attributes(const std::string& prompt, const Vocabulary& vocab) {
  Attributes a;
  for (auto& w : tokenize(prompt)) {
    int s, val;
    if (vocab.slot_value(w, s, val)) a.v[size_t(s)] = val;
  }
  return a;
}

namespace {

// Three caption templates over the five slots. Each slot value word appears
// exactly once so captions parse back to their attributes.
std::string fill_template(int which, const Attributes& a, const Vocabulary& vocab) {
  auto word = [&](int slot) { return vocab.value_word(slot, a.v[size_t(slot)]); };
  auto maybe = [&](int slot, const std::string& prefix, const std::string& suffix) {
    return a.specified(slot) ? prefix + word(slot) + suffix : std::string();
  };
  std::string s;
  switch (which) {
    case 0:
      s = "a" + maybe(1, " ", "") + maybe(2, " ", "");
      if (!a.specified(1) && !a.specified(2)) s += " portrait";
      s += maybe(0, " with ", " hair") + maybe(3, ", ", "") + maybe(4, ", ", " look");
      break;
    case 1:
      s = maybe(4, "", " ") + maybe(1, "", " ") +
          (a.specified(2) ? word(2) : std::string("portrait"));
      s += maybe(0, ", ", " hair") + maybe(3, " and ", "");
      break;
    default:
      s = "portrait of a" + maybe(1, " ", "") + maybe(2, " ", "");
      s += maybe(0, ", ", " hair") + maybe(3, ", ", "") + maybe(4, ", ", "");
      break;
  }
  return s;
}

}  // namespace

std::string canonical_caption(const Attributes& a, const Vocabulary& vocab) {
  return fill_template(0, a, vocab);
}

std::vector<std::string> caption_paraphrases(const Attributes& a, const Vocabulary& vocab) {
  return {fill_template(0, a, vocab), fill_template(1, a, vocab), fill_template(2, a, vocab)};
}

Attributes sample_attributes(const Vocabulary& vocab, Rng& rng) {
  Attributes a;
  for (int s = 0; s < kNumSlots; ++s)
    a.v[size_t(s)] = int(rng.uniform_int(0, vocab.num_values(s) - 1));
  return a;
}

std::string sample_prompt(const Vocabulary& vocab, Rng& rng) {
  return canonical_caption(sample_attributes(vocab, rng), vocab);
}

Tensor tokens_tensor(const TokenSet& t, ad::Scalar dt) {
  int64_t n = int64_t(t.words.size());
  int64_t d = int64_t(t.words.empty() ? t.eot.size() : t.words[0].size());
  std::vector<double> flat;
  flat.reserve(size_t(n * d));
  for (const auto& w : t.words) flat.insert(flat.end(), w.begin(), w.end());
  return Tensor::from_vector({n, d}, flat, dt);
}

Tensor eot_tensor(const TokenSet& t, ad::Scalar dt) {
  return Tensor::from_vector({1, int64_t(t.eot.size())}, t.eot, dt);
}

SemanticsMapper SemanticsMapper::init(int text_dim, int w_dim, Rng& rng, ad::Scalar dt) {
  SemanticsMapper m;
  m.text_dim = text_dim;
  m.w_dim = w_dim;
  auto lin = [&](int in, int out) {
    return mul_scalar(Tensor::randn({in, out}, rng, dt), 1.0 / std::sqrt(double(in))).detach();
  };
  m.et_w1 = lin(text_dim, w_dim);
  m.et_b1 = Tensor::zeros({1, w_dim}, dt);
  m.et_w2 = lin(w_dim, w_dim);
  m.et_b2 = Tensor::zeros({1, w_dim}, dt);
  m.st_w1 = lin(w_dim, w_dim);
  m.st_b1 = Tensor::zeros({1, w_dim}, dt);
  m.st_w2 = lin(w_dim, w_dim);
  m.st_b2 = Tensor::zeros({1, w_dim}, dt);
  m.fuse_w = lin(2 * w_dim, w_dim);
  m.fuse_b = Tensor::zeros({1, w_dim}, dt);
  return m;
}

Tensor SemanticsMapper::map(const Tensor& w, const Tensor& eot, bool use_text) const {
  Tensor e = use_text ? eot : Tensor::zeros(eot.shape(), eot.dtype());
  Tensor he = lrelu(add(matmul(e, et_w1), et_b1), 0.2);
  he = lrelu(add(matmul(he, et_w2), et_b2), 0.2);
  Tensor hw = lrelu(add(matmul(w, st_w1), st_b1), 0.2);
  hw = lrelu(add(matmul(hw, st_w2), st_b2), 0.2);
  Tensor cat = concat({hw, he}, 1);
  return add(matmul(cat, fuse_w), fuse_b);
}

}  // namespace tpd::text
