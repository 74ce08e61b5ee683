#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace tpd::text {

using ad::Tensor;

constexpr int kNumSlots = 5;
extern const char* const kSlotNames[kNumSlots];  // hair, age, gender, eyewear, expression

// Closed attribute vocabulary standing in for a text encoder: every word gets
// a fixed unit-norm embedding derived from (embed_seed, word); words outside
// the vocabulary share one "unknown" embedding.
struct Vocabulary {
  uint64_t embed_seed = 1234;
  int text_dim = 32;
  int max_words = 12;
  std::array<std::vector<std::string>, kNumSlots> slots;

  static Vocabulary builtin();
  static Vocabulary load_json(const std::string& path);
  static Vocabulary load_json_text(const std::string& json_text);
  void save_json(const std::string& path) const;
  std::string to_json_text() const;
  void finalize();  // builds embeddings + the fixed eot aggregator

  bool is_known(const std::string& word) const;
  const std::vector<double>& embedding(const std::string& word) const;
  const std::vector<double>& unknown_embedding() const { return unknown_; }
  // slot/value lookup; returns false if the word is not an attribute value
  bool slot_value(const std::string& word, int& slot, int& value) const;
  int num_values(int slot) const { return int(slots[size_t(slot)].size()); }
  int64_t num_combos() const;
  const std::string& value_word(int slot, int value) const;

  // fixed 2-layer aggregator applied to the mean word embedding
  std::vector<double> eot_of_words(const std::vector<std::vector<double>>& words) const;

 private:
  bool finalized_ = false;
  std::vector<std::pair<std::string, std::vector<double>>> embeds_;  // sorted by word
  std::vector<double> unknown_;
  std::vector<double> eot_w1_, eot_b1_, eot_w2_, eot_b2_;
};

// One value index per slot; -1 marks an unspecified slot (partial prompts).
struct Attributes {
  std::array<int, kNumSlots> v{-1, -1, -1, -1, -1};
  bool complete() const;
  bool specified(int slot) const { return v[size_t(slot)] >= 0; }
  std::string key(const Vocabulary& vocab) const;  // canonical condition key
  bool operator==(const Attributes& o) const { return v == o.v; }
  bool matches(const Attributes& partial) const;  // this (full) consistent with partial
};

struct TokenSet {
  std::vector<double> eot;
  std::vector<std::vector<double>> words;
  std::string prompt_text;
};

// Deterministic toy encoder: whitespace-normalized lowercase tokens (commas
// and periods stripped), truncated at max_words; eot = aggregator(mean of
// word embeddings). Throws on an empty prompt.
TokenSet encode_text(const std::string& prompt, const Vocabulary& vocab);

Attributes parse_attributes(const std::string& prompt, const Vocabulary& vocab);
std::string canonical_caption(const Attributes& a, const Vocabulary& vocab);
std::vector<std::string> caption_paraphrases(const Attributes& a, const Vocabulary& vocab);

Attributes sample_attributes(const Vocabulary& vocab, Rng& rng);
// Grammatical template with one uniform value per slot; reproducible per seed.
std::string sample_prompt(const Vocabulary& vocab, Rng& rng);

Tensor tokens_tensor(const TokenSet& t, ad::Scalar dt);   // (Nw, D), constant
Tensor eot_tensor(const TokenSet& t, ad::Scalar dt);      // (1, D), constant

// Semantics mapping network M: two layers on t_EOT, two on w, one linear
// fusion layer on their concatenation.
struct SemanticsMapper {
  Tensor et_w1, et_b1, et_w2, et_b2;
  Tensor st_w1, st_b1, st_w2, st_b2;
  Tensor fuse_w, fuse_b;
  int text_dim = 0, w_dim = 0;

  static SemanticsMapper init(int text_dim, int w_dim, Rng& rng, ad::Scalar dt);
  // w: (1, w_dim), eot: (1, text_dim); use_text=false zeroes the text branch
  // input (the "local only" ablation) without touching w.
  Tensor map(const Tensor& w, const Tensor& eot, bool use_text) const;
};

}  // namespace tpd::text
