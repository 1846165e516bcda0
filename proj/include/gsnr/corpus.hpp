#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsnr/error.hpp"
#include "gsnr/io.hpp"
#include "gsnr/rng.hpp"

namespace gsnr {

// ============================================================================
// Domain types
// ============================================================================

/// One instruction-response pair. Ids are 0-based and assigned in file order.
struct Example {
  std::int64_t id = 0;
  std::string instruction;
  std::string input;  // optional; empty means absent
  std::string response;
  std::optional<bool> noise_label;  // synthetic corpora only
};

/// Token ids for prompt + response + end token, with a {0,1} mask selecting
/// the positions the loss is computed over.
struct TokenizedExample {
  std::int64_t id = 0;
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> loss_mask;  // same length as token_ids

  std::int64_t masked_in_count() const {
    std::int64_t n = 0;
    for (auto m : loss_mask) n += m;
    return n;
  }
};

/// Byte-level tokenizer: 256 byte values plus begin/end/pad specials.
/// No trained vocabulary, so every text is covered and encode/decode is
/// an exact identity.
class ByteTokenizer {
 public:
  static constexpr std::int32_t kBegin = 256;
  static constexpr std::int32_t kEnd = 257;
  static constexpr std::int32_t kPad = 258;

  std::int32_t vocab_size() const { return 259; }

  std::vector<std::int32_t> encode(std::string_view text) const {
    std::vector<std::int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
    return ids;
  }

  std::string decode(const std::vector<std::int32_t>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (std::int32_t id : ids) {
      if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
  }
};

/// Prompt layout with {instruction} / {input} placeholders. `with_input`
/// is used when the example carries a non-empty input field.
struct PromptTemplate {
  std::string without_input;
  std::string with_input;

  /// Default mirrors the Alpaca layout.
  static PromptTemplate alpaca() {
    PromptTemplate t;
    t.without_input =
        "Below is an instruction that describes a task. "
        "Write a response that appropriately completes the request.\n\n"
        "### Instruction:\n{instruction}\n\n### Response:\n";
    t.with_input =
        "Below is an instruction that describes a task, paired with an input "
        "that provides further context. "
        "Write a response that appropriately completes the request.\n\n"
        "### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n"
        "### Response:\n";
    return t;
  }

  /// Short layout used by the desk-scale experiments; keeps sequences small.
  static PromptTemplate compact() {
    PromptTemplate t;
    t.without_input = "I:{instruction}\nR:";
    t.with_input = "I:{instruction}\nX:{input}\nR:";
    return t;
  }
};

// ============================================================================
// Loading and prompt construction
// ============================================================================

namespace detail {

inline std::string trim_copy(std::string_view s) {
  const auto* ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

inline bool is_blank(std::string_view s) {
  return trim_copy(s).empty();
}

}  // namespace detail

enum class CorpusSchema { alpaca_jsonl };

/// Load a JSONL corpus: one object per line with keys `instruction`,
/// optional `input`, and `output`. Ids are assigned 0..N-1 in file order.
inline std::vector<Example> load_corpus(const std::filesystem::path& path,
                                        CorpusSchema schema = CorpusSchema::alpaca_jsonl) {
  (void)schema;  // single schema today
  const std::string text = read_text_file(path);
  const auto lines = split_lines(text);
  std::vector<Example> out;
  for (std::size_t li = 0; li < lines.size(); ++li) {
    const std::string_view line = lines[li];
    if (detail::is_blank(line)) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw ParseError("line " + std::to_string(li + 1) + ": not a valid JSON object");

    const auto line_tag = "line " + std::to_string(li + 1);
    if (!j.contains("instruction") || !j["instruction"].is_string())
      throw SchemaError(line_tag + ": missing string field 'instruction'");
    if (!j.contains("output") || !j["output"].is_string())
      throw SchemaError(line_tag + ": missing string field 'output'");

    Example ex;
    ex.id = static_cast<std::int64_t>(out.size());
    ex.instruction = j["instruction"].get<std::string>();
    ex.response = j["output"].get<std::string>();
    if (j.contains("input") && j["input"].is_string())
      ex.input = j["input"].get<std::string>();
    if (j.contains("noise_label") && j["noise_label"].is_boolean())
      ex.noise_label = j["noise_label"].get<bool>();

    if (detail::trim_copy(ex.instruction).empty())
      throw SchemaError(line_tag + ": 'instruction' is empty");
    if (detail::trim_copy(ex.response).empty())
      throw SchemaError(line_tag + ": 'output' is empty");
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw SchemaError("empty corpus: no valid records in " + path.string());
  return out;
}

/// Serialize examples in the same JSONL schema load_corpus reads.
inline std::string corpus_to_jsonl(const std::vector<Example>& examples) {
  std::string out;
  for (const Example& ex : examples) {
    nlohmann::json j;
    j["instruction"] = ex.instruction;
    j["input"] = ex.input;
    j["output"] = ex.response;
    if (ex.noise_label.has_value()) j["noise_label"] = *ex.noise_label;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void write_corpus_jsonl(const std::filesystem::path& path,
                               const std::vector<Example>& examples) {
  atomic_write_file(path, corpus_to_jsonl(examples));
}

namespace detail {

inline std::string substitute_placeholder(std::string text, std::string_view key,
                                          std::string_view value) {
  const std::string pat = "{" + std::string(key) + "}";
  std::size_t pos = 0;
  while ((pos = text.find(pat, pos)) != std::string::npos) {
    text.replace(pos, pat.size(), value);
    pos += value.size();
  }
  return text;
}

}  // namespace detail

/// Deterministic prompt text for an example under a template.
inline std::string build_prompt(const Example& ex, const PromptTemplate& tmpl) {
  const bool has_input = !ex.input.empty();
  const std::string& layout = has_input ? tmpl.with_input : tmpl.without_input;
  if (layout.find("{instruction}") == std::string::npos)
    throw ContractError("prompt template missing {instruction} placeholder");
  if (has_input && layout.find("{input}") == std::string::npos)
    throw ContractError("prompt template missing {input} placeholder");
  std::string text = detail::substitute_placeholder(layout, "instruction", ex.instruction);
  if (has_input) text = detail::substitute_placeholder(text, "input", ex.input);
  return text;
}

// ============================================================================
// Tokenization
// ============================================================================

struct TokenizeOptions {
  std::int64_t max_seq_len = 128;
  /// When true the prompt positions (except position 0, which is never a
  /// next-token target) are included in the loss.
  bool loss_on_prompt = false;
};

/// Layout: [prompt tokens..., response tokens..., end token]. The mask is 0
/// over prompt positions and 1 over response positions and the end token.
/// Sequences over max_seq_len lose response tokens from the right (the end
/// token is always kept); if no response token would survive, the example
/// is rejected.
inline TokenizedExample tokenize(const Example& ex, const ByteTokenizer& tok,
                                 const PromptTemplate& tmpl,
                                 const TokenizeOptions& opts = {}) {
  const std::string prompt = build_prompt(ex, tmpl);
  std::vector<std::int32_t> prompt_ids = tok.encode(prompt);
  std::vector<std::int32_t> response_ids = tok.encode(ex.response);

  const auto p = static_cast<std::int64_t>(prompt_ids.size());
  auto r = static_cast<std::int64_t>(response_ids.size());
  // room for at least one response token plus the end token
  if (p + 2 > opts.max_seq_len)
    throw ExampleTooLongError("example " + std::to_string(ex.id) +
                              " too long: prompt occupies " + std::to_string(p) +
                              " of " + std::to_string(opts.max_seq_len) + " positions");
  r = std::min(r, opts.max_seq_len - 1 - p);

  TokenizedExample out;
  out.id = ex.id;
  out.token_ids = std::move(prompt_ids);
  out.token_ids.insert(out.token_ids.end(), response_ids.begin(), response_ids.begin() + r);
  out.token_ids.push_back(ByteTokenizer::kEnd);
  out.loss_mask.assign(out.token_ids.size(), 0);
  for (std::int64_t i = p; i < static_cast<std::int64_t>(out.token_ids.size()); ++i)
    out.loss_mask[static_cast<std::size_t>(i)] = 1;
  if (opts.loss_on_prompt) {
    for (std::int64_t i = 1; i < p; ++i) out.loss_mask[static_cast<std::size_t>(i)] = 1;
  }
  return out;
}

/// Tokenize a whole corpus; examples that cannot fit a single response token
/// are skipped and reported through on_skip (warn-and-continue).
inline std::vector<TokenizedExample> tokenize_corpus(
    const std::vector<Example>& corpus, const ByteTokenizer& tok,
    const PromptTemplate& tmpl, const TokenizeOptions& opts = {},
    const std::function<void(const Example&, const std::string&)>& on_skip = nullptr) {
  std::vector<TokenizedExample> out;
  out.reserve(corpus.size());
  for (const Example& ex : corpus) {
    try {
      out.push_back(tokenize(ex, tok, tmpl, opts));
    } catch (const ExampleTooLongError& e) {
      if (on_skip) on_skip(ex, e.what());
    }
  }
  return out;
}

// ============================================================================
// Synthetic corpora
// ============================================================================

// Clean examples follow one of three length-preserving character rules
// (copy, reverse, shift-by-one over a small alphabet); noisy examples keep
// the same instruction format but pair it with uniform-random characters of
// the same length, so response length carries no label signal.

namespace detail {

inline constexpr std::string_view kSynthAlphabet = "abcdefgh";

inline std::string synth_argument(Rng& rng) {
  const std::size_t len = 3 + static_cast<std::size_t>(rng.uniform_below(6));  // 3..8
  std::string s;
  for (std::size_t i = 0; i < len; ++i)
    s.push_back(kSynthAlphabet[rng.uniform_below(kSynthAlphabet.size())]);
  return s;
}

inline std::string synth_rule_apply(int family, const std::string& arg) {
  switch (family) {
    case 0:
      return arg;  // copy
    case 1: {
      std::string r(arg.rbegin(), arg.rend());  // reverse
      return r;
    }
    default: {
      std::string r = arg;  // shift each char forward, wrapping
      for (char& c : r) c = static_cast<char>(c == 'h' ? 'a' : c + 1);
      return r;
    }
  }
}

inline std::string synth_instruction(int family, const std::string& arg) {
  static const char* kVerbs[3] = {"copy", "reverse", "shift"};
  return std::string(kVerbs[family]) + " " + arg;
}

}  // namespace detail

/// Labeled corpus generator for the noise-detection experiments. Clean
/// examples are learnable; noisy ones pair the instruction with random
/// characters. Deterministic in the seed.
inline std::vector<Example> generate_synthetic_corpus(std::int64_t n_clean,
                                                      std::int64_t n_noisy,
                                                      std::uint64_t seed) {
  if (n_clean + n_noisy < 1)
    throw ContractError("synthetic corpus needs at least one example");
  Rng rng(derive_seed(seed, "synth_corpus"));
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(n_clean + n_noisy));
  for (std::int64_t i = 0; i < n_clean + n_noisy; ++i) {
    const int family = static_cast<int>(rng.uniform_below(3));
    const std::string arg = detail::synth_argument(rng);
    Example ex;
    ex.id = i;
    ex.instruction = detail::synth_instruction(family, arg);
    const bool noisy = i >= n_clean;
    if (noisy) {
      std::string junk;
      for (std::size_t k = 0; k < arg.size(); ++k)
        junk.push_back(detail::kSynthAlphabet[rng.uniform_below(detail::kSynthAlphabet.size())]);
      ex.response = junk;
    } else {
      ex.response = detail::synth_rule_apply(family, arg);
    }
    ex.noise_label = noisy;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace gsnr
