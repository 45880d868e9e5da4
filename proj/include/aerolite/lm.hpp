#pragma once

#include <functional>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "aerolite/autograd.hpp"
#include "aerolite/tokenizer.hpp"

namespace aerolite::lm {

struct LmConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 128;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_len = 64;  // generated caption tokens
    bool tied = false;

    void validate() const;
};

struct LoraConfig {
    std::size_t rank = 8;
    double alpha = 16.0;
    std::set<std::string> targets = {"q", "v"};

    double scale() const { return alpha / static_cast<double>(rank); }
};

/// Low-rank update s * A (B h) of a linear map. A is d_out x r, B is r x d_in;
/// B starts at zero so a fresh adapter leaves the base map unchanged.
template <class T>
struct LoraAdapter {
    ag::Parameter<T> a;
    ag::Parameter<T> b;
    T scale = T(1);

    std::size_t rank() const { return static_cast<std::size_t>(b.value.rows()); }
};

/// Linear map y = W h (rows of h are positions) with an optional adapter.
/// A frozen base computes W h + s A (B h). With `fused` set the map is
/// applied as (W + s A B) h, which is how unfrozen layers run.
template <class T>
struct AdaptedLinear {
    ag::Parameter<T> weight;  // d_out x d_in
    std::optional<LoraAdapter<T>> lora;
    bool fused = false;

    std::size_t in_dim() const { return static_cast<std::size_t>(weight.value.cols()); }
    std::size_t out_dim() const { return static_cast<std::size_t>(weight.value.rows()); }

    /// Throws ValidationError when rank > min(d_in, d_out) or rank == 0.
    void attach_lora(std::size_t rank, double scale, std::mt19937_64& rng);
};

template <class T>
ag::Var<T> lora_forward(const ag::Var<T>& h, AdaptedLinear<T>& linear);

template <class T>
struct Block {
    AdaptedLinear<T> q, k, v, o;
    ag::Parameter<T> ff1_w, ff1_b, ff2_w, ff2_b;
    ag::Parameter<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

    AdaptedLinear<T>* projection(const std::string& name);
    /// Base weights only (adapters excluded).
    std::vector<ag::Parameter<T>*> base_parameters();
};

/// Pre-norm decoder-only transformer with sinusoidal positions.
template <class T>
class LanguageModel {
public:
    static LanguageModel init(const LmConfig& config, std::mt19937_64& rng);

    /// Logits (P + n) x V for the prefix rows (may be null) followed by the
    /// embeddings of `ids`.
    ag::Var<T> forward(const ag::Var<T>* prefix, const std::vector<int>& ids);

    /// Every tensor, adapters included, in a fixed order.
    std::vector<ag::Parameter<T>*> parameters();

    const LmConfig& config() const { return config_; }
    std::vector<Block<T>>& blocks() { return blocks_; }
    ag::Parameter<T>& token_embedding() { return tok_emb_; }
    ag::Parameter<T>* output_head() { return config_.tied ? nullptr : &head_; }

private:
    LmConfig config_;
    ag::Parameter<T> tok_emb_;
    std::vector<Block<T>> blocks_;
    ag::Parameter<T> lnf_gain_, lnf_bias_;
    ag::Parameter<T> head_;
};

// ---------------------------------------------------------------------------
// Tuning regimes

enum class Regime { visual_prefix, partial_unfreeze_lora };

std::string to_string(Regime regime);
Regime regime_from_string(const std::string& s);

struct TuningRegime {
    Regime kind = Regime::partial_unfreeze_lora;
    double top_fraction = 0.3;
    LoraConfig lora;
};

struct FreezePlan {
    Regime kind = Regime::visual_prefix;
    std::vector<std::size_t> unfrozen_layers;  // 0-based block indices
};

/// Number of top blocks with trainable base weights: round(fraction * L),
/// at least 1. Throws ValidationError unless 0 < fraction <= 1.
std::size_t unfrozen_layer_count(std::size_t layers, double fraction);

/// VisualPrefix freezes the whole LM and removes adapters.
/// PartialUnfreezeLoRA attaches adapters (keeping existing ones) to the
/// targeted projections of every block, and makes the base weights of the
/// top unfrozen_layer_count() blocks trainable.
template <class T>
FreezePlan set_tuning_regime(LanguageModel<T>& model, const TuningRegime& regime, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Prompt assembly

struct ScoredTag {
    std::string tag;
    double probability = 1.0;
};

/// "<instruction> Tags: a, b." with tags ordered by descending probability,
/// ties lexicographic; an empty set renders "Tags: none.". When
/// `include_tags` is false only the instruction is returned.
std::string prompt_text(std::vector<ScoredTag> tags, const std::string& instruction, bool include_tags = true);

/// Token layout: [P prefix slots][<bos> prompt tokens][caption tokens <eos>].
template <class T>
struct PromptAssembly {
    ag::Var<T> prefix;                   // P x d_z
    std::vector<std::string> tags_used;  // in prompt order
    std::string text;
    std::vector<int> prompt_ids;  // starts with <bos>
    std::optional<std::vector<int>> caption_ids;  // ends with <eos>

    std::size_t prefix_len() const { return static_cast<std::size_t>(prefix.rows()); }
};

template <class T>
PromptAssembly<T> assemble_prompt(ag::Var<T> prefix, std::vector<ScoredTag> tags, const std::string& instruction,
                                  const Tokenizer& tokenizer, bool include_tags = true);

/// Attaches the target caption; throws ValidationError if it tokenizes to
/// nothing.
template <class T>
void set_target(PromptAssembly<T>& assembly, const std::string& caption, const Tokenizer& tokenizer);

/// Input ids (prompt + caption, without the final <eos>) and per-row
/// targets for the logits of the full sequence; prefix, instruction and
/// tag rows get -1.
struct TeacherForcing {
    std::vector<int> input_ids;
    std::vector<int> targets;
};

template <class T>
TeacherForcing teacher_forcing(const PromptAssembly<T>& assembly);

/// Mean cross-entropy over caption positions.
template <class T>
ag::Var<T> caption_loss(const PromptAssembly<T>& assembly, LanguageModel<T>& model);

// ---------------------------------------------------------------------------
// Decoding

enum class DecodeMode { greedy, topk };

struct DecodeOptions {
    DecodeMode mode = DecodeMode::greedy;
    std::size_t k = 50;
    std::uint64_t seed = 0;
    std::size_t max_len = 64;
};

struct DecodeResult {
    std::vector<int> ids;  // generated tokens, <eos> excluded
    std::string caption;
    bool truncated = false;
};

/// Next-token logits given the tokens generated so far.
using LogitsFn = std::function<std::vector<double>(const std::vector<int>& generated)>;

/// Greedy takes the arg-max (lowest id on ties); top-k samples from the
/// softmax over the k best logits with a seeded generator. Stops at <eos>
/// or after max_len tokens (then truncated = true).
DecodeResult decode_tokens(const LogitsFn& logits, const DecodeOptions& options, int eos_id);

template <class T>
DecodeResult decode(const PromptAssembly<T>& assembly, LanguageModel<T>& model, const Tokenizer& tokenizer,
                    const DecodeOptions& options);

}  // namespace aerolite::lm
