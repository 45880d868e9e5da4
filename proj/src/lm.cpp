#include "aerolite/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aerolite/error.hpp"
#include "aerolite/text.hpp"

namespace aerolite::lm {

namespace {

template <class T>
ag::Parameter<T> uniform(std::string name, std::size_t rows, std::size_t cols, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    ag::Parameter<T> p;
    p.name = std::move(name);
    p.value = ag::Matrix<T>(static_cast<ag::Index>(rows), static_cast<ag::Index>(cols));
    for (ag::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(u(rng));
    return p;
}

template <class T>
ag::Parameter<T> filled(std::string name, std::size_t rows, std::size_t cols, T value) {
    return {std::move(name), ag::Matrix<T>::Constant(static_cast<ag::Index>(rows), static_cast<ag::Index>(cols), value),
            {}, true};
}

template <class T>
ag::Matrix<T> sinusoidal_positions(ag::Index n, ag::Index d) {
    ag::Matrix<T> pe(n, d);
    for (ag::Index pos = 0; pos < n; ++pos) {
        for (ag::Index i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            const double angle = static_cast<double>(pos) * freq;
            pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    }
    return pe;
}

}  // namespace

void LmConfig::validate() const {
    if (vocab_size < 5) throw ValidationError("LM vocabulary must hold the special tokens plus at least one word");
    if (d_model == 0 || layers == 0 || heads == 0 || d_ff == 0) throw ValidationError("LM sizes must be positive");
    if (d_model % heads != 0) throw ValidationError("lm.d_model must be divisible by lm.heads");
    if (max_len == 0) throw ValidationError("lm.max_len must be positive");
}

// ---------------------------------------------------------------------------

template <class T>
void AdaptedLinear<T>::attach_lora(std::size_t rank, double scale, std::mt19937_64& rng) {
    if (rank == 0 || rank > std::min(in_dim(), out_dim())) {
        throw ValidationError("LoRA rank " + std::to_string(rank) + " invalid for a " + std::to_string(out_dim()) +
                              "x" + std::to_string(in_dim()) + " map");
    }
    LoraAdapter<T> ad;
    ad.a = uniform<T>(weight.name + ".lora_a", out_dim(), rank, 1.0 / std::sqrt(static_cast<double>(rank)), rng);
    ad.b = filled<T>(weight.name + ".lora_b", rank, in_dim(), T(0));
    ad.scale = static_cast<T>(scale);
    lora = std::move(ad);
}

template <class T>
ag::Var<T> lora_forward(const ag::Var<T>& h, AdaptedLinear<T>& linear) {
    if (static_cast<std::size_t>(h.cols()) != linear.in_dim()) {
        throw ValidationError("hidden width " + std::to_string(h.cols()) + " does not match " + linear.weight.name);
    }
    auto w = ag::leaf(linear.weight);
    if (!linear.lora) return ag::matmul_nt(h, w);
    auto& ad = *linear.lora;
    auto a = ag::leaf(ad.a);
    auto b = ag::leaf(ad.b);
    if (linear.fused) {
        auto delta = ag::scale(ag::matmul(a, b), ad.scale);
        return ag::matmul_nt(h, ag::add(w, delta));
    }
    auto low = ag::matmul_nt(ag::matmul_nt(h, b), a);
    return ag::add(ag::matmul_nt(h, w), ag::scale(low, ad.scale));
}

template <class T>
AdaptedLinear<T>* Block<T>::projection(const std::string& name) {
    if (name == "q") return &q;
    if (name == "k") return &k;
    if (name == "v") return &v;
    if (name == "o") return &o;
    return nullptr;
}

template <class T>
std::vector<ag::Parameter<T>*> Block<T>::base_parameters() {
    return {&q.weight, &k.weight, &v.weight, &o.weight, &ff1_w,    &ff1_b,
            &ff2_w,    &ff2_b,    &ln1_gain, &ln1_bias, &ln2_gain, &ln2_bias};
}

// ---------------------------------------------------------------------------

template <class T>
LanguageModel<T> LanguageModel<T>::init(const LmConfig& config, std::mt19937_64& rng) {
    config.validate();
    LanguageModel m;
    m.config_ = config;
    const std::size_t d = config.d_model;
    const double bd = 1.0 / std::sqrt(static_cast<double>(d));
    const double bff = 1.0 / std::sqrt(static_cast<double>(config.d_ff));

    m.tok_emb_.name = "lm.tok_emb";
    m.tok_emb_.value = ag::Matrix<T>(static_cast<ag::Index>(config.vocab_size), static_cast<ag::Index>(d));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (ag::Index i = 0; i < m.tok_emb_.value.size(); ++i) m.tok_emb_.value.data()[i] = static_cast<T>(normal(rng));

    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string p = "lm.blocks." + std::to_string(l) + ".";
        Block<T> b;
        b.q.weight = uniform<T>(p + "attn.q", d, d, bd, rng);
        b.k.weight = uniform<T>(p + "attn.k", d, d, bd, rng);
        b.v.weight = uniform<T>(p + "attn.v", d, d, bd, rng);
        b.o.weight = uniform<T>(p + "attn.o", d, d, bd, rng);
        b.ff1_w = uniform<T>(p + "ff1.weight", config.d_ff, d, bd, rng);
        b.ff1_b = filled<T>(p + "ff1.bias", 1, config.d_ff, T(0));
        b.ff2_w = uniform<T>(p + "ff2.weight", d, config.d_ff, bff, rng);
        b.ff2_b = filled<T>(p + "ff2.bias", 1, d, T(0));
        b.ln1_gain = filled<T>(p + "ln1.gain", 1, d, T(1));
        b.ln1_bias = filled<T>(p + "ln1.bias", 1, d, T(0));
        b.ln2_gain = filled<T>(p + "ln2.gain", 1, d, T(1));
        b.ln2_bias = filled<T>(p + "ln2.bias", 1, d, T(0));
        m.blocks_.push_back(std::move(b));
    }
    m.lnf_gain_ = filled<T>("lm.ln_f.gain", 1, d, T(1));
    m.lnf_bias_ = filled<T>("lm.ln_f.bias", 1, d, T(0));
    // wide enough that a frozen head still allows confident predictions
    if (!config.tied) m.head_ = uniform<T>("lm.head", config.vocab_size, d, 3.5 * bd, rng);
    return m;
}

template <class T>
ag::Var<T> LanguageModel<T>::forward(const ag::Var<T>* prefix, const std::vector<int>& ids) {
    const auto d = static_cast<ag::Index>(config_.d_model);
    std::vector<ag::Var<T>> parts;
    if (prefix != nullptr) {
        if (prefix->cols() != d) throw ValidationError("prefix width does not match lm.d_model");
        parts.push_back(*prefix);
    }
    auto emb = ag::leaf(tok_emb_);
    if (!ids.empty()) parts.push_back(ag::gather_rows(emb, ids));
    if (parts.empty()) throw ValidationError("empty LM input");
    auto x = parts.size() == 1 ? parts.front() : ag::concat_rows<T>(parts);
    x = ag::add(x, ag::constant(sinusoidal_positions<T>(x.rows(), d)));

    const auto heads = static_cast<ag::Index>(config_.heads);
    const ag::Index dh = d / heads;
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (auto& b : blocks_) {
        auto h = ag::layer_norm(x, ag::leaf(b.ln1_gain), ag::leaf(b.ln1_bias));
        auto q = lora_forward(h, b.q);
        auto k = lora_forward(h, b.k);
        auto v = lora_forward(h, b.v);
        std::vector<ag::Var<T>> outs;
        outs.reserve(static_cast<std::size_t>(heads));
        for (ag::Index hd = 0; hd < heads; ++hd) {
            auto qh = ag::slice_cols(q, hd * dh, dh);
            auto kh = ag::slice_cols(k, hd * dh, dh);
            auto vh = ag::slice_cols(v, hd * dh, dh);
            auto att = ag::causal_softmax(ag::scale(ag::matmul_nt(qh, kh), att_scale));
            outs.push_back(ag::matmul(att, vh));
        }
        auto merged = heads == 1 ? outs.front() : ag::concat_cols<T>(outs);
        x = ag::add(x, lora_forward(merged, b.o));
        auto h2 = ag::layer_norm(x, ag::leaf(b.ln2_gain), ag::leaf(b.ln2_bias));
        auto ff = ag::gelu(ag::add_row(ag::matmul_nt(h2, ag::leaf(b.ff1_w)), ag::leaf(b.ff1_b)));
        x = ag::add(x, ag::add_row(ag::matmul_nt(ff, ag::leaf(b.ff2_w)), ag::leaf(b.ff2_b)));
    }
    x = ag::layer_norm(x, ag::leaf(lnf_gain_), ag::leaf(lnf_bias_));
    return ag::matmul_nt(x, config_.tied ? emb : ag::leaf(head_));
}

template <class T>
std::vector<ag::Parameter<T>*> LanguageModel<T>::parameters() {
    std::vector<ag::Parameter<T>*> out{&tok_emb_};
    for (auto& b : blocks_) {
        for (auto* p : b.base_parameters()) out.push_back(p);
        for (auto* lin : {&b.q, &b.k, &b.v, &b.o}) {
            if (lin->lora) {
                out.push_back(&lin->lora->a);
                out.push_back(&lin->lora->b);
            }
        }
    }
    out.push_back(&lnf_gain_);
    out.push_back(&lnf_bias_);
    if (!config_.tied) out.push_back(&head_);
    return out;
}

// ---------------------------------------------------------------------------

std::string to_string(Regime regime) {
    return regime == Regime::visual_prefix ? "visual_prefix" : "partial_unfreeze_lora";
}

Regime regime_from_string(const std::string& s) {
    if (s == "visual_prefix") return Regime::visual_prefix;
    if (s == "partial_unfreeze_lora") return Regime::partial_unfreeze_lora;
    throw ValidationError("unknown regime '" + s + "' (visual_prefix | partial_unfreeze_lora)");
}

std::size_t unfrozen_layer_count(std::size_t layers, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("top_fraction must lie in (0, 1]");
    auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(layers)));
    return std::clamp<std::size_t>(n, 1, layers);
}

template <class T>
FreezePlan set_tuning_regime(LanguageModel<T>& model, const TuningRegime& regime, std::mt19937_64& rng) {
    FreezePlan plan;
    plan.kind = regime.kind;
    for (auto* p : model.parameters()) p->trainable = false;
    auto& blocks = model.blocks();
    if (regime.kind == Regime::visual_prefix) {
        for (auto& b : blocks) {
            for (auto* lin : {&b.q, &b.k, &b.v, &b.o}) {
                lin->lora.reset();
                lin->fused = false;
            }
        }
        return plan;
    }
    for (const auto& t : regime.lora.targets) {
        if (t != "q" && t != "k" && t != "v" && t != "o") throw ValidationError("unknown LoRA target '" + t + "'");
    }
    const std::size_t n = unfrozen_layer_count(blocks.size(), regime.top_fraction);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        auto& b = blocks[l];
        const bool unfrozen = l >= blocks.size() - n;
        if (unfrozen) {
            plan.unfrozen_layers.push_back(l);
            for (auto* p : b.base_parameters()) p->trainable = true;
        }
        for (auto* lin : {&b.q, &b.k, &b.v, &b.o}) {
            lin->fused = false;
            const std::string key = lin == &b.q ? "q" : lin == &b.k ? "k" : lin == &b.v ? "v" : "o";
            if (!regime.lora.targets.contains(key)) {
                lin->lora.reset();
                continue;
            }
            if (!lin->lora || lin->lora->rank() != regime.lora.rank) {
                lin->attach_lora(regime.lora.rank, regime.lora.scale(), rng);
            }
            lin->lora->scale = static_cast<T>(regime.lora.scale());
            lin->lora->a.trainable = true;
            lin->lora->b.trainable = true;
            lin->fused = unfrozen;
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------

std::string prompt_text(std::vector<ScoredTag> tags, const std::string& instruction, bool include_tags) {
    std::string out = text::collapse_whitespace(instruction);
    if (!include_tags) return out;
    std::sort(tags.begin(), tags.end(), [](const ScoredTag& a, const ScoredTag& b) {
        return a.probability != b.probability ? a.probability > b.probability : a.tag < b.tag;
    });
    std::vector<std::string> names;
    for (auto& t : tags) names.push_back(t.tag);
    if (!out.empty()) out += " ";
    out += "Tags: " + (names.empty() ? std::string("none") : text::join(names, ", ")) + ".";
    return out;
}

template <class T>
PromptAssembly<T> assemble_prompt(ag::Var<T> prefix, std::vector<ScoredTag> tags, const std::string& instruction,
                                  const Tokenizer& tokenizer, bool include_tags) {
    PromptAssembly<T> a;
    a.prefix = std::move(prefix);
    std::sort(tags.begin(), tags.end(), [](const ScoredTag& x, const ScoredTag& y) {
        return x.probability != y.probability ? x.probability > y.probability : x.tag < y.tag;
    });
    if (include_tags) {
        for (const auto& t : tags) a.tags_used.push_back(t.tag);
    }
    a.text = prompt_text(std::move(tags), instruction, include_tags);
    a.prompt_ids.push_back(Tokenizer::kBos);
    for (int id : tokenizer.encode(a.text)) a.prompt_ids.push_back(id);
    return a;
}

template <class T>
void set_target(PromptAssembly<T>& assembly, const std::string& caption, const Tokenizer& tokenizer) {
    auto ids = tokenizer.encode(caption);
    if (ids.empty()) throw ValidationError("caption tokenizes to zero tokens");
    ids.push_back(Tokenizer::kEos);
    assembly.caption_ids = std::move(ids);
}

template <class T>
TeacherForcing teacher_forcing(const PromptAssembly<T>& assembly) {
    if (!assembly.caption_ids) throw ValidationError("prompt assembly has no target caption");
    std::vector<int> seq = assembly.prompt_ids;
    seq.insert(seq.end(), assembly.caption_ids->begin(), assembly.caption_ids->end());
    TeacherForcing tf;
    tf.input_ids.assign(seq.begin(), seq.end() - 1);
    const std::size_t p = assembly.prefix_len();
    tf.targets.assign(p + tf.input_ids.size(), -1);
    // Row p + j holds the prediction of seq[j + 1].
    for (std::size_t j = assembly.prompt_ids.size() - 1; j + 1 < seq.size(); ++j) tf.targets[p + j] = seq[j + 1];
    return tf;
}

template <class T>
ag::Var<T> caption_loss(const PromptAssembly<T>& assembly, LanguageModel<T>& model) {
    auto tf = teacher_forcing(assembly);
    auto logits = model.forward(&assembly.prefix, tf.input_ids);
    return ag::cross_entropy(logits, tf.targets);
}

// ---------------------------------------------------------------------------

DecodeResult decode_tokens(const LogitsFn& logits_fn, const DecodeOptions& options, int eos_id) {
    DecodeResult out;
    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t step = 0; step < options.max_len; ++step) {
        auto logits = logits_fn(out.ids);
        if (logits.empty()) throw ValidationError("decode: empty logits");
        int next = 0;
        if (options.mode == DecodeMode::greedy) {
            next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        } else {
            if (options.k == 0) throw ValidationError("top-k sampling needs k >= 1");
            std::vector<int> order(logits.size());
            std::iota(order.begin(), order.end(), 0);
            const std::size_t k = std::min(options.k, logits.size());
            std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                              [&](int a, int b) {
                                  return logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)]
                                             ? logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)]
                                             : a < b;
                              });
            const double top = logits[static_cast<std::size_t>(order[0])];
            std::vector<double> w(k);
            double total = 0.0;
            for (std::size_t i = 0; i < k; ++i) {
                w[i] = std::exp(logits[static_cast<std::size_t>(order[i])] - top);
                total += w[i];
            }
            double r = unit(rng) * total;
            next = order[k - 1];
            for (std::size_t i = 0; i < k; ++i) {
                if (r < w[i]) {
                    next = order[i];
                    break;
                }
                r -= w[i];
            }
        }
        if (next == eos_id) return out;
        out.ids.push_back(next);
    }
    out.truncated = true;
    return out;
}

template <class T>
DecodeResult decode(const PromptAssembly<T>& assembly, LanguageModel<T>& model, const Tokenizer& tokenizer,
                    const DecodeOptions& options) {
    // Inference only: detach the prefix so no graph is retained.
    auto prefix = ag::constant(assembly.prefix.value());
    auto fn = [&](const std::vector<int>& generated) {
        std::vector<int> ids = assembly.prompt_ids;
        ids.insert(ids.end(), generated.begin(), generated.end());
        auto logits = model.forward(&prefix, ids);
        auto last = logits.value().row(logits.rows() - 1);
        std::vector<double> out(static_cast<std::size_t>(last.size()));
        for (ag::Index i = 0; i < last.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(last(i));
        return out;
    };
    auto res = decode_tokens(fn, options, Tokenizer::kEos);
    res.caption = tokenizer.decode(res.ids);
    return res;
}

// ---------------------------------------------------------------------------

#define AEROLITE_LM_INSTANTIATE(T)                                                                                  \
    template struct AdaptedLinear<T>;                                                                               \
    template ag::Var<T> lora_forward(const ag::Var<T>&, AdaptedLinear<T>&);                                        \
    template struct Block<T>;                                                                                       \
    template class LanguageModel<T>;                                                                                \
    template FreezePlan set_tuning_regime(LanguageModel<T>&, const TuningRegime&, std::mt19937_64&);                \
    template PromptAssembly<T> assemble_prompt(ag::Var<T>, std::vector<ScoredTag>, const std::string&,             \
                                               const Tokenizer&, bool);                                             \
    template void set_target(PromptAssembly<T>&, const std::string&, const Tokenizer&);                            \
    template TeacherForcing teacher_forcing(const PromptAssembly<T>&);                                              \
    template ag::Var<T> caption_loss(const PromptAssembly<T>&, LanguageModel<T>&);                                  \
    template DecodeResult decode(const PromptAssembly<T>&, LanguageModel<T>&, const Tokenizer&, const DecodeOptions&);

AEROLITE_LM_INSTANTIATE(float)
AEROLITE_LM_INSTANTIATE(double)

#undef AEROLITE_LM_INSTANTIATE

}  // namespace aerolite::lm
