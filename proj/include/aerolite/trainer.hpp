#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aerolite/autograd.hpp"
#include "aerolite/bridge.hpp"
#include "aerolite/config.hpp"
#include "aerolite/corpus.hpp"
#include "aerolite/lm.hpp"
#include "aerolite/taghead.hpp"
#include "aerolite/tokenizer.hpp"

namespace aerolite::trainer {

enum class Stage { pretrain_pseudo, refine_real };
enum class PromptTags { predicted, target, off };
enum class Objective { joint, tags_only };
enum class SelectMetric { map, caption_loss };

std::string to_string(Stage s);
std::string to_string(PromptTags p);
std::string to_string(SelectMetric m);

struct TrainingConfig {
    std::size_t batch_size = 32;
    double lr = 1e-5;
    std::size_t max_epochs = 50;
    std::size_t patience = 5;
    double tau = 0.5;
    double alpha = 1.0;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    Stage stage = Stage::pretrain_pseudo;
    lm::TuningRegime regime;
    PromptTags prompt_tags = PromptTags::predicted;
    Objective objective = Objective::joint;
    SelectMetric select_metric = SelectMetric::map;
    std::string instruction = "Describe the aerial image.";
    double val_fraction = 0.1;
    std::size_t k_cut = 10;
    std::uint64_t seed = 42;

    static TrainingConfig from_config(const Config& config);
    /// Positive sizes and rates, tau in (0,1), patience < max_epochs.
    void validate() const;
};

struct LossBreakdown {
    double L_cap = 0.0;
    double L_tag = 0.0;
    double L_total = 0.0;
};

struct TrainingExample {
    std::string image_id;
    std::vector<float> embedding;
    std::string caption;
    std::optional<std::vector<std::string>> tags;
};

/// Routes image ids with (sha256_u64(id) % 1000) < fraction * 1000 to the
/// validation side. fraction 0 validates on the training set itself.
struct Split {
    std::vector<TrainingExample> train;
    std::vector<TrainingExample> val;
};
bool is_validation_id(const std::string& image_id, double fraction);
Split split_validation(std::vector<TrainingExample> data, double fraction);

// ---------------------------------------------------------------------------

struct ModelSpec {
    std::size_t d_v = 64;
    std::size_t bridge_hidden = 128;
    std::size_t prefix_len = 8;
    lm::LmConfig lm;

    static ModelSpec from_config(const Config& config, std::size_t d_v, std::size_t vocab_size);
};

struct TensorInfo {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool trainable = false;
    std::size_t offset = 0;  // in floats, checkpoint only

    bool same_shape(const TensorInfo& o) const { return name == o.name && rows == o.rows && cols == o.cols; }
};

/// Tag head, bridge and language model trained together.
template <class T>
struct CaptionModel {
    ModelSpec spec;
    lm::Tokenizer tokenizer;
    corpus::TagVocabulary vocab;
    lm::TuningRegime regime;
    lm::FreezePlan plan;
    taghead::TagHeadParams<T> tag_head;
    bridge::BridgeParams<T> bridge;
    lm::LanguageModel<T> lm;

    static CaptionModel create(const ModelSpec& spec, lm::Tokenizer tokenizer, corpus::TagVocabulary vocab,
                               const lm::TuningRegime& regime, std::uint64_t seed);

    /// Tag head, then bridge, then LM.
    std::vector<ag::Parameter<T>*> parameters();
    std::vector<ag::Parameter<T>*> trainable_parameters(Objective objective = Objective::joint);
    std::vector<TensorInfo> census();
    void zero_grad();
};

// ---------------------------------------------------------------------------

template <class T>
class AdamW {
public:
    explicit AdamW(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8);

    /// Updates exactly the given parameters from their current grads.
    void step(std::span<ag::Parameter<T>* const> params);
    std::size_t steps() const { return t_; }

private:
    struct Moments {
        ag::Matrix<T> m, v;
    };
    double lr_, wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> state_;
};

/// Scales grads so their joint L2 norm is at most max_norm; returns the
/// norm before clipping. max_norm <= 0 leaves grads untouched.
template <class T>
double clip_grad_norm(std::span<ag::Parameter<T>* const> params, double max_norm);

/// Differentiable batch loss: L_cap = mean caption loss, L_tag = mean
/// summed BCE over samples carrying tags (0 when none do),
/// L_total = L_cap + alpha * L_tag.
template <class T>
struct BatchLoss {
    ag::Var<T> total;
    LossBreakdown breakdown;
};

template <class T>
BatchLoss<T> batch_loss(std::span<const TrainingExample* const> batch, CaptionModel<T>& model,
                        const TrainingConfig& config);

/// Forward, backward and one optimizer update of the trainable set.
/// Throws NumericError naming the batch ids when the loss is not finite.
template <class T>
LossBreakdown train_step(std::span<const TrainingExample* const> batch, CaptionModel<T>& model, AdamW<T>& optimizer,
                         const TrainingConfig& config);

/// Tag list placed in the prompt for an example.
template <class T>
std::vector<lm::ScoredTag> prompt_tags_for(const TrainingExample& example, const std::vector<double>& p,
                                           const CaptionModel<T>& model, const TrainingConfig& config);

struct ValidationResult {
    double map = 0.0;
    double caption_loss = 0.0;
    std::size_t tagged = 0;
};

template <class T>
ValidationResult validate(std::span<const TrainingExample> val, CaptionModel<T>& model, const TrainingConfig& config);

// ---------------------------------------------------------------------------

/// Stop once the score has not strictly improved for `patience`
/// consecutive epochs. Ties keep the earliest epoch. NaN never improves.
class EarlyStopper {
public:
    explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

    /// Records the score of the next epoch; true when training should stop.
    bool update(double score);

    std::size_t epochs() const { return epochs_; }
    std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
    double best_score() const { return best_score_; }
    bool improved_last() const { return improved_last_; }

private:
    std::size_t patience_;
    std::size_t epochs_ = 0;
    std::size_t best_epoch_ = 0;
    std::size_t stale_ = 0;
    double best_score_ = 0.0;
    bool improved_last_ = false;
};

struct StopOutcome {
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
};

/// Runs a score trace through EarlyStopper with an epoch cap.
StopOutcome simulate_early_stopping(std::span<const double> scores, std::size_t patience, std::size_t max_epochs);

struct EpochLog {
    std::size_t epoch = 0;
    LossBreakdown loss;
    double val_map = 0.0;
    double val_caption_loss = 0.0;
};

std::string log_csv_header();
std::string log_csv_row(const EpochLog& row);

template <class T>
struct FitResult {
    std::vector<EpochLog> log;
    std::vector<LossBreakdown> steps;
    std::size_t best_epoch = 0;
    double best_val_map = 0.0;
    std::vector<ag::Matrix<T>> best_values;  // parameters() order
};

struct FitOptions {
    bool restore_best = true;
    std::function<void(const EpochLog&)> on_epoch;
};

/// Epoch loop with shuffled mini-batches, validation after each epoch and
/// early stopping. Throws ValidationError on an empty dataset.
template <class T>
FitResult<T> fit(std::span<const TrainingExample> train, std::span<const TrainingExample> val, CaptionModel<T>& model,
                 const TrainingConfig& config, const FitOptions& options = {});

// ---------------------------------------------------------------------------
// Checkpoints: "ALCK", u32 version, u64 manifest length, manifest JSON,
// u64 blob length, float32 little-endian blob, hex SHA-256 (64 chars) of all the
// preceding bytes.

struct Checkpoint {
    Config config;
    std::size_t epoch = 0;
    double best_val_map = 0.0;
    std::size_t d_v = 0;
    std::vector<std::string> tokens;
    std::vector<std::string> tags;
    std::vector<TensorInfo> tensors;
    std::vector<float> blob;

    std::string serialize() const;
    /// Throws ValidationError on a bad header or checksum mismatch.
    static Checkpoint parse(std::string_view bytes);
};

template <class T>
Checkpoint make_checkpoint(CaptionModel<T>& model, const Config& config, std::size_t epoch, double best_val_map);

/// Copies tensors into the model after checking the census (names and
/// shapes); a mismatch error lists every offending parameter.
template <class T>
void load_parameters(CaptionModel<T>& model, const Checkpoint& checkpoint);

/// Rebuilds spec, tokenizer, vocabulary and regime from the stored config.
template <class T>
CaptionModel<T> model_from_checkpoint(const Checkpoint& checkpoint);

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

/// Hex SHA-256 per parameter, for freeze audits.
template <class T>
std::map<std::string, std::string> parameter_hashes(CaptionModel<T>& model);

}  // namespace aerolite::trainer
