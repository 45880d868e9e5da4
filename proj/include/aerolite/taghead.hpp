#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aerolite/autograd.hpp"
#include "aerolite/corpus.hpp"

namespace aerolite::taghead {

/// Linear multi-label classifier p = sigmoid(W v + b) over frozen embeddings.
template <class T>
struct TagHeadParams {
    ag::Parameter<T> weight;  // K x d_v
    ag::Parameter<T> bias;    // 1 x K

    static TagHeadParams init(std::size_t num_tags, std::size_t dim, std::mt19937_64& rng);

    std::size_t num_tags() const { return static_cast<std::size_t>(weight.value.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(weight.value.cols()); }
    std::vector<ag::Parameter<T>*> parameters() { return {&weight, &bias}; }
};

struct TagPrediction {
    std::vector<double> p;
    std::vector<std::size_t> predicted;  // ascending tag ids with p >= tau
    double tau = 0.5;
};

struct TagTarget {
    std::vector<std::uint8_t> y;

    static TagTarget from_tags(const std::vector<std::string>& tags, const corpus::TagVocabulary& vocab);
    std::size_t positives() const;
};

/// 1 x K logits for a 1 x d_v embedding row.
template <class T>
ag::Var<T> tag_logits(const ag::Var<T>& v, TagHeadParams<T>& params);

/// Throws ValidationError on dimension mismatch or tau outside (0, 1).
template <class T>
TagPrediction predict(std::span<const float> v, const TagHeadParams<T>& params, double tau);

/// {k : p_k >= tau}; inclusive at tau.
std::vector<std::size_t> threshold(std::span<const double> p, double tau);

struct BceResult {
    double loss = 0.0;
    std::vector<double> grad_logits;  // p - y
};

/// Summed binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
BceResult bce_loss(std::span<const double> p, std::span<const double> y);

/// Tag ids ordered by descending probability, ties by ascending id.
std::vector<std::size_t> rank_tags(std::span<const double> p);

struct RetrievalReport {
    std::size_t k_cut = 10;
    double precision = 0.0;  // P@K
    double recall = 0.0;     // R@K
    double f1 = 0.0;         // F1@K
    double map = 0.0;        // mAP@K
    std::map<std::size_t, double> recall_at;  // R@k columns
    std::size_t evaluated = 0;
    std::size_t excluded = 0;  // samples without any true tag

    static constexpr const char* kDefinition =
        "macro averages over samples with >=1 true tag; ranking by descending p, ties by ascending tag id; "
        "AP@K = mean precision at the ranks <=K holding a true tag; R@k = label recall within the top k";
};

/// recall_ks lists the R@k columns to report (default 1, 5, 10).
RetrievalReport retrieval_metrics(std::span<const TagPrediction> preds, std::span<const TagTarget> targets,
                                  std::size_t k_cut, std::vector<std::size_t> recall_ks = {1, 5, 10});

/// JSONL rows {"image_id", "p", "predicted"} with tag strings.
std::string write_predictions_jsonl(std::span<const std::string> image_ids, std::span<const TagPrediction> preds,
                                    const corpus::TagVocabulary& vocab);

}  // namespace aerolite::taghead
