#include "aerolite/taghead.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>

#include "aerolite/error.hpp"

namespace aerolite::taghead {

template <class T>
TagHeadParams<T> TagHeadParams<T>::init(std::size_t num_tags, std::size_t dim, std::mt19937_64& rng) {
    if (num_tags == 0 || dim == 0) throw ValidationError("tag head needs K >= 1 and d_v >= 1");
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    std::uniform_real_distribution<double> u(-bound, bound);
    TagHeadParams p;
    p.weight.name = "taghead.weight";
    p.weight.value = ag::Matrix<T>(static_cast<ag::Index>(num_tags), static_cast<ag::Index>(dim));
    for (ag::Index i = 0; i < p.weight.value.size(); ++i) p.weight.value.data()[i] = static_cast<T>(u(rng));
    p.bias.name = "taghead.bias";
    p.bias.value = ag::Matrix<T>::Zero(1, static_cast<ag::Index>(num_tags));
    return p;
}

TagTarget TagTarget::from_tags(const std::vector<std::string>& tags, const corpus::TagVocabulary& vocab) {
    TagTarget t;
    t.y.assign(vocab.size(), 0);
    for (const auto& tag : tags) {
        if (auto id = vocab.id_of(tag)) t.y[*id] = 1;
    }
    return t;
}

std::size_t TagTarget::positives() const { return static_cast<std::size_t>(std::count(y.begin(), y.end(), 1)); }

template <class T>
ag::Var<T> tag_logits(const ag::Var<T>& v, TagHeadParams<T>& params) {
    if (v.rows() != 1 || static_cast<std::size_t>(v.cols()) != params.dim()) {
        throw ValidationError("embedding dimension " + std::to_string(v.cols()) + " does not match tag head d_v " +
                              std::to_string(params.dim()));
    }
    return ag::add_row(ag::matmul_nt(v, ag::leaf(params.weight)), ag::leaf(params.bias));
}

std::vector<std::size_t> threshold(std::span<const double> p, double tau) {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] >= tau) out.push_back(k);
    }
    return out;
}

template <class T>
TagPrediction predict(std::span<const float> v, const TagHeadParams<T>& params, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("tau must lie in (0, 1)");
    if (v.size() != params.dim()) {
        throw ValidationError("embedding dimension " + std::to_string(v.size()) + " does not match tag head d_v " +
                              std::to_string(params.dim()));
    }
    TagPrediction out;
    out.tau = tau;
    out.p.resize(params.num_tags());
    for (std::size_t k = 0; k < params.num_tags(); ++k) {
        double z = static_cast<double>(params.bias.value(0, static_cast<ag::Index>(k)));
        for (std::size_t j = 0; j < v.size(); ++j) {
            z += static_cast<double>(params.weight.value(static_cast<ag::Index>(k), static_cast<ag::Index>(j))) *
                 static_cast<double>(v[j]);
        }
        out.p[k] = 1.0 / (1.0 + std::exp(-z));
    }
    out.predicted = threshold(out.p, tau);
    return out;
}

BceResult bce_loss(std::span<const double> p, std::span<const double> y) {
    if (p.size() != y.size()) throw ValidationError("bce_loss: length mismatch");
    const double eps = ag::kProbabilityEpsilon;
    BceResult r;
    r.grad_logits.resize(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double pk = std::clamp(p[k], eps, 1.0 - eps);
        r.loss -= y[k] * std::log(pk) + (1.0 - y[k]) * std::log(1.0 - pk);
        r.grad_logits[k] = p[k] - y[k];
    }
    return r;
}

std::vector<std::size_t> rank_tags(std::span<const double> p) {
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    return order;
}

RetrievalReport retrieval_metrics(std::span<const TagPrediction> preds, std::span<const TagTarget> targets,
                                  std::size_t k_cut, std::vector<std::size_t> recall_ks) {
    if (k_cut < 1) throw ValidationError("K cut-off must be >= 1");
    if (preds.size() != targets.size()) throw ValidationError("retrieval_metrics: predictions/targets size mismatch");
    RetrievalReport rep;
    rep.k_cut = k_cut;
    for (auto k : recall_ks) rep.recall_at[k] = 0.0;

    for (std::size_t s = 0; s < preds.size(); ++s) {
        const auto& p = preds[s].p;
        const auto& y = targets[s].y;
        if (p.size() != y.size()) throw ValidationError("retrieval_metrics: sample " + std::to_string(s) +
                                                        " has mismatched label counts");
        const std::size_t n_true = targets[s].positives();
        if (n_true == 0) {
            ++rep.excluded;
            continue;
        }
        ++rep.evaluated;
        const auto order = rank_tags(p);
        // hits[r] = true tags within the first r ranks
        std::vector<std::size_t> hits(order.size() + 1, 0);
        double ap_sum = 0.0;
        std::size_t ap_terms = 0;
        for (std::size_t r = 0; r < order.size(); ++r) {
            const bool hit = y[order[r]] == 1;
            hits[r + 1] = hits[r] + (hit ? 1 : 0);
            if (hit && r < k_cut) {
                ap_sum += static_cast<double>(hits[r + 1]) / static_cast<double>(r + 1);
                ++ap_terms;
            }
        }
        auto hits_at = [&](std::size_t k) { return hits[std::min(k, order.size())]; };
        const double prec = static_cast<double>(hits_at(k_cut)) / static_cast<double>(k_cut);
        const double rec = static_cast<double>(hits_at(k_cut)) / static_cast<double>(n_true);
        rep.precision += prec;
        rep.recall += rec;
        rep.f1 += prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        rep.map += ap_terms > 0 ? ap_sum / static_cast<double>(ap_terms) : 0.0;
        for (auto& [k, acc] : rep.recall_at) acc += static_cast<double>(hits_at(k)) / static_cast<double>(n_true);
    }
    if (rep.evaluated > 0) {
        const double n = static_cast<double>(rep.evaluated);
        rep.precision /= n;
        rep.recall /= n;
        rep.f1 /= n;
        rep.map /= n;
        for (auto& [k, acc] : rep.recall_at) acc /= n;
    }
    return rep;
}

std::string write_predictions_jsonl(std::span<const std::string> image_ids, std::span<const TagPrediction> preds,
                                    const corpus::TagVocabulary& vocab) {
    if (image_ids.size() != preds.size()) throw ValidationError("prediction dump: ids/predictions size mismatch");
    std::string out;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        std::vector<std::string> names;
        for (auto k : preds[i].predicted) names.push_back(vocab.tags().at(k));
        nlohmann::json j = {{"image_id", image_ids[i]}, {"p", preds[i].p}, {"predicted", names}};
        out += j.dump() + "\n";
    }
    return out;
}

template struct TagHeadParams<float>;
template struct TagHeadParams<double>;
template ag::Var<float> tag_logits(const ag::Var<float>&, TagHeadParams<float>&);
template ag::Var<double> tag_logits(const ag::Var<double>&, TagHeadParams<double>&);
template TagPrediction predict(std::span<const float>, const TagHeadParams<float>&, double);
template TagPrediction predict(std::span<const float>, const TagHeadParams<double>&, double);

}  // namespace aerolite::taghead
