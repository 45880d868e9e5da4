#pragma once

#include <random>
#include <span>
#include <vector>

#include "aerolite/autograd.hpp"

namespace aerolite::bridge {

/// Two-layer ReLU MLP mapping an image embedding into the LM embedding
/// space, plus one learned offset per visual prefix position:
///   h = ReLU(W1 v + b1),  z = W2 h + b2,  token_i = z + E_i.
/// E starts at zero, so a fresh bridge replicates z into every slot.
template <class T>
struct BridgeParams {
    ag::Parameter<T> w1;       // d_h x d_v
    ag::Parameter<T> b1;       // 1 x d_h
    ag::Parameter<T> w2;       // d_z x d_h
    ag::Parameter<T> b2;       // 1 x d_z
    ag::Parameter<T> offsets;  // P x d_z

    /// Kaiming-style uniform weights scaled by fan-in, zero biases, zero offsets.
    static BridgeParams init(std::size_t d_v, std::size_t d_h, std::size_t d_z, std::size_t prefix_len,
                             std::mt19937_64& rng);

    std::size_t input_dim() const { return static_cast<std::size_t>(w1.value.cols()); }
    std::size_t hidden_dim() const { return static_cast<std::size_t>(w1.value.rows()); }
    std::size_t output_dim() const { return static_cast<std::size_t>(w2.value.rows()); }
    std::size_t prefix_len() const { return static_cast<std::size_t>(offsets.value.rows()); }

    std::vector<ag::Parameter<T>*> parameters() { return {&w1, &b1, &w2, &b2, &offsets}; }
};

/// P x d_z prefix tokens for a 1 x d_v embedding row.
template <class T>
ag::Var<T> bridge_forward(const ag::Var<T>& v, BridgeParams<T>& params);

/// Value-only convenience wrapper.
template <class T>
ag::Matrix<T> bridge_tokens(std::span<const T> v, BridgeParams<T>& params);

}  // namespace aerolite::bridge
