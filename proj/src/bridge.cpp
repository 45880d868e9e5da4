#include "aerolite/bridge.hpp"

#include <cmath>

#include "aerolite/error.hpp"

namespace aerolite::bridge {

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
ag::Parameter<T> zeros(std::string name, std::size_t rows, std::size_t cols) {
    return {std::move(name), ag::Matrix<T>::Zero(static_cast<ag::Index>(rows), static_cast<ag::Index>(cols)), {},
            true};
}

}  // namespace

template <class T>
BridgeParams<T> BridgeParams<T>::init(std::size_t d_v, std::size_t d_h, std::size_t d_z, std::size_t prefix_len,
                                      std::mt19937_64& rng) {
    if (d_v == 0 || d_h == 0 || d_z == 0) throw ValidationError("bridge dimensions must be positive");
    if (prefix_len < 1) throw ValidationError("bridge prefix length must be >= 1");
    BridgeParams p;
    p.w1 = uniform<T>("bridge.w1", d_h, d_v, std::sqrt(6.0 / static_cast<double>(d_v)), rng);
    p.b1 = zeros<T>("bridge.b1", 1, d_h);
    p.w2 = uniform<T>("bridge.w2", d_z, d_h, std::sqrt(3.0 / static_cast<double>(d_h)), rng);
    p.b2 = zeros<T>("bridge.b2", 1, d_z);
    p.offsets = zeros<T>("bridge.offsets", prefix_len, d_z);
    return p;
}

template <class T>
ag::Var<T> bridge_forward(const ag::Var<T>& v, BridgeParams<T>& params) {
    if (v.rows() != 1 || static_cast<std::size_t>(v.cols()) != params.input_dim()) {
        throw ValidationError("embedding dimension " + std::to_string(v.cols()) + " does not match bridge d_v " +
                              std::to_string(params.input_dim()));
    }
    auto h = ag::relu(ag::add_row(ag::matmul_nt(v, ag::leaf(params.w1)), ag::leaf(params.b1)));
    auto z = ag::add_row(ag::matmul_nt(h, ag::leaf(params.w2)), ag::leaf(params.b2));
    return ag::add_row(ag::leaf(params.offsets), z);
}

template <class T>
ag::Matrix<T> bridge_tokens(std::span<const T> v, BridgeParams<T>& params) {
    ag::Matrix<T> row(1, static_cast<ag::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) row(0, static_cast<ag::Index>(i)) = v[i];
    return bridge_forward(ag::constant(std::move(row)), params).value();
}

template struct BridgeParams<float>;
template struct BridgeParams<double>;
template ag::Var<float> bridge_forward(const ag::Var<float>&, BridgeParams<float>&);
template ag::Var<double> bridge_forward(const ag::Var<double>&, BridgeParams<double>&);
template ag::Matrix<float> bridge_tokens(std::span<const float>, BridgeParams<float>&);
template ag::Matrix<double> bridge_tokens(std::span<const double>, BridgeParams<double>&);

}  // namespace aerolite::bridge
