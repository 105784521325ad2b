#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "kvcomm/errors.hpp"

namespace kvcomm {

/// Dense row-major f32 tensor. All compute happens in f32; f16 exists only
/// as a storage dtype on the wire (see payload.hpp).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;
    std::string name;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape_);
    Tensor(std::vector<std::size_t> shape_, std::vector<float> data_);

    std::size_t numel() const;
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    // 2-D accessors
    float& at(std::size_t i, std::size_t j);
    float at(std::size_t i, std::size_t j) const;
    // 3-D accessors
    float& at(std::size_t i, std::size_t j, std::size_t k);
    float at(std::size_t i, std::size_t j, std::size_t k) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

// Process-wide matmul FLOP counter. Every matmul call adds exactly 2*m*k*n.
// The cost-model module snapshot-reads this at stage boundaries.
std::uint64_t matmul_flops();
void reset_matmul_flops();

/// a[m×k] · b[k×n] -> [m×n]. Throws ShapeError on inner-dimension mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Row-wise softmax with max-subtraction. -inf entries act as mask
/// sentinels; a row with every entry masked is an error.
Tensor softmax_rows(const Tensor& x);

/// x scaled by 1/sqrt(mean(x^2)+eps), then elementwise * gamma.
std::vector<float> rmsnorm(const std::vector<float>& x, const std::vector<float>& gamma,
                           float eps);

/// Rotary position embedding over [heads × seq × head_dim], rotating
/// consecutive pairs at the given absolute positions. head_dim must be even.
Tensor rope_apply(const Tensor& x, const std::vector<std::uint32_t>& positions,
                  float theta_base);

} // namespace kvcomm
