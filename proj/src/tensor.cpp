#include "kvcomm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kvcomm {

namespace {

std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw ShapeError("tensor rank must be >= 1");
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("tensor dims must be > 0");
        n *= d;
    }
    return n;
}

std::atomic<std::uint64_t> g_matmul_flops{0};

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape_)
    : shape(std::move(shape_)), data(checked_numel(shape), 0.0f) {}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    if (checked_numel(shape) != data.size())
        throw ShapeError("tensor data size does not match shape");
}

std::size_t Tensor::numel() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

float& Tensor::at(std::size_t i, std::size_t j) {
    return data[i * shape[1] + j];
}
float Tensor::at(std::size_t i, std::size_t j) const {
    return data[i * shape[1] + j];
}
float& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
}
float Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
}

std::uint64_t matmul_flops() { return g_matmul_flops.load(std::memory_order_relaxed); }
void reset_matmul_flops() { g_matmul_flops.store(0, std::memory_order_relaxed); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 tensors");
    const std::size_t m = a.shape[0], k = a.shape[1];
    if (b.shape[0] != k)
        throw ShapeError("matmul inner dimensions mismatch: " + std::to_string(k) + " vs " +
                         std::to_string(b.shape[0]));
    const std::size_t n = b.shape[1];

    Tensor out({m, n});
    const float* pa = a.data.data();
    const float* pb = b.data.data();
    float* pc = out.data.data();
    // i-k-j order keeps the b and out rows contiguous in the inner loop.
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = pc + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const float aik = pa[i * k + kk];
            const float* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    g_matmul_flops.fetch_add(2ull * m * k * n, std::memory_order_relaxed);
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows expects a rank-2 tensor");
    const std::size_t m = x.shape[0], n = x.shape[1];
    Tensor out({m, n});
    const float neg_inf = -std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
        float mx = neg_inf;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x.at(i, j));
        if (mx == neg_inf) throw ShapeError("softmax_rows: fully masked row " + std::to_string(i));
        float sum = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
            const float e = std::exp(x.at(i, j) - mx); // exp(-inf) == 0 for masked entries
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    return out;
}

std::vector<float> rmsnorm(const std::vector<float>& x, const std::vector<float>& gamma,
                           float eps) {
    if (x.size() != gamma.size()) throw ShapeError("rmsnorm: x and gamma length mismatch");
    if (x.empty()) throw ShapeError("rmsnorm: empty vector");
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    const float scale = 1.0f / std::sqrt(static_cast<float>(ss / x.size()) + eps);
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale * gamma[i];
    return out;
}

Tensor rope_apply(const Tensor& x, const std::vector<std::uint32_t>& positions,
                  float theta_base) {
    if (x.rank() != 3) throw ShapeError("rope_apply expects [heads × seq × head_dim]");
    const std::size_t heads = x.shape[0], seq = x.shape[1], hd = x.shape[2];
    if (hd % 2 != 0) throw ConfigError("rope_apply: head_dim must be even");
    if (positions.size() != seq) throw ShapeError("rope_apply: positions length != seq");

    Tensor out = x;
    for (std::size_t t = 0; t < seq; ++t) {
        const double pos = static_cast<double>(positions[t]);
        for (std::size_t p = 0; p < hd / 2; ++p) {
            const double freq = std::pow(static_cast<double>(theta_base),
                                         -2.0 * static_cast<double>(p) / static_cast<double>(hd));
            const double angle = pos * freq;
            const float c = static_cast<float>(std::cos(angle));
            const float s = static_cast<float>(std::sin(angle));
            for (std::size_t h = 0; h < heads; ++h) {
                const float x0 = x.at(h, t, 2 * p);
                const float x1 = x.at(h, t, 2 * p + 1);
                out.at(h, t, 2 * p) = x0 * c - x1 * s;
                out.at(h, t, 2 * p + 1) = x0 * s + x1 * c;
            }
        }
    }
    return out;
}

} // namespace kvcomm
