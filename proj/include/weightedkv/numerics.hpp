// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "weightedkv/error.hpp"

namespace wkv {

using Vec = std::vector<double>;

/// Dense row-major matrix of doubles. One key or value vector per row.
///
/// A matrix may have zero rows (an empty cache still knows its width), but
/// the column count is fixed once set.
class Mat {
public:
    Mat() = default;

    Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Mat from_rows(const std::vector<Vec>& rows) {
        detail::require(!rows.empty(), "Mat::from_rows: no rows");
        const std::size_t cols = rows.front().size();
        detail::require(cols > 0, "Mat::from_rows: zero-width rows");
        Mat m(0, cols);
        m.data_.reserve(rows.size() * cols);
        for (const auto& r : rows) {
            m.append_row(r);
        }
        return m;
    }

    static Mat diagonal(std::span<const double> diag) {
        Mat m(diag.size(), diag.size());
        for (std::size_t i = 0; i < diag.size(); ++i) {
            m(i, i) = diag[i];
        }
        return m;
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] bool empty() const noexcept { return rows_ == 0; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    [[nodiscard]] std::span<double> row(std::size_t r) {
        return {data_.data() + r * cols_, cols_};
    }
    [[nodiscard]] std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * cols_, cols_};
    }
    [[nodiscard]] Vec row_vec(std::size_t r) const {
        auto s = row(r);
        return {s.begin(), s.end()};
    }

    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }

    void append_row(std::span<const double> values) {
        if (cols_ == 0 && rows_ == 0) {
            cols_ = values.size();
        }
        detail::require(values.size() == cols_ && cols_ > 0,
                        "Mat::append_row: expected " + std::to_string(cols_) + " columns, got " +
                            std::to_string(values.size()));
        data_.insert(data_.end(), values.begin(), values.end());
        ++rows_;
    }

    void erase_row(std::size_t r) {
        detail::require(r < rows_, "Mat::erase_row: row out of range");
        auto first = data_.begin() + static_cast<std::ptrdiff_t>(r * cols_);
        data_.erase(first, first + static_cast<std::ptrdiff_t>(cols_));
        --rows_;
    }

    [[nodiscard]] Mat transpose() const {
        Mat t(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r) {
            for (std::size_t c = 0; c < cols_; ++c) {
                t(c, r) = (*this)(r, c);
            }
        }
        return t;
    }

    [[nodiscard]] double frobenius_norm_squared() const {
        return std::inner_product(data_.begin(), data_.end(), data_.begin(), 0.0);
    }

    friend bool operator==(const Mat&, const Mat&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    detail::require(a.size() == b.size(), "dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
    detail::require(a.size() == b.size(), "l2_distance: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

/// Cosine similarity; two zero vectors are defined as identical (1.0).
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 && nb == 0.0) {
        return 1.0;
    }
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Softmax with max subtraction; safe for arbitrarily large finite logits.
inline Vec softmax(std::span<const double> logits) {
    detail::require(!logits.empty(), "empty logits");
    detail::require(all_finite(logits), "softmax: non-finite logit");
    const double peak = *std::max_element(logits.begin(), logits.end());
    Vec out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - peak);
        total += out[i];
    }
    for (double& x : out) {
        x /= total;
    }
    return out;
}

/// (q . k_i) / sqrt(head_dim) for every key row.
inline Vec scaled_scores(std::span<const double> query, const Mat& keys, std::size_t head_dim) {
    detail::require(head_dim > 0, "scaled_scores: zero head dimension");
    detail::require(query.size() == head_dim && keys.cols() == head_dim,
                    "scaled_scores: dimension mismatch (query " + std::to_string(query.size()) +
                        ", keys " + std::to_string(keys.cols()) + ", d " + std::to_string(head_dim) + ")");
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Vec out(keys.rows());
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        out[i] = dot(query, keys.row(i)) * scale;
    }
    return out;
}

inline constexpr double kSvdTolerance = 1e-12;
inline constexpr int kSvdMaxSweeps = 100;

/// Singular values in non-increasing order.
///
/// One-sided (Hestenes) Jacobi on the columns of the taller orientation, so
/// small singular values keep absolute accuracy near machine epsilon times the
/// largest one. Converged when every column pair satisfies
/// |a_i . a_j| <= 1e-12 * |a_i| |a_j|.
inline Vec singular_values(const Mat& m) {
    detail::require(m.rows() > 0 && m.cols() > 0, "singular_values: degenerate matrix");
    const Mat tall = m.rows() >= m.cols() ? m : m.transpose();
    const std::size_t n = tall.rows();
    const std::size_t p = tall.cols();

    // Column-major working copy.
    std::vector<Vec> cols(p, Vec(n));
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < p; ++c) {
            cols[c][r] = tall(r, c);
        }
    }

    bool converged = false;
    for (int sweep = 0; sweep < kSvdMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t i = 0; i + 1 < p; ++i) {
            for (std::size_t j = i + 1; j < p; ++j) {
                const double alpha = dot(cols[i], cols[i]);
                const double beta = dot(cols[j], cols[j]);
                const double gamma = dot(cols[i], cols[j]);
                if (gamma == 0.0 || std::abs(gamma) <= kSvdTolerance * std::sqrt(alpha * beta)) {
                    continue;
                }
                converged = false;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < n; ++r) {
                    const double xi = cols[i][r];
                    const double xj = cols[j][r];
                    cols[i][r] = c * xi - s * xj;
                    cols[j][r] = s * xi + c * xj;
                }
            }
        }
    }
    detail::require(converged, "singular_values: Jacobi iteration did not converge");

    Vec sigma(p);
    std::transform(cols.begin(), cols.end(), sigma.begin(), [](const Vec& c) { return norm(c); });
    std::sort(sigma.begin(), sigma.end(), std::greater<>());
    return sigma;
}

/// Singular values divided by the largest one.
inline Vec normalized_spectrum(const Mat& m) {
    Vec sigma = singular_values(m);
    detail::require(sigma.front() > 0.0, "zero spectrum");
    const double top = sigma.front();
    for (double& s : sigma) {
        s /= top;
    }
    return sigma;
}

}  // namespace wkv
