#pragma once

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace tryflow {

// Token grid contributed by one input image. condition_id assignment:
//   0 = noisy target, 1 = agnostic-or-person image, 2 = flat cloth, 3 = reference.
struct GridSpec {
    int rows = 0;
    int cols = 0;
    int condition_id = 0;

    int token_count() const { return rows * cols; }
};

// One (id, row, col) triple per token. Condition coordinates are fractional
// after rescaling by the target/condition resolution ratio; ids never rescale.
struct PosEntry {
    int id = 0;
    double row = 0;
    double col = 0;

    bool operator==(const PosEntry& o) const { return id == o.id && row == o.row && col == o.col; }
};

struct PositionIndex {
    std::vector<PosEntry> entries;

    size_t size() const { return entries.size(); }
    const PosEntry& operator[](size_t i) const { return entries[i]; }
};

// Noise entries first (integer row-major coordinates), then each condition
// grid in the given order with coordinates scaled by
// (target.rows/cond.rows, target.cols/cond.cols).
PositionIndex build_position_index(const GridSpec& target, const std::vector<GridSpec>& conditions);

// Rotary frequency table for one axis. angle(k, p) = p * base^(-2k/dim),
// k in [0, dim/2); frequencies are monotonically decreasing.
struct RopeTable {
    int dim = 0;
    double base = 10000.0;
    std::vector<double> freqs;

    double angle(int k, double pos) const { return pos * freqs[static_cast<size_t>(k)]; }
};

RopeTable rope_table(int dim, double base);

namespace detail {

// Rotates adjacent pairs of one axis block in place by angle(k, pos).
template <typename Derived>
void rope_rotate_axis(Eigen::MatrixBase<Derived>& block, const RopeTable& table, double pos) {
    using S = typename Derived::Scalar;
    const int pairs = table.dim / 2;
    for (int k = 0; k < pairs; ++k) {
        const double a = table.angle(k, pos);
        const S c = static_cast<S>(std::cos(a));
        const S s = static_cast<S>(std::sin(a));
        const S x = block(0, 2 * k);
        const S y = block(0, 2 * k + 1);
        block(0, 2 * k) = c * x - s * y;
        block(0, 2 * k + 1) = s * x + c * y;
    }
}

}  // namespace detail

// Applies three-axis rotary embeddings to a token matrix (rows are tokens).
// The first 3*table.dim features split into (id, row, col) axis blocks; any
// remaining features pass through unrotated. When `inverse` is set the
// transpose rotation is applied (used for gradients).
template <typename Derived>
void apply_rope_inplace(Eigen::MatrixBase<Derived>& tokens, const PositionIndex& index,
                        const RopeTable& table, bool inverse = false) {
    if (static_cast<size_t>(tokens.rows()) != index.size())
        throw std::invalid_argument("apply_rope: token count does not match index length");
    if (tokens.cols() < 3 * table.dim)
        throw std::invalid_argument("apply_rope: token width " + std::to_string(tokens.cols()) +
                                    " cannot host three axis blocks of " + std::to_string(table.dim));
    const double sign = inverse ? -1.0 : 1.0;
    for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
        const PosEntry& e = index[static_cast<size_t>(i)];
        const double coords[3] = {static_cast<double>(e.id), e.row, e.col};
        for (int axis = 0; axis < 3; ++axis) {
            auto block = tokens.block(i, axis * table.dim, 1, table.dim);
            detail::rope_rotate_axis(block, table, sign * coords[axis]);
        }
    }
}

template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> apply_rope(
    const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& tokens, const PositionIndex& index,
    const RopeTable& table) {
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> out = tokens;
    apply_rope_inplace(out, index, table);
    return out;
}

}  // namespace tryflow
