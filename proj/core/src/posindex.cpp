#include "tryflow/posindex.hpp"

#include <set>
#include <string>

namespace tryflow {

PositionIndex build_position_index(const GridSpec& target, const std::vector<GridSpec>& conditions) {
    if (target.condition_id != 0)
        throw std::invalid_argument("build_position_index: target grid must carry condition_id 0");
    if (target.rows < 1 || target.cols < 1)
        throw std::invalid_argument("build_position_index: zero-size target grid");

    std::set<int> seen;
    for (const auto& g : conditions) {
        if (g.condition_id < 1 || g.condition_id > 3)
            throw std::invalid_argument("build_position_index: condition_id must be in {1,2,3}, got " +
                                        std::to_string(g.condition_id));
        if (!seen.insert(g.condition_id).second)
            throw std::invalid_argument("build_position_index: duplicate condition_id " +
                                        std::to_string(g.condition_id));
        if (g.rows < 1 || g.cols < 1)
            throw std::invalid_argument("build_position_index: zero-size grid for condition_id " +
                                        std::to_string(g.condition_id));
    }

    PositionIndex index;
    index.entries.reserve(static_cast<size_t>(target.token_count()));
    for (int r = 0; r < target.rows; ++r)
        for (int c = 0; c < target.cols; ++c)
            index.entries.push_back({0, static_cast<double>(r), static_cast<double>(c)});

    for (const auto& g : conditions) {
        const double row_scale = static_cast<double>(target.rows) / g.rows;
        const double col_scale = static_cast<double>(target.cols) / g.cols;
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c)
                index.entries.push_back({g.condition_id, r * row_scale, c * col_scale});
    }
    return index;
}

RopeTable rope_table(int dim, double base) {
    if (dim < 2 || dim % 2 != 0)
        throw std::invalid_argument("rope_table: dim must be a positive even integer");
    if (base <= 1.0) throw std::invalid_argument("rope_table: base must exceed 1");
    RopeTable table;
    table.dim = dim;
    table.base = base;
    table.freqs.resize(static_cast<size_t>(dim / 2));
    for (int k = 0; k < dim / 2; ++k)
        table.freqs[static_cast<size_t>(k)] = std::pow(base, -2.0 * k / dim);
    return table;
}

}  // namespace tryflow
