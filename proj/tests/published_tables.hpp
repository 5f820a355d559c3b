#pragma once

// Published result tables used as fixtures by the stats and acceptance tests.

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace msgen::fixtures {

inline const std::array<std::string, 4> training_sets = {"MSSEG-2016 train", "3D-MR-MS", "MSSEG-2016 test",
                                                         "ISBI-2015"};

// Cross-dataset Dice, grouped by training set (three test sets each).
inline const std::vector<std::vector<double>> cross_dice = {
    {0.602, 0.523, 0.569},
    {0.544, 0.606, 0.603},
    {0.698, 0.569, 0.623},
    {0.515, 0.516, 0.460},
};

// Printed training-set means.
inline const std::array<double, 4> printed_means = {0.564, 0.584, 0.630, 0.497};

// Rater ablation: rows expert 1, expert 2, union; columns test datasets.
inline const std::vector<std::vector<double>> rater_dice = {
    {0.481, 0.511, 0.394},
    {0.498, 0.506, 0.423},
    {0.515, 0.516, 0.460},
};

// Normalization ablation (quantile, linear), 19 (train, test) rows.
inline const std::vector<std::pair<double, double>> quantile_vs_linear = {
    {0.602, 0.574}, {0.523, 0.510}, {0.569, 0.535}, {0.544, 0.495}, {0.606, 0.549}, {0.603, 0.568}, {0.698, 0.662},
    {0.569, 0.502}, {0.623, 0.553}, {0.515, 0.475}, {0.516, 0.460}, {0.460, 0.418}, {0.624, 0.650}, {0.611, 0.603},
    {0.609, 0.607}, {0.533, 0.459}, {0.581, 0.558}, {0.639, 0.613}, {0.631, 0.631},
};

// Architecture ablation (nested dense, plain skip), 19 rows.
inline const std::vector<std::pair<double, double>> nested_vs_plain = {
    {0.602, 0.596}, {0.523, 0.518}, {0.569, 0.541}, {0.544, 0.518}, {0.606, 0.576}, {0.603, 0.569}, {0.698, 0.676},
    {0.569, 0.529}, {0.623, 0.608}, {0.515, 0.492}, {0.516, 0.494}, {0.460, 0.390}, {0.624, 0.622}, {0.611, 0.594},
    {0.609, 0.592}, {0.533, 0.540}, {0.581, 0.569}, {0.639, 0.626}, {0.631, 0.624},
};

} // namespace msgen::fixtures
