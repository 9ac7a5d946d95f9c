#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fbmtc {

// Discretisation of [0, T]: strictly increasing points, first 0, last T.
class TimeGrid {
public:
    static TimeGrid uniform(double horizon, std::size_t steps);
    static TimeGrid from_points(std::vector<double> points);

    std::size_t size() const { return points_.size(); }
    std::size_t steps() const { return points_.size() - 1; }
    double horizon() const { return points_.back(); }
    double operator[](std::size_t i) const { return points_[i]; }
    std::span<const double> points() const { return points_; }

    bool equally_spaced(double rtol = 1e-9) const;
    // Step size; throws if the grid is not equally spaced.
    double dt() const;

    bool operator==(const TimeGrid& other) const {
        return points_ == other.points_;
    }

private:
    explicit TimeGrid(std::vector<double> points)
        : points_(std::move(points)) {}

    std::vector<double> points_;
};

}  // namespace fbmtc
