#include "fbmtc/grid.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fbmtc {

TimeGrid TimeGrid::uniform(double horizon, std::size_t steps) {
    if (!(horizon > 0.0))
        throw std::invalid_argument("TimeGrid: horizon must be positive");
    if (steps < 1)
        throw std::invalid_argument("TimeGrid: need at least one step");
    std::vector<double> pts(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i)
        pts[i] = horizon * static_cast<double>(i) / static_cast<double>(steps);
    pts.front() = 0.0;
    pts.back() = horizon;
    return TimeGrid(std::move(pts));
}

TimeGrid TimeGrid::from_points(std::vector<double> points) {
    if (points.size() < 2)
        throw std::invalid_argument("TimeGrid: need at least two points");
    if (points.front() != 0.0)
        throw std::invalid_argument("TimeGrid: first point must be 0");
    for (std::size_t i = 1; i < points.size(); ++i) {
        if (!(points[i] > points[i - 1]))
            throw std::invalid_argument(
                "TimeGrid: points must be strictly increasing (index " +
                std::to_string(i) + ")");
    }
    if (!(points.back() > 0.0))
        throw std::invalid_argument("TimeGrid: horizon must be positive");
    return TimeGrid(std::move(points));
}

bool TimeGrid::equally_spaced(double rtol) const {
    const double step = points_[1] - points_[0];
    for (std::size_t i = 2; i < points_.size(); ++i) {
        const double d = points_[i] - points_[i - 1];
        if (std::abs(d - step) > rtol * std::max(step, d)) return false;
    }
    return true;
}

double TimeGrid::dt() const {
    if (!equally_spaced())
        throw std::invalid_argument("TimeGrid: grid is not equally spaced");
    return horizon() / static_cast<double>(steps());
}

}  // namespace fbmtc
