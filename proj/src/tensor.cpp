#include "apam/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace apam {

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + to_string(shape_));
    }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape_));
    }
    return shape_[axis];
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("item() needs a single-element tensor, got " + to_string(shape_));
    }
    return data_[0];
}

double Tensor::sum() const noexcept {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

bool Tensor::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor& Tensor::operator+=(const Tensor& other) {
    if (other.shape_ != shape_) {
        throw ShapeError("cannot add " + to_string(other.shape_) + " to " + to_string(shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
}

void require_shape(const Tensor& t, const Shape& expected, const std::string& what) {
    if (t.shape() != expected) {
        throw ShapeError(what + ": expected shape " + to_string(expected) + ", got " +
                         to_string(t.shape()));
    }
}

void require_rank(const Tensor& t, std::size_t rank, const std::string& what) {
    if (t.rank() != rank) {
        throw ShapeError(what + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
    }
}

void require_image(const Tensor& t, const std::string& what) {
    require_rank(t, 3, what);
    if (!t.all_finite()) throw Error(what + ": image contains non-finite values");
}

}  // namespace apam
