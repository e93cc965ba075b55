#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace apam {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Images are rank 3 (channels, height, width), density maps rank 2
/// (height, width) and scalars rank 0. Tensors behave as plain values:
/// copying copies the data.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const;
    bool empty() const noexcept { return data_.empty() && shape_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // Rank-2 and rank-3 element access, unchecked.
    double& at(std::size_t h, std::size_t w) noexcept { return data_[h * shape_[1] + w]; }
    double at(std::size_t h, std::size_t w) const noexcept { return data_[h * shape_[1] + w]; }
    double& at(std::size_t c, std::size_t h, std::size_t w) noexcept {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }
    double at(std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }

    double item() const;
    double sum() const noexcept;
    bool all_finite() const noexcept;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double s) noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Throws ShapeError naming `what` unless `t` has exactly `expected` shape.
void require_shape(const Tensor& t, const Shape& expected, const std::string& what);
void require_rank(const Tensor& t, std::size_t rank, const std::string& what);

/// Checks the ImageTensor contract: rank 3, finite values.
void require_image(const Tensor& t, const std::string& what);

}  // namespace apam
