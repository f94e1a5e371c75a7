#pragma once

// Small dense tensors (scalar / vector / row-major matrix) in double
// precision. Everything in this library is desk-scale, so shapes are
// checked eagerly and storage is a plain contiguous buffer.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qest {

struct Shape {
    enum class Kind : std::uint8_t { Scalar, Vector, Matrix };

    Kind kind = Kind::Scalar;
    std::int32_t rows = 1;
    std::int32_t cols = 1;

    static Shape scalar() { return {Kind::Scalar, 1, 1}; }
    static Shape vector(std::int32_t n) { return {Kind::Vector, n, 1}; }
    static Shape matrix(std::int32_t r, std::int32_t c) { return {Kind::Matrix, r, c}; }

    std::int64_t size() const { return static_cast<std::int64_t>(rows) * cols; }
    bool is_scalar() const { return kind == Kind::Scalar; }

    bool operator==(const Shape&) const = default;

    std::string str() const {
        switch (kind) {
            case Kind::Scalar: return "scalar";
            case Kind::Vector: return "vector(" + std::to_string(rows) + ")";
            case Kind::Matrix:
                return "matrix(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
        }
        return "?";
    }
};

class Tensor {
  public:
    Tensor() : shape_(Shape::scalar()), data_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(shape), data_(static_cast<std::size_t>(shape.size()), fill) {
        if (shape.rows < 1 || shape.cols < 1)
            throw std::invalid_argument("Tensor: non-positive dimension " + shape.str());
    }

    static Tensor scalar(double v) {
        Tensor t(Shape::scalar());
        t.data_[0] = v;
        return t;
    }

    static Tensor vector(std::span<const double> vals) {
        Tensor t(Shape::vector(static_cast<std::int32_t>(vals.size())));
        std::copy(vals.begin(), vals.end(), t.data_.begin());
        return t;
    }

    static Tensor vector(std::initializer_list<double> vals) {
        return vector(std::span<const double>(vals.begin(), vals.size()));
    }

    static Tensor matrix(std::int32_t r, std::int32_t c, std::span<const double> vals) {
        Tensor t(Shape::matrix(r, c));
        if (static_cast<std::int64_t>(vals.size()) != t.shape_.size())
            throw std::invalid_argument("Tensor::matrix: value count does not match shape");
        std::copy(vals.begin(), vals.end(), t.data_.begin());
        return t;
    }

    static Tensor matrix(std::int32_t r, std::int32_t c, std::initializer_list<double> vals) {
        return matrix(r, c, std::span<const double>(vals.begin(), vals.size()));
    }

    const Shape& shape() const { return shape_; }
    std::int64_t size() const { return shape_.size(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    double& at(std::int32_t r, std::int32_t c) {
        check_index(r, c);
        return data_[static_cast<std::size_t>(r) * shape_.cols + c];
    }
    double at(std::int32_t r, std::int32_t c) const {
        check_index(r, c);
        return data_[static_cast<std::size_t>(r) * shape_.cols + c];
    }

    // Value of a scalar tensor.
    double value() const {
        if (!shape_.is_scalar())
            throw std::logic_error("Tensor::value: not a scalar, shape " + shape_.str());
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  private:
    void check_index(std::int32_t r, std::int32_t c) const {
        if (r < 0 || r >= shape_.rows || c < 0 || c >= shape_.cols)
            throw std::out_of_range("Tensor::at: index out of range for " + shape_.str());
    }

    Shape shape_;
    std::vector<double> data_;
};

}  // namespace qest
