#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace qsci {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

/// Dense row-major float32 array. Value semantics: copies are deep.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
    static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int64_t dim(int axis) const;
    size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    float* ptr() noexcept { return data_.data(); }
    const float* ptr() const noexcept { return data_.data(); }
    const std::vector<float>& vec() const noexcept { return data_; }

    float& operator[](size_t i) { return data_[i]; }
    float operator[](size_t i) const { return data_[i]; }

    /// Multi-index access; index count must equal rank.
    float& at(std::initializer_list<int64_t> idx);
    float at(std::initializer_list<int64_t> idx) const;

    /// Scalar value of a one-element tensor.
    float item() const;

    Tensor reshaped(Shape shape) const;
    void fill(float v);
    bool all_finite() const;

    bool operator==(const Tensor& other) const = default;

private:
    size_t offset(std::initializer_list<int64_t> idx) const;

    Shape shape_;
    std::vector<float> data_;
};

/// Largest absolute elementwise difference; shapes must match.
float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace qsci
