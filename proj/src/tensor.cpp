#include "qsci/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qsci/errors.hpp"

namespace qsci {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw ConfigError("negative extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
        throw ConfigError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                          shape_str(shape_));
    }
}

int64_t Tensor::dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw ConfigError("axis out of range for shape " + shape_str(shape_));
    return shape_[static_cast<size_t>(axis)];
}

size_t Tensor::offset(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw ConfigError("index rank mismatch for " + shape_str(shape_));
    size_t off = 0;
    size_t axis = 0;
    for (auto i : idx) {
        if (i < 0 || i >= shape_[axis]) throw ConfigError("index out of range on axis " + std::to_string(axis));
        off = off * static_cast<size_t>(shape_[axis]) + static_cast<size_t>(i);
        ++axis;
    }
    return off;
}

float& Tensor::at(std::initializer_list<int64_t> idx) { return data_[offset(idx)]; }
float Tensor::at(std::initializer_list<int64_t> idx) const { return data_[offset(idx)]; }

float Tensor::item() const {
    if (data_.size() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != static_cast<int64_t>(numel())) {
        throw ConfigError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ConfigError("shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    float m = 0.0f;
    for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace qsci
