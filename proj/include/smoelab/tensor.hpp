#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace smoelab::diff {

using Shape = std::vector<std::size_t>;

/// Tensor storage. The fixed alignment keeps Eigen's vectorized reductions
/// in the same summation order on every run.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

std::size_t volume(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles with a lazily allocated gradient.
///
/// Tensor is a shared handle: copies alias the same storage, which lets the
/// computation graph keep inputs alive for the backward pass.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(data_); }

    const Shape& shape() const { return data_->shape; }
    std::size_t rank() const { return data_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return data_->shape.at(axis); }
    std::size_t size() const { return data_->values.size(); }
    /// Product of all dimensions but the last.
    std::size_t rows() const;
    /// Size of the last dimension.
    std::size_t cols() const;

    std::span<double> values() { return data_->values; }
    std::span<const double> values() const { return data_->values; }
    double operator[](std::size_t i) const { return data_->values[i]; }
    double item() const;

    bool requires_grad() const { return data_->requires_grad; }
    void set_requires_grad(bool flag) { data_->requires_grad = flag; }

    bool has_grad() const { return !data_->grad.empty(); }
    /// Gradient buffer; allocated (zero-filled) on first access. The handle
    /// is shallow-const: a const Tensor still exposes its storage's gradient.
    std::span<double> grad() const;
    void zero_grad() { data_->grad.clear(); }

    std::int64_t node_id() const { return data_->node_id; }
    void set_node_id(std::int64_t id) { data_->node_id = id; }

    /// Deep copy of values; the copy is a fresh leaf.
    Tensor clone(bool requires_grad = false) const;

    bool same_storage(const Tensor& other) const { return data_ == other.data_; }

private:
    struct Storage {
        Shape shape;
        Buffer values;
        Buffer grad;
        bool requires_grad = false;
        std::int64_t node_id = -1;
    };
    explicit Tensor(std::shared_ptr<Storage> s) : data_(std::move(s)) {}

    std::shared_ptr<Storage> data_;
};

}  // namespace smoelab::diff
