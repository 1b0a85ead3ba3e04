#include "smoelab/tensor.hpp"

#include <functional>
#include <numeric>

#include "smoelab/errors.hpp"

namespace smoelab::diff {

std::size_t volume(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape)
{
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0)
            out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

namespace {

void check_shape(const Shape& shape)
{
    for (auto d : shape)
        if (d == 0)
            throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad)
{
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad)
{
    check_shape(shape);
    auto s = std::make_shared<Storage>();
    s->values.assign(volume(shape), value);
    s->shape = std::move(shape);
    s->requires_grad = requires_grad;
    return Tensor(std::move(s));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad)
{
    check_shape(shape);
    if (volume(shape) != values.size())
        throw DimensionError("shape " + to_string(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    auto s = std::make_shared<Storage>();
    s->shape = std::move(shape);
    s->values.assign(values.begin(), values.end());
    s->requires_grad = requires_grad;
    return Tensor(std::move(s));
}

Tensor Tensor::scalar(double value, bool requires_grad)
{
    return from({1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const
{
    return size() / cols();
}

std::size_t Tensor::cols() const
{
    return data_->shape.back();
}

double Tensor::item() const
{
    if (size() != 1)
        throw ContractError("item() on tensor of shape " + to_string(shape()));
    return data_->values[0];
}

std::span<double> Tensor::grad() const
{
    if (data_->grad.empty())
        data_->grad.assign(data_->values.size(), 0.0);
    return data_->grad;
}

Tensor Tensor::clone(bool requires_grad) const
{
    auto s = std::make_shared<Storage>(*data_);
    s->grad.clear();
    s->requires_grad = requires_grad;
    s->node_id = -1;
    return Tensor(std::move(s));
}

}  // namespace smoelab::diff
