#include "smoelab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "smoelab/errors.hpp"

namespace smoelab::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;
using ConstStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using MutVec = Eigen::Map<Eigen::VectorXd>;

ConstMat as_mat(const Tensor& t, std::size_t rows, std::size_t cols)
{
    return ConstMat(t.values().data(), static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(cols));
}

MutMat as_mat(std::span<double> data, std::size_t rows, std::size_t cols)
{
    return MutMat(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                             " vs " + to_string(b.shape()));
}

void check_finite([[maybe_unused]] const Tensor& t, [[maybe_unused]] const char* op)
{
#ifndef NDEBUG
    for (double v : t.values())
        if (!std::isfinite(v))
            throw ContractError(std::string(op) + " produced a non-finite value");
#endif
}

std::int64_t id(const Tensor& t)
{
    return t.defined() ? t.node_id() : -1;
}

bool wants(const Tensor& t)
{
    return t.defined() && t.requires_grad();
}

}  // namespace

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b)
{
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                             to_string(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    as_mat(out.values(), m, n).noalias() = as_mat(a, m, k) * as_mat(b, k, n);
    check_finite(out, "matmul");
    if (g.needs_grad({&a, &b})) {
        g.record(out, "matmul", {id(a), id(b)}, [a, b, out, m, k, n]() mutable {
            ConstMat gy(out.grad().data(), m, n);
            if (wants(a))
                as_mat(a.grad(), m, k).noalias() += gy * as_mat(b, k, n).transpose();
            if (wants(b))
                as_mat(b.grad(), k, n).noalias() += as_mat(a, m, k).transpose() * gy;
        });
    }
    return out;
}

Tensor linear(Graph& g, const Tensor& x, const Tensor& w, const Tensor& bias)
{
    if (w.rank() != 2 || x.cols() != w.dim(1))
        throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                             to_string(w.shape()));
    const std::size_t m = x.rows(), in = w.dim(1), outd = w.dim(0);
    if (bias.defined() && bias.size() != outd)
        throw DimensionError("linear: bias " + to_string(bias.shape()) + " for weight " +
                             to_string(w.shape()));
    Shape shape = x.shape();
    shape.back() = outd;
    Tensor out = Tensor::zeros(shape);
    auto y = as_mat(out.values(), m, outd);
    y.noalias() = as_mat(x, m, in) * as_mat(w, outd, in).transpose();
    if (bias.defined())
        y.rowwise() += ConstVec(bias.values().data(), outd).transpose();
    check_finite(out, "linear");
    if (g.needs_grad({&x, &w, &bias})) {
        g.record(out, "linear", {id(x), id(w), id(bias)}, [x, w, bias, out, m, in, outd]() mutable {
            ConstMat gy(out.grad().data(), m, outd);
            if (wants(x))
                as_mat(x.grad(), m, in).noalias() += gy * as_mat(w, outd, in);
            if (wants(w))
                as_mat(w.grad(), outd, in).noalias() += gy.transpose() * as_mat(x, m, in);
            if (wants(bias))
                MutVec(bias.grad().data(), outd) += gy.colwise().sum().transpose();
        });
    }
    return out;
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b)
{
    check_same_shape("add", a, b);
    Tensor out = Tensor::zeros(a.shape());
    auto y = out.values();
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a[i] + b[i];
    if (g.needs_grad({&a, &b})) {
        g.record(out, "add", {id(a), id(b)}, [a, b, out]() mutable {
            auto gy = out.grad();
            for (const Tensor* t : {&a, &b}) {
                if (!wants(*t))
                    continue;
                auto gt = t->grad();
                for (std::size_t i = 0; i < gy.size(); ++i)
                    gt[i] += gy[i];
            }
        });
    }
    return out;
}

Tensor sub(Graph& g, const Tensor& a, const Tensor& b)
{
    check_same_shape("sub", a, b);
    Tensor out = Tensor::zeros(a.shape());
    auto y = out.values();
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a[i] - b[i];
    if (g.needs_grad({&a, &b})) {
        g.record(out, "sub", {id(a), id(b)}, [a, b, out]() mutable {
            auto gy = out.grad();
            if (wants(a)) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < gy.size(); ++i)
                    ga[i] += gy[i];
            }
            if (wants(b)) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < gy.size(); ++i)
                    gb[i] -= gy[i];
            }
        });
    }
    return out;
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b)
{
    check_same_shape("mul", a, b);
    Tensor out = Tensor::zeros(a.shape());
    auto y = out.values();
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a[i] * b[i];
    check_finite(out, "mul");
    if (g.needs_grad({&a, &b})) {
        g.record(out, "mul", {id(a), id(b)}, [a, b, out]() mutable {
            auto gy = out.grad();
            if (wants(a)) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < gy.size(); ++i)
                    ga[i] += gy[i] * b[i];
            }
            if (wants(b)) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < gy.size(); ++i)
                    gb[i] += gy[i] * a[i];
            }
        });
    }
    return out;
}

Tensor scale(Graph& g, const Tensor& a, double factor)
{
    Tensor out = Tensor::zeros(a.shape());
    auto y = out.values();
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a[i] * factor;
    if (g.needs_grad({&a})) {
        g.record(out, "scale", {id(a)}, [a, out, factor]() mutable {
            auto gy = out.grad();
            auto ga = a.grad();
            for (std::size_t i = 0; i < gy.size(); ++i)
                ga[i] += gy[i] * factor;
        });
    }
    return out;
}

Tensor relu(Graph& g, const Tensor& x)
{
    Tensor out = Tensor::zeros(x.shape());
    auto y = out.values();
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = x[i] > 0.0 ? x[i] : 0.0;
    if (g.needs_grad({&x})) {
        g.record(out, "relu", {id(x)}, [x, out]() mutable {
            auto gy = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < gy.size(); ++i)
                if (x[i] > 0.0)
                    gx[i] += gy[i];
        });
    }
    return out;
}

Tensor softmax(Graph& g, const Tensor& x)
{
    const std::size_t rows = x.rows(), n = x.cols();
    Tensor out = Tensor::zeros(x.shape());
    auto y = out.values();
    auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n;
        double* yr = y.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            total += yr[j];
        }
        for (std::size_t j = 0; j < n; ++j)
            yr[j] /= total;
    }
    if (g.needs_grad({&x})) {
        g.record(out, "softmax", {id(x)}, [x, out, rows, n]() mutable {
            auto gy = out.grad();
            auto gx = x.grad();
            auto yv = out.values();
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += gy[r * n + j] * yv[r * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    gx[r * n + j] += yv[r * n + j] * (gy[r * n + j] - dot);
            }
        });
    }
    return out;
}

Tensor log_softmax(Graph& g, const Tensor& x)
{
    const std::size_t rows = x.rows(), n = x.cols();
    Tensor out = Tensor::zeros(x.shape());
    auto y = out.values();
    auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            total += std::exp(xr[j] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < n; ++j)
            y[r * n + j] = xr[j] - lse;
    }
    if (g.needs_grad({&x})) {
        g.record(out, "log_softmax", {id(x)}, [x, out, rows, n]() mutable {
            auto gy = out.grad();
            auto gx = x.grad();
            auto yv = out.values();
            for (std::size_t r = 0; r < rows; ++r) {
                double total = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    total += gy[r * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    gx[r * n + j] += gy[r * n + j] - std::exp(yv[r * n + j]) * total;
            }
        });
    }
    return out;
}

Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& offset)
{
    constexpr double eps = 1e-5;
    const std::size_t rows = x.rows(), d = x.cols();
    if (gain.size() != d || offset.size() != d)
        throw DimensionError("layer_norm: gain/offset " + to_string(gain.shape()) + "/" +
                             to_string(offset.shape()) + " for input " + to_string(x.shape()));
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> xhat(x.size());
    std::vector<double> rstd(rows);
    auto y = out.values();
    auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xr[j] - mu) * rstd[r];
            y[r * d + j] = xhat[r * d + j] * gain[j] + offset[j];
        }
    }
    if (g.needs_grad({&x, &gain, &offset})) {
        g.record(out, "layer_norm", {id(x), id(gain), id(offset)},
                 [x, gain, offset, out, xhat = std::move(xhat), rstd = std::move(rstd), rows,
                  d]() mutable {
                     auto gy = out.grad();
                     if (wants(gain)) {
                         auto gg = gain.grad();
                         for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < d; ++j)
                                 gg[j] += gy[r * d + j] * xhat[r * d + j];
                     }
                     if (wants(offset)) {
                         auto go = offset.grad();
                         for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < d; ++j)
                                 go[j] += gy[r * d + j];
                     }
                     if (wants(x)) {
                         auto gx = x.grad();
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                             double mean_g = 0.0, mean_gx = 0.0;
                             for (std::size_t j = 0; j < d; ++j) {
                                 const double gh = gy[r * d + j] * gain[j];
                                 mean_g += gh;
                                 mean_gx += gh * xhat[r * d + j];
                             }
                             mean_g *= inv_d;
                             mean_gx *= inv_d;
                             for (std::size_t j = 0; j < d; ++j) {
                                 const double gh = gy[r * d + j] * gain[j];
                                 gx[r * d + j] +=
                                     rstd[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
                             }
                         }
                     }
                 });
    }
    return out;
}

Tensor cross_entropy(Graph& g, const Tensor& logits, std::span<const std::int32_t> targets)
{
    if (logits.rank() != 2 || logits.dim(0) != targets.size())
        throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " for " +
                             std::to_string(targets.size()) + " targets");
    const std::size_t rows = logits.dim(0), v = logits.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
            throw IndexError("cross_entropy: target " + std::to_string(targets[r]) +
                             " outside [0, " + std::to_string(v) + ")");
    std::vector<double> probs(logits.size());
    auto lv = logits.values();
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* lr = lv.data() + r * v;
        const double mx = *std::max_element(lr, lr + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[r * v + j] = std::exp(lr[j] - mx);
            z += probs[r * v + j];
        }
        for (std::size_t j = 0; j < v; ++j)
            probs[r * v + j] /= z;
        total += mx + std::log(z) - lr[targets[r]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(rows));
    if (g.needs_grad({&logits})) {
        std::vector<std::int32_t> tgt(targets.begin(), targets.end());
        g.record(out, "cross_entropy", {id(logits)},
                 [logits, out, probs = std::move(probs), tgt = std::move(tgt), rows, v]() mutable {
                     const double gscale = out.grad()[0] / static_cast<double>(rows);
                     auto gl = logits.grad();
                     for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < v; ++j)
                             gl[r * v + j] += gscale * probs[r * v + j];
                         gl[r * v + static_cast<std::size_t>(tgt[r])] -= gscale;
                     }
                 });
    }
    return out;
}

Tensor dropout(Graph& g, const Tensor& x, double rate, bool training, Rng& rng)
{
    if (!(rate >= 0.0 && rate < 1.0))
        throw ContractError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0)
        return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.size());
    for (double& m : mask)
        m = rng.uniform() >= rate ? keep_scale : 0.0;
    Tensor out = Tensor::zeros(x.shape());
    auto y = out.values();
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = x[i] * mask[i];
    if (g.needs_grad({&x})) {
        g.record(out, "dropout", {id(x)}, [x, out, mask = std::move(mask)]() mutable {
            auto gy = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < gy.size(); ++i)
                gx[i] += gy[i] * mask[i];
        });
    }
    return out;
}

Tensor sum(Graph& g, const Tensor& x)
{
    double total = 0.0;
    for (double v : x.values())
        total += v;
    Tensor out = Tensor::scalar(total);
    if (g.needs_grad({&x})) {
        g.record(out, "sum", {id(x)}, [x, out]() mutable {
            const double gy = out.grad()[0];
            for (double& v : x.grad())
                v += gy;
        });
    }
    return out;
}

Tensor mean(Graph& g, const Tensor& x)
{
    return scale(g, sum(g, x), 1.0 / static_cast<double>(x.size()));
}

Tensor embedding(Graph& g, const Tensor& table, std::span<const std::int32_t> ids)
{
    if (table.rank() != 2)
        throw DimensionError("embedding: table must be rank 2, got " + to_string(table.shape()));
    const std::size_t v = table.dim(0), d = table.dim(1), n = ids.size();
    for (auto t : ids)
        if (t < 0 || static_cast<std::size_t>(t) >= v)
            throw IndexError("embedding: id " + std::to_string(t) + " outside [0, " +
                             std::to_string(v) + ")");
    Tensor out = Tensor::zeros({n, d});
    auto y = out.values();
    auto tv = table.values();
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
    if (g.needs_grad({&table})) {
        std::vector<std::int32_t> idv(ids.begin(), ids.end());
        g.record(out, "embedding", {id(table)}, [table, out, idv = std::move(idv), d]() mutable {
            auto gy = out.grad();
            auto gt = table.grad();
            for (std::size_t i = 0; i < idv.size(); ++i) {
                double* row = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                for (std::size_t j = 0; j < d; ++j)
                    row[j] += gy[i * d + j];
            }
        });
    }
    return out;
}

Tensor reshape(Graph& g, const Tensor& x, Shape shape)
{
    return slice(g, x, 0, std::move(shape));
}

Tensor slice(Graph& g, const Tensor& x, std::size_t offset, Shape shape)
{
    const std::size_t count = volume(shape);
    if (offset + count > x.size())
        throw DimensionError("slice: range [" + std::to_string(offset) + ", " +
                             std::to_string(offset + count) + ") exceeds " + to_string(x.shape()));
    Tensor out = Tensor::zeros(std::move(shape));
    std::copy_n(x.values().data() + offset, count, out.values().data());
    if (g.needs_grad({&x})) {
        g.record(out, "slice", {id(x)}, [x, out, offset, count]() mutable {
            auto gy = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < count; ++i)
                gx[offset + i] += gy[i];
        });
    }
    return out;
}

Tensor column_mean(Graph& g, const Tensor& x)
{
    const std::size_t rows = x.rows(), n = x.cols();
    Tensor out = Tensor::zeros({n});
    auto y = out.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
            y[j] += x[r * n + j];
    for (double& v : y)
        v /= static_cast<double>(rows);
    if (g.needs_grad({&x})) {
        g.record(out, "column_mean", {id(x)}, [x, out, rows, n]() mutable {
            auto gy = out.grad();
            auto gx = x.grad();
            const double inv = 1.0 / static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j)
                    gx[r * n + j] += gy[j] * inv;
        });
    }
    return out;
}

Tensor segment_mean(Graph& g, const Tensor& x, std::size_t batch, std::size_t seq_len,
                    std::span<const std::size_t> lengths)
{
    if (x.rows() != batch * seq_len || lengths.size() != batch)
        throw DimensionError("segment_mean: input " + to_string(x.shape()) + " for batch " +
                             std::to_string(batch) + " x " + std::to_string(seq_len));
    for (auto len : lengths)
        if (len == 0 || len > seq_len)
            throw ContractError("segment_mean: segment length " + std::to_string(len) +
                                " outside [1, " + std::to_string(seq_len) + "]");
    const std::size_t d = x.cols();
    Tensor out = Tensor::zeros({batch, d});
    auto y = out.values();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < lengths[b]; ++t)
            for (std::size_t j = 0; j < d; ++j)
                y[b * d + j] += x[(b * seq_len + t) * d + j];
        for (std::size_t j = 0; j < d; ++j)
            y[b * d + j] /= static_cast<double>(lengths[b]);
    }
    if (g.needs_grad({&x})) {
        std::vector<std::size_t> lens(lengths.begin(), lengths.end());
        g.record(out, "segment_mean", {id(x)},
                 [x, out, lens = std::move(lens), batch, seq_len, d]() mutable {
                     auto gy = out.grad();
                     auto gx = x.grad();
                     for (std::size_t b = 0; b < batch; ++b) {
                         const double inv = 1.0 / static_cast<double>(lens[b]);
                         for (std::size_t t = 0; t < lens[b]; ++t)
                             for (std::size_t j = 0; j < d; ++j)
                                 gx[(b * seq_len + t) * d + j] += gy[b * d + j] * inv;
                     }
                 });
    }
    return out;
}

Tensor causal_attention(Graph& g, const Tensor& qkv, std::size_t batch, std::size_t seq_len,
                        std::size_t heads)
{
    if (qkv.rank() != 2 || qkv.dim(0) != batch * seq_len || qkv.dim(1) % (3 * heads) != 0)
        throw DimensionError("causal_attention: packed input " + to_string(qkv.shape()) +
                             " for batch " + std::to_string(batch) + ", length " +
                             std::to_string(seq_len) + ", heads " + std::to_string(heads));
    const std::size_t d = qkv.dim(1) / 3, dh = d / heads, T = seq_len;
    const auto Ti = static_cast<Eigen::Index>(T), dhi = static_cast<Eigen::Index>(dh);
    const auto in_stride = static_cast<Eigen::Index>(3 * d), out_stride = static_cast<Eigen::Index>(d);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor out = Tensor::zeros({batch * T, d});
    Buffer probs(batch * heads * T * T);
    RowMat scores(Ti, Ti);
    const double* base = qkv.values().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const double* q = base + b * T * 3 * d + h * dh;
            ConstStrided Q(q, Ti, dhi, Eigen::OuterStride<>(in_stride));
            ConstStrided K(q + d, Ti, dhi, Eigen::OuterStride<>(in_stride));
            ConstStrided V(q + 2 * d, Ti, dhi, Eigen::OuterStride<>(in_stride));
            scores.noalias() = Q * K.transpose();
            MutMat P(probs.data() + (b * heads + h) * T * T, Ti, Ti);
            for (std::size_t i = 0; i < T; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j)
                    mx = std::max(mx, scores(i, j) * inv_sqrt);
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    P(i, j) = std::exp(scores(i, j) * inv_sqrt - mx);
                    z += P(i, j);
                }
                for (std::size_t j = 0; j <= i; ++j)
                    P(i, j) /= z;
                for (std::size_t j = i + 1; j < T; ++j)
                    P(i, j) = 0.0;
            }
            MutStrided O(out.values().data() + b * T * d + h * dh, Ti, dhi,
                         Eigen::OuterStride<>(out_stride));
            O.noalias() = P * V;
        }
    }
    check_finite(out, "causal_attention");
    if (g.needs_grad({&qkv})) {
        g.record(out, "causal_attention", {id(qkv)},
                 [qkv, out, probs = std::move(probs), batch, heads, T, d, dh, inv_sqrt]() mutable {
                     const auto Ti = static_cast<Eigen::Index>(T);
                     const auto dhi = static_cast<Eigen::Index>(dh);
                     const auto in_stride = static_cast<Eigen::Index>(3 * d);
                     const auto out_stride = static_cast<Eigen::Index>(d);
                     const double* base = qkv.values().data();
                     double* gbase = qkv.grad().data();
                     const double* gout = out.grad().data();
                     RowMat dP(Ti, Ti);
                     for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t h = 0; h < heads; ++h) {
                             const std::size_t offset = b * T * 3 * d + h * dh;
                             ConstStrided Q(base + offset, Ti, dhi, Eigen::OuterStride<>(in_stride));
                             ConstStrided K(base + offset + d, Ti, dhi,
                                            Eigen::OuterStride<>(in_stride));
                             ConstStrided V(base + offset + 2 * d, Ti, dhi,
                                            Eigen::OuterStride<>(in_stride));
                             MutStrided dQ(gbase + offset, Ti, dhi, Eigen::OuterStride<>(in_stride));
                             MutStrided dK(gbase + offset + d, Ti, dhi,
                                           Eigen::OuterStride<>(in_stride));
                             MutStrided dV(gbase + offset + 2 * d, Ti, dhi,
                                           Eigen::OuterStride<>(in_stride));
                             ConstStrided dO(gout + b * T * d + h * dh, Ti, dhi,
                                             Eigen::OuterStride<>(out_stride));
                             ConstMat P(probs.data() + (b * heads + h) * T * T, Ti, Ti);
                             dV.noalias() += P.transpose() * dO;
                             dP.noalias() = dO * V.transpose();
                             for (Eigen::Index i = 0; i < Ti; ++i) {
                                 double dot = 0.0;
                                 for (Eigen::Index j = 0; j <= i; ++j)
                                     dot += dP(i, j) * P(i, j);
                                 for (Eigen::Index j = 0; j <= i; ++j)
                                     dP(i, j) = P(i, j) * (dP(i, j) - dot) * inv_sqrt;
                                 for (Eigen::Index j = i + 1; j < Ti; ++j)
                                     dP(i, j) = 0.0;
                             }
                             dQ.noalias() += dP * K;
                             dK.noalias() += dP.transpose() * Q;
                         }
                     }
                 });
    }
    return out;
}

}  // namespace smoelab::diff
