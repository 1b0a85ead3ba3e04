#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "smoelab/graph.hpp"
#include "smoelab/rng.hpp"
#include "smoelab/tensor.hpp"

namespace smoelab::diff {

// Every op computes its forward value eagerly and, when the graph is
// recording and some input requires a gradient, appends a backward record.
// Values are computed by the same code path either way, so recorded and
// unrecorded evaluation agree bitwise.

/// a[m×k] · b[k×n].
Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);

/// x[...×in] · wᵀ + bias, with w[out×in] and bias[out] (bias may be undefined).
Tensor linear(Graph& g, const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& a, double factor);

Tensor relu(Graph& g, const Tensor& x);

/// Softmax over the last axis, max-subtracted.
Tensor softmax(Graph& g, const Tensor& x);
Tensor log_softmax(Graph& g, const Tensor& x);

/// Per-row normalization over the last axis (population variance, eps 1e-5 in
/// the square root) followed by gain/offset.
Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& offset);

/// Mean over rows of −log softmax(logits)[target]. logits are [B×V].
Tensor cross_entropy(Graph& g, const Tensor& logits, std::span<const std::int32_t> targets);

/// Inverted dropout. Identity when !training or rate == 0 (no draws consumed).
Tensor dropout(Graph& g, const Tensor& x, double rate, bool training, Rng& rng);

Tensor sum(Graph& g, const Tensor& x);
Tensor mean(Graph& g, const Tensor& x);

/// Rows of table[V×d] selected by ids; result is [n×d].
Tensor embedding(Graph& g, const Tensor& table, std::span<const std::int32_t> ids);

/// Element copy with a new shape of equal volume.
Tensor reshape(Graph& g, const Tensor& x, Shape shape);

/// Flat sub-range [offset, offset+count) reshaped to `shape`.
Tensor slice(Graph& g, const Tensor& x, std::size_t offset, Shape shape);

/// Mean of each column over rows: [M×N] -> [N].
Tensor column_mean(Graph& g, const Tensor& x);

/// Mean of the first lengths[b] rows of each length-T segment of x[B·T×d].
Tensor segment_mean(Graph& g, const Tensor& x, std::size_t batch, std::size_t seq_len,
                    std::span<const std::size_t> lengths);

/// Multi-head causal self-attention over packed projections.
///
/// qkv is [B·T × 3d] holding Q, K and V side by side; output is [B·T × d].
/// Position i attends to positions ≤ i only.
Tensor causal_attention(Graph& g, const Tensor& qkv, std::size_t batch, std::size_t seq_len,
                        std::size_t heads);

}  // namespace smoelab::diff
