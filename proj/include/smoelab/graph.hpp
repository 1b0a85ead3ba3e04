#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "smoelab/tensor.hpp"

namespace smoelab::diff {

/// Append-only tape of operation records for reverse-mode differentiation.
///
/// Ops call record() after computing their output. The output is marked as
/// requiring a gradient iff any input does; otherwise, or when recording is
/// off, nothing is stored. backward() runs the stored closures in strict
/// reverse append order, each accumulating into its inputs' gradients.
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = default;
    Graph& operator=(Graph&&) = default;

    bool recording() const { return recording_; }

    /// True if an op over these inputs needs a backward record.
    bool needs_grad(std::initializer_list<const Tensor*> inputs) const;

    void record(Tensor& output, std::string op, std::vector<std::int64_t> inputs,
                std::function<void()> backward);

    void backward(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }
    const std::string& op_name(std::size_t i) const { return nodes_.at(i).op; }

    /// Node ids visited by the last backward(), in visiting order.
    const std::vector<std::int64_t>& last_traversal() const { return traversal_; }

private:
    struct Node {
        std::string op;
        std::vector<std::int64_t> inputs;
        Tensor output;
        std::function<void()> backward;
    };
    bool recording_;
    std::vector<Node> nodes_;
    std::vector<std::int64_t> traversal_;
};

}  // namespace smoelab::diff
