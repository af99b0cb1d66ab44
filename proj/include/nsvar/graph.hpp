#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nsvar/tensor.hpp"

namespace nsvar {

// Reverse-mode autodiff over an immutable operation graph. Nodes are stored in
// topological order (construction order); forward evaluates them in order,
// backward walks the tape in reverse. Graphs hold no mutable state: parameters
// and data enter through named bindings, so one graph can be reused across
// training steps and shared across threads.

enum class Op : uint8_t {
    Input,
    IndexInput,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    MatMul,
    Transpose,
    Relu,
    Gelu,
    Abs,
    SoftmaxRows,
    SliceCols,
    SliceRows,
    ConcatCols,
    ConcatRows,
    Gather,
    LayerNormRows,
    MeanAll,
    SumAll,
    CeMean,
    HoyerRowsMean,
};

const char* op_name(Op op);

struct Node {
    Op op;
    std::string label;
    std::vector<int> args;
    int index_arg = -1;  // IndexInput node for Gather / CeMean
    double attr = 0.0;   // Scale factor, LayerNorm eps
    int64_t a0 = 0, a1 = 0;
    std::vector<int64_t> shape;
    Tensor constant;
    bool trainable = false;
};

class Graph {
  public:
    const std::vector<Node>& nodes() const { return nodes_; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    int num_nodes() const { return static_cast<int>(nodes_.size()); }

    const std::map<std::string, int>& inputs() const { return inputs_; }
    const std::map<std::string, int>& index_inputs() const { return index_inputs_; }
    const std::map<std::string, int>& outputs() const { return outputs_; }

    int output(const std::string& name) const;

  private:
    friend class GraphBuilder;
    std::vector<Node> nodes_;
    std::map<std::string, int> inputs_;
    std::map<std::string, int> index_inputs_;
    std::map<std::string, int> outputs_;
};

class GraphBuilder {
  public:
    int input(const std::string& name, std::vector<int64_t> shape, bool trainable = false);
    int index_input(const std::string& name, int64_t count);
    int constant(Tensor t, const std::string& label = "");

    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, double s);
    int add_bias(int a, int bias);
    int matmul(int a, int b, const std::string& label = "");
    int transpose(int a);
    int relu(int a);
    int gelu(int a);
    int abs(int a);
    int softmax_rows(int a);
    int slice_cols(int a, int64_t c0, int64_t c1);
    int slice_rows(int a, int64_t r0, int64_t r1);
    int concat_cols(const std::vector<int>& xs);
    int concat_rows(const std::vector<int>& xs);
    int gather(int table, int indices, const std::string& label = "");
    int layer_norm_rows(int x, int gamma, int beta, double eps = 1e-5);
    int mean_all(int a);
    int sum_all(int a);
    int ce_mean(int logits, int targets);
    int hoyer_rows_mean(int a);

    void mark_output(int node, const std::string& name);
    Graph build();

  private:
    int push(Node n);
    const Node& at(int id) const;
    std::string describe(int id) const;
    Graph g_;
};

struct Bindings {
    std::map<std::string, const Tensor*> tensors;
    std::map<std::string, const std::vector<int64_t>*> indices;
};

class Evaluation {
  public:
    Evaluation() = default;
    Evaluation(const Evaluation&) = delete;
    Evaluation& operator=(const Evaluation&) = delete;
    Evaluation(Evaluation&&) = default;
    Evaluation& operator=(Evaluation&&) = default;

    const Tensor& value(int id) const { return *vals_[static_cast<size_t>(id)]; }
    const std::vector<int64_t>& index_value(int id) const;

  private:
    friend Evaluation forward(const Graph&, const Bindings&);
    std::vector<Tensor> owned_;
    std::vector<const Tensor*> vals_;
    std::vector<const std::vector<int64_t>*> idx_;
};

// Pure: evaluates every node; repeated calls with identical bindings are
// bit-identical. Throws Error naming the node on shape mismatch, bad indices,
// or a non-finite intermediate.
Evaluation forward(const Graph& g, const Bindings& b);

// Convenience wrapper returning the marked outputs by name.
std::map<std::string, Tensor> forward_named(const Graph& g, const Bindings& b);

// Gradients of the scalar at `loss` w.r.t. every trainable input, keyed by
// input name. Throws if the loss node is not scalar.
std::map<std::string, Tensor> backward(const Graph& g, const Evaluation& eval, int loss);

// Analytic-vs-central-difference check. `value` must evaluate the same scalar
// the analytic gradient differentiates. Returns
//   max_i |analytic_i - central_i| / max(1, |analytic_i|).
struct ScalarFn {
    std::function<double(const Tensor&)> value;
    std::function<Tensor(const Tensor&)> grad;
};

double grad_check(const ScalarFn& fn, const Tensor& point, double eps);

// Wraps a graph with one trainable input and a scalar output as a ScalarFn.
ScalarFn graph_scalar_fn(const Graph& g, const std::string& input_name,
                         const std::string& output_name);

}  // namespace nsvar
