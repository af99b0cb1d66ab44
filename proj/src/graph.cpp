#include "nsvar/graph.hpp"

#include <cmath>
#include <cstring>

#include "nsvar/kernels.hpp"

namespace nsvar {

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::IndexInput: return "index_input";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::AddBias: return "add_bias";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Relu: return "relu";
        case Op::Gelu: return "gelu";
        case Op::Abs: return "abs";
        case Op::SoftmaxRows: return "softmax_rows";
        case Op::SliceCols: return "slice_cols";
        case Op::SliceRows: return "slice_rows";
        case Op::ConcatCols: return "concat_cols";
        case Op::ConcatRows: return "concat_rows";
        case Op::Gather: return "gather";
        case Op::LayerNormRows: return "layer_norm_rows";
        case Op::MeanAll: return "mean_all";
        case Op::SumAll: return "sum_all";
        case Op::CeMean: return "ce_mean";
        case Op::HoyerRowsMean: return "hoyer_rows_mean";
    }
    return "?";
}

int Graph::output(const std::string& name) const {
    auto it = outputs_.find(name);
    require(it != outputs_.end(), "graph: no output named '" + name + "'");
    return it->second;
}

// ---------------------------------------------------------------- builder

int GraphBuilder::push(Node n) {
    int id = static_cast<int>(g_.nodes_.size());
    if (n.label.empty()) n.label = std::string(op_name(n.op)) + "#" + std::to_string(id);
    g_.nodes_.push_back(std::move(n));
    return id;
}

const Node& GraphBuilder::at(int id) const {
    require(id >= 0 && id < static_cast<int>(g_.nodes_.size()), "graph builder: bad node id");
    return g_.nodes_[static_cast<size_t>(id)];
}

std::string GraphBuilder::describe(int id) const { return at(id).label; }

int GraphBuilder::input(const std::string& name, std::vector<int64_t> shape, bool trainable) {
    require(!g_.inputs_.count(name), "graph builder: duplicate input '" + name + "'");
    Node n;
    n.op = Op::Input;
    n.label = name;
    n.shape = std::move(shape);
    n.trainable = trainable;
    Tensor::numel_of(n.shape);
    int id = push(std::move(n));
    g_.inputs_[name] = id;
    return id;
}

int GraphBuilder::index_input(const std::string& name, int64_t count) {
    require(count > 0, "graph builder: index input needs positive count");
    require(!g_.index_inputs_.count(name), "graph builder: duplicate index input '" + name + "'");
    Node n;
    n.op = Op::IndexInput;
    n.label = name;
    n.a0 = count;
    int id = push(std::move(n));
    g_.index_inputs_[name] = id;
    return id;
}

int GraphBuilder::constant(Tensor t, const std::string& label) {
    Node n;
    n.op = Op::Constant;
    n.label = label;
    n.shape = t.shape;
    n.constant = std::move(t);
    return push(std::move(n));
}

int GraphBuilder::add(int a, int b) {
    require(at(a).shape == at(b).shape,
            "graph builder: add shape mismatch at " + describe(a) + " / " + describe(b));
    Node n;
    n.op = Op::Add;
    n.args = {a, b};
    n.shape = at(a).shape;
    return push(std::move(n));
}

int GraphBuilder::sub(int a, int b) {
    require(at(a).shape == at(b).shape,
            "graph builder: sub shape mismatch at " + describe(a) + " / " + describe(b));
    Node n;
    n.op = Op::Sub;
    n.args = {a, b};
    n.shape = at(a).shape;
    return push(std::move(n));
}

int GraphBuilder::mul(int a, int b) {
    require(at(a).shape == at(b).shape,
            "graph builder: mul shape mismatch at " + describe(a) + " / " + describe(b));
    Node n;
    n.op = Op::Mul;
    n.args = {a, b};
    n.shape = at(a).shape;
    return push(std::move(n));
}

int GraphBuilder::scale(int a, double s) {
    Node n;
    n.op = Op::Scale;
    n.args = {a};
    n.attr = s;
    n.shape = at(a).shape;
    return push(std::move(n));
}

int GraphBuilder::add_bias(int a, int bias) {
    require(at(a).shape.size() == 2 && at(bias).shape.size() == 1 &&
                at(a).shape[1] == at(bias).shape[0],
            "graph builder: add_bias shape mismatch at " + describe(a));
    Node n;
    n.op = Op::AddBias;
    n.args = {a, bias};
    n.shape = at(a).shape;
    return push(std::move(n));
}

int GraphBuilder::matmul(int a, int b, const std::string& label) {
    require(at(a).shape.size() == 2 && at(b).shape.size() == 2 && at(a).shape[1] == at(b).shape[0],
            "graph builder: matmul shape mismatch at " + (label.empty() ? describe(a) : label));
    Node n;
    n.op = Op::MatMul;
    n.label = label;
    n.args = {a, b};
    n.shape = {at(a).shape[0], at(b).shape[1]};
    return push(std::move(n));
}

int GraphBuilder::transpose(int a) {
    require(at(a).shape.size() == 2, "graph builder: transpose expects 2-d at " + describe(a));
    Node n;
    n.op = Op::Transpose;
    n.args = {a};
    n.shape = {at(a).shape[1], at(a).shape[0]};
    return push(std::move(n));
}

int GraphBuilder::relu(int a) {
    Node n;
    n.op = Op::Relu;
    n.args = {a};
    n.shape = at(a).shape;
    return push(std::move(n));
}

int GraphBuilder::gelu(int a) {
    Node n;
    n.op = Op::Gelu;
    n.args = {a};
    n.shape = at(a).shape;
    return push(std::move(n));
}

int GraphBuilder::abs(int a) {
    Node n;
    n.op = Op::Abs;
    n.args = {a};
    n.shape = at(a).shape;
    return push(std::move(n));
}

int GraphBuilder::softmax_rows(int a) {
    require(at(a).shape.size() == 2, "graph builder: softmax_rows expects 2-d at " + describe(a));
    Node n;
    n.op = Op::SoftmaxRows;
    n.args = {a};
    n.shape = at(a).shape;
    return push(std::move(n));
}

int GraphBuilder::slice_cols(int a, int64_t c0, int64_t c1) {
    require(at(a).shape.size() == 2 && 0 <= c0 && c0 < c1 && c1 <= at(a).shape[1],
            "graph builder: bad slice_cols bounds at " + describe(a));
    Node n;
    n.op = Op::SliceCols;
    n.args = {a};
    n.a0 = c0;
    n.a1 = c1;
    n.shape = {at(a).shape[0], c1 - c0};
    return push(std::move(n));
}

int GraphBuilder::slice_rows(int a, int64_t r0, int64_t r1) {
    require(at(a).shape.size() == 2 && 0 <= r0 && r0 < r1 && r1 <= at(a).shape[0],
            "graph builder: bad slice_rows bounds at " + describe(a));
    Node n;
    n.op = Op::SliceRows;
    n.args = {a};
    n.a0 = r0;
    n.a1 = r1;
    n.shape = {r1 - r0, at(a).shape[1]};
    return push(std::move(n));
}

int GraphBuilder::concat_cols(const std::vector<int>& xs) {
    require(!xs.empty(), "graph builder: concat_cols of nothing");
    int64_t rows = at(xs[0]).shape[0];
    int64_t cols = 0;
    for (int x : xs) {
        require(at(x).shape.size() == 2 && at(x).shape[0] == rows,
                "graph builder: concat_cols row mismatch at " + describe(x));
        cols += at(x).shape[1];
    }
    Node n;
    n.op = Op::ConcatCols;
    n.args = xs;
    n.shape = {rows, cols};
    return push(std::move(n));
}

int GraphBuilder::concat_rows(const std::vector<int>& xs) {
    require(!xs.empty(), "graph builder: concat_rows of nothing");
    int64_t cols = at(xs[0]).shape[at(xs[0]).shape.size() - 1];
    int64_t rows = 0;
    for (int x : xs) {
        require(at(x).shape.size() == 2 && at(x).shape[1] == cols,
                "graph builder: concat_rows col mismatch at " + describe(x));
        rows += at(x).shape[0];
    }
    Node n;
    n.op = Op::ConcatRows;
    n.args = xs;
    n.shape = {rows, cols};
    return push(std::move(n));
}

int GraphBuilder::gather(int table, int indices, const std::string& label) {
    require(at(table).shape.size() == 2, "graph builder: gather table must be 2-d");
    require(at(indices).op == Op::IndexInput, "graph builder: gather needs an index input");
    Node n;
    n.op = Op::Gather;
    n.label = label;
    n.args = {table};
    n.index_arg = indices;
    n.shape = {at(indices).a0, at(table).shape[1]};
    return push(std::move(n));
}

int GraphBuilder::layer_norm_rows(int x, int gamma, int beta, double eps) {
    require(at(x).shape.size() == 2, "graph builder: layer_norm expects 2-d at " + describe(x));
    require(at(gamma).shape == std::vector<int64_t>{at(x).shape[1]} &&
                at(beta).shape == std::vector<int64_t>{at(x).shape[1]},
            "graph builder: layer_norm affine shape mismatch at " + describe(x));
    Node n;
    n.op = Op::LayerNormRows;
    n.args = {x, gamma, beta};
    n.attr = eps;
    n.shape = at(x).shape;
    return push(std::move(n));
}

int GraphBuilder::mean_all(int a) {
    Node n;
    n.op = Op::MeanAll;
    n.args = {a};
    n.shape = {1};
    return push(std::move(n));
}

int GraphBuilder::sum_all(int a) {
    Node n;
    n.op = Op::SumAll;
    n.args = {a};
    n.shape = {1};
    return push(std::move(n));
}

int GraphBuilder::ce_mean(int logits, int targets) {
    require(at(logits).shape.size() == 2, "graph builder: ce_mean expects 2-d logits");
    require(at(targets).op == Op::IndexInput && at(targets).a0 == at(logits).shape[0],
            "graph builder: ce_mean target count mismatch at " + describe(logits));
    Node n;
    n.op = Op::CeMean;
    n.args = {logits};
    n.index_arg = targets;
    n.shape = {1};
    return push(std::move(n));
}

int GraphBuilder::hoyer_rows_mean(int a) {
    require(at(a).shape.size() == 2, "graph builder: hoyer_rows_mean expects 2-d");
    Node n;
    n.op = Op::HoyerRowsMean;
    n.args = {a};
    n.shape = {1};
    return push(std::move(n));
}

void GraphBuilder::mark_output(int node, const std::string& name) {
    require(node >= 0 && node < static_cast<int>(g_.nodes_.size()), "graph builder: bad output id");
    g_.outputs_[name] = node;
}

Graph GraphBuilder::build() { return std::move(g_); }

// ---------------------------------------------------------------- forward

const std::vector<int64_t>& Evaluation::index_value(int id) const {
    const auto* p = idx_[static_cast<size_t>(id)];
    require(p != nullptr, "evaluation: node is not an index input");
    return *p;
}

namespace {

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }

double gelu_bwd(double x) {
    const double inv_sqrt2pi = 0.3989422804014327;
    return 0.5 * (1.0 + std::erf(x * 0.7071067811865476)) +
           x * inv_sqrt2pi * std::exp(-0.5 * x * x);
}

void softmax_row(const double* in, double* out, int64_t n) {
    double m = in[0];
    for (int64_t j = 1; j < n; ++j) m = std::max(m, in[j]);
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - m);
        s += out[j];
    }
    for (int64_t j = 0; j < n; ++j) out[j] /= s;
}

}  // namespace

Evaluation forward(const Graph& g, const Bindings& b) {
    Evaluation ev;
    const int n = g.num_nodes();
    ev.owned_.resize(static_cast<size_t>(n));
    ev.vals_.assign(static_cast<size_t>(n), nullptr);
    ev.idx_.assign(static_cast<size_t>(n), nullptr);

    for (int id = 0; id < n; ++id) {
        const Node& nd = g.node(id);
        auto val = [&](int a) -> const Tensor& { return *ev.vals_[static_cast<size_t>(a)]; };
        Tensor& out = ev.owned_[static_cast<size_t>(id)];

        switch (nd.op) {
            case Op::Input: {
                auto it = b.tensors.find(nd.label);
                require(it != b.tensors.end(), "forward: unbound input '" + nd.label + "'");
                require(it->second->shape == nd.shape,
                        "forward: shape mismatch binding input '" + nd.label + "'");
                ensure_finite(*it->second, "input '" + nd.label + "'");
                ev.vals_[static_cast<size_t>(id)] = it->second;
                continue;
            }
            case Op::IndexInput: {
                auto it = b.indices.find(nd.label);
                require(it != b.indices.end(), "forward: unbound index input '" + nd.label + "'");
                require(static_cast<int64_t>(it->second->size()) == nd.a0,
                        "forward: length mismatch binding index input '" + nd.label + "'");
                ev.idx_[static_cast<size_t>(id)] = it->second;
                ev.vals_[static_cast<size_t>(id)] = nullptr;
                continue;
            }
            case Op::Constant: {
                ev.vals_[static_cast<size_t>(id)] = &nd.constant;
                continue;
            }
            case Op::Add: {
                const Tensor& a = val(nd.args[0]);
                const Tensor& c = val(nd.args[1]);
                out = Tensor(nd.shape, a.data);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += c.data[i];
                break;
            }
            case Op::Sub: {
                const Tensor& a = val(nd.args[0]);
                const Tensor& c = val(nd.args[1]);
                out = Tensor(nd.shape, a.data);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= c.data[i];
                break;
            }
            case Op::Mul: {
                const Tensor& a = val(nd.args[0]);
                const Tensor& c = val(nd.args[1]);
                out = Tensor(nd.shape, a.data);
                for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= c.data[i];
                break;
            }
            case Op::Scale: {
                const Tensor& a = val(nd.args[0]);
                out = Tensor(nd.shape, a.data);
                for (double& v : out.data) v *= nd.attr;
                break;
            }
            case Op::AddBias: {
                const Tensor& a = val(nd.args[0]);
                const Tensor& bias = val(nd.args[1]);
                out = Tensor(nd.shape, a.data);
                int64_t rows = nd.shape[0], cols = nd.shape[1];
                for (int64_t i = 0; i < rows; ++i)
                    for (int64_t j = 0; j < cols; ++j) out.data[static_cast<size_t>(i * cols + j)] += bias.data[static_cast<size_t>(j)];
                break;
            }
            case Op::MatMul: {
                const Tensor& a = val(nd.args[0]);
                const Tensor& c = val(nd.args[1]);
                out = Tensor::zeros(nd.shape);
                matmul(a.data.data(), c.data.data(), out.data.data(), a.shape[0], a.shape[1],
                       c.shape[1]);
                break;
            }
            case Op::Transpose: {
                const Tensor& a = val(nd.args[0]);
                out = Tensor::zeros(nd.shape);
                transpose(a.data.data(), out.data.data(), a.shape[0], a.shape[1]);
                break;
            }
            case Op::Relu: {
                const Tensor& a = val(nd.args[0]);
                out = Tensor(nd.shape, a.data);
                for (double& v : out.data) v = v > 0.0 ? v : 0.0;
                break;
            }
            case Op::Gelu: {
                const Tensor& a = val(nd.args[0]);
                out = Tensor(nd.shape, a.data);
                for (double& v : out.data) v = gelu_fwd(v);
                break;
            }
            case Op::Abs: {
                const Tensor& a = val(nd.args[0]);
                out = Tensor(nd.shape, a.data);
                for (double& v : out.data) v = std::fabs(v);
                break;
            }
            case Op::SoftmaxRows: {
                const Tensor& a = val(nd.args[0]);
                out = Tensor::zeros(nd.shape);
                int64_t rows = nd.shape[0], cols = nd.shape[1];
                for (int64_t i = 0; i < rows; ++i)
                    softmax_row(a.data.data() + i * cols, out.data.data() + i * cols, cols);
                break;
            }
            case Op::SliceCols: {
                const Tensor& a = val(nd.args[0]);
                out = Tensor::zeros(nd.shape);
                int64_t rows = nd.shape[0], cols = nd.shape[1], src_cols = a.shape[1];
                for (int64_t i = 0; i < rows; ++i)
                    std::memcpy(out.data.data() + i * cols, a.data.data() + i * src_cols + nd.a0,
                                static_cast<size_t>(cols) * sizeof(double));
                break;
            }
            case Op::SliceRows: {
                const Tensor& a = val(nd.args[0]);
                out = Tensor::zeros(nd.shape);
                int64_t cols = nd.shape[1];
                std::memcpy(out.data.data(), a.data.data() + nd.a0 * cols,
                            static_cast<size_t>(nd.shape[0] * cols) * sizeof(double));
                break;
            }
            case Op::ConcatCols: {
                out = Tensor::zeros(nd.shape);
                int64_t rows = nd.shape[0], cols = nd.shape[1];
                int64_t off = 0;
                for (int arg : nd.args) {
                    const Tensor& a = val(arg);
                    int64_t ac = a.shape[1];
                    for (int64_t i = 0; i < rows; ++i)
                        std::memcpy(out.data.data() + i * cols + off, a.data.data() + i * ac,
                                    static_cast<size_t>(ac) * sizeof(double));
                    off += ac;
                }
                break;
            }
            case Op::ConcatRows: {
                out = Tensor::zeros(nd.shape);
                int64_t off = 0;
                for (int arg : nd.args) {
                    const Tensor& a = val(arg);
                    std::memcpy(out.data.data() + off, a.data.data(),
                                a.data.size() * sizeof(double));
                    off += a.numel();
                }
                break;
            }
            case Op::Gather: {
                const Tensor& table = val(nd.args[0]);
                const auto& idx = *ev.idx_[static_cast<size_t>(nd.index_arg)];
                out = Tensor::zeros(nd.shape);
                int64_t cols = nd.shape[1];
                for (int64_t t = 0; t < nd.shape[0]; ++t) {
                    int64_t r = idx[static_cast<size_t>(t)];
                    require(r >= 0 && r < table.shape[0],
                            "forward: gather index out of range in node " + nd.label);
                    std::memcpy(out.data.data() + t * cols, table.data.data() + r * cols,
                                static_cast<size_t>(cols) * sizeof(double));
                }
                break;
            }
            case Op::LayerNormRows: {
                const Tensor& x = val(nd.args[0]);
                const Tensor& gm = val(nd.args[1]);
                const Tensor& bt = val(nd.args[2]);
                out = Tensor::zeros(nd.shape);
                int64_t rows = nd.shape[0], cols = nd.shape[1];
                for (int64_t i = 0; i < rows; ++i) {
                    const double* xr = x.data.data() + i * cols;
                    double* yr = out.data.data() + i * cols;
                    double mu = 0.0;
                    for (int64_t j = 0; j < cols; ++j) mu += xr[j];
                    mu /= static_cast<double>(cols);
                    double var = 0.0;
                    for (int64_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                    var /= static_cast<double>(cols);
                    double inv = 1.0 / std::sqrt(var + nd.attr);
                    for (int64_t j = 0; j < cols; ++j)
                        yr[j] = (xr[j] - mu) * inv * gm.data[static_cast<size_t>(j)] + bt.data[static_cast<size_t>(j)];
                }
                break;
            }
            case Op::MeanAll: {
                const Tensor& a = val(nd.args[0]);
                double s = 0.0;
                for (double v : a.data) s += v;
                out = Tensor::scalar(s / static_cast<double>(a.numel()));
                break;
            }
            case Op::SumAll: {
                const Tensor& a = val(nd.args[0]);
                double s = 0.0;
                for (double v : a.data) s += v;
                out = Tensor::scalar(s);
                break;
            }
            case Op::CeMean: {
                const Tensor& logits = val(nd.args[0]);
                const auto& tg = *ev.idx_[static_cast<size_t>(nd.index_arg)];
                int64_t rows = logits.shape[0], cols = logits.shape[1];
                double total = 0.0;
                for (int64_t i = 0; i < rows; ++i) {
                    int64_t y = tg[static_cast<size_t>(i)];
                    require(y >= 0 && y < cols,
                            "forward: target out of range in node " + nd.label);
                    const double* lr = logits.data.data() + i * cols;
                    double m = lr[0];
                    for (int64_t j = 1; j < cols; ++j) m = std::max(m, lr[j]);
                    double s = 0.0;
                    for (int64_t j = 0; j < cols; ++j) s += std::exp(lr[j] - m);
                    total += m + std::log(s) - lr[y];
                }
                out = Tensor::scalar(total / static_cast<double>(rows));
                break;
            }
            case Op::HoyerRowsMean: {
                const Tensor& a = val(nd.args[0]);
                int64_t rows = a.shape[0], cols = a.shape[1];
                double total = 0.0;
                for (int64_t i = 0; i < rows; ++i) {
                    const double* r = a.data.data() + i * cols;
                    double s = 0.0, q = 0.0;
                    for (int64_t j = 0; j < cols; ++j) {
                        s += std::fabs(r[j]);
                        q += r[j] * r[j];
                    }
                    if (q > 0.0) total += s * s / q;  // all-zero row contributes 0
                }
                out = Tensor::scalar(total / static_cast<double>(rows));
                break;
            }
        }
        ensure_finite(out, "node " + nd.label);
        ev.vals_[static_cast<size_t>(id)] = &out;
    }
    return ev;
}

std::map<std::string, Tensor> forward_named(const Graph& g, const Bindings& b) {
    Evaluation ev = forward(g, b);
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : g.outputs()) out[name] = ev.value(id);
    return out;
}

// ---------------------------------------------------------------- backward

std::map<std::string, Tensor> backward(const Graph& g, const Evaluation& ev, int loss) {
    require(loss >= 0 && loss < g.num_nodes(), "backward: bad loss node");
    require(Tensor::numel_of(g.node(loss).shape) == 1, "backward: loss must be scalar");

    const int n = g.num_nodes();
    std::vector<Tensor> grads(static_cast<size_t>(n));
    std::vector<bool> live(static_cast<size_t>(n), false);

    auto grad_of = [&](int id) -> Tensor& {
        if (!live[static_cast<size_t>(id)]) {
            grads[static_cast<size_t>(id)] = Tensor::zeros(g.node(id).shape);
            live[static_cast<size_t>(id)] = true;
        }
        return grads[static_cast<size_t>(id)];
    };

    grad_of(loss).data[0] = 1.0;

    for (int id = n - 1; id >= 0; --id) {
        if (!live[static_cast<size_t>(id)]) continue;
        const Node& nd = g.node(id);
        const Tensor& d = grads[static_cast<size_t>(id)];
        auto val = [&](int a) -> const Tensor& { return ev.value(a); };

        switch (nd.op) {
            case Op::Input:
            case Op::IndexInput:
            case Op::Constant:
                break;
            case Op::Add: {
                Tensor& da = grad_of(nd.args[0]);
                Tensor& db = grad_of(nd.args[1]);
                for (size_t i = 0; i < d.data.size(); ++i) {
                    da.data[i] += d.data[i];
                    db.data[i] += d.data[i];
                }
                break;
            }
            case Op::Sub: {
                Tensor& da = grad_of(nd.args[0]);
                Tensor& db = grad_of(nd.args[1]);
                for (size_t i = 0; i < d.data.size(); ++i) {
                    da.data[i] += d.data[i];
                    db.data[i] -= d.data[i];
                }
                break;
            }
            case Op::Mul: {
                const Tensor& a = val(nd.args[0]);
                const Tensor& b2 = val(nd.args[1]);
                Tensor& da = grad_of(nd.args[0]);
                Tensor& db = grad_of(nd.args[1]);
                for (size_t i = 0; i < d.data.size(); ++i) {
                    da.data[i] += d.data[i] * b2.data[i];
                    db.data[i] += d.data[i] * a.data[i];
                }
                break;
            }
            case Op::Scale: {
                Tensor& da = grad_of(nd.args[0]);
                for (size_t i = 0; i < d.data.size(); ++i) da.data[i] += nd.attr * d.data[i];
                break;
            }
            case Op::AddBias: {
                Tensor& da = grad_of(nd.args[0]);
                Tensor& db = grad_of(nd.args[1]);
                int64_t rows = nd.shape[0], cols = nd.shape[1];
                for (size_t i = 0; i < d.data.size(); ++i) da.data[i] += d.data[i];
                for (int64_t i = 0; i < rows; ++i)
                    for (int64_t j = 0; j < cols; ++j)
                        db.data[static_cast<size_t>(j)] += d.data[static_cast<size_t>(i * cols + j)];
                break;
            }
            case Op::MatMul: {
                const Tensor& a = val(nd.args[0]);
                const Tensor& b2 = val(nd.args[1]);
                Tensor& da = grad_of(nd.args[0]);
                Tensor& db = grad_of(nd.args[1]);
                int64_t m = a.shape[0], k = a.shape[1], nn = b2.shape[1];
                // dA += dC * B^T
                std::vector<double> bt(static_cast<size_t>(k * nn));
                transpose(b2.data.data(), bt.data(), k, nn);
                std::vector<double> tmp(static_cast<size_t>(m * k));
                matmul(d.data.data(), bt.data(), tmp.data(), m, nn, k);
                for (size_t i = 0; i < tmp.size(); ++i) da.data[i] += tmp[i];
                // dB += A^T * dC
                std::vector<double> at(static_cast<size_t>(m * k));
                transpose(a.data.data(), at.data(), m, k);
                std::vector<double> tmp2(static_cast<size_t>(k * nn));
                matmul(at.data(), d.data.data(), tmp2.data(), k, m, nn);
                for (size_t i = 0; i < tmp2.size(); ++i) db.data[i] += tmp2[i];
                break;
            }
            case Op::Transpose: {
                Tensor& da = grad_of(nd.args[0]);
                int64_t m = nd.shape[0], nn = nd.shape[1];  // d is m x nn
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < nn; ++j)
                        da.data[static_cast<size_t>(j * m + i)] += d.data[static_cast<size_t>(i * nn + j)];
                break;
            }
            case Op::Relu: {
                const Tensor& a = val(nd.args[0]);
                Tensor& da = grad_of(nd.args[0]);
                // subgradient at 0 is 0
                for (size_t i = 0; i < d.data.size(); ++i)
                    if (a.data[i] > 0.0) da.data[i] += d.data[i];
                break;
            }
            case Op::Gelu: {
                const Tensor& a = val(nd.args[0]);
                Tensor& da = grad_of(nd.args[0]);
                for (size_t i = 0; i < d.data.size(); ++i)
                    da.data[i] += d.data[i] * gelu_bwd(a.data[i]);
                break;
            }
            case Op::Abs: {
                const Tensor& a = val(nd.args[0]);
                Tensor& da = grad_of(nd.args[0]);
                for (size_t i = 0; i < d.data.size(); ++i) {
                    if (a.data[i] > 0.0)
                        da.data[i] += d.data[i];
                    else if (a.data[i] < 0.0)
                        da.data[i] -= d.data[i];
                }
                break;
            }
            case Op::SoftmaxRows: {
                const Tensor& y = ev.value(id);
                Tensor& da = grad_of(nd.args[0]);
                int64_t rows = nd.shape[0], cols = nd.shape[1];
                for (int64_t i = 0; i < rows; ++i) {
                    const double* yr = y.data.data() + i * cols;
                    const double* dr = d.data.data() + i * cols;
                    double dot = 0.0;
                    for (int64_t j = 0; j < cols; ++j) dot += dr[j] * yr[j];
                    for (int64_t j = 0; j < cols; ++j)
                        da.data[static_cast<size_t>(i * cols + j)] += yr[j] * (dr[j] - dot);
                }
                break;
            }
            case Op::SliceCols: {
                Tensor& da = grad_of(nd.args[0]);
                int64_t rows = nd.shape[0], cols = nd.shape[1];
                int64_t src_cols = g.node(nd.args[0]).shape[1];
                for (int64_t i = 0; i < rows; ++i)
                    for (int64_t j = 0; j < cols; ++j)
                        da.data[static_cast<size_t>(i * src_cols + nd.a0 + j)] +=
                            d.data[static_cast<size_t>(i * cols + j)];
                break;
            }
            case Op::SliceRows: {
                Tensor& da = grad_of(nd.args[0]);
                int64_t cols = nd.shape[1];
                for (int64_t i = 0; i < nd.shape[0]; ++i)
                    for (int64_t j = 0; j < cols; ++j)
                        da.data[static_cast<size_t>((nd.a0 + i) * cols + j)] +=
                            d.data[static_cast<size_t>(i * cols + j)];
                break;
            }
            case Op::ConcatCols: {
                int64_t rows = nd.shape[0], cols = nd.shape[1];
                int64_t off = 0;
                for (int arg : nd.args) {
                    Tensor& da = grad_of(arg);
                    int64_t ac = g.node(arg).shape[1];
                    for (int64_t i = 0; i < rows; ++i)
                        for (int64_t j = 0; j < ac; ++j)
                            da.data[static_cast<size_t>(i * ac + j)] +=
                                d.data[static_cast<size_t>(i * cols + off + j)];
                    off += ac;
                }
                break;
            }
            case Op::ConcatRows: {
                int64_t off = 0;
                for (int arg : nd.args) {
                    Tensor& da = grad_of(arg);
                    for (size_t i = 0; i < da.data.size(); ++i)
                        da.data[i] += d.data[static_cast<size_t>(off) + i];
                    off += da.numel();
                }
                break;
            }
            case Op::Gather: {
                Tensor& dt = grad_of(nd.args[0]);
                const auto& idx = ev.index_value(nd.index_arg);
                int64_t cols = nd.shape[1];
                for (int64_t t = 0; t < nd.shape[0]; ++t) {
                    int64_t r = idx[static_cast<size_t>(t)];
                    for (int64_t j = 0; j < cols; ++j)
                        dt.data[static_cast<size_t>(r * cols + j)] +=
                            d.data[static_cast<size_t>(t * cols + j)];
                }
                break;
            }
            case Op::LayerNormRows: {
                const Tensor& x = val(nd.args[0]);
                const Tensor& gm = val(nd.args[1]);
                Tensor& dx = grad_of(nd.args[0]);
                Tensor& dg = grad_of(nd.args[1]);
                Tensor& dbt = grad_of(nd.args[2]);
                int64_t rows = nd.shape[0], cols = nd.shape[1];
                double dcols = static_cast<double>(cols);
                for (int64_t i = 0; i < rows; ++i) {
                    const double* xr = x.data.data() + i * cols;
                    const double* dr = d.data.data() + i * cols;
                    double mu = 0.0;
                    for (int64_t j = 0; j < cols; ++j) mu += xr[j];
                    mu /= dcols;
                    double var = 0.0;
                    for (int64_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                    var /= dcols;
                    double inv = 1.0 / std::sqrt(var + nd.attr);
                    double mean_t = 0.0, mean_tx = 0.0;
                    for (int64_t j = 0; j < cols; ++j) {
                        double xhat = (xr[j] - mu) * inv;
                        double t = dr[j] * gm.data[static_cast<size_t>(j)];
                        mean_t += t;
                        mean_tx += t * xhat;
                        dg.data[static_cast<size_t>(j)] += dr[j] * xhat;
                        dbt.data[static_cast<size_t>(j)] += dr[j];
                    }
                    mean_t /= dcols;
                    mean_tx /= dcols;
                    for (int64_t j = 0; j < cols; ++j) {
                        double xhat = (xr[j] - mu) * inv;
                        double t = dr[j] * gm.data[static_cast<size_t>(j)];
                        dx.data[static_cast<size_t>(i * cols + j)] +=
                            inv * (t - mean_t - xhat * mean_tx);
                    }
                }
                break;
            }
            case Op::MeanAll: {
                Tensor& da = grad_of(nd.args[0]);
                double s = d.data[0] / static_cast<double>(da.numel());
                for (double& v : da.data) v += s;
                break;
            }
            case Op::SumAll: {
                Tensor& da = grad_of(nd.args[0]);
                for (double& v : da.data) v += d.data[0];
                break;
            }
            case Op::CeMean: {
                const Tensor& logits = val(nd.args[0]);
                const auto& tg = ev.index_value(nd.index_arg);
                Tensor& dl = grad_of(nd.args[0]);
                int64_t rows = logits.shape[0], cols = logits.shape[1];
                double w = d.data[0] / static_cast<double>(rows);
                std::vector<double> p(static_cast<size_t>(cols));
                for (int64_t i = 0; i < rows; ++i) {
                    softmax_row(logits.data.data() + i * cols, p.data(), cols);
                    for (int64_t j = 0; j < cols; ++j)
                        dl.data[static_cast<size_t>(i * cols + j)] += w * p[static_cast<size_t>(j)];
                    dl.data[static_cast<size_t>(i * cols + tg[static_cast<size_t>(i)])] -= w;
                }
                break;
            }
            case Op::HoyerRowsMean: {
                const Tensor& a = val(nd.args[0]);
                Tensor& da = grad_of(nd.args[0]);
                int64_t rows = a.shape[0], cols = a.shape[1];
                double w = d.data[0] / static_cast<double>(rows);
                for (int64_t i = 0; i < rows; ++i) {
                    const double* r = a.data.data() + i * cols;
                    double s = 0.0, q = 0.0;
                    for (int64_t j = 0; j < cols; ++j) {
                        s += std::fabs(r[j]);
                        q += r[j] * r[j];
                    }
                    if (q <= 0.0) continue;
                    for (int64_t j = 0; j < cols; ++j) {
                        double sgn = r[j] > 0.0 ? 1.0 : (r[j] < 0.0 ? -1.0 : 0.0);
                        da.data[static_cast<size_t>(i * cols + j)] +=
                            w * (2.0 * s * sgn / q - 2.0 * r[j] * s * s / (q * q));
                    }
                }
                break;
            }
        }
    }

    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : g.inputs()) {
        if (!g.node(id).trainable) continue;
        if (live[static_cast<size_t>(id)])
            out[name] = std::move(grads[static_cast<size_t>(id)]);
        else
            out[name] = Tensor::zeros(g.node(id).shape);
    }
    return out;
}

// ---------------------------------------------------------------- grad check

double grad_check(const ScalarFn& fn, const Tensor& point, double eps) {
    require(eps > 0.0, "grad_check: eps must be positive");
    Tensor analytic = fn.grad(point);
    require(analytic.shape == point.shape, "grad_check: gradient shape mismatch");
    double worst = 0.0;
    Tensor x = point;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double keep = x.data[i];
        x.data[i] = keep + eps;
        double up = fn.value(x);
        x.data[i] = keep - eps;
        double dn = fn.value(x);
        x.data[i] = keep;
        double fd = (up - dn) / (2.0 * eps);
        double g = analytic.data[i];
        double err = std::fabs(g - fd) / std::max(1.0, std::fabs(g));
        worst = std::max(worst, err);
    }
    return worst;
}

ScalarFn graph_scalar_fn(const Graph& g, const std::string& input_name,
                         const std::string& output_name) {
    int out_id = g.output(output_name);
    ScalarFn fn;
    fn.value = [&g, out_id, input_name](const Tensor& x) {
        Bindings b;
        b.tensors[input_name] = &x;
        Evaluation ev = forward(g, b);
        return ev.value(out_id).item();
    };
    fn.grad = [&g, out_id, input_name](const Tensor& x) {
        Bindings b;
        b.tensors[input_name] = &x;
        Evaluation ev = forward(g, b);
        auto grads = backward(g, ev, out_id);
        auto it = grads.find(input_name);
        require(it != grads.end(), "graph_scalar_fn: input is not trainable");
        return it->second;
    };
    return fn;
}

}  // namespace nsvar
