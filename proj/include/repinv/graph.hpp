#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "repinv/common.hpp"
#include "repinv/rng.hpp"
#include "repinv/tensor.hpp"

namespace repinv {

enum class Op {
    Input,
    Param,
    Affine,            // x[N,Din] * W[Din,Dout] + b[Dout]
    BiasAdd,           // broadcast add, see BiasMode
    Conv2d,            // stride-1 2-D convolution, valid or same padding
    MaskedConv2d,      // raster-causal convolution, mask A or B, same padding
    Relu,
    MaxPool2,          // 2x2 stride 2, ceil mode (partial edge windows)
    GlobalMaxPool,     // [N,C,H,W] -> [N,C]
    Dropout,           // inverted scaling, active in train mode only
    ResizeNearest,
    Reshape,
    Add,
    Sub,
    Square,
    Mean,              // full reduction to a scalar
    LogSoftmax,        // over the last axis
    XentRows,          // softmax cross entropy: logits [N,K], labels [N] -> [N]
    XentPixels,        // per-position softmax xent: logits [N,C*L,H,W], targets [N,C,H,W] -> [N]
    SampleCategorical  // per-position draw from softmax over L: -> [N,C,H,W]
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::Affine: return "affine";
        case Op::BiasAdd: return "bias_add";
        case Op::Conv2d: return "conv2d";
        case Op::MaskedConv2d: return "masked_conv2d";
        case Op::Relu: return "relu";
        case Op::MaxPool2: return "max_pool2";
        case Op::GlobalMaxPool: return "global_max_pool";
        case Op::Dropout: return "dropout";
        case Op::ResizeNearest: return "resize_nearest";
        case Op::Reshape: return "reshape";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Square: return "square";
        case Op::Mean: return "mean";
        case Op::LogSoftmax: return "log_softmax";
        case Op::XentRows: return "xent_rows";
        case Op::XentPixels: return "xent_pixels";
        case Op::SampleCategorical: return "sample_categorical";
    }
    return "?";
}

enum class Pad { Valid, Same };
enum class MaskKind { A, B };
enum class BiasMode {
    PerUnit,     // b[D] on x[N,D]
    PerChannel,  // b[C] on x[N,C,H,W]
    PerExample   // b[N,C] on x[N,C,H,W], broadcast over space
};

struct Node {
    Op op = Op::Input;
    std::vector<int> parents;
    Shape shape;  // output shape, inferred at build time

    // op attributes (meaning depends on op)
    Pad pad = Pad::Valid;
    MaskKind mask = MaskKind::A;
    BiasMode bias_mode = BiasMode::PerUnit;
    int groups = 1;   // channel groups for masked conv raster order (1 gray, 3 rgb)
    int levels = 0;   // XentPixels / SampleCategorical
    double rate = 0;  // dropout
    int slot = -1;    // Input / Param slot index
    std::string label;
};

struct ParamSlot {
    std::string name;
    Shape shape;
    double init_scale = 0.0;  // uniform +-scale; 0 => zero init (biases)
    int node = -1;
};

struct InputSlot {
    std::string name;
    Shape shape;
    int node = -1;
};

// A built-once computation DAG. Nodes are stored in construction order, so
// parents always precede children; eval walks forward, backward walks in
// reverse.
class Graph {
  public:
    int input(const std::string& name, Shape shape) {
        require_graph(!name.empty(), "input needs a name");
        require_graph(input_index_.find(name) == input_index_.end(),
                      cat("duplicate input name '", name, "'"));
        Node n;
        n.op = Op::Input;
        n.shape = std::move(shape);
        n.slot = static_cast<int>(inputs_.size());
        n.label = name;
        const int id = push(std::move(n));
        inputs_.push_back({name, nodes_[id].shape, id});
        input_index_[name] = nodes_[id].slot;
        return id;
    }

    // fan_in/fan_out control Glorot-uniform init; pass (0, 0) for zero init.
    int param(const std::string& name, Shape shape, double fan_in, double fan_out) {
        Node n;
        n.op = Op::Param;
        n.shape = std::move(shape);
        n.slot = static_cast<int>(params_.size());
        n.label = name;
        const int id = push(std::move(n));
        double scale = 0.0;
        if (fan_in > 0 || fan_out > 0) scale = std::sqrt(6.0 / (fan_in + fan_out));
        params_.push_back({name, nodes_[id].shape, scale, id});
        return id;
    }

    int affine(int x, int w, int b) {
        const Shape& xs = shape_of(x);
        const Shape& ws = shape_of(w);
        const Shape& bs = shape_of(b);
        require_graph(xs.size() == 2 && ws.size() == 2 && bs.size() == 1,
                      cat("affine expects ranks 2,2,1; got ", shape_str(xs), " ", shape_str(ws), " ",
                          shape_str(bs)));
        require_graph(xs[1] == ws[0] && ws[1] == bs[0],
                      cat("affine shape mismatch: ", shape_str(xs), " * ", shape_str(ws), " + ",
                          shape_str(bs)));
        Node n;
        n.op = Op::Affine;
        n.parents = {x, w, b};
        n.shape = {xs[0], ws[1]};
        return push(std::move(n));
    }

    int bias_add(int x, int b) {
        const Shape& xs = shape_of(x);
        const Shape& bs = shape_of(b);
        Node n;
        n.op = Op::BiasAdd;
        n.parents = {x, b};
        n.shape = xs;
        if (xs.size() == 2 && bs.size() == 1 && bs[0] == xs[1]) {
            n.bias_mode = BiasMode::PerUnit;
        } else if (xs.size() == 4 && bs.size() == 1 && bs[0] == xs[1]) {
            n.bias_mode = BiasMode::PerChannel;
        } else if (xs.size() == 4 && bs.size() == 2 && bs[0] == xs[0] && bs[1] == xs[1]) {
            n.bias_mode = BiasMode::PerExample;
        } else {
            throw GraphError(cat("bias_add cannot broadcast ", shape_str(bs), " onto ", shape_str(xs)));
        }
        return push(std::move(n));
    }

    int conv2d(int x, int w, Pad pad) {
        const Shape& xs = shape_of(x);
        const Shape& ws = shape_of(w);
        require_graph(xs.size() == 4 && ws.size() == 4,
                      cat("conv2d expects x[N,C,H,W], w[F,C,kh,kw]; got ", shape_str(xs), " and ",
                          shape_str(ws)));
        require_graph(ws[1] == xs[1],
                      cat("conv2d channel mismatch: input ", shape_str(xs), " vs weights ", shape_str(ws)));
        const std::int64_t kh = ws[2], kw = ws[3];
        std::int64_t oh, ow;
        if (pad == Pad::Valid) {
            oh = xs[2] - kh + 1;
            ow = xs[3] - kw + 1;
            require_graph(oh >= 1 && ow >= 1,
                          cat("conv2d kernel ", kh, "x", kw, " does not fit input ", shape_str(xs)));
        } else {
            require_graph(kh % 2 == 1 && kw % 2 == 1, "same-padding conv2d needs odd kernels");
            oh = xs[2];
            ow = xs[3];
        }
        Node n;
        n.op = Op::Conv2d;
        n.parents = {x, w};
        n.pad = pad;
        n.shape = {xs[0], ws[0], oh, ow};
        return push(std::move(n));
    }

    int masked_conv2d(int x, int w, MaskKind kind, int groups = 1) {
        const Shape& xs = shape_of(x);
        const Shape& ws = shape_of(w);
        require_graph(xs.size() == 4 && ws.size() == 4,
                      cat("masked_conv2d expects x[N,C,H,W], w[F,C,kh,kw]; got ", shape_str(xs), " and ",
                          shape_str(ws)));
        require_graph(ws[1] == xs[1], cat("masked_conv2d channel mismatch: input ", shape_str(xs),
                                          " vs weights ", shape_str(ws)));
        require_graph(ws[2] % 2 == 1 && ws[3] % 2 == 1,
                      cat("masked_conv2d requires odd kernel size, got ", ws[2], "x", ws[3]));
        require_graph(groups >= 1, "masked_conv2d groups must be >= 1");
        require_graph(ws[1] % groups == 0 && ws[0] % groups == 0,
                      cat("masked_conv2d channels must divide into ", groups, " groups"));
        Node n;
        n.op = Op::MaskedConv2d;
        n.parents = {x, w};
        n.mask = kind;
        n.groups = groups;
        n.pad = Pad::Same;
        n.shape = {xs[0], ws[0], xs[2], xs[3]};
        return push(std::move(n));
    }

    int relu(int x) { return unary(Op::Relu, x); }
    int square(int x) { return unary(Op::Square, x); }

    int max_pool2(int x) {
        const Shape& xs = shape_of(x);
        require_graph(xs.size() == 4, cat("max_pool2 expects rank 4, got ", shape_str(xs)));
        Node n;
        n.op = Op::MaxPool2;
        n.parents = {x};
        n.shape = {xs[0], xs[1], (xs[2] + 1) / 2, (xs[3] + 1) / 2};
        return push(std::move(n));
    }

    int global_max_pool(int x) {
        const Shape& xs = shape_of(x);
        require_graph(xs.size() == 4, cat("global_max_pool expects rank 4, got ", shape_str(xs)));
        Node n;
        n.op = Op::GlobalMaxPool;
        n.parents = {x};
        n.shape = {xs[0], xs[1]};
        return push(std::move(n));
    }

    int dropout(int x, double rate) {
        require_graph(rate >= 0.0 && rate < 1.0, cat("dropout rate must be in [0,1), got ", rate));
        Node n;
        n.op = Op::Dropout;
        n.parents = {x};
        n.rate = rate;
        n.shape = shape_of(x);
        return push(std::move(n));
    }

    int resize_nearest(int x, std::int64_t oh, std::int64_t ow) {
        const Shape& xs = shape_of(x);
        require_graph(xs.size() == 4, cat("resize_nearest expects rank 4, got ", shape_str(xs)));
        require_graph(oh >= 1 && ow >= 1, "resize_nearest target must be positive");
        Node n;
        n.op = Op::ResizeNearest;
        n.parents = {x};
        n.shape = {xs[0], xs[1], oh, ow};
        return push(std::move(n));
    }

    int reshape(int x, Shape target) {
        require_graph(shape_count(target) == shape_count(shape_of(x)),
                      cat("reshape cannot map ", shape_str(shape_of(x)), " to ", shape_str(target)));
        Node n;
        n.op = Op::Reshape;
        n.parents = {x};
        n.shape = std::move(target);
        return push(std::move(n));
    }

    int add(int a, int b) { return binary(Op::Add, a, b); }
    int sub(int a, int b) { return binary(Op::Sub, a, b); }

    int mean(int x) {
        Node n;
        n.op = Op::Mean;
        n.parents = {x};
        n.shape = {1};
        return push(std::move(n));
    }

    int log_softmax(int x) {
        const Shape& xs = shape_of(x);
        require_graph(xs.size() >= 2, cat("log_softmax expects rank >= 2, got ", shape_str(xs)));
        Node n;
        n.op = Op::LogSoftmax;
        n.parents = {x};
        n.shape = xs;
        return push(std::move(n));
    }

    int xent_rows(int logits, int labels) {
        const Shape& ls = shape_of(logits);
        const Shape& ys = shape_of(labels);
        require_graph(ls.size() == 2 && ys.size() == 1 && ys[0] == ls[0],
                      cat("xent_rows expects logits [N,K] and labels [N]; got ", shape_str(ls), " and ",
                          shape_str(ys)));
        Node n;
        n.op = Op::XentRows;
        n.parents = {logits, labels};
        n.shape = {ls[0]};
        return push(std::move(n));
    }

    int xent_pixels(int logits, int targets, int levels) {
        const Shape& ls = shape_of(logits);
        const Shape& ts = shape_of(targets);
        require_graph(levels >= 2, cat("xent_pixels needs levels >= 2, got ", levels));
        require_graph(ls.size() == 4 && ts.size() == 4, "xent_pixels expects rank-4 logits and targets");
        require_graph(ls[0] == ts[0] && ls[2] == ts[2] && ls[3] == ts[3] &&
                          ls[1] == ts[1] * levels,
                      cat("xent_pixels shape mismatch: logits ", shape_str(ls), ", targets ",
                          shape_str(ts), ", levels ", levels));
        Node n;
        n.op = Op::XentPixels;
        n.parents = {logits, targets};
        n.levels = levels;
        n.shape = {ls[0]};
        return push(std::move(n));
    }

    int sample_categorical(int logits, int levels) {
        const Shape& ls = shape_of(logits);
        require_graph(levels >= 2, cat("sample_categorical needs levels >= 2, got ", levels));
        require_graph(ls.size() == 4 && ls[1] % levels == 0,
                      cat("sample_categorical expects logits [N,C*L,H,W]; got ", shape_str(ls),
                          " with levels ", levels));
        Node n;
        n.op = Op::SampleCategorical;
        n.parents = {logits};
        n.levels = levels;
        n.shape = {ls[0], ls[1] / levels, ls[2], ls[3]};
        return push(std::move(n));
    }

    void mark_output(const std::string& name, int node) {
        check_node(node);
        outputs_[name] = node;
    }

    // Every parameter slot must feed at least one downstream node.
    void validate() const {
        std::vector<bool> used(nodes_.size(), false);
        for (const Node& n : nodes_)
            for (int p : n.parents) used[static_cast<std::size_t>(p)] = true;
        for (const ParamSlot& slot : params_)
            require_graph(used[static_cast<std::size_t>(slot.node)],
                          cat("parameter '", slot.name, "' is never used"));
    }

    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<ParamSlot>& params() const { return params_; }
    const std::vector<InputSlot>& inputs() const { return inputs_; }
    const std::map<std::string, int>& outputs() const { return outputs_; }

    const Shape& shape_of(int node) const {
        check_node(node);
        return nodes_[static_cast<std::size_t>(node)].shape;
    }

    int output(const std::string& name) const {
        auto it = outputs_.find(name);
        require_graph(it != outputs_.end(), cat("graph has no output named '", name, "'"));
        return it->second;
    }

    int input_slot(const std::string& name) const {
        auto it = input_index_.find(name);
        require_graph(it != input_index_.end(), cat("graph has no input named '", name, "'"));
        return it->second;
    }

    std::string node_label(int id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        std::string s = cat("#", id, ":", op_name(n.op));
        if (!n.label.empty()) s += cat("(", n.label, ")");
        return s;
    }

  private:
    int unary(Op op, int x) {
        Node n;
        n.op = op;
        n.parents = {x};
        n.shape = shape_of(x);
        return push(std::move(n));
    }

    int binary(Op op, int a, int b) {
        require_graph(shape_eq(shape_of(a), shape_of(b)),
                      cat(op_name(op), " shape mismatch: ", shape_str(shape_of(a)), " vs ",
                          shape_str(shape_of(b))));
        Node n;
        n.op = op;
        n.parents = {a, b};
        n.shape = shape_of(a);
        return push(std::move(n));
    }

    int push(Node n) {
        for (int p : n.parents) check_node(p);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void check_node(int id) const {
        require_graph(id >= 0 && id < static_cast<int>(nodes_.size()),
                      cat("node index ", id, " out of range"));
    }

    std::vector<Node> nodes_;
    std::vector<ParamSlot> params_;
    std::vector<InputSlot> inputs_;
    std::map<std::string, int> input_index_;
    std::map<std::string, int> outputs_;
};

// Glorot-uniform weights, zero biases; deterministic per (graph, seed).
inline std::vector<Tensor> init_params(const Graph& graph, std::uint64_t seed) {
    std::vector<Tensor> params;
    params.reserve(graph.params().size());
    for (std::size_t i = 0; i < graph.params().size(); ++i) {
        const ParamSlot& slot = graph.params()[i];
        Tensor t(slot.shape);
        if (slot.init_scale > 0) {
            Rng rng(derive_seed(seed, cat("init/", slot.name, "/", i)));
            for (auto& v : t.values) v = rng.uniform(-slot.init_scale, slot.init_scale);
        }
        params.push_back(std::move(t));
    }
    return params;
}

}  // namespace repinv
