#pragma once

#include <string>
#include <variant>
#include <vector>

#include "jem/rng.hpp"
#include "jem/tensor.hpp"

// Minimal layer library with explicit backward passes. Layers are immutable
// during forward/backward: activations live in a caller-owned Tape and
// parameter gradients in a caller-owned ParamGrads, so a network can be
// shared read-only while several passes are in flight.
namespace jem::nn {

struct Conv2d {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 1;
    Tensor weight;  // (out, in * k * k)
    Tensor bias;    // (out)

    static Conv2d make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                       Rng& rng);
    std::size_t out_extent(std::size_t in_extent) const { return (in_extent + 2 * padding - kernel) / stride + 1; }

    Tensor forward(const Tensor& x) const;
    // Returns dL/dx. Accumulates into grad_weight/grad_bias when non-null.
    Tensor backward(const Tensor& x, const Tensor& grad_out, Tensor* grad_weight, Tensor* grad_bias) const;
};

struct Linear {
    std::size_t in_features = 0;
    std::size_t out_features = 0;
    Tensor weight;  // (out, in)
    Tensor bias;    // (out)

    static Linear make(std::size_t in, std::size_t out, Rng& rng);

    // Accepts any tensor whose rows have in_features elements (flattening).
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& x, const Tensor& grad_out, Tensor* grad_weight, Tensor* grad_bias) const;
};

struct SiLU {
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& x, const Tensor& grad_out) const;
};

// Nearest-neighbour 2x spatial upsampling.
struct Upsample2x {
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& x, const Tensor& grad_out) const;
};

using Layer = std::variant<Conv2d, Linear, SiLU, Upsample2x>;

// Inputs seen by each layer during the forward pass.
struct Tape {
    std::vector<Tensor> inputs;
};

// One gradient tensor per parameter tensor, in parameters() order.
using ParamGrads = std::vector<Tensor>;

class Sequential {
public:
    Sequential() = default;
    explicit Sequential(std::vector<Layer> layers) : layers_(std::move(layers)) {}

    void push(Layer layer) { layers_.push_back(std::move(layer)); }
    const std::vector<Layer>& layers() const noexcept { return layers_; }

    // tape may be null for inference-only passes.
    Tensor forward(const Tensor& x, Tape* tape = nullptr) const;
    // Backpropagates grad_out; accumulates parameter gradients when grads is
    // non-null (it must come from zero_grads()). Returns dL/dinput.
    Tensor backward(const Tape& tape, const Tensor& grad_out, ParamGrads* grads) const;

    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    // Stable names, "<layer index>.weight" / "<layer index>.bias".
    std::vector<std::string> parameter_names() const;
    ParamGrads zero_grads() const;
    std::size_t parameter_count() const;

private:
    std::vector<Layer> layers_;
};

void add_into(ParamGrads& into, const ParamGrads& from, double scale = 1.0);
double global_norm(const ParamGrads& grads);

}  // namespace jem::nn
