#include "jem/nn.hpp"

#include <Eigen/Core>
#include <cmath>

#include "jem/error.hpp"

namespace jem::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    return rng.normal_tensor(shape, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

struct ConvGeometry {
    std::size_t batch, channels, height, width, out_h, out_w;
};

ConvGeometry geometry(const Conv2d& conv, const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != conv.in_channels) {
        throw InputError("conv2d expects (N, " + std::to_string(conv.in_channels) + ", H, W), got " +
                         shape_string(x.shape()));
    }
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), conv.out_extent(x.dim(2)), conv.out_extent(x.dim(3))};
}

void im2col(const Conv2d& conv, const ConvGeometry& g, const double* image, RowMat& cols) {
    const std::size_t k = conv.kernel;
    const std::size_t plane = g.out_h * g.out_w;
    cols.resize(static_cast<Eigen::Index>(g.channels * k * k), static_cast<Eigen::Index>(plane));
    for (std::size_t c = 0; c < g.channels; ++c) {
        const double* channel = image + c * g.height * g.width;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                double* row = cols.data() + ((c * k + ki) * k + kj) * plane;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * conv.stride + ki) -
                                    static_cast<std::ptrdiff_t>(conv.padding);
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * conv.stride + kj) -
                                        static_cast<std::ptrdiff_t>(conv.padding);
                        const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) &&
                                            iw < static_cast<std::ptrdiff_t>(g.width);
                        row[oh * g.out_w + ow] =
                            inside ? channel[static_cast<std::size_t>(ih) * g.width + static_cast<std::size_t>(iw)]
                                   : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const Conv2d& conv, const ConvGeometry& g, const RowMat& cols, double* image) {
    const std::size_t k = conv.kernel;
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
        double* channel = image + c * g.height * g.width;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                const double* row = cols.data() + ((c * k + ki) * k + kj) * plane;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * conv.stride + ki) -
                                    static_cast<std::ptrdiff_t>(conv.padding);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
                        continue;
                    }
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * conv.stride + kj) -
                                        static_cast<std::ptrdiff_t>(conv.padding);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) {
                            continue;
                        }
                        channel[static_cast<std::size_t>(ih) * g.width + static_cast<std::size_t>(iw)] +=
                            row[oh * g.out_w + ow];
                    }
                }
            }
        }
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Conv2d Conv2d::make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                    Rng& rng) {
    Conv2d conv;
    conv.in_channels = in;
    conv.out_channels = out;
    conv.kernel = kernel;
    conv.stride = stride;
    conv.padding = padding;
    conv.weight = he_normal({out, in * kernel * kernel}, in * kernel * kernel, rng);
    conv.bias = Tensor({out});
    return conv;
}

Tensor Conv2d::forward(const Tensor& x) const {
    const ConvGeometry g = geometry(*this, x);
    const std::size_t plane = g.out_h * g.out_w;
    Tensor y({g.batch, out_channels, g.out_h, g.out_w});
    const auto k_rows = static_cast<Eigen::Index>(in_channels * kernel * kernel);
    ConstMapMat w(weight.data(), static_cast<Eigen::Index>(out_channels), k_rows);
    ConstMapVec b(bias.data(), static_cast<Eigen::Index>(out_channels));
    RowMat cols;
    for (std::size_t n = 0; n < g.batch; ++n) {
        im2col(*this, g, x.data() + n * g.channels * g.height * g.width, cols);
        MapMat out(y.data() + n * out_channels * plane, static_cast<Eigen::Index>(out_channels),
                   static_cast<Eigen::Index>(plane));
        out.noalias() = w * cols;
        out.colwise() += b;
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& grad_out, Tensor* grad_weight, Tensor* grad_bias) const {
    const ConvGeometry g = geometry(*this, x);
    const std::size_t plane = g.out_h * g.out_w;
    Tensor dx(x.shape());
    const auto k_rows = static_cast<Eigen::Index>(in_channels * kernel * kernel);
    ConstMapMat w(weight.data(), static_cast<Eigen::Index>(out_channels), k_rows);
    RowMat cols;
    RowMat dcols;
    for (std::size_t n = 0; n < g.batch; ++n) {
        ConstMapMat dy(grad_out.data() + n * out_channels * plane, static_cast<Eigen::Index>(out_channels),
                       static_cast<Eigen::Index>(plane));
        if (grad_weight != nullptr) {
            im2col(*this, g, x.data() + n * g.channels * g.height * g.width, cols);
            MapMat dw(grad_weight->data(), static_cast<Eigen::Index>(out_channels), k_rows);
            dw.noalias() += dy * cols.transpose();
        }
        if (grad_bias != nullptr) {
            MapVec db(grad_bias->data(), static_cast<Eigen::Index>(out_channels));
            db += dy.rowwise().sum();
        }
        dcols.noalias() = w.transpose() * dy;
        col2im(*this, g, dcols, dx.data() + n * g.channels * g.height * g.width);
    }
    return dx;
}

Linear Linear::make(std::size_t in, std::size_t out, Rng& rng) {
    Linear lin;
    lin.in_features = in;
    lin.out_features = out;
    lin.weight = he_normal({out, in}, in, rng);
    lin.bias = Tensor({out});
    return lin;
}

Tensor Linear::forward(const Tensor& x) const {
    if (x.rank() == 0 || x.row_size() != in_features) {
        throw InputError("linear expects rows of " + std::to_string(in_features) + " features, got " +
                         shape_string(x.shape()));
    }
    const auto batch = static_cast<Eigen::Index>(x.dim(0));
    Tensor y({x.dim(0), out_features});
    ConstMapMat xm(x.data(), batch, static_cast<Eigen::Index>(in_features));
    ConstMapMat w(weight.data(), static_cast<Eigen::Index>(out_features), static_cast<Eigen::Index>(in_features));
    MapMat ym(y.data(), batch, static_cast<Eigen::Index>(out_features));
    ym.noalias() = xm * w.transpose();
    ym.rowwise() += ConstMapVec(bias.data(), static_cast<Eigen::Index>(out_features)).transpose();
    return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& grad_out, Tensor* grad_weight, Tensor* grad_bias) const {
    const auto batch = static_cast<Eigen::Index>(x.dim(0));
    const auto in = static_cast<Eigen::Index>(in_features);
    const auto out = static_cast<Eigen::Index>(out_features);
    ConstMapMat xm(x.data(), batch, in);
    ConstMapMat dy(grad_out.data(), batch, out);
    ConstMapMat w(weight.data(), out, in);
    if (grad_weight != nullptr) {
        MapMat dw(grad_weight->data(), out, in);
        dw.noalias() += dy.transpose() * xm;
    }
    if (grad_bias != nullptr) {
        MapVec db(grad_bias->data(), out);
        db += dy.colwise().sum().transpose();
    }
    Tensor dx(x.shape());
    MapMat dxm(dx.data(), batch, in);
    dxm.noalias() = dy * w;
    return dx;
}

Tensor SiLU::forward(const Tensor& x) const {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = x[i] * sigmoid(x[i]);
    }
    return y;
}

Tensor SiLU::backward(const Tensor& x, const Tensor& grad_out) const {
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x[i]);
        dx[i] = grad_out[i] * s * (1.0 + x[i] * (1.0 - s));
    }
    return dx;
}

Tensor Upsample2x::forward(const Tensor& x) const {
    if (x.rank() != 4) {
        throw InputError("upsample expects NCHW input");
    }
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t h = x.dim(2);
    const std::size_t w = x.dim(3);
    Tensor y({x.dim(0), x.dim(1), 2 * h, 2 * w});
    for (std::size_t p = 0; p < planes; ++p) {
        const double* src = x.data() + p * h * w;
        double* dst = y.data() + p * 4 * h * w;
        for (std::size_t i = 0; i < 2 * h; ++i) {
            for (std::size_t j = 0; j < 2 * w; ++j) {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    return y;
}

Tensor Upsample2x::backward(const Tensor& x, const Tensor& grad_out) const {
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t h = x.dim(2);
    const std::size_t w = x.dim(3);
    Tensor dx(x.shape());
    for (std::size_t p = 0; p < planes; ++p) {
        const double* src = grad_out.data() + p * 4 * h * w;
        double* dst = dx.data() + p * h * w;
        for (std::size_t i = 0; i < 2 * h; ++i) {
            for (std::size_t j = 0; j < 2 * w; ++j) {
                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
            }
        }
    }
    return dx;
}

Tensor Sequential::forward(const Tensor& x, Tape* tape) const {
    if (tape != nullptr) {
        tape->inputs.clear();
        tape->inputs.reserve(layers_.size());
    }
    Tensor current = x;
    for (const Layer& layer : layers_) {
        Tensor next = std::visit([&](const auto& l) { return l.forward(current); }, layer);
        if (tape != nullptr) {
            tape->inputs.push_back(std::move(current));
        }
        current = std::move(next);
    }
    return current;
}

Tensor Sequential::backward(const Tape& tape, const Tensor& grad_out, ParamGrads* grads) const {
    if (tape.inputs.size() != layers_.size()) {
        throw InputError("tape does not match network depth");
    }
    // Parameter slots are laid out front to back, two per parametric layer.
    std::vector<std::size_t> slot(layers_.size(), 0);
    std::size_t next_slot = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        slot[i] = next_slot;
        if (std::holds_alternative<Conv2d>(layers_[i]) || std::holds_alternative<Linear>(layers_[i])) {
            next_slot += 2;
        }
    }
    Tensor grad = grad_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        const Tensor& input = tape.inputs[i];
        Tensor* gw = grads != nullptr ? &(*grads)[slot[i]] : nullptr;
        Tensor* gb = grads != nullptr ? &(*grads)[slot[i] + 1] : nullptr;
        grad = std::visit(
            [&](const auto& l) -> Tensor {
                using L = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<L, Conv2d> || std::is_same_v<L, Linear>) {
                    return l.backward(input, grad, gw, gb);
                } else {
                    return l.backward(input, grad);
                }
            },
            layers_[i]);
    }
    return grad;
}

std::vector<Tensor*> Sequential::parameters() {
    std::vector<Tensor*> out;
    for (Layer& layer : layers_) {
        if (auto* c = std::get_if<Conv2d>(&layer)) {
            out.push_back(&c->weight);
            out.push_back(&c->bias);
        } else if (auto* l = std::get_if<Linear>(&layer)) {
            out.push_back(&l->weight);
            out.push_back(&l->bias);
        }
    }
    return out;
}

std::vector<const Tensor*> Sequential::parameters() const {
    std::vector<const Tensor*> out;
    for (const Layer& layer : layers_) {
        if (const auto* c = std::get_if<Conv2d>(&layer)) {
            out.push_back(&c->weight);
            out.push_back(&c->bias);
        } else if (const auto* l = std::get_if<Linear>(&layer)) {
            out.push_back(&l->weight);
            out.push_back(&l->bias);
        }
    }
    return out;
}

std::vector<std::string> Sequential::parameter_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (std::holds_alternative<Conv2d>(layers_[i]) || std::holds_alternative<Linear>(layers_[i])) {
            names.push_back(std::to_string(i) + ".weight");
            names.push_back(std::to_string(i) + ".bias");
        }
    }
    return names;
}

ParamGrads Sequential::zero_grads() const {
    ParamGrads grads;
    for (const Tensor* p : parameters()) {
        grads.push_back(Tensor::zeros_like(*p));
    }
    return grads;
}

std::size_t Sequential::parameter_count() const {
    std::size_t total = 0;
    for (const Tensor* p : parameters()) {
        total += p->size();
    }
    return total;
}

void add_into(ParamGrads& into, const ParamGrads& from, double scale) {
    if (into.size() != from.size()) {
        throw InputError("gradient list size mismatch");
    }
    for (std::size_t i = 0; i < into.size(); ++i) {
        into[i].add_scaled(from[i], scale);
    }
}

double global_norm(const ParamGrads& grads) {
    double acc = 0.0;
    for (const Tensor& g : grads) {
        acc += dot(g.values(), g.values());
    }
    return std::sqrt(acc);
}

}  // namespace jem::nn
