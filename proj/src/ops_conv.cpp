// Convolutions lowered to GEMM through an explicit column buffer per sample.

#include <Eigen/Core>

#include "stfusion/errors.hpp"
#include "stfusion/ops.hpp"

namespace stf {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

struct Conv2dGeometry {
    std::size_t batch, in_ch, time, height, width;
    std::size_t out_ch, kh, kw, pad;
    std::size_t out_h, out_w;

    std::size_t col_rows() const { return in_ch * kh * kw; }
    std::size_t col_cols() const { return time * out_h * out_w; }
    std::size_t in_sample() const { return in_ch * time * height * width; }
    std::size_t out_sample() const { return out_ch * time * out_h * out_w; }
};

struct Conv1dGeometry {
    std::size_t batch, in_ch, time, plane;
    std::size_t out_ch, kt, pad;
    std::size_t out_t;

    std::size_t col_rows() const { return in_ch * kt; }
    std::size_t col_cols() const { return out_t * plane; }
    std::size_t in_sample() const { return in_ch * time * plane; }
    std::size_t out_sample() const { return out_ch * out_t * plane; }
};

// Valid output index range [lo, hi) for an input offset `shift` = k - pad.
inline void valid_range(std::ptrdiff_t shift, std::size_t in_extent, std::size_t out_extent, std::size_t& lo,
                        std::size_t& hi) {
    const auto in = static_cast<std::ptrdiff_t>(in_extent);
    const auto out = static_cast<std::ptrdiff_t>(out_extent);
    const std::ptrdiff_t l = std::max<std::ptrdiff_t>(0, -shift);
    const std::ptrdiff_t h = std::min<std::ptrdiff_t>(out, in - shift);
    lo = static_cast<std::size_t>(l);
    hi = static_cast<std::size_t>(std::max(l, h));
}

void im2col_2d(const Conv2dGeometry& g, const double* in, double* col) {
    const std::size_t cols = g.col_cols();
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        for (std::size_t dy = 0; dy < g.kh; ++dy) {
            for (std::size_t dx = 0; dx < g.kw; ++dx) {
                double* row = col + ((c * g.kh + dy) * g.kw + dx) * cols;
                const auto sy = static_cast<std::ptrdiff_t>(dy) - static_cast<std::ptrdiff_t>(g.pad);
                const auto sx = static_cast<std::ptrdiff_t>(dx) - static_cast<std::ptrdiff_t>(g.pad);
                std::size_t ylo, yhi, xlo, xhi;
                valid_range(sy, g.height, g.out_h, ylo, yhi);
                valid_range(sx, g.width, g.out_w, xlo, xhi);
                for (std::size_t t = 0; t < g.time; ++t) {
                    const double* plane = in + (c * g.time + t) * g.height * g.width;
                    double* dst_plane = row + t * g.out_h * g.out_w;
                    for (std::size_t y = 0; y < g.out_h; ++y) {
                        double* dst = dst_plane + y * g.out_w;
                        if (y < ylo || y >= yhi) {
                            std::fill(dst, dst + g.out_w, 0.0);
                            continue;
                        }
                        const double* src = plane + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + sy) * g.width;
                        std::fill(dst, dst + xlo, 0.0);
                        for (std::size_t x = xlo; x < xhi; ++x) dst[x] = src[static_cast<std::ptrdiff_t>(x) + sx];
                        std::fill(dst + xhi, dst + g.out_w, 0.0);
                    }
                }
            }
        }
    }
}

void col2im_2d(const Conv2dGeometry& g, const double* col, double* in_grad) {
    const std::size_t cols = g.col_cols();
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        for (std::size_t dy = 0; dy < g.kh; ++dy) {
            for (std::size_t dx = 0; dx < g.kw; ++dx) {
                const double* row = col + ((c * g.kh + dy) * g.kw + dx) * cols;
                const auto sy = static_cast<std::ptrdiff_t>(dy) - static_cast<std::ptrdiff_t>(g.pad);
                const auto sx = static_cast<std::ptrdiff_t>(dx) - static_cast<std::ptrdiff_t>(g.pad);
                std::size_t ylo, yhi, xlo, xhi;
                valid_range(sy, g.height, g.out_h, ylo, yhi);
                valid_range(sx, g.width, g.out_w, xlo, xhi);
                for (std::size_t t = 0; t < g.time; ++t) {
                    double* plane = in_grad + (c * g.time + t) * g.height * g.width;
                    const double* src_plane = row + t * g.out_h * g.out_w;
                    for (std::size_t y = ylo; y < yhi; ++y) {
                        const double* src = src_plane + y * g.out_w;
                        double* dst = plane + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + sy) * g.width;
                        for (std::size_t x = xlo; x < xhi; ++x) dst[static_cast<std::ptrdiff_t>(x) + sx] += src[x];
                    }
                }
            }
        }
    }
}

void im2col_1d(const Conv1dGeometry& g, const double* in, double* col) {
    const std::size_t cols = g.col_cols();
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        for (std::size_t dt = 0; dt < g.kt; ++dt) {
            double* row = col + (c * g.kt + dt) * cols;
            const auto st = static_cast<std::ptrdiff_t>(dt) - static_cast<std::ptrdiff_t>(g.pad);
            std::size_t tlo, thi;
            valid_range(st, g.time, g.out_t, tlo, thi);
            for (std::size_t t = 0; t < g.out_t; ++t) {
                double* dst = row + t * g.plane;
                if (t < tlo || t >= thi) {
                    std::fill(dst, dst + g.plane, 0.0);
                    continue;
                }
                const double* src = in + (c * g.time + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) + st)) * g.plane;
                std::copy(src, src + g.plane, dst);
            }
        }
    }
}

void col2im_1d(const Conv1dGeometry& g, const double* col, double* in_grad) {
    const std::size_t cols = g.col_cols();
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        for (std::size_t dt = 0; dt < g.kt; ++dt) {
            const double* row = col + (c * g.kt + dt) * cols;
            const auto st = static_cast<std::ptrdiff_t>(dt) - static_cast<std::ptrdiff_t>(g.pad);
            std::size_t tlo, thi;
            valid_range(st, g.time, g.out_t, tlo, thi);
            for (std::size_t t = tlo; t < thi; ++t) {
                const double* src = row + t * g.plane;
                double* dst = in_grad + (c * g.time + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) + st)) * g.plane;
                for (std::size_t s = 0; s < g.plane; ++s) dst[s] += src[s];
            }
        }
    }
}

std::size_t output_extent(std::size_t in, std::size_t k, std::size_t pad, const Tensor& input, const Tensor& kernel) {
    if (in + 2 * pad < k) {
        throw ShapeError("convolution kernel " + to_string(kernel.shape()) + " larger than padded input " +
                         to_string(input.shape()));
    }
    return in + 2 * pad - k + 1;
}

// Shared GEMM driver: out_n = K * col_n, grads via the transposes.
template <class Geometry, class Im2Col, class Col2Im>
Tensor run_conv(const Tensor& input, const Tensor& kernel, const Geometry& g, Shape out_shape, Im2Col im2col,
                Col2Im col2im) {
    std::vector<double> out(numel(out_shape));
    std::vector<double> col(g.col_rows() * g.col_cols());
    const ConstMatrixMap k(kernel.data().data(), static_cast<Eigen::Index>(g.out_ch),
                           static_cast<Eigen::Index>(g.col_rows()));
    for (std::size_t n = 0; n < g.batch; ++n) {
        im2col(g, input.data().data() + n * g.in_sample(), col.data());
        const ConstMatrixMap c(col.data(), static_cast<Eigen::Index>(g.col_rows()),
                               static_cast<Eigen::Index>(g.col_cols()));
        MatrixMap o(out.data() + n * g.out_sample(), static_cast<Eigen::Index>(g.out_ch),
                    static_cast<Eigen::Index>(g.col_cols()));
        o.noalias() = k * c;
    }
    return detail::make_result(std::move(out_shape), std::move(out), {input, kernel},
                               [g, im2col, col2im](const TensorNode& self) {
        TensorNode& in = *self.inputs[0];
        TensorNode& ker = *self.inputs[1];
        const auto rows = static_cast<Eigen::Index>(g.col_rows());
        const auto cols = static_cast<Eigen::Index>(g.col_cols());
        const auto och = static_cast<Eigen::Index>(g.out_ch);
        const ConstMatrixMap k(ker.data.data(), och, rows);
        std::vector<double> col(g.col_rows() * g.col_cols());
        std::vector<double> gcol(in.requires_grad ? col.size() : 0);
        for (std::size_t n = 0; n < g.batch; ++n) {
            const ConstMatrixMap go(self.grad.data() + n * g.out_sample(), och, cols);
            if (ker.requires_grad) {
                im2col(g, in.data.data() + n * g.in_sample(), col.data());
                const ConstMatrixMap c(col.data(), rows, cols);
                MatrixMap gk(ker.grad.data(), och, rows);
                gk.noalias() += go * c.transpose();
            }
            if (in.requires_grad) {
                MatrixMap gc(gcol.data(), rows, cols);
                gc.noalias() = k.transpose() * go;
                col2im(g, gcol.data(), in.grad.data() + n * g.in_sample());
            }
        }
    });
}

void check_odd(std::size_t extent, const Tensor& kernel) {
    if (extent % 2 == 0) {
        throw ContractError("convolution kernel extents must be odd, got " + to_string(kernel.shape()));
    }
}

}  // namespace

Tensor conv2d_spatial(const Tensor& input, const Tensor& kernel, std::size_t padding) {
    if (input.rank() != 5 || kernel.rank() != 4) {
        throw ShapeError("conv2d_spatial expects rank-5 input and rank-4 kernel, got " + to_string(input.shape()) +
                         " and " + to_string(kernel.shape()));
    }
    if (input.dim(1) != kernel.dim(1)) {
        throw ShapeError("conv2d_spatial channel mismatch: input " + to_string(input.shape()) + " vs kernel " +
                         to_string(kernel.shape()));
    }
    check_odd(kernel.dim(2), kernel);
    check_odd(kernel.dim(3), kernel);
    Conv2dGeometry g{};
    g.batch = input.dim(0);
    g.in_ch = input.dim(1);
    g.time = input.dim(2);
    g.height = input.dim(3);
    g.width = input.dim(4);
    g.out_ch = kernel.dim(0);
    g.kh = kernel.dim(2);
    g.kw = kernel.dim(3);
    g.pad = padding;
    g.out_h = output_extent(g.height, g.kh, padding, input, kernel);
    g.out_w = output_extent(g.width, g.kw, padding, input, kernel);
    return run_conv(input, kernel, g, {g.batch, g.out_ch, g.time, g.out_h, g.out_w}, im2col_2d, col2im_2d);
}

Tensor conv1d_temporal(const Tensor& input, const Tensor& kernel, std::size_t padding) {
    if (input.rank() != 5 || kernel.rank() != 3) {
        throw ShapeError("conv1d_temporal expects rank-5 input and rank-3 kernel, got " + to_string(input.shape()) +
                         " and " + to_string(kernel.shape()));
    }
    if (input.dim(1) != kernel.dim(1)) {
        throw ShapeError("conv1d_temporal channel mismatch: input " + to_string(input.shape()) + " vs kernel " +
                         to_string(kernel.shape()));
    }
    check_odd(kernel.dim(2), kernel);
    Conv1dGeometry g{};
    g.batch = input.dim(0);
    g.in_ch = input.dim(1);
    g.time = input.dim(2);
    g.plane = input.dim(3) * input.dim(4);
    g.out_ch = kernel.dim(0);
    g.kt = kernel.dim(2);
    g.pad = padding;
    g.out_t = output_extent(g.time, g.kt, padding, input, kernel);
    return run_conv(input, kernel, g, {g.batch, g.out_ch, g.out_t, input.dim(3), input.dim(4)}, im2col_1d,
                    col2im_1d);
}

}  // namespace stf
