#include "hydrofusion/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace hydrofusion::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using detail::Storage;
using StoragePtr = std::shared_ptr<Storage>;

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

thread_local Tape* g_active_tape = nullptr;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
}

std::size_t norm_axis(int axis, std::size_t ndim, const char* op) {
    const int n = static_cast<int>(ndim);
    const int a = axis < 0 ? axis + n : axis;
    if (a < 0 || a >= n) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(ndim));
    }
    return static_cast<std::size_t>(a);
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

Tensor make_out(Shape shape, Buffer values, bool track) {
    auto s = std::make_shared<Storage>();
    s->shape = std::move(shape);
    s->value = std::move(values);
    s->requires_grad = track;
    return Tensor(std::move(s));
}

void record(const Tensor& out, std::function<void(Storage&)> fn) {
    g_active_tape->record(out.storage(), std::move(fn));
}

// outer x n x inner decomposition around one axis
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
    Shape out = shape;
    if (keepdim) {
        out[axis] = 1;
    } else {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    return out;
}

// Maps every output position of a broadcast to the flat index of the source.
std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
    const std::size_t nd = out.size();
    std::vector<std::size_t> stride(nd, 0);
    std::size_t acc = 1;
    for (std::size_t i = 0; i < src.size(); ++i) {
        const std::size_t si = src.size() - 1 - i;
        const std::size_t oi = nd - 1 - i;
        stride[oi] = src[si] == 1 ? 0 : acc;
        acc *= src[si];
    }
    const std::size_t total = shape_numel(out);
    std::vector<std::size_t> idx(total);
    std::vector<std::size_t> counter(nd, 0);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < total; ++k) {
        idx[k] = offset;
        for (std::size_t d = nd; d-- > 0;) {
            ++counter[d];
            offset += stride[d];
            if (counter[d] < out[d]) break;
            offset -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    return idx;
}

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) shape_fail(op, a, b);
        out[nd - 1 - i] = (da == 1) ? db : da;
    }
    return out;
}

// Broadcast plan over the output shape with adjacent dimensions merged
// wherever both operands stay contiguous (or both stay fixed) across them.
struct BinaryPlan {
    Shape out;
    std::vector<std::size_t> dims, sa, sb;  // collapsed extents and strides (0 = broadcast)

    // f(k, i, j): output index k reads a[i] and b[j].
    template <class F>
    void walk(F&& f) const {
        const std::size_t m = dims.size();
        if (m == 0) {
            f(std::size_t{0}, std::size_t{0}, std::size_t{0});
            return;
        }
        const std::size_t last = dims[m - 1], la = sa[m - 1], lb = sb[m - 1];
        std::vector<std::size_t> counter(m, 0);
        std::size_t oa = 0, ob = 0, k = 0;
        std::size_t outer = 1;
        for (std::size_t d = 0; d + 1 < m; ++d) outer *= dims[d];
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < last; ++j) f(k + j, oa + j * la, ob + j * lb);
            k += last;
            for (std::size_t d = m - 1; d-- > 0;) {
                ++counter[d];
                oa += sa[d];
                ob += sb[d];
                if (counter[d] < dims[d]) break;
                oa -= sa[d] * counter[d];
                ob -= sb[d] * counter[d];
                counter[d] = 0;
            }
        }
    }
};

std::vector<std::size_t> broadcast_strides(const Shape& src, const Shape& out) {
    const std::size_t nd = out.size();
    std::vector<std::size_t> stride(nd, 0);
    std::size_t acc = 1;
    for (std::size_t i = 0; i < src.size(); ++i) {
        const std::size_t si = src.size() - 1 - i;
        stride[nd - 1 - i] = src[si] == 1 ? 0 : acc;
        acc *= src[si];
    }
    return stride;
}

BinaryPlan make_plan(const Shape& a, const Shape& b, const char* op) {
    BinaryPlan p;
    p.out = broadcast_shapes(a, b, op);
    const auto sa = broadcast_strides(a, p.out);
    const auto sb = broadcast_strides(b, p.out);
    for (std::size_t d = 0; d < p.out.size(); ++d) {
        if (p.out[d] == 1) continue;
        if (!p.dims.empty()) {
            const std::size_t n = p.dims.back();
            auto mergeable = [&](std::size_t prev, std::size_t cur) {
                return (prev == 0 && cur == 0) || (cur != 0 && prev == cur * p.out[d]);
            };
            if (mergeable(p.sa.back(), sa[d]) && mergeable(p.sb.back(), sb[d])) {
                p.dims.back() = n * p.out[d];
                p.sa.back() = sa[d];
                p.sb.back() = sb[d];
                continue;
            }
        }
        p.dims.push_back(p.out[d]);
        p.sa.push_back(sa[d]);
        p.sb.push_back(sb[d]);
    }
    return p;
}

template <class Fwd, class Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    auto plan = std::make_shared<BinaryPlan>(make_plan(a.shape(), b.shape(), name));
    const std::size_t n = shape_numel(plan->out);
    Buffer out(n);
    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* ov = out.data();
    plan->walk([&](std::size_t k, std::size_t i, std::size_t j) { ov[k] = fwd(av[i], bv[j]); });
    const bool track = tracking({&a, &b});
    Tensor result = make_out(plan->out, std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage(), sb = b.storage();
        record(result, [sa, sb, plan, bwd](Storage& o) {
            double* ga = sa->requires_grad ? sa->ensure_grad().data() : nullptr;
            double* gb = sb->requires_grad ? sb->ensure_grad().data() : nullptr;
            const double* av = sa->value.data();
            const double* bv = sb->value.data();
            const double* ov = o.value.data();
            const double* og = o.grad.data();
            plan->walk([&](std::size_t k, std::size_t i, std::size_t j) {
                const auto [da, db] = bwd(av[i], bv[j], ov[k], og[k]);
                if (ga) ga[i] += da;
                if (gb) gb[j] += db;
            });
        });
    }
    return result;
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
    const auto av = a.data();
    Buffer out(av.size());
    for (std::size_t k = 0; k < av.size(); ++k) out[k] = fwd(av[k]);
    const bool track = tracking({&a});
    Tensor result = make_out(a.shape(), std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa, bwd](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t k = 0; k < ga.size(); ++k) {
                ga[k] += o.grad[k] * bwd(sa->value[k], o.value[k]);
            }
        });
    }
    return result;
}

Tensor constant_like_scalar(double c) { return Tensor::scalar(c); }

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() : impl_(std::make_shared<Storage>()) {}

Tensor::Tensor(Shape shape, const std::vector<double>& values, bool requires_grad)
    : Tensor(adopt(std::move(shape), Buffer(values.begin(), values.end()), requires_grad)) {}

Tensor Tensor::adopt(Shape shape, Buffer values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("Tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    auto s = std::make_shared<Storage>();
    s->shape = std::move(shape);
    s->value = std::move(values);
    s->requires_grad = requires_grad;
    return Tensor(std::move(s));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return adopt(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return adopt(Shape{}, Buffer{value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    Shape s{values.size()};
    return Tensor(std::move(s), values, requires_grad);
}

std::size_t Tensor::size(std::size_t axis) const {
    if (axis >= impl_->shape.size()) throw ShapeError("Tensor::size: axis out of range");
    return impl_->shape[axis];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("Tensor::item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return impl_->value[0];
}

void Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) impl_->grad.clear();
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    auto s = std::make_shared<Storage>();
    s->shape = impl_->shape;
    s->value = impl_->value;
    return Tensor(std::move(s));
}

Tensor Tensor::clone(bool requires_grad) const {
    return adopt(impl_->shape, impl_->value, requires_grad);
}

// ---------------------------------------------------------------- Tape

void Tape::record(std::shared_ptr<detail::Storage> output, std::function<void(detail::Storage&)> fn) {
    if (consumed_) throw std::logic_error("Tape::record: tape already consumed by backward");
    entries_.push_back(Entry{std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (consumed_) throw std::logic_error("backward: tape already consumed; record a new forward pass");
    consumed_ = true;
    if (!loss.requires_grad() || entries_.empty()) return;
    loss.storage()->ensure_grad()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (!it->output->grad.empty()) it->backward(*it->output);
    }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

// ---------------------------------------------------------------- binary

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op("add", a, b, [](double x, double y) { return x + y; },
                     [](double, double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op("sub", a, b, [](double x, double y) { return x - y; },
                     [](double, double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op("mul", a, b, [](double x, double y) { return x * y; },
                     [](double x, double y, double, double g) { return std::pair{g * y, g * x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op("div", a, b, [](double x, double y) { return x / y; },
                     [](double, double y, double o, double g) { return std::pair{g / y, -g * o / y}; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& a) { return a * -1.0; }
Tensor operator+(const Tensor& a, double c) { return add(a, constant_like_scalar(c)); }
Tensor operator+(double c, const Tensor& a) { return add(a, constant_like_scalar(c)); }
Tensor operator-(const Tensor& a, double c) { return sub(a, constant_like_scalar(c)); }
Tensor operator-(double c, const Tensor& a) { return sub(constant_like_scalar(c), a); }
Tensor operator*(const Tensor& a, double c) { return mul(a, constant_like_scalar(c)); }
Tensor operator*(double c, const Tensor& a) { return mul(a, constant_like_scalar(c)); }
Tensor operator/(const Tensor& a, double c) { return mul(a, constant_like_scalar(1.0 / c)); }

// ---------------------------------------------------------------- unary

Tensor exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (v < 0.0 || std::isnan(v)) throw DomainError("log: negative input " + std::to_string(v));
    }
    return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    for (double v : a.data()) {
        if (v < 0.0 || std::isnan(v)) throw DomainError("sqrt: negative input " + std::to_string(v));
    }
    return unary_op(a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a,
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
    return unary_op(a, [](double x) { return std::fabs(x); },
                    [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
    return unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sin(const Tensor& a) {
    return unary_op(a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
    return unary_op(a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() < 2 || b.dim() < 2) shape_fail("matmul", a.shape(), b.shape());
    const std::size_t n = a.shape()[a.dim() - 2];
    const std::size_t k = a.shape()[a.dim() - 1];
    const std::size_t kb = b.shape()[b.dim() - 2];
    const std::size_t m = b.shape()[b.dim() - 1];
    if (k != kb) shape_fail("matmul", a.shape(), b.shape());
    const bool shared_b = b.dim() == 2;
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < a.dim(); ++i) batch *= a.shape()[i];
    if (!shared_b) {
        if (b.dim() != a.dim() ||
            !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
            shape_fail("matmul", a.shape(), b.shape());
        }
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(n);
    out_shape.push_back(m);
    Buffer out(batch * n * m);
    if (shared_b) {
        MutMap(out.data(), static_cast<Eigen::Index>(batch * n), static_cast<Eigen::Index>(m)).noalias() =
            ConstMap(a.data().data(), static_cast<Eigen::Index>(batch * n), static_cast<Eigen::Index>(k)) *
            ConstMap(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
    } else {
        for (std::size_t t = 0; t < batch; ++t) {
            MutMap(out.data() + t * n * m, n, m).noalias() =
                ConstMap(a.data().data() + t * n * k, n, k) * ConstMap(b.data().data() + t * k * m, k, m);
        }
    }
    const bool track = tracking({&a, &b});
    Tensor result = make_out(std::move(out_shape), std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage(), sb = b.storage();
        record(result, [sa, sb, batch, n, k, m, shared_b](Storage& o) {
            if (shared_b) {
                ConstMap g(o.grad.data(), batch * n, m);
                if (sa->requires_grad) {
                    MutMap(sa->ensure_grad().data(), batch * n, k).noalias() +=
                        g * ConstMap(sb->value.data(), k, m).transpose();
                }
                if (sb->requires_grad) {
                    MutMap(sb->ensure_grad().data(), k, m).noalias() +=
                        ConstMap(sa->value.data(), batch * n, k).transpose() * g;
                }
                return;
            }
            for (std::size_t t = 0; t < batch; ++t) {
                ConstMap g(o.grad.data() + t * n * m, n, m);
                if (sa->requires_grad) {
                    MutMap(sa->ensure_grad().data() + t * n * k, n, k).noalias() +=
                        g * ConstMap(sb->value.data() + t * k * m, k, m).transpose();
                }
                if (sb->requires_grad) {
                    MutMap(sb->ensure_grad().data() + t * k * m, k, m).noalias() +=
                        ConstMap(sa->value.data() + t * n * k, n, k).transpose() * g;
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------- conv1d

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
    if (q.dim() != 3 || k.shape() != q.shape() || v.dim() != 3 || v.shape()[0] != q.shape()[0] ||
        v.shape()[1] != q.shape()[1]) {
        throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
    }
    const std::size_t N = q.shape()[0], T = q.shape()[1], d = q.shape()[2], dv = v.shape()[2];
    const auto Ti = static_cast<Eigen::Index>(T), di = static_cast<Eigen::Index>(d), dvi = static_cast<Eigen::Index>(dv);
    auto probs = std::make_shared<Buffer>(N * T * T);
    Buffer out(N * T * dv);
    for (std::size_t n = 0; n < N; ++n) {
        ConstMap Q(q.data().data() + n * T * d, Ti, di);
        ConstMap K(k.data().data() + n * T * d, Ti, di);
        ConstMap V(v.data().data() + n * T * dv, Ti, dvi);
        MutMap P(probs->data() + n * T * T, Ti, Ti);
        P.noalias() = (Q * K.transpose()) * scale;
        for (Eigen::Index r = 0; r < Ti; ++r) {
            auto row = P.row(r);
            row = (row.array() - row.maxCoeff()).exp();
            row /= row.sum();
        }
        MutMap(out.data() + n * T * dv, Ti, dvi).noalias() = P * V;
    }
    const bool track = tracking({&q, &k, &v});
    Tensor result = make_out({N, T, dv}, std::move(out), track);
    if (track) {
        StoragePtr sq = q.storage(), sk = k.storage(), sv = v.storage();
        record(result, [sq, sk, sv, probs, N, T, d, dv, scale](Storage& o) {
            const auto Ti = static_cast<Eigen::Index>(T), di = static_cast<Eigen::Index>(d),
                       dvi = static_cast<Eigen::Index>(dv);
            RowMat dS(Ti, Ti);
            for (std::size_t n = 0; n < N; ++n) {
                ConstMap P(probs->data() + n * T * T, Ti, Ti);
                ConstMap G(o.grad.data() + n * T * dv, Ti, dvi);
                ConstMap V(sv->value.data() + n * T * dv, Ti, dvi);
                if (sv->requires_grad) MutMap(sv->ensure_grad().data() + n * T * dv, Ti, dvi).noalias() += P.transpose() * G;
                if (!sq->requires_grad && !sk->requires_grad) continue;
                dS.noalias() = G * V.transpose();
                for (Eigen::Index r = 0; r < Ti; ++r) {
                    const double dot = dS.row(r).dot(P.row(r));
                    dS.row(r) = (P.row(r).array() * (dS.row(r).array() - dot)).matrix();
                }
                ConstMap Q(sq->value.data() + n * T * d, Ti, di);
                ConstMap K(sk->value.data() + n * T * d, Ti, di);
                if (sq->requires_grad) MutMap(sq->ensure_grad().data() + n * T * d, Ti, di).noalias() += scale * (dS * K);
                if (sk->requires_grad) MutMap(sk->ensure_grad().data() + n * T * d, Ti, di).noalias() += scale * (dS.transpose() * Q);
            }
        });
    }
    return result;
}

Tensor lstm_sequence(const Tensor& projected, const Tensor& recurrent) {
    if (projected.dim() != 3 || recurrent.dim() != 2 || recurrent.shape()[1] != projected.shape()[2] ||
        recurrent.shape()[1] != 4 * recurrent.shape()[0]) {
        throw ShapeError("lstm_sequence: projected " + shape_str(projected.shape()) + ", recurrent " +
                         shape_str(recurrent.shape()));
    }
    const std::size_t B = projected.shape()[0], S = projected.shape()[1], h = recurrent.shape()[0];
    const std::size_t G = 4 * h;
    const auto Bi = static_cast<Eigen::Index>(B), hi = static_cast<Eigen::Index>(h), Gi = static_cast<Eigen::Index>(G);
    // per step: activated gates [B, 4h], cell state and tanh(cell) [B, h]; index 0 of hs/cs is the zero state
    auto acts = std::make_shared<Buffer>(S * B * G);
    auto cs = std::make_shared<Buffer>((S + 1) * B * h, 0.0);
    auto tcs = std::make_shared<Buffer>(S * B * h);
    auto hs = std::make_shared<Buffer>((S + 1) * B * h, 0.0);
    ConstMap W(recurrent.data().data(), hi, Gi);
    const double* x = projected.data().data();
    RowMat pre(Bi, Gi);
    for (std::size_t t = 0; t < S; ++t) {
        for (std::size_t b = 0; b < B; ++b) {
            std::copy_n(x + (b * S + t) * G, G, pre.data() + b * G);
        }
        pre.noalias() += ConstMap(hs->data() + t * B * h, Bi, hi) * W;
        double* a = acts->data() + t * B * G;
        const double* cp = cs->data() + t * B * h;
        double* cn = cs->data() + (t + 1) * B * h;
        double* tc = tcs->data() + t * B * h;
        double* hn = hs->data() + (t + 1) * B * h;
        for (std::size_t b = 0; b < B; ++b) {
            const double* g = pre.data() + b * G;
            double* ab = a + b * G;
            for (std::size_t j = 0; j < h; ++j) {
                const double ig = 1.0 / (1.0 + std::exp(-g[j]));
                const double fg = 1.0 / (1.0 + std::exp(-g[h + j]));
                const double gg = std::tanh(g[2 * h + j]);
                const double og = 1.0 / (1.0 + std::exp(-g[3 * h + j]));
                ab[j] = ig;
                ab[h + j] = fg;
                ab[2 * h + j] = gg;
                ab[3 * h + j] = og;
                const double c = fg * cp[b * h + j] + ig * gg;
                cn[b * h + j] = c;
                tc[b * h + j] = std::tanh(c);
                hn[b * h + j] = og * tc[b * h + j];
            }
        }
    }
    Buffer out(hs->begin() + static_cast<std::ptrdiff_t>(S * B * h), hs->end());
    const bool track = tracking({&projected, &recurrent});
    Tensor result = make_out({B, h}, std::move(out), track);
    if (track) {
        StoragePtr sx = projected.storage(), sw = recurrent.storage();
        record(result, [sx, sw, acts, cs, tcs, hs, B, S, h, G](Storage& o) {
            const auto Bi = static_cast<Eigen::Index>(B), hi = static_cast<Eigen::Index>(h),
                       Gi = static_cast<Eigen::Index>(G);
            ConstMap W(sw->value.data(), hi, Gi);
            double* gx = sx->requires_grad ? sx->ensure_grad().data() : nullptr;
            double* gw = sw->requires_grad ? sw->ensure_grad().data() : nullptr;
            RowMat dh = ConstMap(o.grad.data(), Bi, hi);
            RowMat dc = RowMat::Zero(Bi, hi);
            RowMat dG(Bi, Gi);
            for (std::size_t t = S; t-- > 0;) {
                const double* a = acts->data() + t * B * G;
                const double* cp = cs->data() + t * B * h;
                const double* tc = tcs->data() + t * B * h;
                for (std::size_t b = 0; b < B; ++b) {
                    const double* ab = a + b * G;
                    double* d = dG.data() + b * G;
                    for (std::size_t j = 0; j < h; ++j) {
                        const double ig = ab[j], fg = ab[h + j], gg = ab[2 * h + j], og = ab[3 * h + j];
                        const double t_c = tc[b * h + j];
                        const double dhv = dh(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(j));
                        double& dcv = dc(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(j));
                        dcv += dhv * og * (1.0 - t_c * t_c);
                        d[j] = dcv * gg * ig * (1.0 - ig);
                        d[h + j] = dcv * cp[b * h + j] * fg * (1.0 - fg);
                        d[2 * h + j] = dcv * ig * (1.0 - gg * gg);
                        d[3 * h + j] = dhv * t_c * og * (1.0 - og);
                        dcv *= fg;
                    }
                }
                if (gx) {
                    for (std::size_t b = 0; b < B; ++b) {
                        double* dst = gx + (b * S + t) * G;
                        const double* src = dG.data() + b * G;
                        for (std::size_t q = 0; q < G; ++q) dst[q] += src[q];
                    }
                }
                const ConstMap hprev(hs->data() + t * B * h, Bi, hi);
                if (gw) MutMap(gw, hi, Gi).noalias() += hprev.transpose() * dG;
                dh.noalias() = dG * W.transpose();
            }
        });
    }
    return result;
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t pad_left,
              std::size_t pad_right) {
    if (x.dim() != 3 || w.dim() != 3 || x.shape()[1] != w.shape()[1]) {
        shape_fail("conv1d", x.shape(), w.shape());
    }
    const bool has_bias = bias.numel() > 0;
    const std::size_t B = x.shape()[0], cin = x.shape()[1], len = x.shape()[2];
    const std::size_t cout = w.shape()[0], ksz = w.shape()[2];
    if (has_bias && (bias.dim() != 1 || bias.shape()[0] != cout)) shape_fail("conv1d", w.shape(), bias.shape());
    if (len + pad_left + pad_right < ksz) shape_fail("conv1d", x.shape(), w.shape());
    const std::size_t lout = len + pad_left + pad_right - ksz + 1;
    const std::size_t rows = cin * ksz;
    const std::size_t cols_n = B * lout;

    // im2col laid out [Cin*K, B*Lout] so the whole batch is one GEMM
    auto cols = std::make_shared<Buffer>(rows * cols_n, 0.0);
    const double* xv = x.data().data();
    for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t kk = 0; kk < ksz; ++kk) {
            double* row = cols->data() + (c * ksz + kk) * cols_n;
            for (std::size_t b = 0; b < B; ++b) {
                const double* src = xv + (b * cin + c) * len;
                double* dst = row + b * lout;
                for (std::size_t j = 0; j < lout; ++j) {
                    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(j + kk) - static_cast<std::ptrdiff_t>(pad_left);
                    if (p >= 0 && p < static_cast<std::ptrdiff_t>(len)) dst[j] = src[p];
                }
            }
        }
    }
    RowMat prod = ConstMap(w.data().data(), cout, rows) * ConstMap(cols->data(), rows, cols_n);
    Buffer out(B * cout * lout);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t o = 0; o < cout; ++o) {
            const double bo = has_bias ? bias.data()[o] : 0.0;
            double* dst = out.data() + (b * cout + o) * lout;
            const double* src = prod.data() + o * cols_n + b * lout;
            for (std::size_t j = 0; j < lout; ++j) dst[j] = src[j] + bo;
        }
    }
    const bool track = has_bias ? tracking({&x, &w, &bias}) : tracking({&x, &w});
    Tensor result = make_out(Shape{B, cout, lout}, std::move(out), track);
    if (track) {
        StoragePtr sx = x.storage(), sw = w.storage();
        StoragePtr sbias = has_bias ? bias.storage() : nullptr;
        record(result, [=](Storage& o) {
            // regroup the output gradient as [Cout, B*Lout]
            RowMat g(cout, cols_n);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t oc = 0; oc < cout; ++oc) {
                    const double* src = o.grad.data() + (b * cout + oc) * lout;
                    std::copy(src, src + lout, g.data() + oc * cols_n + b * lout);
                }
            }
            if (sbias && sbias->requires_grad) {
                auto& gb = sbias->ensure_grad();
                for (std::size_t oc = 0; oc < cout; ++oc) gb[oc] += g.row(static_cast<Eigen::Index>(oc)).sum();
            }
            if (sw->requires_grad) {
                MutMap(sw->ensure_grad().data(), cout, rows).noalias() +=
                    g * ConstMap(cols->data(), rows, cols_n).transpose();
            }
            if (sx->requires_grad) {
                RowMat dcols = ConstMap(sw->value.data(), cout, rows).transpose() * g;
                auto& gx = sx->ensure_grad();
                for (std::size_t c = 0; c < cin; ++c) {
                    for (std::size_t kk = 0; kk < ksz; ++kk) {
                        const double* row = dcols.data() + (c * ksz + kk) * cols_n;
                        for (std::size_t b = 0; b < B; ++b) {
                            double* dst = gx.data() + (b * cin + c) * len;
                            const double* src = row + b * lout;
                            for (std::size_t j = 0; j < lout; ++j) {
                                const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(j + kk) -
                                                         static_cast<std::ptrdiff_t>(pad_left);
                                if (p >= 0 && p < static_cast<std::ptrdiff_t>(len)) dst[p] += src[j];
                            }
                        }
                    }
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const bool track = tracking({&a});
    Tensor result = make_out(Shape{}, {s}, track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (double& g : ga) g += o.grad[0];
        });
    }
    return result;
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
    const std::size_t ax = norm_axis(axis, a.dim(), "sum");
    const AxisSplit s = split_axis(a.shape(), ax);
    Buffer out(s.outer * s.inner, 0.0);
    const auto av = a.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.n; ++i) {
            const double* src = av.data() + (o * s.n + i) * s.inner;
            double* dst = out.data() + o * s.inner;
            for (std::size_t q = 0; q < s.inner; ++q) dst[q] += src[q];
        }
    }
    const bool track = tracking({&a});
    Tensor result = make_out(reduced_shape(a.shape(), ax, keepdim), std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa, s](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t oo = 0; oo < s.outer; ++oo) {
                for (std::size_t i = 0; i < s.n; ++i) {
                    double* dst = ga.data() + (oo * s.n + i) * s.inner;
                    const double* src = o.grad.data() + oo * s.inner;
                    for (std::size_t q = 0; q < s.inner; ++q) dst[q] += src[q];
                }
            }
        });
    }
    return result;
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    return sum(a) * (1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
    const std::size_t ax = norm_axis(axis, a.dim(), "mean");
    if (a.shape()[ax] == 0) throw ShapeError("mean: empty axis");
    return sum(a, axis, keepdim) * (1.0 / static_cast<double>(a.shape()[ax]));
}

Tensor variance(const Tensor& a, int axis, bool keepdim) {
    const Tensor mu = mean(a, axis, true);
    const Tensor centered = a - mu;
    return mean(square(centered), axis, keepdim);
}

Tensor softmax(const Tensor& a, int axis) {
    const std::size_t ax = norm_axis(axis, a.dim(), "softmax");
    const AxisSplit s = split_axis(a.shape(), ax);
    const auto av = a.data();
    Buffer out(av.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t q = 0; q < s.inner; ++q) {
            const std::size_t base = o * s.n * s.inner + q;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, av[base + i * s.inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < s.n; ++i) {
                const double e = std::exp(av[base + i * s.inner] - mx);
                out[base + i * s.inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= z;
        }
    }
    const bool track = tracking({&a});
    Tensor result = make_out(a.shape(), std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa, s](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t oo = 0; oo < s.outer; ++oo) {
                for (std::size_t q = 0; q < s.inner; ++q) {
                    const std::size_t base = oo * s.n * s.inner + q;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < s.n; ++i) {
                        dot += o.grad[base + i * s.inner] * o.value[base + i * s.inner];
                    }
                    for (std::size_t i = 0; i < s.n; ++i) {
                        const std::size_t k = base + i * s.inner;
                        ga[k] += o.value[k] * (o.grad[k] - dot);
                    }
                }
            }
        });
    }
    return result;
}

Tensor logsumexp(const Tensor& a, int axis, bool keepdim) {
    const std::size_t ax = norm_axis(axis, a.dim(), "logsumexp");
    const AxisSplit s = split_axis(a.shape(), ax);
    const auto av = a.data();
    Buffer out(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t q = 0; q < s.inner; ++q) {
            const std::size_t base = o * s.n * s.inner + q;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, av[base + i * s.inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < s.n; ++i) z += std::exp(av[base + i * s.inner] - mx);
            out[o * s.inner + q] = mx + std::log(z);
        }
    }
    const bool track = tracking({&a});
    Tensor result = make_out(reduced_shape(a.shape(), ax, keepdim), std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa, s](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t oo = 0; oo < s.outer; ++oo) {
                for (std::size_t q = 0; q < s.inner; ++q) {
                    const std::size_t base = oo * s.n * s.inner + q;
                    const double lse = o.value[oo * s.inner + q];
                    const double g = o.grad[oo * s.inner + q];
                    for (std::size_t i = 0; i < s.n; ++i) {
                        const std::size_t k = base + i * s.inner;
                        ga[k] += g * std::exp(sa->value[k] - lse);
                    }
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------- structure

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
    Buffer out(a.data().begin(), a.data().end());
    const bool track = tracking({&a});
    Tensor result = make_out(std::move(shape), std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += o.grad[k];
        });
    }
    return result;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    const std::size_t nd = a.dim();
    if (axes.size() != nd) throw ShapeError("permute: axes length does not match rank " + std::to_string(nd));
    std::vector<bool> seen(nd, false);
    for (std::size_t ax : axes) {
        if (ax >= nd || seen[ax]) throw ShapeError("permute: invalid axis permutation");
        seen[ax] = true;
    }
    std::vector<std::size_t> in_stride(nd, 1);
    for (std::size_t d = nd; d-- > 1;) in_stride[d - 1] = in_stride[d] * a.shape()[d];
    Shape out_shape(nd);
    std::vector<std::size_t> stride(nd);
    for (std::size_t d = 0; d < nd; ++d) {
        out_shape[d] = a.shape()[axes[d]];
        stride[d] = in_stride[axes[d]];
    }
    const std::size_t total = a.numel();
    auto index = std::make_shared<std::vector<std::size_t>>(total);
    std::vector<std::size_t> counter(nd, 0);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < total; ++k) {
        (*index)[k] = offset;
        for (std::size_t d = nd; d-- > 0;) {
            ++counter[d];
            offset += stride[d];
            if (counter[d] < out_shape[d]) break;
            offset -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    Buffer out(total);
    const auto av = a.data();
    for (std::size_t k = 0; k < total; ++k) out[k] = av[(*index)[k]];
    const bool track = tracking({&a});
    Tensor result = make_out(std::move(out_shape), std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa, index](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t k = 0; k < o.grad.size(); ++k) ga[(*index)[k]] += o.grad[k];
        });
    }
    return result;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts.front().shape();
    const std::size_t ax = norm_axis(axis, ref.size(), "concat");
    std::vector<std::size_t> widths;
    std::size_t total_n = 0;
    for (const Tensor& p : parts) {
        if (p.dim() != ref.size()) shape_fail("concat", ref, p.shape());
        for (std::size_t d = 0; d < ref.size(); ++d) {
            if (d != ax && p.shape()[d] != ref[d]) shape_fail("concat", ref, p.shape());
        }
        widths.push_back(p.shape()[ax]);
        total_n += p.shape()[ax];
    }
    Shape out_shape = ref;
    out_shape[ax] = total_n;
    const AxisSplit s = split_axis(out_shape, ax);
    Buffer out(shape_numel(out_shape));
    std::size_t at = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto pv = parts[pi].data();
        const std::size_t chunk = widths[pi] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk),
                      pv.begin() + static_cast<std::ptrdiff_t>((o + 1) * chunk),
                      out.begin() + static_cast<std::ptrdiff_t>(o * s.n * s.inner + at * s.inner));
        }
        at += widths[pi];
    }
    bool track = false;
    if (g_active_tape) {
        for (const Tensor& p : parts) track = track || p.requires_grad();
    }
    Tensor result = make_out(std::move(out_shape), std::move(out), track);
    if (track) {
        std::vector<StoragePtr> stores;
        for (const Tensor& p : parts) stores.push_back(p.storage());
        record(result, [stores, widths, s](Storage& o) {
            std::size_t at = 0;
            for (std::size_t pi = 0; pi < stores.size(); ++pi) {
                const std::size_t chunk = widths[pi] * s.inner;
                if (stores[pi]->requires_grad) {
                    auto& g = stores[pi]->ensure_grad();
                    for (std::size_t oo = 0; oo < s.outer; ++oo) {
                        const double* src = o.grad.data() + oo * s.n * s.inner + at * s.inner;
                        double* dst = g.data() + oo * chunk;
                        for (std::size_t q = 0; q < chunk; ++q) dst[q] += src[q];
                    }
                }
                at += widths[pi];
            }
        });
    }
    return result;
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = norm_axis(axis, a.dim(), "slice");
    if (begin > end || end > a.shape()[ax]) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + shape_str(a.shape()));
    }
    const AxisSplit s = split_axis(a.shape(), ax);
    Shape out_shape = a.shape();
    out_shape[ax] = end - begin;
    const std::size_t chunk = (end - begin) * s.inner;
    Buffer out(s.outer * chunk);
    const auto av = a.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        const auto src = av.begin() + static_cast<std::ptrdiff_t>(o * s.n * s.inner + begin * s.inner);
        std::copy(src, src + static_cast<std::ptrdiff_t>(chunk), out.begin() + static_cast<std::ptrdiff_t>(o * chunk));
    }
    const bool track = tracking({&a});
    Tensor result = make_out(std::move(out_shape), std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa, s, begin, chunk](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t oo = 0; oo < s.outer; ++oo) {
                double* dst = ga.data() + oo * s.n * s.inner + begin * s.inner;
                const double* src = o.grad.data() + oo * chunk;
                for (std::size_t q = 0; q < chunk; ++q) dst[q] += src[q];
            }
        });
    }
    return result;
}

Tensor pad_edge(const Tensor& a, std::size_t left, std::size_t right) {
    if (a.dim() == 0 || a.shape().back() == 0) throw ShapeError("pad_edge: empty last axis in " + shape_str(a.shape()));
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.numel() / n;
    const std::size_t m = n + left + right;
    Shape out_shape = a.shape();
    out_shape.back() = m;
    Buffer out(rows * m);
    const auto av = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = av.data() + r * n;
        double* dst = out.data() + r * m;
        for (std::size_t j = 0; j < m; ++j) dst[j] = src[j < left ? 0 : std::min(j - left, n - 1)];
    }
    const bool track = tracking({&a});
    Tensor result = make_out(std::move(out_shape), std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa, rows, n, m, left](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* src = o.grad.data() + r * m;
                double* dst = ga.data() + r * n;
                for (std::size_t j = 0; j < m; ++j) dst[j < left ? 0 : std::min(j - left, n - 1)] += src[j];
            }
        });
    }
    return result;
}

Tensor masked_select(const Tensor& a, const std::vector<unsigned char>& mask) {
    if (mask.size() != a.numel()) {
        throw ShapeError("masked_select: mask of " + std::to_string(mask.size()) +
                         " entries for tensor " + shape_str(a.shape()));
    }
    auto picked = std::make_shared<std::vector<std::size_t>>();
    Buffer out;
    const auto av = a.data();
    for (std::size_t k = 0; k < mask.size(); ++k) {
        if (mask[k]) {
            picked->push_back(k);
            out.push_back(av[k]);
        }
    }
    const bool track = tracking({&a});
    const std::size_t count = out.size();
    Tensor result = make_out(Shape{count}, std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa, picked](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t k = 0; k < picked->size(); ++k) ga[(*picked)[k]] += o.grad[k];
        });
    }
    return result;
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    const Shape target = broadcast_shapes(a.shape(), shape, "broadcast_to");
    if (target != shape) shape_fail("broadcast_to", a.shape(), shape);
    auto index = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), shape));
    Buffer out(index->size());
    const auto av = a.data();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = av[(*index)[k]];
    const bool track = tracking({&a});
    Tensor result = make_out(shape, std::move(out), track);
    if (track) {
        StoragePtr sa = a.storage();
        record(result, [sa, index](Storage& o) {
            auto& ga = sa->ensure_grad();
            for (std::size_t k = 0; k < o.grad.size(); ++k) ga[(*index)[k]] += o.grad[k];
        });
    }
    return result;
}

}  // namespace hydrofusion::ad
