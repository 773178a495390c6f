#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 tensors.
//
// A Tensor is a cheap handle onto shared storage. Operations record a
// backward closure on the thread's active Tape (see TapeScope) whenever one
// of their inputs requires a gradient. Without an active tape, operations
// run in inference mode and nothing is recorded.

#include <cstddef>
#include <functional>
#include <new>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hydrofusion::ad {

using Shape = std::vector<std::size_t>;

// 64-byte aligned so vectorised reductions do not change summation order with
// the heap address of a buffer.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

namespace detail {
struct Storage {
    Shape shape;
    Buffer value;
    Buffer grad;  // empty until a gradient arrives
    bool requires_grad = false;

    Buffer& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};
}  // namespace detail

class Tensor {
public:
    Tensor();
    Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false);
    // Takes ownership of an aligned buffer without copying.
    static Tensor adopt(Shape shape, Buffer values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);

    const Shape& shape() const { return impl_->shape; }
    std::size_t dim() const { return impl_->shape.size(); }
    std::size_t size(std::size_t axis) const;
    std::size_t numel() const { return impl_->value.size(); }

    std::span<const double> data() const { return impl_->value; }
    // Direct write access; only meaningful for leaves (parameters, inputs).
    std::span<double> mutable_data() { return impl_->value; }
    double operator[](std::size_t i) const { return impl_->value[i]; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on);
    bool has_grad() const { return !impl_->grad.empty(); }
    // Empty span when no gradient has been accumulated.
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() { return impl_->ensure_grad(); }
    void zero_grad();

    // Same values, cut from the tape.
    Tensor detach() const;
    // Deep copy of the values into a fresh leaf.
    Tensor clone(bool requires_grad = false) const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    const std::shared_ptr<detail::Storage>& storage() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::Storage> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::Storage> impl_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
    // Throws if loss is not a scalar or if the tape was already consumed.
    void backward(const Tensor& loss);

    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    void record(std::shared_ptr<detail::Storage> output, std::function<void(detail::Storage&)> fn);

private:
    struct Entry {
        std::shared_ptr<detail::Storage> output;
        std::function<void(detail::Storage&)> backward;
    };
    std::vector<Entry> entries_;
    bool consumed_ = false;
};

// Installs a tape as the calling thread's recording target for its lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

// ---- elementwise binary (numpy broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator+(const Tensor& a, double c);
Tensor operator+(double c, const Tensor& a);
Tensor operator-(const Tensor& a, double c);
Tensor operator-(double c, const Tensor& a);
Tensor operator*(const Tensor& a, double c);
Tensor operator*(double c, const Tensor& a);
Tensor operator/(const Tensor& a, double c);

// ---- elementwise unary ----
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);    // DomainError on negative input
Tensor sqrt(const Tensor& a);   // DomainError on negative input; d/dx at 0 taken as 0
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);    // d/dx at 0 taken as 0
Tensor square(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);

// ---- linear algebra ----
// a: [..., n, k]; b: [k, m] (shared) or [..., k, m] with identical leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [B, Cin, L], w: [Cout, Cin, K], bias: [Cout] or empty Tensor.
// Zero padding of pad_left/pad_right positions, stride 1.
// softmax(q kᵀ · scale) v per leading index; q, k: [N, T, d], v: [N, T, dv].
// Only the attention probabilities are kept for the backward pass.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale);

// Single-layer LSTM from a zero state, gate order (i, f, g, o).
// projected: [B, S, 4h] input projections including bias; recurrent: [h, 4h].
// Returns the final hidden state [B, h].
Tensor lstm_sequence(const Tensor& projected, const Tensor& recurrent);

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t pad_left,
              std::size_t pad_right);

// ---- reductions (axis may be negative) ----
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
// Population variance (divides by n).
Tensor variance(const Tensor& a, int axis, bool keepdim = false);
Tensor softmax(const Tensor& a, int axis);
Tensor logsumexp(const Tensor& a, int axis, bool keepdim = false);

// ---- structure ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
// Repeats the first/last entry of the last axis `left`/`right` times.
Tensor pad_edge(const Tensor& a, std::size_t left, std::size_t right);
// Flattened selection of the positions where mask is nonzero; result is 1-D.
Tensor masked_select(const Tensor& a, const std::vector<unsigned char>& mask);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

}  // namespace hydrofusion::ad
