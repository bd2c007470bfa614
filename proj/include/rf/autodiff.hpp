#pragma once

// Minimal reverse-mode differentiable arrays.
//
// Every op that consumes an Array with requires_grad set (while gradient
// recording is enabled) appends an entry to the calling thread's Tape.
// backward() replays the tape in reverse and accumulates into leaf grads.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rf::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something flows in
    bool requires_grad = false;
    bool is_leaf = true;
};

}  // namespace detail

class Array {
public:
    Array();

    static Array from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Array zeros(Shape shape, bool requires_grad = false);
    static Array full(Shape shape, double value);
    static Array scalar(double value);

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    double item() const;
    double at(std::size_t flat_index) const { return node_->value.at(flat_index); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag);
    bool is_leaf() const { return node_->is_leaf; }

    bool has_grad() const { return !node_->grad.empty(); }
    // Zero-filled view when no gradient has arrived yet.
    std::vector<double> grad_or_zero() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Leaf-only in-place access, used by optimizers and checkpoint loading.
    std::span<double> mutable_data();

    const detail::Node* id() const { return node_.get(); }

private:
    explicit Array(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend class Tape;
    friend struct OpAccess;
};

// Ordered record of executed differentiable ops for one thread.
class Tape {
public:
    using BackwardFn = std::function<void(const std::vector<double>& grad_out)>;

    struct Entry {
        const char* op;
        std::shared_ptr<detail::Node> output;
        BackwardFn backward;
    };

    static Tape& current();

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }

    // Replays every entry once in reverse order, then clears the tape.
    void backward(const Array& loss);

    // Number of entries visited by the most recent backward pass.
    std::size_t last_visited() const { return last_visited_; }

    void record(const char* op, std::shared_ptr<detail::Node> output, BackwardFn fn);

private:
    std::vector<Entry> entries_;
    std::size_t last_visited_ = 0;
};

void backward(const Array& loss);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Value copy with no tape linkage.
Array detach(const Array& x);

// Boolean keep-mask for masked_softmax; shared so tapes can hold it cheaply.
using Mask = std::shared_ptr<const std::vector<std::uint8_t>>;

Array matmul(const Array& a, const Array& b);
Array transpose(const Array& a);
Array reshape(const Array& a, Shape shape);

Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);
Array div(const Array& a, const Array& b);

Array add_scalar(const Array& a, double s);
Array mul_scalar(const Array& a, double s);

Array exp(const Array& a);
Array log(const Array& a);
Array sqrt(const Array& a);

Array sum(const Array& a);
Array sum(const Array& a, std::size_t axis);
Array mean(const Array& a);
Array mean(const Array& a, std::size_t axis);

Array softmax(const Array& a);
// Softmax over the last axis restricted to entries where mask != 0.
// Masked entries come out as exact zeros; every row needs one kept entry.
Array masked_softmax(const Array& a, const Mask& mask);
Array logsumexp(const Array& a);

Array gather_rows(const Array& a, std::span<const std::size_t> rows);
Array concat(std::span<const Array> parts, std::size_t axis);
Array concat(std::initializer_list<Array> parts, std::size_t axis);

Array layer_norm(const Array& x, const Array& gamma, const Array& beta, double eps = 1e-5);
Array silu(const Array& x);

inline Array operator+(const Array& a, const Array& b) { return add(a, b); }
inline Array operator-(const Array& a, const Array& b) { return sub(a, b); }
inline Array operator*(const Array& a, const Array& b) { return mul(a, b); }
inline Array operator/(const Array& a, const Array& b) { return div(a, b); }
inline Array operator*(const Array& a, double s) { return mul_scalar(a, s); }
inline Array operator*(double s, const Array& a) { return mul_scalar(a, s); }
inline Array operator+(const Array& a, double s) { return add_scalar(a, s); }
inline Array operator-(const Array& a) { return mul_scalar(a, -1.0); }

}  // namespace rf::ad
