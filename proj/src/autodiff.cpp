#include "rf/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <malloc.h>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace rf::ad {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

// Ops allocate and free many same-sized buffers of a few hundred KB. With
// glibc defaults each of those becomes a fresh mmap plus page faults, which
// dominated the training step. Keep them on the heap instead.
const bool g_allocator_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}();

void require_finite(const Node& n, const char* op) {
    // Exponent bits all set means inf or NaN. Integer OR vectorizes.
    constexpr std::uint64_t exp_mask = 0x7ff0000000000000ULL;
    std::uint64_t bad = 0;
    for (double v : n.value) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & exp_mask) == exp_mask);
    if (bad) throw std::invalid_argument(std::string(op) + ": non-finite input of shape " + shape_str(n.shape));
}

// Vectorized elementwise exp; in and out may alias. Every element goes
// through the same fixed-size packet path, so results never depend on
// buffer alignment or position.
void vexp(const double* in, double* out, std::size_t n) {
    Eigen::Array<double, 8, 1> buf;
    for (std::size_t i = 0; i < n; i += 8) {
        const std::size_t m = std::min<std::size_t>(8, n - i);
        buf.setZero();
        for (std::size_t j = 0; j < m; ++j) buf[static_cast<Eigen::Index>(j)] = in[i + j];
        buf = buf.exp();
        for (std::size_t j = 0; j < m; ++j) out[i + j] = buf[static_cast<Eigen::Index>(j)];
    }
}

std::vector<double>& grad_buf(Node& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

NodePtr new_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

bool any_requires_grad(std::initializer_list<const Node*> inputs) {
    if (!g_grad_enabled) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Node* n) { return n->requires_grad; });
}

}  // namespace

struct OpAccess {
    static const NodePtr& node(const Array& a) { return a.node_; }
    static Array wrap(NodePtr n) { return Array(std::move(n)); }

    // Creates the output array; records `fn` only if some input needs a gradient.
    template <class Fn>
    static Array result(const char* op, Shape shape, std::vector<double> value,
                        std::initializer_list<const Node*> inputs, Fn&& make_backward) {
        auto out = new_node(std::move(shape), std::move(value));
        if (any_requires_grad(inputs)) {
            out->requires_grad = true;
            out->is_leaf = false;
            Tape::current().record(op, out, make_backward(out.get()));
        }
        return Array(std::move(out));
    }
};

namespace {

const Node& N(const Array& a) { return *OpAccess::node(a); }
NodePtr P(const Array& a) { return OpAccess::node(a); }

void require_rank(const Array& a, std::size_t r, const char* op) {
    if (a.rank() != r) {
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                                    shape_str(a.shape()));
    }
}

// Index maps for numpy-style broadcasting between two shapes.
struct Broadcast {
    // RowB / RowA: the smaller operand matches the trailing dims of the other.
    enum class Kind { Same, ScalarB, ScalarA, RowB, RowA, General } kind;
    std::size_t period = 1;  // RowA / RowB
    Shape out;
    std::vector<std::size_t> ia, ib;  // General only
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
    Broadcast bc;
    if (a == b) {
        bc.kind = Broadcast::Kind::Same;
        bc.out = a;
        return bc;
    }
    const std::size_t na = numel(a), nb = numel(b);
    const std::size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1), out(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
    for (std::size_t d = 0; d < rank; ++d) {
        if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
        }
        out[d] = std::max(pa[d], pb[d]);
    }
    bc.out = out;
    if (nb == 1 && out == pa) {
        bc.kind = Broadcast::Kind::ScalarB;
        bc.out = a;
        return bc;
    }
    if (na == 1 && out == pb) {
        bc.kind = Broadcast::Kind::ScalarA;
        bc.out = b;
        return bc;
    }
    auto is_suffix = [](const Shape& small, const Shape& big) {
        return small.size() <= big.size() && std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
    };
    if (out == pa && is_suffix(b, a)) {
        bc.kind = Broadcast::Kind::RowB;
        bc.out = a;
        bc.period = nb;
        return bc;
    }
    if (out == pb && is_suffix(a, b)) {
        bc.kind = Broadcast::Kind::RowA;
        bc.out = b;
        bc.period = na;
        return bc;
    }
    bc.kind = Broadcast::Kind::General;
    const std::size_t total = numel(out);
    bc.ia.resize(total);
    bc.ib.resize(total);
    std::vector<std::size_t> sa(rank), sb(rank);
    std::size_t stride_a = 1, stride_b = 1;
    for (std::size_t d = rank; d-- > 0;) {
        sa[d] = pa[d] == 1 ? 0 : stride_a;
        sb[d] = pb[d] == 1 ? 0 : stride_b;
        stride_a *= pa[d];
        stride_b *= pb[d];
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
        bc.ia[flat] = oa;
        bc.ib[flat] = ob;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out[d]) break;
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
    return bc;
}

template <class F>
std::vector<double> apply_binary(const Broadcast& bc, const std::vector<double>& a, const std::vector<double>& b, F f) {
    const std::size_t total = numel(bc.out);
    std::vector<double> out(total);
    switch (bc.kind) {
        case Broadcast::Kind::Same:
            for (std::size_t i = 0; i < total; ++i) out[i] = f(a[i], b[i]);
            break;
        case Broadcast::Kind::ScalarB:
            for (std::size_t i = 0; i < total; ++i) out[i] = f(a[i], b[0]);
            break;
        case Broadcast::Kind::ScalarA:
            for (std::size_t i = 0; i < total; ++i) out[i] = f(a[0], b[i]);
            break;
        case Broadcast::Kind::RowB:
            for (std::size_t base = 0; base < total; base += bc.period)
                for (std::size_t j = 0; j < bc.period; ++j) out[base + j] = f(a[base + j], b[j]);
            break;
        case Broadcast::Kind::RowA:
            for (std::size_t base = 0; base < total; base += bc.period)
                for (std::size_t j = 0; j < bc.period; ++j) out[base + j] = f(a[j], b[base + j]);
            break;
        case Broadcast::Kind::General:
            for (std::size_t i = 0; i < total; ++i) out[i] = f(a[bc.ia[i]], b[bc.ib[i]]);
            break;
    }
    return out;
}

// Calls fn(i, ia, ib) for every output index, specialized per broadcast kind.
template <class Fn>
void for_each_index(const Broadcast& bc, std::size_t total, Fn fn) {
    switch (bc.kind) {
        case Broadcast::Kind::Same:
            for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
            break;
        case Broadcast::Kind::ScalarB:
            for (std::size_t i = 0; i < total; ++i) fn(i, i, std::size_t{0});
            break;
        case Broadcast::Kind::ScalarA:
            for (std::size_t i = 0; i < total; ++i) fn(i, std::size_t{0}, i);
            break;
        case Broadcast::Kind::RowB:
            for (std::size_t base = 0; base < total; base += bc.period)
                for (std::size_t j = 0; j < bc.period; ++j) fn(base + j, base + j, j);
            break;
        case Broadcast::Kind::RowA:
            for (std::size_t base = 0; base < total; base += bc.period)
                for (std::size_t j = 0; j < bc.period; ++j) fn(base + j, j, base + j);
            break;
        case Broadcast::Kind::General:
            for (std::size_t i = 0; i < total; ++i) fn(i, bc.ia[i], bc.ib[i]);
            break;
    }
}

// Shared machinery for elementwise binaries. `da`/`db` give local partials.
template <class F, class DA, class DB>
Array binary_op(const char* op, const Array& a, const Array& b, F f, DA da, DB db) {
    require_finite(N(a), op);
    require_finite(N(b), op);
    auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), op));
    auto value = apply_binary(*bc, N(a).value, N(b).value, f);
    NodePtr pa = P(a), pb = P(b);
    return OpAccess::result(op, bc->out, std::move(value), {pa.get(), pb.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            const std::size_t total = g.size();
            const double* av = pa->value.data();
            const double* bv = pb->value.data();
            if (pa->requires_grad) {
                double* ga = grad_buf(*pa).data();
                for_each_index(*bc, total, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                    ga[ia] += g[i] * da(av[ia], bv[ib]);
                });
            }
            if (pb->requires_grad) {
                double* gb = grad_buf(*pb).data();
                for_each_index(*bc, total, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                    gb[ib] += g[i] * db(av[ia], bv[ib]);
                });
            }
        };
    });
}

template <class F, class D>
Array unary_op(const char* op, const Array& a, F f, D deriv) {
    require_finite(N(a), op);
    const auto& in = N(a).value;
    std::vector<double> value(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) value[i] = f(in[i]);
    NodePtr pa = P(a);
    return OpAccess::result(op, a.shape(), std::move(value), {pa.get()}, [=](Node* out) {
        return [=](const std::vector<double>& g) {
            auto& ga = grad_buf(*pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(pa->value[i], out->value[i]);
        };
    });
}

// Splits `shape` around `axis` into (outer, n, inner).
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
    s.n = shape[axis];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
    return s;
}

std::size_t last_dim(const Array& a, const char* op) {
    if (a.rank() == 0) throw std::invalid_argument(std::string(op) + ": needs rank >= 1");
    return a.shape().back();
}

}  // namespace

// ---------------------------------------------------------------------------
// Array

Array::Array() : node_(new_node({}, {0.0})) {}

Array Array::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (std::any_of(shape.begin(), shape.end(), [](std::size_t d) { return d == 0; })) {
        throw std::invalid_argument("Array: zero-sized dimension in shape " + shape_str(shape));
    }
    if (numel(shape) != data.size()) {
        throw std::invalid_argument("Array: data length " + std::to_string(data.size()) + " does not match shape " +
                                    shape_str(shape));
    }
    auto n = new_node(std::move(shape), std::move(data));
    require_finite(*n, "Array::from");
    n->requires_grad = requires_grad;
    return Array(std::move(n));
}

Array Array::zeros(Shape shape, bool requires_grad) {
    const std::size_t count = numel(shape);
    return from(std::move(shape), std::vector<double>(count, 0.0), requires_grad);
}

Array Array::full(Shape shape, double value) {
    const std::size_t count = numel(shape);
    return from(std::move(shape), std::vector<double>(count, value));
}

Array Array::scalar(double value) { return from({}, {value}); }

std::size_t Array::dim(std::size_t axis) const {
    if (axis >= rank()) throw std::out_of_range("Array::dim: axis out of range for " + shape_str(shape()));
    return node_->shape[axis];
}

double Array::item() const {
    if (size() != 1) throw std::invalid_argument("Array::item: not a scalar, shape " + shape_str(shape()));
    return node_->value[0];
}

void Array::set_requires_grad(bool flag) {
    if (!node_->is_leaf) throw std::logic_error("Array::set_requires_grad: only leaves can be toggled");
    node_->requires_grad = flag;
}

std::vector<double> Array::grad_or_zero() const {
    if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
    return node_->grad;
}

std::span<const double> Array::grad() const {
    if (node_->grad.empty()) throw std::logic_error("Array::grad: no gradient present");
    return node_->grad;
}

void Array::zero_grad() { node_->grad.clear(); }

std::span<double> Array::mutable_data() {
    if (!node_->is_leaf) throw std::logic_error("Array::mutable_data: only leaves are mutable");
    return node_->value;
}

// ---------------------------------------------------------------------------
// Tape

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(const char* op, std::shared_ptr<Node> output, BackwardFn fn) {
    entries_.push_back(Entry{op, std::move(output), std::move(fn)});
}

void Tape::backward(const Array& loss) {
    if (loss.size() != 1 || loss.rank() != 0) {
        throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) throw std::invalid_argument("backward: loss does not depend on any tracked array");
    if (entries_.empty() && !loss.is_leaf()) throw std::logic_error("backward: tape is empty");
    auto& root = grad_buf(*loss.node_);
    root[0] += 1.0;
    last_visited_ = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        ++last_visited_;
        if (it->output->grad.empty()) continue;
        it->backward(it->output->grad);
    }
    // Interior gradients are scratch space; leaves keep theirs.
    for (auto& e : entries_) e.output->grad.clear();
    entries_.clear();
}

void backward(const Array& loss) { Tape::current().backward(loss); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Array detach(const Array& x) {
    auto n = new_node(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    return OpAccess::wrap(std::move(n));
}

// ---------------------------------------------------------------------------
// Linear algebra and shape ops

Array matmul(const Array& a, const Array& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    require_finite(N(a), "matmul");
    require_finite(N(b), "matmul");
    const Eigen::Index m = static_cast<Eigen::Index>(a.dim(0));
    const Eigen::Index k = static_cast<Eigen::Index>(a.dim(1));
    const Eigen::Index n = static_cast<Eigen::Index>(b.dim(1));
    std::vector<double> value(static_cast<std::size_t>(m * n));
    MatMap(value.data(), m, n).noalias() = ConstMatMap(N(a).value.data(), m, k) * ConstMatMap(N(b).value.data(), k, n);
    NodePtr pa = P(a), pb = P(b);
    return OpAccess::result("matmul", {a.dim(0), b.dim(1)}, std::move(value), {pa.get(), pb.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            ConstMatMap G(g.data(), m, n);
            if (pa->requires_grad) {
                MatMap(grad_buf(*pa).data(), m, k).noalias() += G * ConstMatMap(pb->value.data(), k, n).transpose();
            }
            if (pb->requires_grad) {
                MatMap(grad_buf(*pb).data(), k, n).noalias() += ConstMatMap(pa->value.data(), m, k).transpose() * G;
            }
        };
    });
}

Array transpose(const Array& a) {
    require_rank(a, 2, "transpose");
    require_finite(N(a), "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> value(r * c);
    const auto& in = N(a).value;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) value[j * r + i] = in[i * c + j];
    NodePtr pa = P(a);
    return OpAccess::result("transpose", {c, r}, std::move(value), {pa.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            auto& ga = grad_buf(*pa);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
        };
    });
}

Array reshape(const Array& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    require_finite(N(a), "reshape");
    NodePtr pa = P(a);
    return OpAccess::result("reshape", std::move(shape), N(a).value, {pa.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            auto& ga = grad_buf(*pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        };
    });
}

// ---------------------------------------------------------------------------
// Elementwise

Array add(const Array& a, const Array& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Array sub(const Array& a, const Array& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Array mul(const Array& a, const Array& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Array div(const Array& a, const Array& b) {
    for (double v : N(b).value) {
        if (v == 0.0) throw std::invalid_argument("div: zero divisor in shape " + shape_str(b.shape()));
    }
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Array add_scalar(const Array& a, double s) {
    return unary_op(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Array mul_scalar(const Array& a, double s) {
    return unary_op(
        "mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Array exp(const Array& a) {
    require_finite(N(a), "exp");
    std::vector<double> value(a.size());
    vexp(N(a).value.data(), value.data(), value.size());
    NodePtr pa = P(a);
    return OpAccess::result("exp", a.shape(), std::move(value), {pa.get()}, [=](Node* out) {
        return [=](const std::vector<double>& g) {
            auto& ga = grad_buf(*pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * out->value[i];
        };
    });
}

Array log(const Array& a) {
    for (double v : N(a).value) {
        if (!(v > 0.0)) throw std::invalid_argument("log: non-positive input in shape " + shape_str(a.shape()));
    }
    return unary_op(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Array sqrt(const Array& a) {
    for (double v : N(a).value) {
        if (v < 0.0) throw std::invalid_argument("sqrt: negative input in shape " + shape_str(a.shape()));
    }
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Array silu(const Array& x) {
    require_finite(N(x), "silu");
    const auto& in = N(x).value;
    const std::size_t n = in.size();
    auto sig = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) (*sig)[i] = -in[i];
    vexp(sig->data(), sig->data(), n);
    std::vector<double> value(n);
    for (std::size_t i = 0; i < n; ++i) {
        (*sig)[i] = 1.0 / (1.0 + (*sig)[i]);
        value[i] = in[i] * (*sig)[i];
    }
    NodePtr px = P(x);
    return OpAccess::result("silu", x.shape(), std::move(value), {px.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            auto& gx = grad_buf(*px);
            const auto& v = px->value;
            for (std::size_t i = 0; i < n; ++i) {
                const double s = (*sig)[i];
                gx[i] += g[i] * s * (1.0 + v[i] * (1.0 - s));
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Reductions

Array sum(const Array& a) {
    require_finite(N(a), "sum");
    double acc = 0.0;
    for (double v : N(a).value) acc += v;
    NodePtr pa = P(a);
    return OpAccess::result("sum", {}, {acc}, {pa.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            auto& ga = grad_buf(*pa);
            for (double& v : ga) v += g[0];
        };
    });
}

Array sum(const Array& a, std::size_t axis) {
    if (axis >= a.rank()) throw std::invalid_argument("sum: axis out of range for " + shape_str(a.shape()));
    require_finite(N(a), "sum");
    const auto s = split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<double> value(s.outer * s.inner, 0.0);
    const auto& in = N(a).value;
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.n; ++j)
            for (std::size_t i = 0; i < s.inner; ++i) value[o * s.inner + i] += in[(o * s.n + j) * s.inner + i];
    NodePtr pa = P(a);
    return OpAccess::result("sum_axis", std::move(out_shape), std::move(value), {pa.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            auto& ga = grad_buf(*pa);
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t j = 0; j < s.n; ++j)
                    for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.n + j) * s.inner + i] += g[o * s.inner + i];
        };
    });
}

Array mean(const Array& a) {
    const double n = static_cast<double>(a.size());
    return unary_op(
        "mean_scale", sum(a), [n](double x) { return x / n; }, [n](double, double) { return 1.0 / n; });
}

Array mean(const Array& a, std::size_t axis) {
    if (axis >= a.rank()) throw std::invalid_argument("mean: axis out of range for " + shape_str(a.shape()));
    const double n = static_cast<double>(a.dim(axis));
    return unary_op(
        "mean_scale", sum(a, axis), [n](double x) { return x / n; }, [n](double, double) { return 1.0 / n; });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis)

namespace {

std::vector<double> softmax_rows(const std::vector<double>& in, std::size_t rows, std::size_t cols,
                                 const std::vector<std::uint8_t>* keep) {
    std::vector<double> out(in.size(), 0.0);
    std::vector<std::size_t> idx(cols);
    std::vector<double> buf(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in.data() + r * cols;
        double* y = out.data() + r * cols;
        const std::uint8_t* k = keep ? keep->data() + r * cols : nullptr;
        std::size_t n = 0;
        for (std::size_t c = 0; c < cols; ++c)
            if (!k || k[c]) idx[n++] = c;
        if (n == 0) throw std::invalid_argument("masked_softmax: row " + std::to_string(r) + " has no kept entry");
        double m = x[idx[0]];
        for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[idx[j]]);
        for (std::size_t j = 0; j < n; ++j) buf[j] = x[idx[j]] - m;
        vexp(buf.data(), buf.data(), n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += buf[j];
        for (std::size_t j = 0; j < n; ++j) y[idx[j]] = buf[j] / z;
    }
    return out;
}

Tape::BackwardFn softmax_backward(NodePtr pa, Node* out, std::size_t rows, std::size_t cols) {
    return [=](const std::vector<double>& g) {
        auto& ga = grad_buf(*pa);
        const auto& y = out->value;
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
        }
    };
}

}  // namespace

Array softmax(const Array& a) {
    const std::size_t cols = last_dim(a, "softmax");
    require_finite(N(a), "softmax");
    const std::size_t rows = a.size() / cols;
    auto value = softmax_rows(N(a).value, rows, cols, nullptr);
    NodePtr pa = P(a);
    return OpAccess::result("softmax", a.shape(), std::move(value), {pa.get()},
                            [=](Node* out) { return softmax_backward(pa, out, rows, cols); });
}

Array masked_softmax(const Array& a, const Mask& mask) {
    const std::size_t cols = last_dim(a, "masked_softmax");
    if (!mask || mask->size() != a.size()) {
        throw std::invalid_argument("masked_softmax: mask size " + std::to_string(mask ? mask->size() : 0) +
                                    " does not match input shape " + shape_str(a.shape()));
    }
    require_finite(N(a), "masked_softmax");
    const std::size_t rows = a.size() / cols;
    auto value = softmax_rows(N(a).value, rows, cols, mask.get());
    NodePtr pa = P(a);
    return OpAccess::result("masked_softmax", a.shape(), std::move(value), {pa.get()},
                            [=](Node* out) { return softmax_backward(pa, out, rows, cols); });
}

Array logsumexp(const Array& a) {
    const std::size_t cols = last_dim(a, "logsumexp");
    require_finite(N(a), "logsumexp");
    const std::size_t rows = a.size() / cols;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    const auto& in = N(a).value;
    std::vector<double> value(rows);
    auto weights = std::make_shared<std::vector<double>>(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in.data() + r * cols;
        const double m = *std::max_element(x, x + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - m);
        value[r] = m + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) (*weights)[r * cols + c] = std::exp(x[c] - value[r]);
    }
    NodePtr pa = P(a);
    return OpAccess::result("logsumexp", std::move(out_shape), std::move(value), {pa.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            auto& ga = grad_buf(*pa);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r] * (*weights)[r * cols + c];
        };
    });
}

// ---------------------------------------------------------------------------
// Indexing and assembly

Array gather_rows(const Array& a, std::span<const std::size_t> rows) {
    if (a.rank() == 0) throw std::invalid_argument("gather_rows: needs rank >= 1");
    if (rows.empty()) throw std::invalid_argument("gather_rows: empty index list");
    require_finite(N(a), "gather_rows");
    const std::size_t n_rows = a.dim(0);
    const std::size_t width = a.size() / n_rows;
    auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
    std::vector<double> value(idx->size() * width);
    const auto& in = N(a).value;
    for (std::size_t r = 0; r < idx->size(); ++r) {
        const std::size_t src = (*idx)[r];
        if (src >= n_rows) {
            throw std::out_of_range("gather_rows: index " + std::to_string(src) + " out of range for " +
                                    shape_str(a.shape()));
        }
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(src * width), width,
                    value.begin() + static_cast<std::ptrdiff_t>(r * width));
    }
    Shape out_shape = a.shape();
    out_shape[0] = idx->size();
    NodePtr pa = P(a);
    return OpAccess::result("gather_rows", std::move(out_shape), std::move(value), {pa.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            auto& ga = grad_buf(*pa);
            for (std::size_t r = 0; r < idx->size(); ++r) {
                const std::size_t dst = (*idx)[r] * width;
                for (std::size_t c = 0; c < width; ++c) ga[dst + c] += g[r * width + c];
            }
        };
    });
}

Array concat(std::span<const Array> parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw std::invalid_argument("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
        if (!ok) throw std::invalid_argument("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
        require_finite(N(p), "concat");
        out_shape[axis] += s[axis];
    }
    const auto outer = split_axis(out_shape, axis).outer;
    const std::size_t inner = split_axis(out_shape, axis).inner;
    const std::size_t out_row = out_shape[axis] * inner;
    std::vector<double> value(numel(out_shape));
    std::vector<NodePtr> nodes;
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[axis] * inner;
        const auto& in = N(p).value;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                        value.begin() + static_cast<std::ptrdiff_t>(o * out_row + offset));
        nodes.push_back(P(p));
        offsets.push_back(offset);
        offset += w;
    }
    auto out = new_node(std::move(out_shape), std::move(value));
    const bool track = g_grad_enabled && std::any_of(nodes.begin(), nodes.end(), [](const NodePtr& n) {
                           return n->requires_grad;
                       });
    if (track) {
        out->requires_grad = true;
        out->is_leaf = false;
        Tape::current().record("concat", out, [=](const std::vector<double>& g) {
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                if (!nodes[p]->requires_grad) continue;
                auto& gp = grad_buf(*nodes[p]);
                const std::size_t w = gp.size() / outer;
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t c = 0; c < w; ++c) gp[o * w + c] += g[o * out_row + offsets[p] + c];
            }
        });
    }
    return OpAccess::wrap(std::move(out));
}

Array concat(std::initializer_list<Array> parts, std::size_t axis) {
    return concat(std::span<const Array>(parts.begin(), parts.size()), axis);
}

// ---------------------------------------------------------------------------
// Normalization

Array layer_norm(const Array& x, const Array& gamma, const Array& beta, double eps) {
    const std::size_t n = last_dim(x, "layer_norm");
    if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
        throw std::invalid_argument("layer_norm: shape mismatch " + shape_str(x.shape()) + " vs scale " +
                                    shape_str(gamma.shape()) + " / bias " + shape_str(beta.shape()));
    }
    require_finite(N(x), "layer_norm");
    require_finite(N(gamma), "layer_norm");
    require_finite(N(beta), "layer_norm");
    const std::size_t rows = x.size() / n;
    const auto& in = N(x).value;
    const auto& gv = N(gamma).value;
    const auto& bv = N(beta).value;
    auto xhat = std::make_shared<std::vector<double>>(in.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    std::vector<double> value(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = in.data() + r * n;
        double mu = 0.0;
        for (std::size_t c = 0; c < n; ++c) mu += xr[c];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < n; ++c) {
            const double h = (xr[c] - mu) * is;
            (*xhat)[r * n + c] = h;
            value[r * n + c] = h * gv[c] + bv[c];
        }
    }
    NodePtr px = P(x), pg = P(gamma), pb = P(beta);
    return OpAccess::result("layer_norm", x.shape(), std::move(value), {px.get(), pg.get(), pb.get()}, [=](Node*) {
        return [=](const std::vector<double>& g) {
            const auto& gam = pg->value;
            if (pg->requires_grad) {
                auto& gg = grad_buf(*pg);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * (*xhat)[r * n + c];
            }
            if (pb->requires_grad) {
                auto& gb = grad_buf(*pb);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
            }
            if (px->requires_grad) {
                auto& gx = grad_buf(*px);
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                        const double d = g[r * n + c] * gam[c];
                        mean_d += d;
                        mean_dx += d * (*xhat)[r * n + c];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for (std::size_t c = 0; c < n; ++c) {
                        const double d = g[r * n + c] * gam[c];
                        gx[r * n + c] += (*inv_std)[r] * (d - mean_d - (*xhat)[r * n + c] * mean_dx);
                    }
                }
            }
        };
    });
}

}  // namespace rf::ad
