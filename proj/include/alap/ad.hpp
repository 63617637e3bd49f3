#pragma once

// Tape based reverse mode automatic differentiation.
//
// A function is recorded once into an immutable Tape by evaluating it on
// AdScalar arguments. The tape can then be swept forward (values) and in
// reverse (gradients of w^T f). Reverse sweeps can themselves be recorded,
// which turns the tape of f into a tape of f' (gradient_tape).
//
// Node indices are 0-based. Independent variables always occupy nodes
// 0..num_independents()-1, so node k of a tape corresponds to node k+1 in a
// 1-based drawing of the same graph.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace alap {

class AdError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Op : std::uint8_t { Inv, Const, Add, Sub, Mul, Div, Neg, Exp, Log, Sqrt, Pow, Sum };

inline const char* op_name(Op op)
{
    switch (op) {
    case Op::Inv: return "Inv";
    case Op::Const: return "Const";
    case Op::Add: return "Add";
    case Op::Sub: return "Sub";
    case Op::Mul: return "Mul";
    case Op::Div: return "Div";
    case Op::Neg: return "Neg";
    case Op::Exp: return "Exp";
    case Op::Log: return "Log";
    case Op::Sqrt: return "Sqrt";
    case Op::Pow: return "Pow";
    case Op::Sum: return "CSum";
    }
    return "?";
}

inline constexpr std::int32_t kConstArg = -1;

/// One elementary operation. Binary operations with a constant operand store
/// kConstArg in that slot and the constant in `c`. Pow stores its exponent in
/// `c`. Sum reads `b` arguments from Tape::sum_args starting at `a` and adds
/// the constant `c` first.
struct Node {
    Op op = Op::Const;
    std::int32_t a = kConstArg;
    std::int32_t b = kConstArg;
    double c = 0;
};

inline bool is_binary(Op op)
{
    return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div;
}

inline bool is_unary(Op op)
{
    return op == Op::Neg || op == Op::Exp || op == Op::Log || op == Op::Sqrt || op == Op::Pow;
}

namespace detail {

inline double apply_binary(Op op, double x, double y)
{
    switch (op) {
    case Op::Add: return x + y;
    case Op::Sub: return x - y;
    case Op::Mul: return x * y;
    case Op::Div: return x / y;
    default: throw AdError("apply_binary: not a binary operation");
    }
}

inline double apply_unary(Op op, double x, double c)
{
    switch (op) {
    case Op::Neg: return -x;
    case Op::Exp: return std::exp(x);
    case Op::Log: return std::log(x);
    case Op::Sqrt: return std::sqrt(x);
    case Op::Pow: return std::pow(x, c);
    default: throw AdError("apply_unary: not a unary operation");
    }
}

}  // namespace detail

class Tape {
public:
    Tape() = default;
    Tape(std::vector<Node> nodes, std::vector<std::int32_t> sum_args,
         std::vector<std::int32_t> dependents, std::size_t num_independents)
      : nodes_(std::move(nodes)),
        sum_args_(std::move(sum_args)),
        dependents_(std::move(dependents)),
        num_independents_(num_independents)
    { }

    std::span<const Node> nodes() const { return nodes_; }
    std::span<const std::int32_t> sum_args() const { return sum_args_; }
    std::span<const std::int32_t> dependents() const { return dependents_; }
    std::size_t num_independents() const { return num_independents_; }
    std::size_t num_dependents() const { return dependents_.size(); }
    std::size_t size() const { return nodes_.size(); }

    /// Variable arguments of node k (constant operands excluded).
    template <class F>
    void for_each_arg(std::size_t k, F&& f) const
    {
        const Node& n = nodes_[k];
        if (n.op == Op::Sum) {
            for (std::int32_t i = 0; i < n.b; ++i) f(sum_args_[n.a + i]);
        } else if (is_binary(n.op)) {
            if (n.a != kConstArg) f(n.a);
            if (n.b != kConstArg) f(n.b);
        } else if (is_unary(n.op)) {
            f(n.a);
        }
    }

    std::size_t count(Op op) const
    {
        return static_cast<std::size_t>(
            std::count_if(nodes_.begin(), nodes_.end(), [op](const Node& n) { return n.op == op; }));
    }

    /// Checks the structural invariants; throws AdError on violation.
    void validate() const
    {
        for (std::size_t k = 0; k < nodes_.size(); ++k) {
            const Node& n = nodes_[k];
            if ((k < num_independents_) != (n.op == Op::Inv))
                throw AdError("tape: independents must occupy the leading nodes");
            if (is_binary(n.op) && n.a == kConstArg && n.b == kConstArg)
                throw AdError("tape: binary node without variable operand");
            for_each_arg(k, [&](std::int32_t arg) {
                if (arg < 0 || static_cast<std::size_t>(arg) >= k)
                    throw AdError("tape: node " + std::to_string(k) + " is not topologically ordered");
            });
        }
        for (auto d : dependents_)
            if (d < 0 || static_cast<std::size_t>(d) >= nodes_.size()) throw AdError("tape: bad dependent");
    }

private:
    std::vector<Node> nodes_;
    std::vector<std::int32_t> sum_args_;
    std::vector<std::int32_t> dependents_;
    std::size_t num_independents_ = 0;
};

/// Per-node buffers for sweeping one tape. Never shared between threads.
struct Workspace {
    Workspace() = default;
    explicit Workspace(const Tape& tape) : values(tape.size()), adjoints(tape.size()) { }
    void resize(const Tape& tape)
    {
        values.resize(tape.size());
        adjoints.resize(tape.size());
    }
    std::vector<double> values;
    std::vector<double> adjoints;
};

// ---------------------------------------------------------------------------
// Recording

struct RecordOptions {
    bool fold_constants = true;
};

class Recorder;

/// Scalar that records elementary operations on the active Recorder. An
/// AdScalar that was never touched by a recorder is a plain constant; any
/// operation between constants is evaluated immediately and not taped.
class AdScalar {
public:
    AdScalar() = default;
    AdScalar(double value) : value_(value) { }  // NOLINT: implicit constants are intended

    double value() const { return value_; }
    bool is_constant() const { return index_ == kConstArg; }
    std::int32_t index() const { return index_; }

    AdScalar& operator+=(const AdScalar& y);
    AdScalar& operator-=(const AdScalar& y);
    AdScalar& operator*=(const AdScalar& y);
    AdScalar& operator/=(const AdScalar& y);

private:
    friend class Recorder;
    AdScalar(double value, std::int32_t index, std::uint32_t tape_id)
      : value_(value), index_(index), tape_id_(tape_id)
    { }

    double value_ = 0;
    std::int32_t index_ = kConstArg;
    std::uint32_t tape_id_ = 0;
};

class Recorder {
public:
    explicit Recorder(RecordOptions options = {})
      : options_(options), id_(next_id()), previous_(active_ref())
    {
        active_ref() = this;
    }
    ~Recorder()
    {
        if (active_ref() == this) active_ref() = previous_;
    }
    Recorder(const Recorder&) = delete;
    Recorder& operator=(const Recorder&) = delete;

    static Recorder* active() { return active_ref(); }
    const RecordOptions& options() const { return options_; }

    AdScalar independent(double value)
    {
        if (nodes_.size() != num_independents_)
            throw AdError("record: independents must be declared before any operation");
        nodes_.push_back(Node{Op::Inv});
        ++num_independents_;
        return make(value);
    }

    AdScalar constant_node(double value)
    {
        nodes_.push_back(Node{Op::Const, kConstArg, kConstArg, value});
        return make(value);
    }

    std::int32_t variable_index(const AdScalar& x, const char* op) const
    {
        if (x.tape_id_ != id_)
            throw AdError(std::string(op) + ": operand was recorded on a different tape");
        return x.index_;
    }

    /// Operand index for a node; materializes constants as Const nodes when
    /// constant folding is disabled.
    std::int32_t operand(const AdScalar& x, const char* op)
    {
        if (x.is_constant()) return constant_node(x.value()).index_;
        return variable_index(x, op);
    }

    AdScalar push(Node node, double value)
    {
        nodes_.push_back(node);
        return make(value);
    }

    AdScalar push_sum(std::span<const std::int32_t> args, double c, double value)
    {
        Node node{Op::Sum, static_cast<std::int32_t>(sum_args_.size()),
                  static_cast<std::int32_t>(args.size()), c};
        sum_args_.insert(sum_args_.end(), args.begin(), args.end());
        nodes_.push_back(node);
        return make(value);
    }

    bool owns(const AdScalar& x) const { return !x.is_constant() && x.tape_id_ == id_; }

    /// Closes the recording. Constant outputs are materialized as Const nodes
    /// only if allowed; otherwise the output is rejected as not derived from
    /// the inputs.
    Tape finish(std::span<const AdScalar> outputs, bool allow_constant_outputs)
    {
        std::vector<std::int32_t> deps;
        deps.reserve(outputs.size());
        for (const auto& y : outputs) {
            if (y.is_constant()) {
                if (!allow_constant_outputs)
                    throw AdError("record: output is not derived from the independent variables");
                nodes_.push_back(Node{Op::Const, kConstArg, kConstArg, y.value()});
                deps.push_back(static_cast<std::int32_t>(nodes_.size() - 1));
            } else {
                deps.push_back(variable_index(y, "record"));
            }
        }
        Tape tape(std::move(nodes_), std::move(sum_args_), std::move(deps), num_independents_);
        nodes_.clear();
        sum_args_.clear();
        num_independents_ = 0;
        return tape;
    }

private:
    AdScalar make(double value)
    {
        return AdScalar(value, static_cast<std::int32_t>(nodes_.size() - 1), id_);
    }

    static Recorder*& active_ref()
    {
        thread_local Recorder* active = nullptr;
        return active;
    }
    static std::uint32_t next_id()
    {
        static std::atomic<std::uint32_t> counter{0};
        return ++counter;
    }

    RecordOptions options_;
    std::uint32_t id_;
    Recorder* previous_;
    std::vector<Node> nodes_;
    std::vector<std::int32_t> sum_args_;
    std::size_t num_independents_ = 0;
};

namespace detail {

inline Recorder& recorder_for(const char* op)
{
    Recorder* rec = Recorder::active();
    if (rec == nullptr) throw AdError(std::string(op) + ": variable operand outside of an active recording");
    return *rec;
}

inline bool folding() { return Recorder::active() == nullptr || Recorder::active()->options().fold_constants; }

inline AdScalar negate(const AdScalar& x);

inline AdScalar binary(Op op, const AdScalar& x, const AdScalar& y)
{
    const char* name = op_name(op);
    const double value = apply_binary(op, x.value(), y.value());
    if (x.is_constant() && y.is_constant()) {
        if (folding()) return AdScalar(value);
        Recorder& rec = *Recorder::active();
        const std::int32_t a = rec.operand(x, name);
        const std::int32_t b = rec.operand(y, name);
        return rec.push(Node{op, a, b, 0}, value);
    }
    Recorder& rec = recorder_for(name);
    if (rec.options().fold_constants) {
        // Identities that never depend on the value of the variable operand.
        if (y.is_constant()) {
            const double c = y.value();
            if ((op == Op::Add || op == Op::Sub) && c == 0) return x;
            if ((op == Op::Mul || op == Op::Div) && c == 1) return x;
            if (op == Op::Mul && c == 0) return AdScalar(0.0);
            if ((op == Op::Mul || op == Op::Div) && c == -1) return negate(x);
        }
        if (x.is_constant()) {
            const double c = x.value();
            if (op == Op::Add && c == 0) return y;
            if (op == Op::Sub && c == 0) return negate(y);
            if (op == Op::Mul && c == 1) return y;
            if (op == Op::Mul && c == 0) return AdScalar(0.0);
            if (op == Op::Mul && c == -1) return negate(y);
        }
    }
    Node node{op};
    if (x.is_constant() && rec.options().fold_constants) {
        node.a = kConstArg;
        node.c = x.value();
    } else {
        node.a = rec.operand(x, name);
    }
    if (y.is_constant() && rec.options().fold_constants) {
        node.b = kConstArg;
        node.c = y.value();
    } else {
        node.b = rec.operand(y, name);
    }
    return rec.push(node, value);
}

inline AdScalar unary(Op op, const AdScalar& x, double c = 0)
{
    const double value = apply_unary(op, x.value(), c);
    if (x.is_constant() && folding()) return AdScalar(value);
    Recorder& rec = recorder_for(op_name(op));
    return rec.push(Node{op, rec.operand(x, op_name(op)), kConstArg, c}, value);
}

inline AdScalar negate(const AdScalar& x) { return unary(Op::Neg, x); }

}  // namespace detail

inline AdScalar operator+(const AdScalar& x, const AdScalar& y) { return detail::binary(Op::Add, x, y); }
inline AdScalar operator-(const AdScalar& x, const AdScalar& y) { return detail::binary(Op::Sub, x, y); }
inline AdScalar operator*(const AdScalar& x, const AdScalar& y) { return detail::binary(Op::Mul, x, y); }
inline AdScalar operator/(const AdScalar& x, const AdScalar& y) { return detail::binary(Op::Div, x, y); }
inline AdScalar operator-(const AdScalar& x) { return detail::negate(x); }
inline AdScalar operator+(const AdScalar& x) { return x; }

inline AdScalar& AdScalar::operator+=(const AdScalar& y) { return *this = *this + y; }
inline AdScalar& AdScalar::operator-=(const AdScalar& y) { return *this = *this - y; }
inline AdScalar& AdScalar::operator*=(const AdScalar& y) { return *this = *this * y; }
inline AdScalar& AdScalar::operator/=(const AdScalar& y) { return *this = *this / y; }

inline AdScalar exp(const AdScalar& x) { return detail::unary(Op::Exp, x); }
inline AdScalar log(const AdScalar& x) { return detail::unary(Op::Log, x); }
inline AdScalar sqrt(const AdScalar& x) { return detail::unary(Op::Sqrt, x); }

inline AdScalar pow(const AdScalar& x, double c)
{
    if (detail::folding() && !x.is_constant()) {
        if (c == 1) return x;
        if (c == 0) return AdScalar(1.0);
    }
    return detail::unary(Op::Pow, x, c);
}

inline AdScalar pow(const AdScalar& x, const AdScalar& c)
{
    if (!c.is_constant()) throw AdError("pow: variable exponent is not a supported operation");
    return pow(x, c.value());
}

// Comparisons act on current values and are not taped.
inline bool operator<(const AdScalar& x, const AdScalar& y) { return x.value() < y.value(); }
inline bool operator>(const AdScalar& x, const AdScalar& y) { return x.value() > y.value(); }
inline bool operator<=(const AdScalar& x, const AdScalar& y) { return x.value() <= y.value(); }
inline bool operator>=(const AdScalar& x, const AdScalar& y) { return x.value() >= y.value(); }

inline std::ostream& operator<<(std::ostream& os, const AdScalar& x) { return os << x.value(); }

/// n-ary sum recorded as a single node; constant terms are folded into the
/// node's constant.
inline AdScalar sum(std::span<const AdScalar> terms)
{
    const bool fold = detail::folding();
    double c = 0;
    const AdScalar* last_var = nullptr;
    std::size_t nvar = 0;
    for (const auto& t : terms) {
        if (t.is_constant() && fold) {
            c += t.value();
        } else {
            last_var = &t;
            ++nvar;
        }
    }
    if (nvar == 0) return AdScalar(c);
    if (nvar == 1 && c == 0 && !last_var->is_constant()) return *last_var;

    Recorder& rec = detail::recorder_for("CSum");
    std::vector<std::int32_t> args;
    args.reserve(nvar);
    double v = c;  // a Sum node adds its constant first, then its arguments
    for (const auto& t : terms) {
        if (t.is_constant() && fold) continue;
        args.push_back(rec.operand(t, "CSum"));
        v += t.value();
    }
    return rec.push_sum(args, c, v);
}

// ---------------------------------------------------------------------------
// Sweeps

namespace detail {

inline double forward_node(const Node& n, const double* v, const std::int32_t* sum_args)
{
    switch (n.op) {
    case Op::Inv: return v[0];  // never reached; independents are set by the caller
    case Op::Const: return n.c;
    case Op::Sum: {
        double s = n.c;
        for (std::int32_t i = 0; i < n.b; ++i) s += v[sum_args[n.a + i]];
        return s;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
        const double x = n.a == kConstArg ? n.c : v[n.a];
        const double y = n.b == kConstArg ? n.c : v[n.b];
        return apply_binary(n.op, x, y);
    }
    default: return apply_unary(n.op, v[n.a], n.c);
    }
}

/// Chain rule for one node. `emit(arg, contribution, negate)` receives the
/// partial contribution of node k's adjoint `g` to argument `arg`. T is
/// double for numeric sweeps and AdScalar when a sweep is being recorded.
template <class T, class Emit>
void reverse_node(const Node& n, std::int32_t k, const T* v, const T& g,
                  const std::int32_t* sum_args, Emit&& emit)
{
    switch (n.op) {
    case Op::Inv:
    case Op::Const: return;
    case Op::Sum:
        for (std::int32_t i = 0; i < n.b; ++i) emit(sum_args[n.a + i], g, false);
        return;
    case Op::Add:
        if (n.a != kConstArg) emit(n.a, g, false);
        if (n.b != kConstArg) emit(n.b, g, false);
        return;
    case Op::Sub:
        if (n.a != kConstArg) emit(n.a, g, false);
        if (n.b != kConstArg) emit(n.b, g, true);
        return;
    case Op::Mul:
        if (n.a != kConstArg) emit(n.a, n.b == kConstArg ? T(g * n.c) : T(g * v[n.b]), false);
        if (n.b != kConstArg) emit(n.b, n.a == kConstArg ? T(g * n.c) : T(g * v[n.a]), false);
        return;
    case Op::Div:
        if (n.b == kConstArg) {
            emit(n.a, T(g / n.c), false);
        } else {
            const T t = g / v[n.b];
            if (n.a != kConstArg) emit(n.a, t, false);
            emit(n.b, T(t * v[k]), true);
        }
        return;
    case Op::Neg: emit(n.a, g, true); return;
    case Op::Exp: emit(n.a, T(g * v[k]), false); return;
    case Op::Log: emit(n.a, T(g / v[n.a]), false); return;
    case Op::Sqrt: emit(n.a, T((0.5 * g) / v[k]), false); return;
    case Op::Pow: {
        using std::pow;
        emit(n.a, T(g * n.c * pow(v[n.a], n.c - 1)), false);
        return;
    }
    }
}

inline void check_size(std::size_t got, std::size_t want, const char* what)
{
    if (got != want)
        throw AdError(std::string(what) + ": dimension mismatch (got " + std::to_string(got) +
                      ", expected " + std::to_string(want) + ")");
}

}  // namespace detail

/// Zero order forward sweep filling ws.values; returns the dependent values.
inline std::vector<double> forward_zero(const Tape& tape, std::span<const double> x, Workspace& ws)
{
    detail::check_size(x.size(), tape.num_independents(), "forward_zero");
    ws.values.resize(tape.size());
    const auto nodes = tape.nodes();
    const std::int32_t* sa = tape.sum_args().data();
    double* v = ws.values.data();
    std::copy(x.begin(), x.end(), v);
    for (std::size_t k = x.size(); k < nodes.size(); ++k) v[k] = detail::forward_node(nodes[k], v, sa);
    std::vector<double> y;
    y.reserve(tape.num_dependents());
    for (auto d : tape.dependents()) y.push_back(v[d]);
    return y;
}

inline std::vector<double> forward_zero(const Tape& tape, std::span<const double> x)
{
    Workspace ws;
    return forward_zero(tape, x, ws);
}

/// First order reverse sweep in range direction w; ws.values must hold a
/// forward sweep. Returns d(w^T y)/dx over all independents.
inline std::vector<double> reverse_sweep(const Tape& tape, Workspace& ws, std::span<const double> w)
{
    detail::check_size(w.size(), tape.num_dependents(), "reverse_one");
    const auto nodes = tape.nodes();
    const std::int32_t* sa = tape.sum_args().data();
    ws.adjoints.assign(tape.size(), 0.0);
    double* adj = ws.adjoints.data();
    const double* v = ws.values.data();
    const auto deps = tape.dependents();
    for (std::size_t i = 0; i < deps.size(); ++i) adj[deps[i]] += w[i];
    auto emit = [adj](std::int32_t arg, double c, bool neg) {
        if (neg)
            adj[arg] -= c;
        else
            adj[arg] += c;
    };
    for (std::size_t k = nodes.size(); k-- > tape.num_independents();)
        detail::reverse_node<double>(nodes[k], static_cast<std::int32_t>(k), v, adj[k], sa, emit);
    return {ws.adjoints.begin(), ws.adjoints.begin() + tape.num_independents()};
}

inline std::vector<double> reverse_one(const Tape& tape, std::span<const double> x, std::span<const double> w,
                                       Workspace& ws)
{
    detail::check_size(w.size(), tape.num_dependents(), "reverse_one");
    forward_zero(tape, x, ws);
    return reverse_sweep(tape, ws, w);
}

inline std::vector<double> reverse_one(const Tape& tape, std::span<const double> x, std::span<const double> w)
{
    Workspace ws;
    return reverse_one(tape, x, w, ws);
}

// ---------------------------------------------------------------------------
// Operation counts of one sweep, matching the arithmetic the kernels execute.

inline std::size_t forward_cost(const Node& n)
{
    switch (n.op) {
    case Op::Inv:
    case Op::Const: return 0;
    case Op::Sum: return static_cast<std::size_t>(n.b) - 1 + (n.c != 0 ? 1 : 0);
    default: return 1;
    }
}

inline std::size_t reverse_cost(const Node& n)
{
    const bool one_const = is_binary(n.op) && (n.a == kConstArg || n.b == kConstArg);
    switch (n.op) {
    case Op::Inv:
    case Op::Const: return 0;
    case Op::Sum: return static_cast<std::size_t>(n.b);
    case Op::Add:
    case Op::Sub: return one_const ? 1 : 2;
    case Op::Mul: return one_const ? 2 : 4;
    case Op::Div: return n.b == kConstArg ? 2 : (n.a == kConstArg ? 3 : 4);
    case Op::Neg: return 1;
    case Op::Exp:
    case Op::Log: return 2;
    case Op::Sqrt: return 3;
    case Op::Pow: return 4;
    }
    return 0;
}

inline std::size_t forward_op_count(const Tape& tape)
{
    std::size_t s = 0;
    for (const auto& n : tape.nodes()) s += forward_cost(n);
    return s;
}

inline std::size_t reverse_op_count(const Tape& tape)
{
    std::size_t s = 0;
    for (const auto& n : tape.nodes()) s += reverse_cost(n);
    return s;
}

// ---------------------------------------------------------------------------
// Recording entry points

/// Records builder(x) for x of dimension dim at the point x0 (zeros if empty).
template <class Builder>
Tape record(Builder&& builder, std::size_t dim, std::span<const double> x0 = {}, RecordOptions options = {})
{
    if (dim == 0) throw AdError("record: dimension must be at least 1");
    if (!x0.empty()) detail::check_size(x0.size(), dim, "record");
    Recorder rec(options);
    std::vector<AdScalar> x;
    x.reserve(dim);
    for (std::size_t i = 0; i < dim; ++i) x.push_back(rec.independent(x0.empty() ? 0.0 : x0[i]));
    const AdScalar y = builder(std::span<const AdScalar>(x));
    if (!y.is_constant() && !rec.owns(y)) throw AdError("record: output was recorded on a different tape");
    return rec.finish(std::span<const AdScalar>(&y, 1), false);
}

namespace detail {

/// Adjoint contributions gathered while a reverse sweep is being recorded.
struct Contribution {
    AdScalar value;
    bool negate;
};

/// Sum of signed contributions, recorded as at most one CSum per sign and a
/// final subtraction.
inline AdScalar combine(const std::vector<Contribution>& parts)
{
    if (parts.empty()) return AdScalar(0.0);
    if (parts.size() == 1) return parts[0].negate ? -parts[0].value : parts[0].value;
    std::vector<AdScalar> pos, neg;
    for (const auto& p : parts) (p.negate ? neg : pos).push_back(p.value);
    if (neg.empty()) return sum(pos);
    if (pos.empty()) return -sum(neg);
    return sum(pos) - sum(neg);
}

/// Replays the forward sweep of `tape` on the active recorder.
inline std::vector<AdScalar> replay_forward(const Tape& tape, std::span<const AdScalar> x)
{
    const auto nodes = tape.nodes();
    const auto sa = tape.sum_args();
    std::vector<AdScalar> v(nodes.size());
    std::copy(x.begin(), x.end(), v.begin());
    std::vector<AdScalar> terms;
    for (std::size_t k = x.size(); k < nodes.size(); ++k) {
        const Node& n = nodes[k];
        switch (n.op) {
        case Op::Inv: break;
        case Op::Const: v[k] = AdScalar(n.c); break;
        case Op::Sum:
            terms.clear();
            if (n.c != 0) terms.emplace_back(n.c);
            for (std::int32_t i = 0; i < n.b; ++i) terms.push_back(v[sa[n.a + i]]);
            v[k] = sum(terms);
            break;
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div: {
            const AdScalar xa = n.a == kConstArg ? AdScalar(n.c) : v[n.a];
            const AdScalar xb = n.b == kConstArg ? AdScalar(n.c) : v[n.b];
            v[k] = binary(n.op, xa, xb);
            break;
        }
        case Op::Pow: v[k] = pow(v[n.a], n.c); break;
        default: v[k] = unary(n.op, v[n.a]); break;
        }
    }
    return v;
}

}  // namespace detail

/// Tape optimization: constant expressions are reduced to single values and
/// nodes that do not affect any dependent are removed. Independents are kept.
inline Tape optimize_tape(const Tape& tape)
{
    const auto nodes = tape.nodes();
    const auto sa = tape.sum_args();
    const std::size_t nin = tape.num_independents();

    // Pass 1: constant folding. ref[k] >= 0 is a node of the folded tape;
    // ref[k] == kConstArg means node k is the constant cval[k].
    std::vector<Node> fnodes;
    std::vector<std::int32_t> fargs;
    std::vector<std::int32_t> ref(nodes.size(), kConstArg);
    std::vector<double> cval(nodes.size(), 0.0);
    fnodes.reserve(nodes.size());
    for (std::size_t k = 0; k < nodes.size(); ++k) {
        const Node& n = nodes[k];
        auto emit = [&](Node m) {
            fnodes.push_back(m);
            ref[k] = static_cast<std::int32_t>(fnodes.size() - 1);
        };
        switch (n.op) {
        case Op::Inv: emit(n); break;
        case Op::Const: cval[k] = n.c; break;
        case Op::Sum: {
            double c = n.c;
            std::vector<std::int32_t> args;
            for (std::int32_t i = 0; i < n.b; ++i) {
                const auto a = sa[n.a + i];
                if (ref[a] == kConstArg)
                    c += cval[a];
                else
                    args.push_back(ref[a]);
            }
            if (args.empty()) {
                cval[k] = c;
            } else if (args.size() == 1 && c == 0) {
                ref[k] = args[0];
            } else {
                emit(Node{Op::Sum, static_cast<std::int32_t>(fargs.size()), static_cast<std::int32_t>(args.size()), c});
                fargs.insert(fargs.end(), args.begin(), args.end());
            }
            break;
        }
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div: {
            const bool ca = n.a == kConstArg || ref[n.a] == kConstArg;
            const bool cb = n.b == kConstArg || ref[n.b] == kConstArg;
            const double xa = n.a == kConstArg ? n.c : cval[n.a];
            const double xb = n.b == kConstArg ? n.c : cval[n.b];
            if (ca && cb) {
                cval[k] = detail::apply_binary(n.op, xa, xb);
            } else if (ca) {
                emit(Node{n.op, kConstArg, ref[n.b], xa});
            } else if (cb) {
                emit(Node{n.op, ref[n.a], kConstArg, xb});
            } else {
                emit(Node{n.op, ref[n.a], ref[n.b], 0});
            }
            break;
        }
        default:
            if (ref[n.a] == kConstArg)
                cval[k] = detail::apply_unary(n.op, cval[n.a], n.c);
            else
                emit(Node{n.op, ref[n.a], kConstArg, n.c});
            break;
        }
    }
    std::vector<std::int32_t> fdeps;
    for (auto d : tape.dependents()) {
        if (ref[d] == kConstArg) {
            fnodes.push_back(Node{Op::Const, kConstArg, kConstArg, cval[d]});
            fdeps.push_back(static_cast<std::int32_t>(fnodes.size() - 1));
        } else {
            fdeps.push_back(ref[d]);
        }
    }
    const Tape folded(std::move(fnodes), std::move(fargs), std::move(fdeps), nin);

    // Pass 2: dead code removal.
    const auto gn = folded.nodes();
    std::vector<char> live(gn.size(), 0);
    for (std::size_t k = 0; k < nin; ++k) live[k] = 1;
    for (auto d : folded.dependents()) live[d] = 1;
    for (std::size_t k = gn.size(); k-- > 0;)
        if (live[k]) folded.for_each_arg(k, [&](std::int32_t a) { live[a] = 1; });

    std::vector<std::int32_t> renum(gn.size(), kConstArg);
    std::vector<Node> out;
    std::vector<std::int32_t> out_args;
    const auto gsa = folded.sum_args();
    for (std::size_t k = 0; k < gn.size(); ++k) {
        if (!live[k]) continue;
        Node m = gn[k];
        if (m.op == Op::Sum) {
            const auto start = static_cast<std::int32_t>(out_args.size());
            for (std::int32_t i = 0; i < m.b; ++i) out_args.push_back(renum[gsa[m.a + i]]);
            m.a = start;
        } else if (is_binary(m.op) || is_unary(m.op)) {
            if (m.a != kConstArg) m.a = renum[m.a];
            if (is_binary(m.op) && m.b != kConstArg) m.b = renum[m.b];
        }
        renum[k] = static_cast<std::int32_t>(out.size());
        out.push_back(m);
    }
    std::vector<std::int32_t> out_deps;
    for (auto d : folded.dependents()) out_deps.push_back(renum[d]);
    return Tape(std::move(out), std::move(out_args), std::move(out_deps), nin);
}

/// Records the reverse sweep of a scalar tape t1 and returns the optimized
/// tape of its gradient. x0 is the point the recording is made at; it only
/// affects recorded values, never the graph.
inline Tape gradient_tape(const Tape& t1, std::span<const double> x0 = {}, bool optimize = true)
{
    if (t1.num_dependents() != 1) throw AdError("gradient_tape: tape must have exactly one dependent");
    const std::size_t nin = t1.num_independents();
    if (!x0.empty()) detail::check_size(x0.size(), nin, "gradient_tape");
    Recorder rec;
    std::vector<AdScalar> x;
    for (std::size_t i = 0; i < nin; ++i) x.push_back(rec.independent(x0.empty() ? 0.0 : x0[i]));
    const std::vector<AdScalar> v = detail::replay_forward(t1, x);

    const auto nodes = t1.nodes();
    const std::int32_t* sa = t1.sum_args().data();
    std::vector<std::vector<detail::Contribution>> parts(nodes.size());
    parts[t1.dependents()[0]].push_back({AdScalar(1.0), false});
    auto emit = [&parts](std::int32_t arg, const AdScalar& c, bool neg) {
        if (c.is_constant() && c.value() == 0) return;
        parts[arg].push_back({c, neg});
    };
    for (std::size_t k = nodes.size(); k-- > nin;) {
        if (parts[k].empty()) continue;
        const AdScalar g = detail::combine(parts[k]);
        parts[k].clear();
        parts[k].shrink_to_fit();
        detail::reverse_node<AdScalar>(nodes[k], static_cast<std::int32_t>(k), v.data(), g, sa, emit);
    }
    std::vector<AdScalar> grad;
    grad.reserve(nin);
    for (std::size_t i = 0; i < nin; ++i) grad.push_back(detail::combine(parts[i]));
    Tape t2 = rec.finish(grad, true);
    return optimize ? optimize_tape(t2) : t2;
}

/// DOT graph of a tape; node labels are 1-based
/// ("Inv 1", ..., "CSum 24"). Dependents are drawn dashed.
inline std::string to_dot(const Tape& tape, const std::string& name = "tape")
{
    std::ostringstream os;
    os << "digraph " << name << " {\n";
    std::vector<char> dep(tape.size(), 0);
    for (auto d : tape.dependents()) dep[d] = 1;
    for (std::size_t k = 0; k < tape.size(); ++k) {
        os << "  n" << k << " [label=\"" << op_name(tape.nodes()[k].op) << ' ' << k + 1 << '"';
        if (dep[k]) os << ", style=dashed";
        os << "];\n";
    }
    for (std::size_t k = 0; k < tape.size(); ++k)
        tape.for_each_arg(k, [&](std::int32_t a) { os << "  n" << a << " -> n" << k << ";\n"; });
    os << "}\n";
    return os.str();
}

}  // namespace alap
