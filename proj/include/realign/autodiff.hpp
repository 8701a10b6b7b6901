#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "realign/errors.hpp"

namespace realign::ad {

// Minimal reverse-mode tape. Nodes have at most two parents with precomputed
// local partials; backward() is a single linear sweep over the tape.
class Tape {
public:
    struct Node {
        int p0 = -1, p1 = -1;
        double d0 = 0.0, d1 = 0.0;
    };

    int leaf(double) {
        nodes_.push_back({});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int unary(int p, double d) {
        nodes_.push_back({p, -1, d, 0.0});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int binary(int p0, int p1, double d0, double d1) {
        nodes_.push_back({p0, p1, d0, d1});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Gradient of node `root` w.r.t. every node on the tape.
    std::vector<double> backward(int root) const {
        std::vector<double> grad(nodes_.size(), 0.0);
        grad[root] = 1.0;
        for (int i = root; i >= 0; --i) {
            const Node& n = nodes_[static_cast<size_t>(i)];
            double g = grad[static_cast<size_t>(i)];
            if (g == 0.0) continue;
            if (n.p0 >= 0) grad[static_cast<size_t>(n.p0)] += n.d0 * g;
            if (n.p1 >= 0) grad[static_cast<size_t>(n.p1)] += n.d1 * g;
        }
        return grad;
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

// Tracked scalar. Copies share the tape; arithmetic records onto it.
struct Var {
    double v = 0.0;
    int idx = -1;
    Tape* tape = nullptr;

    Var() = default;
    Var(double value, Tape* t) : v(value), tape(t) { idx = t->leaf(value); }
    Var(double value, int i, Tape* t) : v(value), idx(i), tape(t) {}
};

inline Var operator+(const Var& a, const Var& b) {
    return {a.v + b.v, a.tape->binary(a.idx, b.idx, 1.0, 1.0), a.tape};
}
inline Var operator-(const Var& a, const Var& b) {
    return {a.v - b.v, a.tape->binary(a.idx, b.idx, 1.0, -1.0), a.tape};
}
inline Var operator*(const Var& a, const Var& b) {
    return {a.v * b.v, a.tape->binary(a.idx, b.idx, b.v, a.v), a.tape};
}
inline Var operator/(const Var& a, const Var& b) {
    if (b.v == 0.0) throw NumericError("autodiff: division by zero");
    return {a.v / b.v, a.tape->binary(a.idx, b.idx, 1.0 / b.v, -a.v / (b.v * b.v)), a.tape};
}
inline Var operator+(const Var& a, double c) { return {a.v + c, a.tape->unary(a.idx, 1.0), a.tape}; }
inline Var operator+(double c, const Var& a) { return a + c; }
inline Var operator-(const Var& a, double c) { return {a.v - c, a.tape->unary(a.idx, 1.0), a.tape}; }
inline Var operator-(double c, const Var& a) { return {c - a.v, a.tape->unary(a.idx, -1.0), a.tape}; }
inline Var operator*(const Var& a, double c) { return {a.v * c, a.tape->unary(a.idx, c), a.tape}; }
inline Var operator*(double c, const Var& a) { return a * c; }
inline Var operator/(const Var& a, double c) { return a * (1.0 / c); }
inline Var operator-(const Var& a) { return {-a.v, a.tape->unary(a.idx, -1.0), a.tape}; }

inline Var exp(const Var& a) {
    double e = std::exp(a.v);
    return {e, a.tape->unary(a.idx, e), a.tape};
}
inline Var log(const Var& a) {
    if (a.v <= 0.0) throw NumericError("autodiff: log of non-positive value");
    return {std::log(a.v), a.tape->unary(a.idx, 1.0 / a.v), a.tape};
}
inline Var sqrt(const Var& a) {
    double s = std::sqrt(a.v);
    return {s, a.tape->unary(a.idx, 0.5 / s), a.tape};
}
inline Var tanh(const Var& a) {
    double t = std::tanh(a.v);
    return {t, a.tape->unary(a.idx, 1.0 - t * t), a.tape};
}
inline Var relu(const Var& a) {
    return {a.v > 0.0 ? a.v : 0.0, a.tape->unary(a.idx, a.v > 0.0 ? 1.0 : 0.0), a.tape};
}

// Generic-scalar helpers so the toy backbone can run on double or Var.
inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.v; }

}  // namespace realign::ad
