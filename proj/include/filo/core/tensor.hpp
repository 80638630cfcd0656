#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "filo/core/error.hpp"
#include "filo/core/rng.hpp"

namespace filo {

// Dense row-major double tensor. Double precision everywhere: the gradient
// suites compare against central finite differences, which float32 noise
// would contaminate.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;

    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
        v.assign(static_cast<std::size_t>(count(shape)), fill);
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            require(d > 0, ErrorKind::shape, "tensor dims must be positive");
            n *= d;
        }
        return n;
    }

    static Tensor scalar(double x) {
        Tensor t(std::vector<int>{1});
        t.v[0] = x;
        return t;
    }

    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape, 0.0); }

    static Tensor from(std::vector<int> s, std::vector<double> data) {
        Tensor t;
        t.shape = std::move(s);
        require(count(t.shape) == static_cast<std::int64_t>(data.size()),
                ErrorKind::shape, "tensor data size does not match shape");
        t.v = std::move(data);
        return t;
    }

    static Tensor gaussian(std::vector<int> s, rng::Rng& rng, double stddev,
                           double mean = 0.0) {
        Tensor t(std::move(s));
        for (double& x : t.v) x = rng.gaussian(mean, stddev);
        return t;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool defined() const { return !v.empty(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

    std::int64_t idx2(int a, int b) const {
        return static_cast<std::int64_t>(a) * shape[1] + b;
    }
    std::int64_t idx3(int a, int b, int c) const {
        return (static_cast<std::int64_t>(a) * shape[1] + b) * shape[2] + c;
    }
    std::int64_t idx4(int a, int b, int c, int d) const {
        return ((static_cast<std::int64_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d;
    }

    double& at2(int a, int b) { return v[static_cast<std::size_t>(idx2(a, b))]; }
    double at2(int a, int b) const { return v[static_cast<std::size_t>(idx2(a, b))]; }
    double& at3(int a, int b, int c) { return v[static_cast<std::size_t>(idx3(a, b, c))]; }
    double at3(int a, int b, int c) const { return v[static_cast<std::size_t>(idx3(a, b, c))]; }
    double& at4(int a, int b, int c, int d) { return v[static_cast<std::size_t>(idx4(a, b, c, d))]; }
    double at4(int a, int b, int c, int d) const { return v[static_cast<std::size_t>(idx4(a, b, c, d))]; }

    double min() const { return *std::min_element(v.begin(), v.end()); }
    double max() const { return *std::max_element(v.begin(), v.end()); }
    double sum() const { return std::accumulate(v.begin(), v.end(), 0.0); }

    double norm2() const {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    }

    bool all_finite() const {
        for (double x : v) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << 'x';
            os << shape[i];
        }
        os << ']';
        return os.str();
    }
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), ErrorKind::shape, "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace filo
