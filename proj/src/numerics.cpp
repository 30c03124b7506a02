// SPDX-License-Identifier: Apache-2.0

#include "ckedit/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

namespace ckedit {

namespace {

void check_matmul_dims(int inner_a, int inner_b, const char* op) {
    if (inner_a != inner_b) {
        throw std::invalid_argument(std::string(op) + ": inner dimension mismatch");
    }
}

// Shared inner kernel: one output row of C = A * B. i-k-j order so the j loop
// vectorizes; the summation order per element is fixed regardless of the
// threading above it.
inline void matmul_row(const double* a_row, const Matrix& b, double* c_row) {
    const int k_dim = b.rows;
    const int n = b.cols;
    std::memset(c_row, 0, sizeof(double) * static_cast<size_t>(n));
    for (int k = 0; k < k_dim; ++k) {
        const double aik = a_row[k];
        if (aik == 0.0) continue;
        const double* b_row = b.data.data() + static_cast<size_t>(k) * n;
        for (int j = 0; j < n; ++j) {
            c_row[j] += aik * b_row[j];
        }
    }
}

inline void matmul_nt_row(const double* a_row, const Matrix& b, double* c_row) {
    const int k_dim = b.cols;
    for (int j = 0; j < b.rows; ++j) {
        const double* b_row = b.data.data() + static_cast<size_t>(j) * k_dim;
        double acc = 0.0;
        for (int k = 0; k < k_dim; ++k) {
            acc += a_row[k] * b_row[k];
        }
        c_row[j] = acc;
    }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_matmul_dims(a.cols, b.rows, "matmul");
    Matrix c(a.rows, b.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.rows; ++i) {
        matmul_row(a.data.data() + static_cast<size_t>(i) * a.cols, b,
                   c.data.data() + static_cast<size_t>(i) * c.cols);
    }
    return c;
}

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
    check_matmul_dims(a.cols, b.rows, "matmul");
    Matrix c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        matmul_row(a.data.data() + static_cast<size_t>(i) * a.cols, b,
                   c.data.data() + static_cast<size_t>(i) * c.cols);
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check_matmul_dims(a.cols, b.cols, "matmul_nt");
    Matrix c(a.rows, b.rows);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.rows; ++i) {
        matmul_nt_row(a.data.data() + static_cast<size_t>(i) * a.cols, b,
                      c.data.data() + static_cast<size_t>(i) * c.cols);
    }
    return c;
}

Matrix matmul_nt_serial(const Matrix& a, const Matrix& b) {
    check_matmul_dims(a.cols, b.cols, "matmul_nt");
    Matrix c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        matmul_nt_row(a.data.data() + static_cast<size_t>(i) * a.cols, b,
                      c.data.data() + static_cast<size_t>(i) * c.cols);
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    check_matmul_dims(a.rows, b.rows, "matmul_tn");
    Matrix c(a.cols, b.cols);
    // Parallel over output rows (columns of A); k loop stays serial per row.
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.cols; ++i) {
        double* c_row = c.data.data() + static_cast<size_t>(i) * c.cols;
        for (int k = 0; k < a.rows; ++k) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            const double* b_row = b.data.data() + static_cast<size_t>(k) * b.cols;
            for (int j = 0; j < b.cols; ++j) {
                c_row[j] += aki * b_row[j];
            }
        }
    }
    return c;
}

Matrix matmul_tn_serial(const Matrix& a, const Matrix& b) {
    check_matmul_dims(a.rows, b.rows, "matmul_tn");
    Matrix c(a.cols, b.cols);
    for (int i = 0; i < a.cols; ++i) {
        double* c_row = c.data.data() + static_cast<size_t>(i) * c.cols;
        for (int k = 0; k < a.rows; ++k) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            const double* b_row = b.data.data() + static_cast<size_t>(k) * b.cols;
            for (int j = 0; j < b.cols; ++j) {
                c_row[j] += aki * b_row[j];
            }
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

void add_inplace(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("add_inplace: shape mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

void sub_inplace(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("sub_inplace: shape mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] -= b.data[i];
}

void scale_inplace(Matrix& a, double s) {
    for (double& v : a.data) v *= s;
}

double frobenius_norm(const Matrix& a) {
    double acc = 0.0;
    for (double v : a.data) acc += v * v;
    return std::sqrt(acc);
}

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::fabs(v));
    return m;
}

bool all_finite(const Matrix& a) {
    for (double v : a.data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm(std::span<const double> a) {
    double acc = 0.0;
    for (double v : a) acc += v * v;
    return std::sqrt(acc);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: dimension mismatch");
    const double na = norm(a);
    const double nb = norm(b);
    if (na < 1e-300 || nb < 1e-300) {
        throw std::invalid_argument("cosine_similarity: zero-norm input");
    }
    return dot(a, b) / (na * nb);
}

double simpson_overlap(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("simpson_overlap: empty candidate set");
    }
    std::unordered_set<int> sa(a.begin(), a.end());
    std::unordered_set<int> sb(b.begin(), b.end());
    size_t inter = 0;
    for (int v : sa) inter += sb.count(v);
    return static_cast<double>(inter) / static_cast<double>(std::min(sa.size(), sb.size()));
}

std::vector<double> softmax(std::span<const double> v) {
    std::vector<double> out(v.size());
    if (v.empty()) return out;
    double mx = v[0];
    for (double x : v) {
        if (!std::isfinite(x)) throw std::invalid_argument("softmax: non-finite input");
        mx = std::max(mx, x);
    }
    double sum = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

namespace {

// In-place lower Cholesky. Returns false on a non-positive pivot.
bool cholesky(Matrix& a) {
    const int n = a.rows;
    for (int j = 0; j < n; ++j) {
        double d = a(j, j);
        for (int k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        const double l = std::sqrt(d);
        a(j, j) = l;
        for (int i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
            a(i, j) = s / l;
        }
    }
    return true;
}

}  // namespace

Matrix spd_solve(const Matrix& a, const Matrix& b, SpdDiagnostics* diag) {
    if (a.rows != a.cols) throw std::invalid_argument("spd_solve: A not square");
    if (a.rows != b.rows) throw std::invalid_argument("spd_solve: B row count mismatch");
    const int n = a.rows;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (std::fabs(a(i, j) - a(j, i)) > 1e-8) {
                throw std::invalid_argument("spd_solve: A not symmetric within 1e-8");
            }
        }
    }

    // Symmetrize before factorizing to kill roundoff skew.
    Matrix l(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) l(i, j) = 0.5 * (a(i, j) + a(j, i));
    }

    SpdDiagnostics local;
    Matrix fac = l;
    if (!cholesky(fac)) {
        double trace = 0.0;
        for (int i = 0; i < n; ++i) trace += l(i, i);
        local.jitter = 1e-8 * trace / static_cast<double>(n);
        local.jitter_applied = true;
        fac = l;
        for (int i = 0; i < n; ++i) fac(i, i) += local.jitter;
        if (!cholesky(fac)) {
            throw std::runtime_error("spd_solve: matrix indefinite even after jitter");
        }
    }
    if (diag != nullptr) *diag = local;

    // Solve L y = b, then L^T x = y, column by column.
    Matrix x = b;
    for (int c = 0; c < b.cols; ++c) {
        for (int i = 0; i < n; ++i) {
            double s = x(i, c);
            for (int k = 0; k < i; ++k) s -= fac(i, k) * x(k, c);
            x(i, c) = s / fac(i, i);
        }
        for (int i = n - 1; i >= 0; --i) {
            double s = x(i, c);
            for (int k = i + 1; k < n; ++k) s -= fac(k, i) * x(k, c);
            x(i, c) = s / fac(i, i);
        }
    }
    return x;
}

uint64_t Rng::next_u64() {
    // splitmix64
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double Rng::uniform01() {
    // 53-bit mantissa in (0, 1]
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
}

double Rng::gaussian() {
    const double u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

int Rng::uniform_int(int lo, int hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
}

uint64_t derive_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed ^ (0x9e3779b97f4a7c15ull + (salt << 6) + (salt >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string to_hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

}  // namespace ckedit
