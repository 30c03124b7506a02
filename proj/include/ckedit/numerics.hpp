// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 linear algebra and similarity kernels shared by every other
// module. All operations are pure and reentrant.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ckedit {

// Row-major dense matrix of doubles.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<double> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
    std::span<const double> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// ---------------------------------------------------------------------------
// Matmul kernels. The plain names run the OpenMP path; the _serial variants
// keep the exact same per-element summation order and exist as the reference
// the tests and the benchmark compare against. Results are bitwise identical
// between the two paths for any thread count.
// ---------------------------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b);         // C = A * B
Matrix matmul_nt(const Matrix& a, const Matrix& b);      // C = A * B^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);      // C = A^T * B

Matrix matmul_serial(const Matrix& a, const Matrix& b);
Matrix matmul_nt_serial(const Matrix& a, const Matrix& b);
Matrix matmul_tn_serial(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);
void add_inplace(Matrix& a, const Matrix& b);
void sub_inplace(Matrix& a, const Matrix& b);
void scale_inplace(Matrix& a, double s);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
bool all_finite(const Matrix& a);

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

// a . b / (|a| |b|). Throws std::invalid_argument on dimension mismatch or a
// zero-norm input (degenerate hidden state).
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// |A n B| / min(|A|, |B|) over deduplicated token-id sets. Throws on an empty
// candidate list.
double simpson_overlap(const std::vector<int>& a, const std::vector<int>& b);

// Numerically stable softmax (max subtraction), sums to 1.
std::vector<double> softmax(std::span<const double> v);

// ---------------------------------------------------------------------------
// SPD solve
// ---------------------------------------------------------------------------

struct SpdDiagnostics {
    bool jitter_applied = false;
    double jitter = 0.0;
};

// Solves A * X = B for symmetric positive definite A via Cholesky. If the
// factorization fails, retries once with jitter eps*I, eps = 1e-8*trace(A)/n,
// and records that in diag. Throws if A is non-square, not symmetric within
// 1e-8, or indefinite even after jitter.
Matrix spd_solve(const Matrix& a, const Matrix& b, SpdDiagnostics* diag = nullptr);

// ---------------------------------------------------------------------------
// Deterministic RNG (splitmix64 + Box-Muller). Used everywhere randomness is
// required so results are reproducible across platforms and stdlib versions.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();
    double uniform01();                    // in (0, 1]
    double gaussian();                     // standard normal
    double gaussian(double mean, double std) { return mean + std * gaussian(); }
    int uniform_int(int lo, int hi);       // inclusive bounds

private:
    uint64_t state_;
};

// Stable seed derivation for independent substreams.
uint64_t derive_seed(uint64_t seed, uint64_t salt);

// FNV-1a over raw bytes, plus hex rendering for manifests.
uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull);
std::string to_hex(uint64_t v);

}  // namespace ckedit
