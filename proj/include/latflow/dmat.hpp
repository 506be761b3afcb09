#pragma once

#include <cstdint>
#include <vector>

#include "latflow/errors.hpp"
#include "latflow/rng.hpp"

namespace latflow {

// Dense row-major f64 matrix. All network math runs on these; latents convert
// at the module boundary.
struct DMat {
    std::int64_t rows = 0, cols = 0;
    std::vector<double> a;

    DMat() = default;
    DMat(std::int64_t r, std::int64_t c) : rows(r), cols(c), a(static_cast<std::size_t>(r * c), 0.0) {}

    double& operator()(std::int64_t r, std::int64_t c) { return a[static_cast<std::size_t>(r * cols + c)]; }
    double operator()(std::int64_t r, std::int64_t c) const { return a[static_cast<std::size_t>(r * cols + c)]; }

    double* row(std::int64_t r) { return a.data() + r * cols; }
    const double* row(std::int64_t r) const { return a.data() + r * cols; }

    bool same_shape(const DMat& o) const { return rows == o.rows && cols == o.cols; }
};

// C = A(m,k) * B(k,n)
DMat matmul(const DMat& A, const DMat& B);
// C = A(m,k) * B(n,k)^T
DMat matmul_nt(const DMat& A, const DMat& B);
// C = A(k,m)^T * B(k,n)
DMat matmul_tn(const DMat& A, const DMat& B);

void add_inplace(DMat& A, const DMat& B);
void axpy_inplace(DMat& A, double s, const DMat& B);  // A += s*B
void scale_inplace(DMat& A, double s);
DMat randn_mat(std::int64_t rows, std::int64_t cols, Rng& rng);

double frob_norm2(const DMat& A);

}  // namespace latflow
