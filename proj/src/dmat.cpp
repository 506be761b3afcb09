#include "latflow/dmat.hpp"

namespace latflow {

DMat matmul(const DMat& A, const DMat& B) {
    if (A.cols != B.rows) throw DimensionError("matmul shape mismatch");
    DMat C(A.rows, B.cols);
    for (std::int64_t i = 0; i < A.rows; i++) {
        const double* ai = A.row(i);
        double* ci = C.row(i);
        for (std::int64_t k = 0; k < A.cols; k++) {
            double v = ai[k];
            if (v == 0.0) continue;
            const double* bk = B.row(k);
            for (std::int64_t j = 0; j < B.cols; j++) ci[j] += v * bk[j];
        }
    }
    return C;
}

DMat matmul_nt(const DMat& A, const DMat& B) {
    if (A.cols != B.cols) throw DimensionError("matmul_nt shape mismatch");
    DMat C(A.rows, B.rows);
    for (std::int64_t i = 0; i < A.rows; i++) {
        const double* ai = A.row(i);
        for (std::int64_t j = 0; j < B.rows; j++) {
            const double* bj = B.row(j);
            double acc = 0.0;
            for (std::int64_t k = 0; k < A.cols; k++) acc += ai[k] * bj[k];
            C(i, j) = acc;
        }
    }
    return C;
}

DMat matmul_tn(const DMat& A, const DMat& B) {
    if (A.rows != B.rows) throw DimensionError("matmul_tn shape mismatch");
    DMat C(A.cols, B.cols);
    for (std::int64_t k = 0; k < A.rows; k++) {
        const double* ak = A.row(k);
        const double* bk = B.row(k);
        for (std::int64_t i = 0; i < A.cols; i++) {
            double v = ak[i];
            if (v == 0.0) continue;
            double* ci = C.row(i);
            for (std::int64_t j = 0; j < B.cols; j++) ci[j] += v * bk[j];
        }
    }
    return C;
}

void add_inplace(DMat& A, const DMat& B) {
    if (!A.same_shape(B)) throw DimensionError("add shape mismatch");
    for (std::size_t i = 0; i < A.a.size(); i++) A.a[i] += B.a[i];
}

void axpy_inplace(DMat& A, double s, const DMat& B) {
    if (!A.same_shape(B)) throw DimensionError("axpy shape mismatch");
    for (std::size_t i = 0; i < A.a.size(); i++) A.a[i] += s * B.a[i];
}

void scale_inplace(DMat& A, double s) {
    for (auto& v : A.a) v *= s;
}

DMat randn_mat(std::int64_t rows, std::int64_t cols, Rng& rng) {
    DMat m(rows, cols);
    for (auto& v : m.a) v = rng.normal();
    return m;
}

double frob_norm2(const DMat& A) {
    double acc = 0.0;
    for (double v : A.a) acc += v * v;
    return acc;
}

}  // namespace latflow
