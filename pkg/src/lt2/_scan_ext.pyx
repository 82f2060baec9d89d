# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward/backward of the generalised linear-attention scan.

Same contract as ``lt2._scan_ref``: per (batch*head) row,

    S_t = (I - beta_t k_t k_t^T) Diag(alpha_t) S_{t-1} + u_t v_t^T,   y_t = S_t^T q_t.

The backward recomputes all states of one row into a scratch buffer, so memory
is O(L * dk * dv) per call rather than per batch.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.string cimport memset, memcpy

cnp.import_array()


cdef inline void _step(double* S, const double* q, const double* k, double beta,
                       const double* alpha, const double* u, const double* v,
                       double* w, Py_ssize_t dk, Py_ssize_t dv, bint erase) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double a, c
    for i in range(dk):
        a = alpha[i]
        for j in range(dv):
            S[i * dv + j] *= a
    if erase:
        for j in range(dv):
            w[j] = 0.0
        for i in range(dk):
            c = k[i]
            for j in range(dv):
                w[j] += c * S[i * dv + j]
        for i in range(dk):
            c = beta * k[i]
            for j in range(dv):
                S[i * dv + j] -= c * w[j]
    for i in range(dk):
        c = u[i]
        for j in range(dv):
            S[i * dv + j] += c * v[j]


def scan_forward(const double[:, :, ::1] q, const double[:, :, ::1] k, const double[:, ::1] beta,
                 const double[:, :, ::1] alpha, const double[:, :, ::1] u, const double[:, :, ::1] v,
                 bint erase=True):
    cdef Py_ssize_t BH = q.shape[0], L = q.shape[1], dk = q.shape[2], dv = v.shape[2]
    y_arr = np.zeros((BH, L, dv), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    cdef double* S = <double*> malloc(dk * dv * sizeof(double))
    cdef double* w = <double*> malloc(dv * sizeof(double))
    cdef Py_ssize_t b, t, i, j
    cdef double c
    if S == NULL or w == NULL:
        free(S); free(w)
        raise MemoryError()
    with nogil:
        for b in range(BH):
            memset(S, 0, dk * dv * sizeof(double))
            for t in range(L):
                _step(S, &q[b, t, 0], &k[b, t, 0], beta[b, t], &alpha[b, t, 0],
                      &u[b, t, 0], &v[b, t, 0], w, dk, dv, erase)
                for i in range(dk):
                    c = q[b, t, i]
                    for j in range(dv):
                        y[b, t, j] += c * S[i * dv + j]
    free(S); free(w)
    return y_arr


def scan_backward(const double[:, :, ::1] q, const double[:, :, ::1] k, const double[:, ::1] beta,
                  const double[:, :, ::1] alpha, const double[:, :, ::1] u, const double[:, :, ::1] v,
                  const double[:, :, ::1] dy, bint erase=True):
    cdef Py_ssize_t BH = q.shape[0], L = q.shape[1], dk = q.shape[2], dv = v.shape[2]
    cdef Py_ssize_t n = dk * dv
    dq_a = np.zeros((BH, L, dk)); dk_a = np.zeros((BH, L, dk)); db_a = np.zeros((BH, L))
    da_a = np.zeros((BH, L, dk)); du_a = np.zeros((BH, L, dk)); dv_a = np.zeros((BH, L, dv))
    cdef double[:, :, ::1] dq = dq_a, dkk = dk_a, dal = da_a, du = du_a, dvv = dv_a
    cdef double[:, ::1] dbeta = db_a
    cdef double* states = <double*> malloc((L + 1) * n * sizeof(double))
    cdef double* G = <double*> malloc(n * sizeof(double))
    cdef double* P = <double*> malloc(n * sizeof(double))
    cdef double* w = <double*> malloc(dv * sizeof(double))
    cdef double* gk = <double*> malloc(dv * sizeof(double))
    cdef double* pk = <double*> malloc(dv * sizeof(double))
    cdef Py_ssize_t b, t, i, j
    cdef double acc, acc2, a, bt, c, s
    cdef double* St
    cdef double* Sp
    if states == NULL or G == NULL or P == NULL or w == NULL or gk == NULL or pk == NULL:
        free(states); free(G); free(P); free(w); free(gk); free(pk)
        raise MemoryError()
    with nogil:
        for b in range(BH):
            memset(states, 0, n * sizeof(double))
            for t in range(L):
                memcpy(states + (t + 1) * n, states + t * n, n * sizeof(double))
                _step(states + (t + 1) * n, &q[b, t, 0], &k[b, t, 0], beta[b, t], &alpha[b, t, 0],
                      &u[b, t, 0], &v[b, t, 0], w, dk, dv, erase)
            memset(G, 0, n * sizeof(double))
            for t in range(L - 1, -1, -1):
                St = states + (t + 1) * n
                Sp = states + t * n
                for i in range(dk):
                    c = q[b, t, i]
                    acc = 0.0
                    for j in range(dv):
                        G[i * dv + j] += c * dy[b, t, j]
                        acc = acc + St[i * dv + j] * dy[b, t, j]
                    dq[b, t, i] = acc
                for i in range(dk):
                    acc = 0.0
                    for j in range(dv):
                        acc = acc + G[i * dv + j] * v[b, t, j]
                    du[b, t, i] = acc
                for i in range(dk):
                    c = u[b, t, i]
                    for j in range(dv):
                        dvv[b, t, j] += c * G[i * dv + j]
                for i in range(dk):
                    a = alpha[b, t, i]
                    for j in range(dv):
                        P[i * dv + j] = a * Sp[i * dv + j]
                if erase:
                    bt = beta[b, t]
                    for j in range(dv):
                        gk[j] = 0.0
                        pk[j] = 0.0
                    for i in range(dk):
                        c = k[b, t, i]
                        for j in range(dv):
                            gk[j] += c * G[i * dv + j]
                            pk[j] += c * P[i * dv + j]
                    acc = 0.0
                    for j in range(dv):
                        acc = acc + gk[j] * pk[j]
                    dbeta[b, t] = -acc
                    for i in range(dk):
                        acc = 0.0
                        acc2 = 0.0
                        for j in range(dv):
                            acc = acc + G[i * dv + j] * pk[j]
                            acc2 = acc2 + P[i * dv + j] * gk[j]
                        dkk[b, t, i] = -bt * (acc + acc2)
                    for i in range(dk):
                        c = bt * k[b, t, i]
                        for j in range(dv):
                            G[i * dv + j] -= c * gk[j]
                # G now holds dL/dP; fold in Diag(alpha)
                for i in range(dk):
                    a = alpha[b, t, i]
                    s = 0.0
                    for j in range(dv):
                        s = s + G[i * dv + j] * Sp[i * dv + j]
                        G[i * dv + j] *= a
                    dal[b, t, i] = s
    free(states); free(G); free(P); free(w); free(gk); free(pk)
    return dq_a, dk_a, db_a, da_a, du_a, dv_a
