# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. See ``_kernels_py.py`` for the reference semantics."""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def generator(const double[:, ::1] rates, const Py_ssize_t[::1] src, const Py_ssize_t[::1] dst,
              Py_ssize_t n_states):
    cdef Py_ssize_t B = rates.shape[0], q = rates.shape[1]
    cdef Py_ssize_t b, k, i
    Qa = np.zeros((B, n_states, n_states))
    cdef double[:, :, ::1] Q = Qa
    cdef double r
    with nogil:
        for b in range(B):
            for k in range(q):
                r = rates[b, k]
                Q[b, src[k], dst[k]] += r
                Q[b, src[k], src[k]] -= r
    return Qa


def generator_vjp(const double[:, :, ::1] gQ, const Py_ssize_t[::1] src, const Py_ssize_t[::1] dst):
    cdef Py_ssize_t B = gQ.shape[0], q = src.shape[0]
    cdef Py_ssize_t b, k
    outa = np.empty((B, q))
    cdef double[:, ::1] out = outa
    with nogil:
        for b in range(B):
            for k in range(q):
                out[b, k] = gQ[b, src[k], dst[k]] - gQ[b, src[k], src[k]]
    return outa


def kfe_kbe(const double[:, :, ::1] Pf, const double[:, :, ::1] Pb, const double[:, :, ::1] Q):
    cdef Py_ssize_t B = Q.shape[0], S = Q.shape[1]
    cdef Py_ssize_t b, i, j, k
    dfa = np.empty((B, S, S))
    dba = np.empty((B, S, S))
    cdef double[:, :, ::1] df = dfa
    cdef double[:, :, ::1] db = dba
    cdef double accf, accb
    with nogil:
        for b in range(B):
            for i in range(S):
                for j in range(S):
                    accf = 0.0
                    accb = 0.0
                    for k in range(S):
                        accf = accf + Pf[b, i, k] * Q[b, k, j]
                        accb = accb + Q[b, i, k] * Pb[b, k, j]
                    df[b, i, j] = accf
                    db[b, i, j] = -accb
    return dfa, dba


def kfe_kbe_vjp(const double[:, :, ::1] Pf, const double[:, :, ::1] Pb, const double[:, :, ::1] Q,
                const double[:, :, ::1] cf, const double[:, :, ::1] cb):
    cdef Py_ssize_t B = Q.shape[0], S = Q.shape[1]
    cdef Py_ssize_t b, i, j, k
    gPfa = np.empty((B, S, S))
    gPba = np.empty((B, S, S))
    gQa = np.empty((B, S, S))
    cdef double[:, :, ::1] gPf = gPfa
    cdef double[:, :, ::1] gPb = gPba
    cdef double[:, :, ::1] gQ = gQa
    cdef double a1, a2, a3
    with nogil:
        for b in range(B):
            for i in range(S):
                for j in range(S):
                    a1 = 0.0
                    a2 = 0.0
                    a3 = 0.0
                    for k in range(S):
                        # gPf = cf Q^T ; gPb = -Q^T cb ; gQ = Pf^T cf - cb Pb^T
                        a1 = a1 + cf[b, i, k] * Q[b, j, k]
                        a2 = a2 + Q[b, k, i] * cb[b, k, j]
                        a3 = a3 + Pf[b, k, i] * cf[b, k, j] - cb[b, i, k] * Pb[b, j, k]
                    gPf[b, i, j] = a1
                    gPb[b, i, j] = -a2
                    gQ[b, i, j] = a3
    return gPfa, gPba, gQa


def concordance_counts(const double[:, ::1] surv_at_event, const Py_ssize_t[::1] event_subject,
                       const double[::1] times):
    cdef Py_ssize_t n_ev = event_subject.shape[0], n = times.shape[0]
    cdef Py_ssize_t e, i, j
    cdef double conc = 0.0, comp = 0.0, own, ti, other
    with nogil:
        for e in range(n_ev):
            i = event_subject[e]
            ti = times[i]
            own = surv_at_event[e, i]
            for j in range(n):
                if times[j] > ti:
                    comp += 1.0
                    other = surv_at_event[e, j]
                    if own < other:
                        conc += 1.0
                    elif own == other:
                        conc += 0.5
    return conc, comp
