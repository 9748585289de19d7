"""Pure numpy versions of the hot kernels.

Must stay signature-compatible with ``_kernels.pyx``; ``kolmo.kernels``
picks one of the two at import.
"""
import numpy as np


def generator(rates, src, dst, n_states):
    """Assemble a batch of rate matrices from the off-diagonal rates.

    ``rates`` is (B, q); entry ``k`` goes to ``Q[:, src[k], dst[k]]`` and the
    diagonal is filled so that every row sums to zero.
    """
    B = rates.shape[0]
    Q = np.zeros((B, n_states, n_states))
    Q[:, src, dst] = rates
    diag = np.arange(n_states)
    Q[:, diag, diag] = -Q.sum(axis=2)
    return Q


def generator_vjp(gQ, src, dst):
    return gQ[:, src, dst] - gQ[:, src, src]


def kfe_kbe(Pf, Pb, Q):
    """Forward (P Q) and backward (-Q P) Kolmogorov right-hand sides."""
    return Pf @ Q, -(Q @ Pb)


def kfe_kbe_vjp(Pf, Pb, Q, cf, cb):
    Qt = np.swapaxes(Q, 1, 2)
    gPf = cf @ Qt
    gPb = -(Qt @ cb)
    gQ = np.swapaxes(Pf, 1, 2) @ cf - cb @ np.swapaxes(Pb, 1, 2)
    return gPf, gPb, gQ


def concordance_counts(surv_at_event, event_subject, times):
    """Count concordant and comparable pairs.

    Row ``e`` of ``surv_at_event`` holds every subject's predicted survival at
    the event time of subject ``event_subject[e]``. A pair (i, j) is
    comparable when ``times[j] > times[i]``; it is concordant when subject i
    has the lower predicted survival, and ties count one half.
    """
    concordant = 0.0
    comparable = 0.0
    for e, i in enumerate(event_subject):
        later = times > times[i]
        if not later.any():
            continue
        own = surv_at_event[e, i]
        others = surv_at_event[e, later]
        comparable += later.sum()
        concordant += np.sum(own < others) + 0.5 * np.sum(own == others)
    return float(concordant), float(comparable)
