"""Pure-Python versions of the compiled kernels in ``_ckernels.pyx``.

Same signatures and results; used when the extension is not built or when
``TEMGNET_PURE_PYTHON`` is set.
"""
import numpy as np


def sosfilt(sos, x, zi):
    n_rows, n_samples = x.shape
    y = np.empty((n_rows, n_samples), dtype=np.float64)
    for r in range(n_rows):
        state = [[zi[r, s, 0], zi[r, s, 1]] for s in range(sos.shape[0])]
        coeffs = [tuple(float(c) for c in sec) for sec in sos]
        row = x[r].tolist()
        out = y[r]
        for t, xn in enumerate(row):
            for s, (b0, b1, b2, _, a1, a2) in enumerate(coeffs):
                z = state[s]
                yn = b0 * xn + z[0]
                z[0] = b1 * xn - a1 * yn + z[1]
                z[1] = b2 * xn - a2 * yn
                xn = yn
            out[t] = xn
        for s in range(sos.shape[0]):
            zi[r, s, 0], zi[r, s, 1] = state[s]
    return y


def signed_rank_counts(ranks):
    total = int(np.sum(ranks))
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in ranks:
        r = int(r)
        reach += r
        for k in range(reach, r - 1, -1):
            counts[k] += counts[k - r]
    return np.array(counts, dtype=np.int64)
