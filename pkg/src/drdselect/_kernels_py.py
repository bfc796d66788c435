"""Pure-numpy reference versions of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np


def component_terms(x, means, precisions, log_consts):
    """Gaussian log-densities and their gradients for every (row, component).

    Parameters
    ----------
    x : ndarray, shape (n, d)
    means : ndarray, shape (K, d)
    precisions : ndarray, shape (K, d, d)
        Inverse covariances.
    log_consts : ndarray, shape (K,)
        ``log w_k - 0.5 * (d log 2pi + log det Sigma_k)``.

    Returns
    -------
    logp : ndarray, shape (n, K)
        ``log_consts[k] - 0.5 (x - m_k)^T P_k (x - m_k)``.
    grad : ndarray, shape (n, K, d)
        ``-P_k (x - m_k)``.
    """
    diff = x[:, None, :] - means[None, :, :]
    grad = -np.einsum("kij,nkj->nki", precisions, diff)
    logp = log_consts[None, :] + 0.5 * np.einsum("nki,nki->nk", diff, grad)
    return logp, grad
