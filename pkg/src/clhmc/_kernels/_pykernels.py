"""Pure numpy versions of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Field kernels take arrays shaped ``(batch, ny, nx)``; the outer boundary ring
of the output is always zero.
"""

import numpy as np


def laplacian5(field, dx, dy):
    out = np.zeros_like(field)
    c = field[:, 1:-1, 1:-1]
    out[:, 1:-1, 1:-1] = (
        (field[:, 1:-1, 2:] - 2.0 * c + field[:, 1:-1, :-2]) / (dx * dx)
        + (field[:, 2:, 1:-1] - 2.0 * c + field[:, :-2, 1:-1]) / (dy * dy)
    )
    return out


def arakawa(psi, q, dx, dy):
    out = np.zeros_like(psi)
    # neighbours of interior nodes; E/W along x (last axis), N/S along y
    pE, pW = psi[:, 1:-1, 2:], psi[:, 1:-1, :-2]
    pN, pS = psi[:, 2:, 1:-1], psi[:, :-2, 1:-1]
    pNE, pNW = psi[:, 2:, 2:], psi[:, 2:, :-2]
    pSE, pSW = psi[:, :-2, 2:], psi[:, :-2, :-2]
    qE, qW = q[:, 1:-1, 2:], q[:, 1:-1, :-2]
    qN, qS = q[:, 2:, 1:-1], q[:, :-2, 1:-1]
    qNE, qNW = q[:, 2:, 2:], q[:, 2:, :-2]
    qSE, qSW = q[:, :-2, 2:], q[:, :-2, :-2]

    jpp = (pE - pW) * (qN - qS) - (pN - pS) * (qE - qW)
    jpx = pE * (qNE - qSE) - pW * (qNW - qSW) - pN * (qNE - qNW) + pS * (qSE - qSW)
    jxp = qN * (pNE - pNW) - qS * (pSE - pSW) - qE * (pNE - pSE) + qW * (pNW - pSW)
    out[:, 1:-1, 1:-1] = (jpp + jpx + jxp) / (12.0 * dx * dy)
    return out


def mixture_prior(x, means, inv_vars, log_coefs):
    """Negative log of a diagonal Gaussian mixture kernel and its gradient.

    ``log_coefs[i]`` is ``log(tau_i) - 0.5 * log|Sigma_i|``. The leading
    component is re-identified at every call so the correction sum only holds
    terms in ``(0, 1]``.
    """
    diff = x[None, :] - means
    scaled = diff * inv_vars
    quad = 0.5 * np.einsum("ij,ij->i", diff, scaled)
    log_terms = log_coefs - quad
    lead = int(np.argmax(log_terms))
    ratios = np.exp(log_terms - log_terms[lead])
    ratios[lead] = 0.0
    denom = 1.0 + ratios.sum()
    value = quad[lead] - log_coefs[lead] - np.log1p(ratios.sum())
    grad_lead = scaled[lead]
    grad = grad_lead - (ratios[:, None] * (grad_lead[None, :] - scaled)).sum(axis=0) / denom
    return value, grad
