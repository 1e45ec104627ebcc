"""Pure NumPy implementation of the LSVI replay kernels.

Semantically identical to the compiled extension; used as the fallback
backend and as the parity reference in tests.
"""

from __future__ import annotations

import numpy as np


def locus_values(phi, gram_inv, w_r, w_g, bonus, horizon):
    """Optimistic Q values at one state's locus features.

    phi: (M, d) locus feature block. Returns (q_r, q_g), each (M,), where
    Q_j = min(<w_j, phi> + bonus * sqrt(phi' gram_inv phi), horizon). The
    bonus term is shared between both metrics.
    """
    phi = np.asarray(phi, dtype=np.float64)
    quad = np.einsum("md,md->m", phi @ gram_inv, phi)
    spread = bonus * np.sqrt(np.maximum(quad, 0.0))
    q_r = np.minimum(phi @ w_r + spread, horizon)
    q_g = np.minimum(phi @ w_g + spread, horizon)
    return q_r, q_g


def batch_state_values(blocks, gram_inv, w_r, w_g, bonus, temperature, nu, horizon):
    """Policy values (V_r, V_g) at a batch of states.

    blocks: (N, M, d) locus feature blocks. Per state: optimistic Q at
    every locus, softmax over temperature*(q_r + nu*q_g) with max
    subtraction, then V_j = sum(probs * q_j) clipped into [0, horizon].
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    n, m, d = blocks.shape
    flat = blocks.reshape(n * m, d)
    quad = np.einsum("id,id->i", flat @ gram_inv, flat).reshape(n, m)
    spread = bonus * np.sqrt(np.maximum(quad, 0.0))
    q_r = np.minimum((flat @ w_r).reshape(n, m) + spread, horizon)
    q_g = np.minimum((flat @ w_g).reshape(n, m) + spread, horizon)
    logits = temperature * (q_r + nu * q_g)
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    v_r = np.clip(np.einsum("nm,nm->n", probs, q_r), 0.0, horizon)
    v_g = np.clip(np.einsum("nm,nm->n", probs, q_g), 0.0, horizon)
    return v_r, v_g


def rank_one_update(gram_inv, phi, sign=1.0):
    """In-place Sherman-Morrison update of gram_inv for gram +/- phi phi'.

    sign=+1 adds the observation, sign=-1 removes it (window eviction).
    Raises on a non-positive denominator, which signals a downdate that
    would destroy positive definiteness.
    """
    phi = np.asarray(phi, dtype=np.float64)
    u = gram_inv @ phi
    denom = 1.0 + sign * float(phi @ u)
    if denom <= 1e-12:
        raise FloatingPointError("rank-one update would make the Gram matrix singular")
    gram_inv -= (sign / denom) * np.outer(u, u)
    return gram_inv
