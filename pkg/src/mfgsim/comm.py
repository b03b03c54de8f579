"""Per-agent link: threshold scheduler, predictive encoder, AWGN channel, decoder.

All functions accept a single agent (vectors of shape ``(n,)``, matrices
``(n, n)``) or a stack of agents (``(N, n)`` and ``(N, n, n)``); system
matrices may be shared ``(n, n)`` or per agent ``(N, n, n)``.

Within one step k the order is: propagate covariance, predict, schedule,
encode, transmit, decode, then control and plant update. The innovation is
carried through the control-free recursion ``delta_{k+1} = A ebar_k + W_k``
(identical to ``X_{k+1} - A Y_k - B U_k``) so that errors and transmission
decisions never see the control, and the plant state is ``X_k = Y_k + ebar_k``.

The decoder is the linear MMSE update with gain ``G = P (P + Sigma_v)^-1``.
Conditioning on the trigger event makes the true conditional mean
non-Gaussian; that effect is ignored (exact when ``alpha = 0``).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import psd_sqrt


def mv(M, x):
    """Matrix-vector product broadcasting over a leading agent axis."""
    return (M @ x[..., None])[..., 0]


def quad(x, S):
    """``x' S x`` over the trailing axis."""
    return np.einsum("...i,...i->...", x, mv(S, x))


@dataclass
class LinkState:
    Y_prev: np.ndarray
    U_prev: np.ndarray
    P: np.ndarray
    err: np.ndarray  # ebar_{k-1} = X_{k-1} - Y_{k-1}
    k: int = 0


@dataclass
class StepRecord:
    gamma: np.ndarray
    c: Optional[np.ndarray]
    d: Optional[np.ndarray]
    Y: np.ndarray
    err: np.ndarray
    X: np.ndarray


def predict(ls: LinkState, A, B):
    """Decoder prediction ``A Y_{k-1} + B U_{k-1}``."""
    return mv(A, ls.Y_prev) + mv(B, ls.U_prev)


def schedule(delta, sp, k):
    """Transmit iff ``k == 0`` or ``delta' S delta >= alpha``."""
    if k == 0:
        return np.ones(np.shape(delta)[:-1], dtype=bool)
    return quad(delta, sp.S) >= sp.alpha


def encode(X, Yhat):
    """Predictive encoder: the innovation itself."""
    return np.asarray(X) - np.asarray(Yhat)


def channel_transmit(c, sigma_v, rng=None, z=None):
    """AWGN channel ``d = c + v``, ``v ~ N(0, Sigma_v)``.

    ``z`` are pre-drawn standard normals of the same shape as ``c`` (from the
    agent's own channel stream); otherwise they are drawn from ``rng``.
    """
    c = np.asarray(c, dtype=float)
    if z is None:
        z = rng.standard_normal(c.shape)
    return c + z @ noise_factor(sigma_v).T


def noise_factor(cov):
    """Factor F with ``F F' = cov``; Cholesky when PD, symmetric root otherwise."""
    cov = np.asarray(cov, dtype=float)
    if np.linalg.eigvalsh(cov).min() > 0.0:
        return np.linalg.cholesky(cov)
    return psd_sqrt(cov)


def decoder_gain(P, sigma_v):
    """``G = P (P + Sigma_v)^-1``; pseudo-inverse when the sum is singular.

    With ``Sigma_v = 0`` this is the projector onto range(P): identity where the
    state is uncertain, zero on the null space of P.
    """
    S = P + sigma_v
    try:
        return np.swapaxes(np.linalg.solve(S, P), -1, -2)
    except np.linalg.LinAlgError:
        return P @ np.linalg.pinv(S, hermitian=True)


def decode(ls: LinkState, Yhat, gamma, d, sigma_v):
    """Return ``(Y_k, P)``: prediction when silent, linear-MMSE update on receipt."""
    gamma = np.asarray(gamma, dtype=bool)
    if d is None or not np.any(gamma):
        return np.array(Yhat, dtype=float), ls.P
    G = decoder_gain(ls.P, sigma_v)
    Y = np.where(gamma[..., None], Yhat + mv(G, d), Yhat)
    P_post = _posterior_cov(G, ls.P)
    P = np.where(gamma[..., None, None], P_post, ls.P)
    return Y, P


def _posterior_cov(G, P):
    n = P.shape[-1]
    out = (np.eye(n) - G) @ P
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def propagate_covariance(P, A, sigma_w):
    """``A P A' + Sigma_w``; independent of the control by construction."""
    out = A @ P @ np.swapaxes(A, -1, -2) + sigma_w
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def init_link(nu0, X0, sigma_x, m, decoder_init="prior_mean"):
    """Decoder prior at k = 0 and the initial innovation.

    ``prior_mean``: ``Yhat_0 = nu0`` with ``P_0 = Sigma_x``. ``zero``: ``Yhat_0 = 0``
    with ``P_0 = Sigma_x + nu0 nu0'`` (the second moment about the zero prior).
    Returns ``(LinkState, Yhat_0, delta_0)``.
    """
    X0 = np.asarray(X0, dtype=float)
    nu0 = np.broadcast_to(np.asarray(nu0, dtype=float), X0.shape)
    if decoder_init == "prior_mean":
        Yhat = nu0.copy()
        P = np.broadcast_to(sigma_x, X0.shape[:-1] + sigma_x.shape).copy()
    elif decoder_init == "zero":
        Yhat = np.zeros_like(X0)
        P = sigma_x + nu0[..., :, None] * nu0[..., None, :]
    else:
        raise ValueError(f"unknown decoder_init {decoder_init!r}")
    ls = LinkState(Y_prev=np.zeros_like(X0), U_prev=np.zeros(X0.shape[:-1] + (m,)),
                   P=P, err=np.zeros_like(X0), k=0)
    return ls, Yhat, X0 - Yhat


def link_step(ls: LinkState, A, B, sigma_w, sigma_v, sp, w_prev=None, z_v=None,
              init=None, control_blind=False, factor_v=None):
    """Advance the link to time ``ls.k`` and return a :class:`StepRecord`.

    At k = 0 pass ``init = (Yhat_0, delta_0)`` from :func:`init_link`. For k >= 1
    ``w_prev`` is the process noise ``W_{k-1}``. ``z_v`` holds the standard normal
    draws for this step's channel noise. After the caller picks ``U_k`` it must
    call :func:`commit`.

    ``control_blind`` is a test-only fault: the prediction drops ``B U_{k-1}``,
    so the innovation seen by the scheduler and the decoder error carry the
    control. It exists to show the dual-effect probe can fail.
    """
    k = ls.k
    if k == 0:
        Yhat, delta = init
    else:
        ls.P = propagate_covariance(ls.P, A, sigma_w)
        delta = mv(A, ls.err) + w_prev
        if control_blind:
            Yhat = mv(A, ls.Y_prev)
            delta = delta + mv(B, ls.U_prev)
        else:
            Yhat = predict(ls, A, B)
    gamma = schedule(delta, sp, k)
    c = delta  # encode(X_k, Yhat_k) evaluated through the error recursion
    if factor_v is None:
        factor_v = noise_factor(sigma_v)
    d = c + z_v @ factor_v.T
    G = decoder_gain(ls.P, sigma_v)
    Gd = mv(G, d)
    g = gamma[..., None]
    Y = np.where(g, Yhat + Gd, Yhat)
    err = np.where(g, delta - Gd, delta)
    ls.P = np.where(gamma[..., None, None], _posterior_cov(G, ls.P), ls.P)
    X = Y + err
    silent = np.nan  # no channel symbol when gamma = 0
    return StepRecord(gamma=gamma, c=np.where(g, c, silent), d=np.where(g, d, silent),
                      Y=Y, err=err, X=X)


def commit(ls: LinkState, rec: StepRecord, U):
    ls.Y_prev = rec.Y
    ls.err = rec.err
    ls.U_prev = np.asarray(U, dtype=float)
    ls.k += 1
