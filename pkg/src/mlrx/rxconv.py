"""Conventional receiver: LMMSE pilot estimation, interpolation, error
covariances, grouped-LMMSE equalization and AWGN demapping.

Array layouts (leading batch dimensions ``...`` are allowed everywhere):

* received grid ``y``: ``(..., n_f, n_t, n_m)``
* channel / channel estimate: ``(..., n_f, n_t, n_m, n_k)``
* pilot observations: ``(..., n_k, n_p, n_m)`` with ``n_p = n_pf * n_pt`` in
  the order of ``PilotPattern.pilot_sets``
* LLRs: ``(..., n_f, n_t, n_k, m_bits)``, ``log P(b=1) / P(b=0)``
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .chan import ChannelSampler
from .grid import PilotPattern, ReGroupPartition
from .txchain import Constellation

LLR_CLIP = 40.0


class CovarianceError(np.linalg.LinAlgError):
    """A covariance that should be positive semi-definite is not."""


@dataclass(frozen=True)
class PilotCovariance:
    """Channel covariance across the pilot REs of one user.

    ``sigma_mat`` is ``(n_p * n_m, n_p * n_m)``; vector index ``p * n_m + m``
    is pilot ``p`` (pilot-set order) at antenna ``m``.
    """

    sigma_mat: np.ndarray
    n_pf: int
    n_pt: int
    n_m: int

    @property
    def n_p(self) -> int:
        return self.n_pf * self.n_pt

    def spatial_block(self, mat: np.ndarray, p: int) -> np.ndarray:
        m = self.n_m
        return mat[p * m : (p + 1) * m, p * m : (p + 1) * m]


def hermitian_part(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def _jitter(a: np.ndarray) -> float:
    n = a.shape[-1]
    return 1e-9 * max(float(np.real(np.trace(a))) / n, 1e-30)


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for one Hermitian positive-definite ``a``.

    A diagonal jitter of ``1e-9 * trace / n`` is added once if the plain
    factorization fails.
    """
    try:
        c = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        try:
            c = scipy.linalg.cho_factor(a + _jitter(a) * np.eye(a.shape[0]), lower=True)
        except np.linalg.LinAlgError as exc:
            raise CovarianceError("matrix is not positive definite") from exc
    return scipy.linalg.cho_solve(c, b, check_finite=False)


def batched_hermitian_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``a^-1 b`` for small Hermitian positive-definite systems."""
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        n = a.shape[-1]
        tr = np.real(np.trace(a, axis1=-2, axis2=-1))
        a = a + (1e-9 * np.maximum(tr / n, 1e-30))[..., None, None] * np.eye(n)
        try:
            np.linalg.cholesky(a)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular equalizer system") from exc
    return np.linalg.solve(a, b)


# ----------------------------------------------------------------------------
# pilot covariance


def pilot_vectors(h: np.ndarray, pattern: PilotPattern, user: int = 0) -> np.ndarray:
    """Channel of every user sampled at ``user``'s pilot positions.

    ``h`` is ``(n, n_f, n_t, n_m, n_k)``; returns ``(n * n_k, n_p * n_m)``.
    Users are statistically identical, so each one contributes a sample.
    """
    p = pattern.pilot_sets[user]
    hp = h[:, p[:, 0], p[:, 1], :, :]  # (n, P, M, K)
    hp = np.moveaxis(hp, -1, 1)  # (n, K, P, M)
    return hp.reshape(hp.shape[0] * hp.shape[1], -1)


def covariance_cache_key(params: dict, pattern: PilotPattern, n_samples: int, seed: int) -> str:
    blob = json.dumps(
        {"params": params, "pattern": json.loads(pattern.to_json()), "n": n_samples, "seed": seed},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


_CACHE_MAGIC = b"MLRXSIG1"


def save_covariance(path, cov: PilotCovariance, key: str) -> None:
    # header: magic, 4 x u32 (dim, n_pf, n_pt, n_m), 32-byte sha256 key
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<4I", cov.sigma_mat.shape[0], cov.n_pf, cov.n_pt, cov.n_m))
        fh.write(bytes.fromhex(key))
        fh.write(np.ascontiguousarray(cov.sigma_mat).astype("<c16").tobytes())


def load_covariance(path, key: str | None = None) -> PilotCovariance:
    raw = Path(path).read_bytes()
    if raw[:8] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a covariance cache file")
    dim, n_pf, n_pt, n_m = struct.unpack("<4I", raw[8:24])
    stored = raw[24:56].hex()
    if key is not None and stored != key:
        raise ValueError(f"{path}: cache key mismatch")
    body = raw[56:]
    if len(body) != 16 * dim * dim:
        raise ValueError(f"{path}: corrupted covariance cache")
    mat = np.frombuffer(body, dtype="<c16").reshape(dim, dim).astype(complex)
    return PilotCovariance(mat, n_pf, n_pt, n_m)


def estimate_pilot_covariance(
    sampler: ChannelSampler,
    pattern: PilotPattern,
    n_samples: int,
    seed: int = 0,
    chunk: int = 512,
    cache_dir=None,
    cache_params: dict | None = None,
) -> PilotCovariance:
    """Sample covariance of the pilot-RE channel vector.

    ``n_samples`` counts channel realizations; every user of a realization
    contributes one vector. Chunks are summed in a fixed order so the result
    is reproducible bit for bit. With ``cache_dir`` the matrix is stored under
    a hash of ``cache_params``, the pattern, ``n_samples`` and ``seed``.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    path = None
    if cache_dir is not None:
        key = covariance_cache_key(cache_params or {}, pattern, n_samples, seed)
        path = Path(cache_dir) / f"sigma_{key[:16]}.bin"
        if path.exists():
            return load_covariance(path, key)
    rng = np.random.default_rng(seed)
    acc = None
    count = 0
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        v = pilot_vectors(sampler(n, rng), pattern)
        part = v.T @ v.conj()
        acc = part if acc is None else acc + part
        count += v.shape[0]
        done += n
    n_m = acc.shape[0] // pattern.n_pf // pattern.n_pt
    cov = PilotCovariance(hermitian_part(acc / count), pattern.n_pf, pattern.n_pt, n_m)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_covariance(path, cov, key)
    return cov


# ----------------------------------------------------------------------------
# channel estimation


def extract_pilot_observations(y: np.ndarray, pattern: PilotPattern) -> np.ndarray:
    """``(..., n_f, n_t, n_m)`` -> ``(..., n_k, n_p, n_m)``."""
    return np.stack([y[..., p[:, 0], p[:, 1], :] for p in pattern.pilot_sets], axis=-3)


def true_pilot_channel(h: np.ndarray, pattern: PilotPattern) -> np.ndarray:
    """Each user's own channel at its pilots, ``(..., n_k, n_p, n_m)``."""
    return np.stack(
        [h[..., p[:, 0], p[:, 1], :, :][..., k] for k, p in enumerate(pattern.pilot_sets)], axis=-3
    )


def lmmse_pilot_estimate(y_pilots: np.ndarray, sigma_mat: np.ndarray, sigma2) -> np.ndarray:
    """``Sigma (Sigma + sigma2 I)^-1 y`` on vectorized pilot observations.

    ``y_pilots`` is ``(..., n)`` with ``n = sigma_mat.shape[0]``; ``sigma2`` is
    a scalar or broadcasts against the leading dimensions.
    """
    y = np.asarray(y_pilots)
    n = sigma_mat.shape[0]
    if y.shape[-1] != n:
        raise ValueError(f"pilot vector length {y.shape[-1]} != covariance size {n}")
    lead = y.shape[:-1]
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), lead) if lead else np.asarray(sigma2, float)
    flat_y = y.reshape(-1, n)
    flat_s = np.broadcast_to(s2, lead).reshape(-1) if lead else np.array([float(s2)])
    out = np.empty_like(flat_y, dtype=complex)
    eye = np.eye(n)
    for value in np.unique(flat_s):
        if value <= 0:
            raise ValueError("sigma2 must be positive")
        sel = flat_s == value
        x = cholesky_solve(sigma_mat + value * eye, flat_y[sel].T)
        out[sel] = (sigma_mat @ x).T
    return out.reshape(y.shape)


def estimate_pilot_channels(y: np.ndarray, pattern: PilotPattern, cov: PilotCovariance, sigma2):
    """LMMSE estimates for every user, ``(..., n_k, n_p, n_m)``."""
    yp = extract_pilot_observations(y, pattern)
    lead = yp.shape[:-2]
    s2 = np.asarray(sigma2, dtype=float)
    if s2.ndim:
        s2 = s2.reshape(s2.shape + (1,) * (len(lead) - s2.ndim))
    vec = lmmse_pilot_estimate(yp.reshape(lead + (-1,)), cov.sigma_mat, s2)
    return vec.reshape(yp.shape)


def frequency_interp_matrix(pilot_f: np.ndarray, n_f: int) -> np.ndarray:
    """``(n_f, n_pf)`` linear interpolation weights, constant beyond the edges."""
    a = np.zeros((n_f, len(pilot_f)))
    for f in range(n_f):
        if f <= pilot_f[0]:
            a[f, 0] = 1.0
        elif f >= pilot_f[-1]:
            a[f, -1] = 1.0
        else:
            j = int(np.searchsorted(pilot_f, f, side="right")) - 1
            w = (f - pilot_f[j]) / (pilot_f[j + 1] - pilot_f[j])
            a[f, j], a[f, j + 1] = 1.0 - w, w
    return a


def time_interp_matrix(pilot_t, n_t: int, mode: str) -> np.ndarray:
    """``(n_t, n_pt)`` weights for NIRE (nearest symbol) or linear-in-time."""
    pilot_t = np.asarray(pilot_t)
    b = np.zeros((n_t, len(pilot_t)))
    for t in range(n_t):
        if mode == "freq_nire":
            # argmin picks the earlier symbol on ties
            b[t, int(np.argmin(np.abs(pilot_t - t)))] = 1.0
        elif t <= pilot_t[0]:
            b[t, 0] = 1.0
        elif t >= pilot_t[-1]:
            b[t, -1] = 1.0
        else:
            j = int(np.searchsorted(pilot_t, t, side="right")) - 1
            w = (t - pilot_t[j]) / (pilot_t[j + 1] - pilot_t[j])
            b[t, j], b[t, j + 1] = 1.0 - w, w
    return b


INTERP_MODES = ("freq_nire", "freq_time")


def interpolate(h_pilots: np.ndarray, pattern: PilotPattern, mode: str = "freq_nire") -> np.ndarray:
    """Full-grid estimate ``(..., n_f, n_t, n_m, n_k)`` from ``(..., n_k, n_p, n_m)``."""
    if mode not in INTERP_MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if mode == "freq_time" and pattern.n_pt < 2:
        raise ValueError("freq_time interpolation needs two pilot symbols")
    b = time_interp_matrix(pattern.pilot_symbol_indices, pattern.n_t, mode)
    per_user = []
    for k in range(pattern.n_k):
        a = frequency_interp_matrix(pattern.pilot_subcarriers(k), pattern.n_f)
        hp = h_pilots[..., k, :, :].reshape(h_pilots.shape[:-3] + (pattern.n_pf, pattern.n_pt, -1))
        per_user.append(np.einsum("fp,tq,...pqm->...ftm", a, b, hp))
    return np.stack(per_user, axis=-1)


# ----------------------------------------------------------------------------
# error covariance


def posterior_error_cov(sigma_mat: np.ndarray, sigma2: float) -> np.ndarray:
    """``Sigma - Sigma (Sigma + sigma2 I)^-1 Sigma``."""
    x = cholesky_solve(sigma_mat + sigma2 * np.eye(sigma_mat.shape[0]), sigma_mat)
    return hermitian_part(sigma_mat - sigma_mat @ x)


def estimate_error_cov(
    cov: PilotCovariance,
    sigma2: float,
    pattern: PilotPattern,
    partition: ReGroupPartition,
) -> np.ndarray:
    """Per-group spatial error covariance summed over users, ``(n_groups, n_m, n_m)``.

    Every user's block is taken at its pilot nearest to the group.
    """
    err = posterior_error_cov(cov.sigma_mat, sigma2)
    m = cov.n_m
    blocks = np.stack([cov.spatial_block(err, p) for p in range(cov.n_p)])
    out = np.zeros((partition.n_groups, m, m), dtype=complex)
    for k in range(pattern.n_k):
        out += blocks[partition.nearest_pilot[:, k]]
    return hermitian_part(out)


def group_to_re(per_group: np.ndarray, partition: ReGroupPartition) -> np.ndarray:
    """Broadcast ``(..., n_groups, a, b)`` to ``(..., n_f, n_t, a, b)``."""
    return per_group[..., partition.group_index(), :, :]


def _tile(a: np.ndarray, partition: ReGroupPartition, lead: int) -> np.ndarray:
    """Reshape the (f, t) axes at position ``lead`` into group tiles.

    ``(..., n_f, n_t, *rest)`` -> ``(..., gf_n, gf, gt_n, gt, *rest)``
    """
    s = a.shape
    return a.reshape(
        s[:lead]
        + (partition.n_groups_f, partition.group_f, partition.n_groups_t, partition.group_t)
        + s[lead + 2 :]
    )


# ----------------------------------------------------------------------------
# equalization


def grouped_lmmse(
    h_hat: np.ndarray,
    e_re: np.ndarray,
    sigma2,
    partition: ReGroupPartition,
) -> np.ndarray:
    """One LMMSE operator per RE group.

    ``W = (sum H^H) (sum H H^H + E + sigma2 I)^-1`` with both sums over the
    group's REs. ``h_hat`` is ``(..., n_f, n_t, n_m, n_k)`` and ``e_re`` the
    per-RE error covariance ``(..., n_f, n_t, n_m, n_m)``. Returns
    ``(..., n_groups, n_k, n_m)``.
    """
    lead = h_hat.ndim - 4
    n_m = h_hat.shape[-2]
    s2 = np.asarray(sigma2, dtype=float).reshape(np.shape(sigma2) + (1,) * 4)
    hh = h_hat @ np.conj(np.swapaxes(h_hat, -1, -2))
    a = hh + e_re + s2 * np.eye(n_m)
    a_sum = _tile(a, partition, lead).sum(axis=(lead + 1, lead + 3))
    h_sum = _tile(h_hat, partition, lead).sum(axis=(lead + 1, lead + 3))
    a_sum = hermitian_part(a_sum)
    # W^H = A^-1 (sum H), A Hermitian
    w_h = batched_hermitian_solve(a_sum, h_sum)
    w = np.conj(np.swapaxes(w_h, -1, -2))
    return w.reshape(w.shape[:lead] + (partition.n_groups,) + w.shape[-2:])


def per_re_operator(w: np.ndarray, partition: ReGroupPartition) -> np.ndarray:
    return group_to_re(w, partition)


def equalize_and_scale(
    w: np.ndarray,
    h_hat: np.ndarray,
    y: np.ndarray,
    e_re: np.ndarray,
    sigma2,
    partition: ReGroupPartition,
):
    """Scaled equalizer output and post-equalization noise variance.

    Returns ``x_hat`` and ``rho2``, both ``(..., n_f, n_t, n_k)``.
    """
    w_re = per_re_operator(w, partition)
    n_m = h_hat.shape[-2]
    s2 = np.asarray(sigma2, dtype=float).reshape(np.shape(sigma2) + (1,) * 4)
    g = w_re @ h_hat  # (..., K, K)
    diag = np.diagonal(g, axis1=-2, axis2=-1)
    if np.any(np.abs(diag) == 0):
        raise ZeroDivisionError("W H has a zero diagonal entry: user unservable in a group")
    x_hat = (w_re @ y[..., None])[..., 0] / diag
    q = h_hat @ np.conj(np.swapaxes(h_hat, -1, -2)) + e_re + s2 * np.eye(n_m)
    wqw = np.real(np.einsum("...km,...mn,...kn->...k", w_re, q, np.conj(w_re)))
    sig = np.abs(diag) ** 2
    rho2 = (wqw - sig) / sig
    return x_hat, np.maximum(rho2, 1e-12)


# ----------------------------------------------------------------------------
# demapping


def awgn_demap(
    x_hat: np.ndarray,
    rho2: np.ndarray,
    constellation: Constellation,
    method: str = "exact",
) -> np.ndarray:
    """Per-symbol LLRs ``log P(b=1|x_hat) - log P(b=0|x_hat)``, clipped to +-40."""
    x_hat = np.asarray(x_hat)
    rho2 = np.asarray(rho2, dtype=float)
    metric = -np.abs(x_hat[..., None] - constellation.points) ** 2 / rho2[..., None]
    labels = constellation.labels.astype(bool)
    out = np.empty(x_hat.shape + (constellation.m_bits,))
    for m in range(constellation.m_bits):
        one, zero = metric[..., labels[:, m]], metric[..., ~labels[:, m]]
        if method == "exact":
            out[..., m] = _logsumexp(one) - _logsumexp(zero)
        elif method == "maxlog":
            out[..., m] = one.max(axis=-1) - zero.max(axis=-1)
        else:
            raise ValueError(f"unknown demapping method {method!r}")
    return np.clip(out, -LLR_CLIP, LLR_CLIP)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    peak = a.max(axis=-1, keepdims=True)
    return peak[..., 0] + np.log(np.exp(a - peak).sum(axis=-1))


# ----------------------------------------------------------------------------
# full receiver


@dataclass
class ChannelEstimateBundle:
    """``h_hat`` is ``(..., n_f, n_t, n_m, n_k)``; ``e_re`` the per-RE summed
    spatial error covariance ``(..., n_f, n_t, n_m, n_m)``."""

    h_hat: np.ndarray
    e_re: np.ndarray
    h_pilots: np.ndarray


def conventional_estimate(
    y: np.ndarray,
    sigma2,
    pattern: PilotPattern,
    partition: ReGroupPartition,
    cov: PilotCovariance,
    mode: str = "freq_nire",
) -> ChannelEstimateBundle:
    h_p = estimate_pilot_channels(y, pattern, cov, sigma2)
    h_hat = interpolate(h_p, pattern, mode)
    s2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
    lead = y.shape[:-3]
    if s2.size == 1:
        e = group_to_re(estimate_error_cov(cov, float(s2[0]), pattern, partition), partition)
        e = np.broadcast_to(e, lead + e.shape)
    else:
        flat = s2.reshape(-1)
        cache = {v: group_to_re(estimate_error_cov(cov, v, pattern, partition), partition) for v in np.unique(flat)}
        e = np.stack([cache[v] for v in flat]).reshape(lead + cache[flat[0]].shape)
    return ChannelEstimateBundle(h_hat, e, h_p)


def equalize_and_demap(
    y: np.ndarray,
    sigma2,
    h_hat: np.ndarray,
    e_re: np.ndarray,
    partition: ReGroupPartition,
    constellation: Constellation,
    method: str = "exact",
):
    """Grouped LMMSE, scaling and demapping. Returns ``(llr, x_hat, rho2)``."""
    w = grouped_lmmse(h_hat, e_re, sigma2, partition)
    x_hat, rho2 = equalize_and_scale(w, h_hat, y, e_re, sigma2, partition)
    return awgn_demap(x_hat, rho2, constellation, method), x_hat, rho2


def conventional_receive(
    y: np.ndarray,
    sigma2,
    pattern: PilotPattern,
    partition: ReGroupPartition,
    cov: PilotCovariance,
    constellation: Constellation,
    mode: str = "freq_nire",
    method: str = "exact",
) -> np.ndarray:
    """Baseline receiver, LLRs ``(..., n_f, n_t, n_k, m_bits)``."""
    est = conventional_estimate(y, sigma2, pattern, partition, cov, mode)
    llr, _, _ = equalize_and_demap(y, sigma2, est.h_hat, est.e_re, partition, constellation, method)
    return llr
