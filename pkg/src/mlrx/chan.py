"""Synthetic time-varying MU-MIMO channel and the per-RE transfer function.

The generator is a tapped delay line: every tap of every user has a
sum-of-sinusoids Jakes gain process evolving over OFDM symbols, a ULA steering
vector at the base station and an exponential power-delay profile.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .grid import GridConfig

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ChannelModelParams:
    n_taps: int = 8
    delay_spread_s: float = 100e-9
    doppler_hz: float = 0.0
    angle_spread_deg: float = 15.0
    sector_deg: float = 120.0
    n_sinusoids: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_taps < 1:
            raise ValueError("n_taps must be >= 1")
        if self.doppler_hz < 0 or self.delay_spread_s < 0:
            raise ValueError("doppler_hz and delay_spread_s must be non-negative")

    def with_doppler(self, doppler_hz: float) -> "ChannelModelParams":
        return replace(self, doppler_hz=float(doppler_hz))

    def key(self) -> dict:
        d = dict(self.__dict__)
        d.pop("seed")
        return d


@dataclass(frozen=True)
class NoiseSpec:
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def snr_db(self) -> float:
        return float(10 * np.log10(1 / self.sigma2))

    @classmethod
    def from_snr_db(cls, snr_db: float) -> "NoiseSpec":
        return cls(float(10 ** (-snr_db / 10)))


def doppler_from_speed(speed_kmh, center_freq_hz: float):
    return np.asarray(speed_kmh, dtype=float) / 3.6 * center_freq_hz / SPEED_OF_LIGHT


def symbol_period(cfg: GridConfig) -> float:
    # 14 symbols per 1 ms slot at 15 kHz: useful part plus a 1/14 cyclic prefix
    return (15.0 / 14.0) / cfg.subcarrier_spacing_hz


def tap_profile(n_taps: int, delay_spread_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Tap delays and powers of the exponential profile.

    Powers decay as ``exp(-l / (n_taps / 4))``; delays are spaced so that the
    RMS delay spread equals ``delay_spread_s`` exactly.
    """
    l = np.arange(n_taps, dtype=float)
    p = np.exp(-l / max(n_taps / 4.0, 1e-12))
    p /= p.sum()
    mean = p @ l
    rms = np.sqrt(p @ (l - mean) ** 2)
    step = delay_spread_s / rms if rms > 0 else 0.0
    return l * step, p


def jakes_gains(
    rng: np.random.Generator,
    doppler_hz: np.ndarray,
    times: np.ndarray,
    shape: tuple[int, ...],
    n_sinusoids: int = 16,
) -> np.ndarray:
    """Unit-power sum-of-sinusoids fading processes.

    ``doppler_hz`` broadcasts against ``shape``; the result has shape
    ``shape + (len(times),)``. Arrival angles and phases are drawn uniformly so
    the ensemble autocorrelation is ``J0(2 pi f_D dt)``.
    """
    alpha = rng.uniform(0, 2 * np.pi, size=shape + (n_sinusoids,))
    phi = rng.uniform(0, 2 * np.pi, size=shape + (n_sinusoids,))
    fd = np.broadcast_to(np.asarray(doppler_hz, dtype=float), shape)[..., None, None]
    arg = 2 * np.pi * fd * np.cos(alpha)[..., None, :] * times[:, None] + phi[..., None, :]
    return np.exp(1j * arg).sum(axis=-1) / np.sqrt(n_sinusoids)


def normalize_channel(h: np.ndarray) -> np.ndarray:
    """Scale each user so that sum over (f, t, m) of |h|^2 is n_f n_t n_m.

    ``h`` has shape ``(..., n_f, n_t, n_m, n_k)``.
    """
    n_f, n_t, n_m = h.shape[-4:-1]
    energy = np.sum(np.abs(h) ** 2, axis=(-4, -3, -2), keepdims=True)
    return h * np.sqrt(n_f * n_t * n_m / np.maximum(energy, 1e-300))


def generate_channels(
    cfg: GridConfig,
    params: ChannelModelParams,
    n: int,
    rng: np.random.Generator,
    doppler_hz=None,
) -> np.ndarray:
    """Draw ``n`` normalized channel tensors, shape ``(n, n_f, n_t, n_m, n_k)``.

    ``doppler_hz`` optionally gives one Doppler per realization, overriding
    ``params.doppler_hz``; the value is shared by all users of a realization.
    """
    L, K, M = params.n_taps, cfg.n_k, cfg.n_m
    fd = np.full(n, params.doppler_hz) if doppler_hz is None else np.asarray(doppler_hz, float)
    fd = np.broadcast_to(fd, (n,))
    delays, powers = tap_profile(L, params.delay_spread_s)
    times = np.arange(cfg.n_t) * symbol_period(cfg)
    # (n, K, L, T)
    g = jakes_gains(rng, fd[:, None, None], times, (n, K, L), params.n_sinusoids)
    g *= np.sqrt(powers)[None, None, :, None]
    half = np.deg2rad(params.sector_deg) / 2
    mean_az = rng.uniform(-half, half, size=(n, K, 1))
    az = mean_az + np.deg2rad(params.angle_spread_deg) * rng.standard_normal((n, K, L))
    # (n, K, L, M)
    steer = np.exp(1j * np.pi * np.arange(M) * np.sin(az)[..., None])
    # (F, L)
    freq = np.exp(-2j * np.pi * np.outer(np.arange(cfg.n_f) * cfg.subcarrier_spacing_hz, delays))
    h = np.einsum("fl,nklt,nklm->nftmk", freq, g, steer, optimize=True)
    return normalize_channel(h)


def generate_channel(cfg: GridConfig, params: ChannelModelParams) -> np.ndarray:
    """One normalized ``(n_f, n_t, n_m, n_k)`` channel, deterministic in ``params.seed``."""
    rng = np.random.default_rng(params.seed)
    return generate_channels(cfg, params, 1, rng)[0]


ChannelSampler = Callable[[int, np.random.Generator], np.ndarray]


def channel_sampler(
    cfg: GridConfig,
    params: ChannelModelParams,
    speed_range_kmh: tuple[float, float] | None = None,
) -> ChannelSampler:
    """Sampler drawing a per-realization speed uniformly in ``speed_range_kmh``."""

    def sample(n: int, rng: np.random.Generator) -> np.ndarray:
        if speed_range_kmh is None:
            return generate_channels(cfg, params, n, rng)
        v = rng.uniform(speed_range_kmh[0], speed_range_kmh[1], size=n)
        return generate_channels(cfg, params, n, rng, doppler_from_speed(v, cfg.center_freq_hz))

    return sample


def awgn_sampler(cfg: GridConfig) -> ChannelSampler:
    """All-ones channel, the AWGN bypass."""

    def sample(n: int, rng: np.random.Generator) -> np.ndarray:
        return np.ones((n, cfg.n_f, cfg.n_t, cfg.n_m, cfg.n_k), dtype=complex)

    return sample


def iid_sampler(cfg: GridConfig) -> ChannelSampler:
    """Independent CN(0, 1) coefficients on every RE, antenna and user."""

    def sample(n: int, rng: np.random.Generator) -> np.ndarray:
        shape = (n, cfg.n_f, cfg.n_t, cfg.n_m, cfg.n_k)
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)

    return sample


def complex_noise(rng: np.random.Generator, shape, sigma2) -> np.ndarray:
    scale = np.sqrt(np.asarray(sigma2, dtype=float) / 2)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def apply_channel(
    h: np.ndarray,
    x: np.ndarray,
    noise: NoiseSpec | float | np.ndarray,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """``y[f,t] = H[f,t] x[f,t] + n[f,t]``.

    ``h`` is ``(..., n_f, n_t, n_m, n_k)`` and ``x`` is ``(..., n_f, n_t, n_k)``.
    A per-realization noise power may be given as an array over the leading
    dimensions.
    """
    h = np.asarray(h)
    x = np.asarray(x)
    if h.shape[:-2] != x.shape[:-1] or h.shape[-1] != x.shape[-1]:
        raise ValueError(f"shape mismatch: h {h.shape} vs x {x.shape}")
    sigma2 = noise.sigma2 if isinstance(noise, NoiseSpec) else np.asarray(noise, dtype=float)
    y = np.einsum("...mk,...k->...m", h, x)
    sigma2 = np.asarray(sigma2, dtype=float)
    if sigma2.ndim:
        sigma2 = sigma2.reshape(sigma2.shape + (1,) * (y.ndim - sigma2.ndim))
    if np.any(sigma2 > 0):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        y = y + complex_noise(rng, y.shape, sigma2)
    return y


# flat binary channel files: 4 little-endian u32 dims (n_f, n_t, n_m, n_k),
# then interleaved re/im float64 in C order over (f, t, m, k)


def write_channel_file(path, h: np.ndarray) -> None:
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim != 4:
        raise ValueError("expected a (n_f, n_t, n_m, n_k) tensor")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", *h.shape))
        fh.write(np.ascontiguousarray(h).astype("<c16").tobytes())


def read_channel_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError("truncated channel file header")
    dims = struct.unpack("<4I", raw[:16])
    expected = 16 * int(np.prod(dims))
    if len(raw) - 16 != expected:
        raise ValueError(f"channel file body has {len(raw) - 16} bytes, expected {expected}")
    return np.frombuffer(raw[16:], dtype="<c16").reshape(dims).astype(complex)
