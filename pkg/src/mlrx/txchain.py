"""Bit generation, Gray QAM mapping and transmit-grid assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridConfig, PilotPattern


@dataclass(frozen=True)
class Constellation:
    """Square Gray-labelled QAM.

    ``points[i]`` carries the label ``labels[i]`` (``m_bits`` bits, MSB
    first). The first half of the bits selects the in-phase level, the second
    half the quadrature level.
    """

    points: np.ndarray
    labels: np.ndarray
    m_bits: int

    @property
    def size(self) -> int:
        return len(self.points)

    def modulate(self, bits: np.ndarray) -> np.ndarray:
        """Map ``(..., m_bits)`` bits to symbols of shape ``(...)``."""
        bits = np.asarray(bits)
        weights = 1 << np.arange(self.m_bits - 1, -1, -1)
        return self.points[bits.astype(np.int64) @ weights]

    def hard_demap(self, symbols: np.ndarray) -> np.ndarray:
        """Nearest-point decision, returns ``(..., m_bits)`` bits."""
        d = np.abs(np.asarray(symbols)[..., None] - self.points) ** 2
        return self.labels[np.argmin(d, axis=-1)]


def _gray_levels(n_bits: int) -> tuple[np.ndarray, np.ndarray]:
    """PAM levels ``-(L-1), ..., L-1`` and their reflected-Gray labels."""
    n = 1 << n_bits
    idx = np.arange(n)
    gray = idx ^ (idx >> 1)
    levels = 2 * idx - (n - 1)
    labels = (gray[:, None] >> np.arange(n_bits - 1, -1, -1)) & 1
    return levels.astype(float), labels


def build_constellation(m_bits: int = 4) -> Constellation:
    if m_bits < 2 or m_bits % 2:
        raise ValueError(f"unsupported modulation order: {m_bits} bits per symbol")
    half = m_bits // 2
    levels, lab = _gray_levels(half)
    n = 1 << m_bits
    points = np.empty(n, dtype=complex)
    labels = np.empty((n, m_bits), dtype=np.int8)
    weights = 1 << np.arange(m_bits - 1, -1, -1)
    for i, li in enumerate(levels):
        for q, lq in enumerate(levels):
            bits = np.concatenate([lab[i], lab[q]])
            index = int(bits @ weights)
            points[index] = li + 1j * lq
            labels[index] = bits
    points /= np.sqrt(np.mean(np.abs(points) ** 2))
    return Constellation(points, labels, m_bits)


@dataclass
class TxGrid:
    """Transmitted symbols ``x`` of shape ``(n_f, n_t, n_k)``.

    ``bits`` has shape ``(n_k, n_data, m_bits)`` where data REs are ordered
    row-major over ``(f, t)``, i.e. the order of ``np.nonzero(data_mask)``.
    """

    x: np.ndarray
    bits: np.ndarray
    data_mask: np.ndarray

    @property
    def n_data(self) -> int:
        return int(self.data_mask.sum())


def n_data_bits(cfg: GridConfig, pattern: PilotPattern) -> int:
    """Data bits carried by one user on one RG."""
    return int(pattern.data_mask().sum()) * cfg.m_bits


def assemble_tx_grid(
    cfg: GridConfig,
    pattern: PilotPattern,
    bits: np.ndarray,
    constellation: Constellation | None = None,
) -> TxGrid:
    """Place pilots, zeros and data symbols.

    ``bits`` may be flat (``n_k * n_data * m_bits``) or shaped
    ``(n_k, n_data, m_bits)``.
    """
    constellation = constellation or build_constellation(cfg.m_bits)
    mask = pattern.data_mask()
    n_data = int(mask.sum())
    bits = np.asarray(bits)
    expected = cfg.n_k * n_data * cfg.m_bits
    if bits.size != expected:
        raise ValueError(f"expected {expected} bits, got {bits.size}")
    bits = bits.reshape(cfg.n_k, n_data, cfg.m_bits).astype(np.int8)
    x = np.zeros((cfg.n_f, cfg.n_t, cfg.n_k), dtype=complex)
    fi, ti = np.nonzero(mask)
    for k in range(cfg.n_k):
        x[fi, ti, k] = constellation.modulate(bits[k])
        p = pattern.pilot_sets[k]
        x[p[:, 0], p[:, 1], k] = 1.0
    return TxGrid(x, bits, mask)


def random_bits(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape, dtype=np.int8)
