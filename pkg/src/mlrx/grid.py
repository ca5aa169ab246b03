"""Resource-grid geometry, pilot patterns and RE-group partitioning.

All indices are 0-based internally. The 1-based pilot symbols 3 and 12 used in
the usual uplink layout become symbols 2 and 11 here.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when grid dimensions are inconsistent."""


class PatternKind(str, enum.Enum):
    ONE_P = "1P"
    TWO_P = "2P"

    @classmethod
    def parse(cls, value: "PatternKind | str") -> "PatternKind":
        if isinstance(value, cls):
            return value
        key = str(value).upper().replace("ONEP", "1P").replace("TWOP", "2P")
        return cls(key)


DEFAULT_PILOT_SYMBOLS = {PatternKind.ONE_P: (2,), PatternKind.TWO_P: (2, 11)}


@dataclass(frozen=True)
class GridConfig:
    n_f: int = 24
    n_t: int = 14
    n_k: int = 2
    n_m: int = 4
    m_bits: int = 4
    subcarrier_spacing_hz: float = 15e3
    center_freq_hz: float = 3.5e9

    def __post_init__(self):
        for name in ("n_f", "n_t", "n_k", "n_m", "m_bits"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_m < self.n_k:
            raise DimensionError(f"n_m={self.n_m} < n_k={self.n_k}: equalizer is unsolvable")
        if self.n_f % 12:
            raise DimensionError(f"n_f={self.n_f} is not a whole number of resource blocks")

    @property
    def symbol_duration_s(self) -> float:
        # OFDM symbol period without cyclic prefix
        return 1.0 / self.subcarrier_spacing_hz

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class PilotPattern:
    """Pilot positions of every user.

    ``pilot_sets[k]`` is an ``(n_pf * n_pt, 2)`` integer array of ``(f, t)``
    pairs ordered by subcarrier, then symbol, so that reshaping a vector of
    per-pilot values to ``(n_pf, n_pt)`` gives the natural 2-D pilot layout.
    """

    kind: PatternKind
    pilot_symbol_indices: tuple[int, ...]
    pilot_sets: tuple[np.ndarray, ...]
    n_pf: int
    n_pt: int
    n_f: int
    n_t: int

    @property
    def n_k(self) -> int:
        return len(self.pilot_sets)

    def pilot_subcarriers(self, k: int) -> np.ndarray:
        return self.pilot_sets[k][:: self.n_pt, 0]

    def pilot_mask(self) -> np.ndarray:
        """Boolean ``(n_f, n_t)`` mask of every pilot RE (any user)."""
        mask = np.zeros((self.n_f, self.n_t), dtype=bool)
        for p in self.pilot_sets:
            mask[p[:, 0], p[:, 1]] = True
        return mask

    def data_mask(self) -> np.ndarray:
        """REs carrying data. Whole pilot-bearing symbols are excluded."""
        mask = np.ones((self.n_f, self.n_t), dtype=bool)
        mask[:, list(self.pilot_symbol_indices)] = False
        return mask

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind.value,
                "pilot_symbol_indices": list(self.pilot_symbol_indices),
                "n_pf": self.n_pf,
                "n_pt": self.n_pt,
                "pilot_sets": [p.tolist() for p in self.pilot_sets],
            }
        )


def build_pilot_pattern(
    cfg: GridConfig,
    kind: PatternKind | str,
    pilot_symbols: tuple[int, ...] | None = None,
) -> PilotPattern:
    """Comb pilot pattern with spacing ``n_k``.

    User ``k`` transmits on subcarriers ``k, k + n_k, k + 2 n_k, ...`` of every
    pilot symbol.
    """
    kind = PatternKind.parse(kind)
    if cfg.n_f % cfg.n_k:
        raise DimensionError(f"n_f={cfg.n_f} is not divisible by n_k={cfg.n_k}")
    symbols = tuple(pilot_symbols) if pilot_symbols is not None else DEFAULT_PILOT_SYMBOLS[kind]
    expected = 1 if kind is PatternKind.ONE_P else 2
    if len(symbols) != expected:
        raise DimensionError(f"{kind.value} needs {expected} pilot symbols, got {symbols}")
    if any(not 0 <= t < cfg.n_t for t in symbols):
        raise DimensionError(f"pilot symbols {symbols} outside 0..{cfg.n_t - 1}")
    symbols = tuple(sorted(symbols))
    n_pf = cfg.n_f // cfg.n_k
    sets = []
    for k in range(cfg.n_k):
        f = np.arange(k, cfg.n_f, cfg.n_k)
        ff, tt = np.meshgrid(f, np.array(symbols), indexing="ij")
        sets.append(np.stack([ff.ravel(), tt.ravel()], axis=1))
    return PilotPattern(kind, symbols, tuple(sets), n_pf, len(symbols), cfg.n_f, cfg.n_t)


@dataclass(frozen=True)
class ReGroupPartition:
    """Regular tiling of the grid into ``group_f x group_t`` rectangles.

    Groups are numbered f-block-major: group ``g = i * n_groups_t + j`` spans
    subcarriers ``i*group_f .. (i+1)*group_f - 1`` and symbols
    ``j*group_t .. (j+1)*group_t - 1``. ``nearest_pilot[g, k]`` indexes into
    ``pattern.pilot_sets[k]``.
    """

    group_f: int
    group_t: int
    n_groups_f: int
    n_groups_t: int
    nearest_pilot: np.ndarray = field(repr=False)

    @property
    def n_groups(self) -> int:
        return self.n_groups_f * self.n_groups_t

    @property
    def groups(self) -> list[tuple[int, int, int, int]]:
        """``(F_b, F_e, T_b, T_e)`` with inclusive ends."""
        out = []
        for i in range(self.n_groups_f):
            for j in range(self.n_groups_t):
                out.append(
                    (
                        i * self.group_f,
                        (i + 1) * self.group_f - 1,
                        j * self.group_t,
                        (j + 1) * self.group_t - 1,
                    )
                )
        return out

    def group_index(self) -> np.ndarray:
        """``(n_f, n_t)`` map of the group containing each RE."""
        gf = np.arange(self.n_groups_f * self.group_f) // self.group_f
        gt = np.arange(self.n_groups_t * self.group_t) // self.group_t
        return gf[:, None] * self.n_groups_t + gt[None, :]

    def to_json(self) -> str:
        return json.dumps(
            {
                "group_f": self.group_f,
                "group_t": self.group_t,
                "groups": self.groups,
                "nearest_pilot": self.nearest_pilot.tolist(),
            }
        )


def default_group_size(kind: PatternKind | str, cfg: GridConfig) -> tuple[int, int]:
    kind = PatternKind.parse(kind)
    if kind is PatternKind.TWO_P and cfg.n_t % 2 == 0:
        return 12, cfg.n_t // 2
    return 12, cfg.n_t


def build_partition(
    cfg: GridConfig,
    pattern: PilotPattern,
    group_f: int | None = None,
    group_t: int | None = None,
) -> ReGroupPartition:
    if group_f is None or group_t is None:
        dgf, dgt = default_group_size(pattern.kind, cfg)
        group_f = dgf if group_f is None else group_f
        group_t = dgt if group_t is None else group_t
    if group_f < 1 or group_t < 1 or cfg.n_f % group_f or cfg.n_t % group_t:
        raise DimensionError(
            f"group {group_f}x{group_t} does not tile a {cfg.n_f}x{cfg.n_t} grid"
        )
    ngf, ngt = cfg.n_f // group_f, cfg.n_t // group_t
    nearest = np.empty((ngf * ngt, pattern.n_k), dtype=np.int64)
    for i in range(ngf):
        cf = i * group_f + (group_f - 1) / 2
        for j in range(ngt):
            ct = j * group_t + (group_t - 1) / 2
            for k, pset in enumerate(pattern.pilot_sets):
                dist = np.abs(pset[:, 0] - cf) + np.abs(pset[:, 1] - ct)
                # argmin returns the first minimum: ties go to the lower index
                nearest[i * ngt + j, k] = int(np.argmin(dist))
    return ReGroupPartition(group_f, group_t, ngf, ngt, nearest)


def position_planes(n_f: int, n_t: int) -> tuple[np.ndarray, np.ndarray]:
    """Positional input planes: symmetric ramps that skip zero.

    Returns ``(pos_f, pos_t)`` each of shape ``(n_f, n_t)``; every column of
    ``pos_f`` is ``[-n_f/2, ..., -1, 1, ..., n_f/2]`` and every row of ``pos_t``
    the analogous ramp over symbols.
    """
    return (
        np.repeat(_ramp(n_f)[:, None], n_t, axis=1),
        np.repeat(_ramp(n_t)[None, :], n_f, axis=0),
    )


def _ramp(n: int) -> np.ndarray:
    half = n // 2
    return np.concatenate([np.arange(-half, 0), np.arange(1, n - half + 1)]).astype(float)
