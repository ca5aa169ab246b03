"""IEEE 802.11n LDPC code (n = 1296, rate 1/2) with sum-product decoding.

LLR convention at this module's boundary is ``log P(b=1) / P(b=0)``, the same
as every other module. The decoder works internally with the opposite sign.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

# 802.11n, n = 1296, R = 1/2, Z = 54; -1 marks an all-zero block
BASE_1296_R12 = np.array(
    [
        [40, -1, -1, -1, 22, -1, 49, 23, 43, -1, -1, -1, 1, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1],
        [50, 1, -1, -1, 48, 35, -1, -1, 13, -1, 30, -1, -1, 0, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1],
        [39, 50, -1, -1, 4, -1, 2, -1, -1, -1, -1, 49, -1, -1, 0, 0, -1, -1, -1, -1, -1, -1, -1, -1],
        [33, -1, -1, 38, 37, -1, -1, 4, 1, -1, -1, -1, -1, -1, -1, 0, 0, -1, -1, -1, -1, -1, -1, -1],
        [45, -1, -1, -1, 0, 22, -1, -1, 20, 42, -1, -1, -1, -1, -1, -1, 0, 0, -1, -1, -1, -1, -1, -1],
        [51, -1, -1, 48, 35, -1, -1, -1, 44, -1, 18, -1, -1, -1, -1, -1, -1, 0, 0, -1, -1, -1, -1, -1],
        [47, 11, -1, -1, -1, 17, -1, -1, 51, -1, -1, -1, 0, -1, -1, -1, -1, -1, 0, 0, -1, -1, -1, -1],
        [5, -1, 25, -1, 6, -1, 45, -1, 13, 40, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0, 0, -1, -1, -1],
        [33, -1, -1, 34, 24, -1, -1, -1, 23, -1, -1, 46, -1, -1, -1, -1, -1, -1, -1, -1, 0, 0, -1, -1],
        [1, -1, 27, -1, 1, -1, -1, -1, 38, -1, 44, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0, 0, -1],
        [-1, 18, -1, -1, 23, -1, -1, 8, 0, 35, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0, 0],
        [49, -1, 17, -1, 30, -1, -1, -1, 34, -1, -1, 19, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0],
    ]
)
LIFTING_1296 = 54
ALIST_1296_R12 = "ieee80211n_1296_r12.alist"
LLR_CLIP = 40.0


def expand_base_matrix(base: np.ndarray, z: int) -> np.ndarray:
    """Lift a quasi-cyclic base matrix to a dense 0/1 parity-check matrix."""
    rows, cols = base.shape
    h = np.zeros((rows * z, cols * z), dtype=np.uint8)
    eye = np.eye(z, dtype=np.uint8)
    for i in range(rows):
        for j in range(cols):
            s = base[i, j]
            if s >= 0:
                # row r of the block has its one in column (r + s) mod z
                h[i * z : (i + 1) * z, j * z : (j + 1) * z] = np.roll(eye, s, axis=1)
    return h


def write_alist(h: np.ndarray, path) -> None:
    """Write a parity-check matrix in MacKay's alist format."""
    h = np.asarray(h) != 0
    m, n = h.shape
    col_idx = [np.nonzero(h[:, j])[0] + 1 for j in range(n)]
    row_idx = [np.nonzero(h[i])[0] + 1 for i in range(m)]
    max_c = max(len(c) for c in col_idx)
    max_r = max(len(r) for r in row_idx)
    lines = [f"{n} {m}", f"{max_c} {max_r}"]
    lines.append(" ".join(str(len(c)) for c in col_idx))
    lines.append(" ".join(str(len(r)) for r in row_idx))
    for c in col_idx:
        lines.append(" ".join(str(v) for v in list(c) + [0] * (max_c - len(c))))
    for r in row_idx:
        lines.append(" ".join(str(v) for v in list(r) + [0] * (max_r - len(r))))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_alist(text: str) -> np.ndarray:
    tokens = [int(t) for t in text.split()]
    n, m = tokens[0], tokens[1]
    max_c = tokens[2]
    pos = 4
    col_deg = tokens[pos : pos + n]
    pos += n + m
    h = np.zeros((m, n), dtype=np.uint8)
    for j in range(n):
        entries = tokens[pos : pos + max_c]
        pos += max_c
        for r in entries[: col_deg[j]]:
            h[r - 1, j] = 1
    # the row section repeats the same information and is only cross-checked
    max_r = tokens[3]
    row_deg = tokens[4 + n : 4 + n + m]
    for i in range(m):
        entries = tokens[pos : pos + max_r]
        pos += max_r
        if sorted(e - 1 for e in entries[: row_deg[i]]) != list(np.nonzero(h[i])[0]):
            raise ValueError(f"alist row {i + 1} disagrees with the column section")
    return h


def read_alist(path) -> np.ndarray:
    return parse_alist(Path(path).read_text())


def _gf2_inverse(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    aug = np.concatenate([a.astype(np.uint8) & 1, np.eye(n, dtype=np.uint8)], axis=1)
    for col in range(n):
        pivots = np.nonzero(aug[col:, col])[0]
        if len(pivots) == 0:
            raise ValueError("parity part of H is singular over GF(2)")
        p = col + pivots[0]
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        rows = np.nonzero(aug[:, col])[0]
        rows = rows[rows != col]
        aug[rows] ^= aug[col]
    return aug[:, n:]


@dataclass
class LdpcCode:
    """Systematic LDPC code: codeword = ``[info, parity]``."""

    h: np.ndarray

    def __post_init__(self):
        self.h = (np.asarray(self.h) != 0).astype(np.uint8)
        m, n = self.h.shape
        self.n, self.n_checks = n, m
        self.k_info = n - m
        h_info, h_par = self.h[:, : self.k_info], self.h[:, self.k_info :]
        inv = _gf2_inverse(h_par)
        # parity = P @ info (mod 2)
        self._parity_map = (inv.astype(np.int64) @ h_info.astype(np.int64)) % 2
        # edge lists, sorted by check node then by variable node
        chk, var = np.nonzero(self.h)
        self._edge_chk, self._edge_var = chk, var
        self._chk_starts = np.flatnonzero(np.r_[True, np.diff(chk) != 0])
        self._var_order = np.argsort(var, kind="stable")
        sorted_var = var[self._var_order]
        self._var_starts = np.flatnonzero(np.r_[True, np.diff(sorted_var) != 0])

    @property
    def rate(self) -> float:
        return self.k_info / self.n

    @classmethod
    def ieee80211n_1296(cls) -> "LdpcCode":
        text = resources.files("mlrx.data").joinpath(ALIST_1296_R12).read_text()
        return cls(parse_alist(text))

    def syndrome(self, codewords: np.ndarray) -> np.ndarray:
        c = np.atleast_2d(codewords).astype(np.int64)
        return (c @ self.h.T.astype(np.int64)) % 2

    def encode(self, info_bits: np.ndarray) -> np.ndarray:
        """Encode ``(..., k_info)`` bits into ``(..., n)`` codewords."""
        info = np.asarray(info_bits)
        if info.shape[-1] != self.k_info:
            raise ValueError(f"expected {self.k_info} info bits, got {info.shape[-1]}")
        parity = (info.astype(np.int64) @ self._parity_map.T) % 2
        return np.concatenate([info.astype(np.int8), parity.astype(np.int8)], axis=-1)

    def decode(self, llrs: np.ndarray, max_iter: int = 40, return_iterations: bool = False):
        """Sum-product belief propagation.

        Parameters
        ----------
        llrs : array (..., n)
            ``log P(b=1) / P(b=0)`` per code bit.

        Returns
        -------
        bits : int8 array (..., n)
        converged : bool array (...)
            True when every parity check is met with no undecided bit.
        iterations : int array (...), only with ``return_iterations``
        """
        llrs = np.asarray(llrs, dtype=float)
        if llrs.shape[-1] != self.n:
            raise ValueError(f"expected {self.n} LLRs, got {llrs.shape[-1]}")
        lead = llrs.shape[:-1]
        # native decoder sign: positive favours 0
        prior = -np.clip(llrs.reshape(-1, self.n), -LLR_CLIP, LLR_CLIP)
        nb = prior.shape[0]
        ev, vo, cs, vs = self._edge_var, self._var_order, self._chk_starts, self._var_starts

        bits = (prior < 0).astype(np.int8)
        done = np.zeros(nb, dtype=bool)
        iters = np.zeros(nb, dtype=np.int64)
        out_bits = bits.copy()
        c2v = np.zeros((nb, len(ev)))
        active = np.arange(nb)
        for it in range(1, max_iter + 1):
            lp, msg = prior[active], c2v[active]
            total = lp + np.add.reduceat(msg[:, vo], vs, axis=1)
            v2c = total[:, ev] - msg
            t = np.tanh(np.clip(v2c, -2 * LLR_CLIP, 2 * LLR_CLIP) / 2)
            mag = np.maximum(np.abs(t), 1e-300)
            neg = t < 0
            log_all = np.add.reduceat(np.log(mag), cs, axis=1)
            neg_all = np.add.reduceat(neg.astype(np.int64), cs, axis=1)
            chk_of_edge = self._edge_chk
            log_ex = log_all[:, chk_of_edge] - np.log(mag)
            sign_ex = 1 - 2 * ((neg_all[:, chk_of_edge] - neg) % 2)
            prod = np.clip(sign_ex * np.exp(log_ex), -1 + 1e-15, 1 - 1e-15)
            msg = 2 * np.arctanh(prod)
            c2v[active] = msg
            post = lp + np.add.reduceat(msg[:, vo], vs, axis=1)
            hard = (post < 0).astype(np.int8)
            parity = np.add.reduceat(hard[:, ev], cs, axis=1) & 1
            ok = ~parity.any(axis=1) & np.all(post != 0, axis=1)
            out_bits[active] = hard
            iters[active] = it
            newly = active[ok]
            done[newly] = True
            active = active[~ok]
            if len(active) == 0:
                break
        out = out_bits.reshape(lead + (self.n,))
        conv = done.reshape(lead)
        if return_iterations:
            return out, conv, iters.reshape(lead)
        return out, conv
