"""ML-enhanced receiver.

Three CNNs sit around the conventional grouped-LMMSE chain:

* ``cnn_l`` turns each user's LMMSE pilot estimates into a scalar feature
  that tracks Doppler and delay spread (2P only; 1P feeds zero),
* ``cnn_e`` maps positions, SNR and that feature to per-RE ``(alpha, beta)``
  of a power-decay spatial covariance ``alpha beta^|y-x| exp(j gamma (y-x))``
  with one trainable ``gamma``,
* ``cnn_dmp`` replaces the AWGN demapper and reads the whole grid of
  equalized symbols and noise variances of one user.

Channel estimation and interpolation carry no trainable parameters and are
done once per batch in numpy (:func:`prepare_batch`). Everything from the
covariance model to the LLRs runs on :mod:`mlrx.nnengine` tensors so the
bit-level cross-entropy can be minimized end to end.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nnengine as nn
from .grid import GridConfig, PilotPattern, ReGroupPartition, position_planes
from .nnengine import tensor as T
from .nnengine.tensor import Tensor
from .rxconv import (
    LLR_CLIP,
    PilotCovariance,
    awgn_demap,
    estimate_pilot_channels,
    interpolate,
)
from .txchain import Constellation, build_constellation

log = logging.getLogger(__name__)

L_BLOCKS = (((3, 2), (1, 1)), ((5, 2), (2, 1)), ((7, 2), (3, 1)), ((5, 2), (2, 1)), ((3, 2), (1, 1)))
DMP_BLOCKS = (
    ((3, 3), (1, 1)),
    ((5, 3), (2, 1)),
    ((7, 3), (3, 2)),
    ((9, 3), (4, 3)),
    ((7, 3), (3, 2)),
    ((5, 3), (2, 1)),
    ((3, 3), (1, 1)),
)

# input planes are rescaled to O(1): positions by half the grid size,
# SNR and rho^2 (both in dB) by 10 dB
DB_SCALE = 10.0


@dataclass(frozen=True)
class MlArchitecture:
    e_filters: int = 32
    e_kernel: tuple[int, int] = (5, 3)
    e_activation: str = "relu"
    l_filters: int = 32
    dmp_filters: int = 128

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MlArchitecture":
        d = dict(d)
        if "e_kernel" in d:
            d["e_kernel"] = tuple(d["e_kernel"])
        return cls(**d)


def build_cnn_l(n_m: int, filters: int, rng) -> nn.Sequential:
    """Input ``(N, n_pf, n_pt, 2 n_m)``; output ``(N, 1)``.

    The spatial mean before the dense unit keeps the weights independent of
    the number of pilots per symbol, so a model trained with one user count
    runs with another.
    """
    layers = [nn.Conv2D(2 * n_m, filters, (1, 1), rng=rng)]
    layers += [nn.ResNetBlock(filters, k, d, rng=rng) for k, d in L_BLOCKS]
    layers += [nn.Conv2D(filters, 1, (3, 2), rng=rng), nn.SpatialMean(), nn.Dense(1, 1, rng=rng)]
    return nn.Sequential(layers)


def build_cnn_e(arch: MlArchitecture, rng) -> nn.Sequential:
    """Input ``(N, n_f, n_t, 4)``; output ``(N, n_f, n_t, 2)`` in (0, 1)."""
    f, k, a = arch.e_filters, arch.e_kernel, arch.e_activation
    return nn.Sequential(
        [
            nn.Conv2D(4, f, k, activation=a, rng=rng),
            nn.Conv2D(f, f, k, activation=a, rng=rng),
            nn.Conv2D(f, 2, (1, 1), activation="sigmoid", rng=rng),
        ]
    )


def build_cnn_dmp(m_bits: int, filters: int, rng, zero_output: bool = False) -> nn.Sequential:
    """Input ``(N, n_f, n_t, 6)``; output ``(N, n_f, n_t, m_bits)`` raw LLRs."""
    layers = [nn.Conv2D(6, filters, (1, 1), rng=rng)]
    layers += [nn.ResNetBlock(filters, k, d, rng=rng) for k, d in DMP_BLOCKS]
    layers.append(nn.Conv2D(filters, m_bits, (1, 1), rng=rng, zero_init=zero_output))
    return nn.Sequential(layers)


# ----------------------------------------------------------------------------
# power-decay covariance


def _offsets(n_m: int) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.meshgrid(np.arange(n_m), np.arange(n_m), indexing="ij")
    return np.abs(y - x), (y - x).astype(float)


def decay_profile(alpha, beta, n_m: int) -> Tensor:
    """``alpha * beta**d`` for ``d = 0 .. n_m - 1`` stacked on a new last axis."""
    alpha, beta = T.as_tensor(alpha), T.as_tensor(beta)
    terms = [alpha]
    for _ in range(1, n_m):
        terms.append(terms[-1] * beta)
    return T.stack(terms, axis=-1)


def toeplitz_from_profile(profile, gamma) -> Tensor:
    """Expand ``(..., n_m)`` profiles into ``(..., n_m, n_m)`` matrices with
    entry ``(x, y) = profile[|y - x|] * exp(j gamma (y - x))``."""
    profile = T.as_tensor(profile)
    n_m = profile.shape[-1]
    lag, diff = _offsets(n_m)
    phase = T.exp(T.as_tensor(gamma) * (1j * diff))
    return profile[..., lag] * phase


def build_decay_covariance(alpha, beta, gamma, n_m: int) -> Tensor:
    """Power-decay model ``e[x, y] = alpha beta^|y-x| exp(j gamma (y-x))``.

    ``alpha`` and ``beta`` may be arrays (one matrix per entry) or tensors.
    """
    return toeplitz_from_profile(decay_profile(alpha, beta, n_m), gamma)


# ----------------------------------------------------------------------------
# batches


@dataclass
class PreparedBatch:
    """Receiver inputs for ``B`` resource grids.

    ``y`` ``(B, n_f, n_t, n_m)``, ``sigma2`` ``(B,)``, ``h_hat``
    ``(B, n_f, n_t, n_m, n_k)``, ``h_pilots`` ``(B, n_k, n_p, n_m)``. For
    training, ``bits`` is the ``(B, n_f, n_t, n_k, m_bits)`` bit grid and
    ``mask`` the ``(n_f, n_t)`` data-RE mask.
    """

    y: np.ndarray
    sigma2: np.ndarray
    h_hat: np.ndarray
    h_pilots: np.ndarray
    bits: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def snr_db(self) -> np.ndarray:
        return 10 * np.log10(1 / self.sigma2)

    def subset(self, idx) -> "PreparedBatch":
        return PreparedBatch(
            self.y[idx],
            self.sigma2[idx],
            self.h_hat[idx],
            self.h_pilots[idx],
            None if self.bits is None else self.bits[idx],
            self.mask,
        )


def prepare_batch(
    y: np.ndarray,
    sigma2,
    pattern: PilotPattern,
    cov: PilotCovariance,
    mode: str = "freq_nire",
    bits: np.ndarray | None = None,
    h_pilots: np.ndarray | None = None,
) -> PreparedBatch:
    """LMMSE pilot estimation and interpolation for a batch of grids.

    Passing ``h_pilots`` skips estimation (used by the perfect-CSI path).
    """
    y = np.asarray(y)
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), y.shape[:1]).copy()
    if h_pilots is None:
        h_pilots = estimate_pilot_channels(y, pattern, cov, s2)
    h_hat = interpolate(h_pilots, pattern, mode)
    return PreparedBatch(y, s2, h_hat, h_pilots, bits, pattern.data_mask())


# ----------------------------------------------------------------------------
# receiver


@dataclass
class ReceiverOutput:
    llr: Tensor  # (B, n_f, n_t, n_k, m_bits), unclipped
    x_hat: Tensor  # (B, n_f, n_t, n_k)
    rho2: Tensor  # (B, n_f, n_t, n_k)
    e_re: Tensor  # (B, n_f, n_t, n_m, n_m)

    def clipped_llr(self) -> np.ndarray:
        return np.clip(self.llr.data, -LLR_CLIP, LLR_CLIP)


class MlReceiver(nn.Module):
    """Trainable receiver for one grid geometry.

    Weights depend only on ``n_m``, ``m_bits`` and the architecture, so a
    state dict can be moved between receivers built for different user
    counts or group sizes.
    """

    def __init__(
        self,
        cfg: GridConfig,
        pattern: PilotPattern,
        partition: ReGroupPartition,
        arch: MlArchitecture | None = None,
        seed: int = 0,
        constellation: Constellation | None = None,
    ):
        self.cfg, self.pattern, self.partition = cfg, pattern, partition
        self.arch = arch or MlArchitecture()
        self.constellation = constellation or build_constellation(cfg.m_bits)
        rng = np.random.default_rng(seed)
        self.cnn_l = build_cnn_l(cfg.n_m, self.arch.l_filters, rng)
        self.cnn_e = build_cnn_e(self.arch, rng)
        self.cnn_dmp = build_cnn_dmp(cfg.m_bits, self.arch.dmp_filters, rng)
        self.gamma = Tensor(np.array(np.pi), requires_grad=True)
        pos_f, pos_t = position_planes(cfg.n_f, cfg.n_t)
        self._pos = np.stack([pos_f / (cfg.n_f / 2), pos_t / (cfg.n_t / 2)], axis=-1)

    @property
    def uses_cnn_l(self) -> bool:
        return self.pattern.n_pt >= 2

    def rebind(self, cfg: GridConfig, pattern: PilotPattern, partition: ReGroupPartition) -> "MlReceiver":
        """A receiver for another geometry sharing this one's weights."""
        other = MlReceiver(cfg, pattern, partition, self.arch, constellation=self.constellation)
        other.load_state_dict(self.state_dict())
        return other

    # -- sub-networks ---------------------------------------------------------

    def cnn_l_forward(self, h_pilots: np.ndarray, training: bool = False) -> Tensor:
        """``(N, n_p, n_m)`` pilot estimates of single users -> ``(N,)`` features."""
        n = h_pilots.shape[0]
        hp = h_pilots.reshape(n, self.pattern.n_pf, self.pattern.n_pt, -1)
        planes = np.concatenate([hp.real, hp.imag], axis=-1)
        return self.cnn_l(planes, training).reshape(n)

    def cnn_e_forward(self, snr_db: np.ndarray, l_feat, training: bool = False) -> tuple[Tensor, Tensor]:
        """Per-sample SNR ``(N,)`` and feature ``(N,)`` -> ``alpha, beta`` ``(N, n_f, n_t)``."""
        n = len(snr_db)
        f, t = self.cfg.n_f, self.cfg.n_t
        const = np.empty((n, f, t, 3))
        const[..., :2] = self._pos
        const[..., 2] = (np.asarray(snr_db) / DB_SCALE)[:, None, None]
        l_plane = T.as_tensor(l_feat).reshape(n, 1, 1, 1) * np.ones((1, f, t, 1))
        out = self.cnn_e(T.concat([const, l_plane], axis=-1), training)
        return out[..., 0], out[..., 1]

    def cnn_dmp_forward(self, snr_db, rho2, x_hat, training: bool = False) -> Tensor:
        """Per-user planes ``(N, n_f, n_t)`` -> LLRs ``(N, n_f, n_t, m_bits)``."""
        n = len(snr_db)
        f, t = self.cfg.n_f, self.cfg.n_t
        const = np.empty((n, f, t, 3))
        const[..., :2] = self._pos
        const[..., 2] = (np.asarray(snr_db) / DB_SCALE)[:, None, None]
        rho_db = T.log10(T.as_tensor(rho2)) * (10.0 / DB_SCALE)
        x_hat = T.as_tensor(x_hat)
        planes = [const, rho_db.reshape(n, f, t, 1), T.real(x_hat).reshape(n, f, t, 1), T.imag(x_hat).reshape(n, f, t, 1)]
        return self.cnn_dmp(T.concat(planes, axis=-1), training)

    # -- full pipeline --------------------------------------------------------

    def error_covariance(self, batch: PreparedBatch, training: bool = False) -> Tensor:
        """Per-RE summed spatial error covariance ``(B, n_f, n_t, n_m, n_m)``."""
        b, k = len(batch), self.cfg.n_k
        f, t, m = self.cfg.n_f, self.cfg.n_t, self.cfg.n_m
        if self.uses_cnn_l:
            l_feat = self.cnn_l_forward(batch.h_pilots.reshape(b * k, -1, m), training)
        else:
            l_feat = np.zeros(b * k)
        alpha, beta = self.cnn_e_forward(np.repeat(batch.snr_db, k), l_feat, training)
        prof = decay_profile(alpha, beta, m).reshape(b, k, f, t, m).sum(axis=1)
        return toeplitz_from_profile(prof, self.gamma)

    def forward(
        self,
        batch: PreparedBatch,
        training: bool = False,
        e_override: np.ndarray | None = None,
        demapper: str = "cnn",
    ) -> ReceiverOutput:
        """LLRs for every user.

        ``e_override`` replaces the learned covariance with a given per-RE
        ``(B, n_f, n_t, n_m, n_m)`` array and ``demapper="awgn"`` swaps the
        CNN demapper for the exact AWGN one; together they reproduce the
        conventional receiver.
        """
        cfg, part = self.cfg, self.partition
        b, f, t, m, k = len(batch), cfg.n_f, cfg.n_t, cfg.n_m, cfg.n_k
        gf, gt, ngf, ngt = part.group_f, part.group_t, part.n_groups_f, part.n_groups_t
        tiles = (b, ngf, gf, ngt, gt)

        e_re = T.as_tensor(e_override) if e_override is not None else self.error_covariance(batch, training)
        h = batch.h_hat
        s2 = batch.sigma2.reshape(b, 1, 1, 1, 1)
        q_const = h @ np.conj(np.swapaxes(h, -1, -2)) + s2 * np.eye(m)
        q = e_re + q_const  # (B, F, T, M, M)
        q_t = q.reshape(tiles + (m, m))
        a = q_t.sum(axis=(2, 4))  # (B, ngf, ngt, M, M)
        h_t = h.reshape(tiles + (m, k))
        w_h = T.solve(a, h_t.sum(axis=(2, 4)))  # (B, ngf, ngt, M, K)
        w = w_h.H.reshape(b, ngf, 1, ngt, 1, k, m)

        g = T.diagonal(w @ h_t)  # (B, ngf, gf, ngt, gt, K)
        wy = (w @ batch.y.reshape(tiles + (m, 1))).reshape(tiles + (k,))
        x_hat = (wy / g).reshape(b, f, t, k)
        wqw = T.real(T.tsum((w @ q_t) * T.conj(w), axis=-1))
        sig = T.abs2(g)
        rho2 = T.clip((wqw - sig) / sig, 1e-12, np.inf).reshape(b, f, t, k)

        if demapper == "awgn":
            llr = Tensor(awgn_demap(x_hat.data, rho2.data, self.constellation))
        elif demapper == "cnn":
            per_user = (0, 3, 1, 2)
            out = self.cnn_dmp_forward(
                np.repeat(batch.snr_db, k),
                rho2.transpose(per_user).reshape(b * k, f, t),
                x_hat.transpose(per_user).reshape(b * k, f, t),
                training,
            )
            llr = out.reshape(b, k, f, t, cfg.m_bits).transpose(0, 2, 3, 1, 4)
        else:
            raise ValueError(f"unknown demapper {demapper!r}")
        return ReceiverOutput(llr, x_hat, rho2, e_re)

    def loss(self, batch: PreparedBatch, training: bool = True) -> Tensor:
        """Cross-entropy in bits over data REs, averaged over grids."""
        if batch.bits is None:
            raise ValueError("batch carries no bits")
        out = self.forward(batch, training)
        mask = batch.mask[None, :, :, None, None]
        return nn.bce_with_logits(out.llr, batch.bits, mask, batch_size=len(batch))

    def receive(self, batch: PreparedBatch, chunk: int = 16, **kwargs) -> np.ndarray:
        """Inference LLRs ``(B, n_f, n_t, n_k, m_bits)`` clipped to +-40."""
        outs = []
        with nn.no_grad():
            for start in range(0, len(batch), chunk):
                part = batch.subset(slice(start, start + chunk))
                outs.append(self.forward(part, training=False, **kwargs).clipped_llr())
        return np.concatenate(outs, axis=0)


def achievable_rate(loss_bits: float, n_data: int, m_bits: int, n_k: int) -> float:
    """Per-user rate estimate in bits per grid implied by a cross-entropy loss."""
    return n_data * m_bits * (1.0 - loss_bits / (n_data * m_bits * n_k))


# ----------------------------------------------------------------------------
# checkpoints


def save_receiver(path, rx: MlReceiver) -> None:
    arrays = dict(rx.state_dict())
    for key, value in rx.arch.to_dict().items():
        if key == "e_activation":
            value = _ACTIVATIONS.index(value)
        arrays[f"arch.{key}"] = np.atleast_1d(np.asarray(value, dtype=float))
    arrays["arch.n_m"] = np.array([float(rx.cfg.n_m)])
    arrays["arch.m_bits"] = np.array([float(rx.cfg.m_bits)])
    nn.save_arrays(path, arrays)


_ACTIVATIONS = ("relu", "elu", "sigmoid")


def load_receiver(path, cfg: GridConfig, pattern: PilotPattern, partition: ReGroupPartition) -> MlReceiver:
    arrays = nn.load_arrays(path)
    meta = {k[5:]: v for k, v in arrays.items() if k.startswith("arch.")}
    if int(meta.pop("n_m")[0]) != cfg.n_m or int(meta.pop("m_bits")[0]) != cfg.m_bits:
        raise ValueError(f"{path}: checkpoint was trained for another n_m or modulation")
    arch = MlArchitecture(
        e_filters=int(meta["e_filters"][0]),
        e_kernel=tuple(int(v) for v in meta["e_kernel"]),
        e_activation=_ACTIVATIONS[int(meta["e_activation"][0])],
        l_filters=int(meta["l_filters"][0]),
        dmp_filters=int(meta["dmp_filters"][0]),
    )
    rx = MlReceiver(cfg, pattern, partition, arch)
    rx.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("arch.")})
    return rx


# ----------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.losses)

    def smoothed(self, window: int = 25) -> np.ndarray:
        x = np.asarray(self.losses)
        window = max(1, min(window, len(x)))
        return np.convolve(x, np.ones(window) / window, mode="valid")


def train(
    rx: MlReceiver,
    data: PreparedBatch,
    steps: int,
    batch_size: int = 27,
    lr: float = 1e-3,
    seed: int = 0,
    log_every: int = 50,
    callback: Callable[[int, float], None] | None = None,
    divergence_factor: float = 10.0,
    divergence_patience: int = 100,
    optimizer: nn.Adam | None = None,
) -> TrainResult:
    """Adam on the bit-level cross-entropy over all trainable parameters.

    Mini-batches are drawn without replacement from ``data``, reshuffled
    every pass. Training aborts with :class:`TrainingDiverged` once the loss
    stays above ``divergence_factor`` times the first loss for
    ``divergence_patience`` consecutive steps.
    """
    rng = np.random.default_rng(seed)
    opt = optimizer or nn.Adam(rx.parameters(), lr=lr)
    result = TrainResult()
    order: list[int] = []
    above = 0
    start = time.perf_counter()
    for step in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(data)).tolist())
        idx, order = order[:batch_size], order[batch_size:]
        opt.zero_grad()
        loss = rx.loss(data.subset(np.asarray(idx)), training=True)
        loss.backward()
        opt.step()
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        result.losses.append(value)
        above = above + 1 if value > divergence_factor * result.losses[0] else 0
        if above >= divergence_patience:
            raise TrainingDiverged(
                f"loss {value:.3g} above {divergence_factor}x the initial "
                f"{result.losses[0]:.3g} for {above} steps (step {step}, gamma={rx.gamma.item():.3f})"
            )
        if callback is not None:
            callback(step, value)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("step %d loss %.2f bits gamma %.3f", step, value, rx.gamma.item())
    result.seconds = time.perf_counter() - start
    return result
