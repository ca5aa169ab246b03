"""Scenario configuration, datasets, Monte-Carlo BER sweeps and reports.

Every frame (one resource grid) is generated from its own seed
``(eval_seed, frame_index)``; the noise is drawn at unit power and scaled
per SNR point. All receivers and all SNR points therefore see the same
channels, bits and noise shapes, which makes their comparisons paired.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import subprocess
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from . import rxconv
from .chan import (
    ChannelModelParams,
    ChannelSampler,
    complex_noise,
    doppler_from_speed,
    generate_channels,
)
from .fec import LdpcCode
from .grid import GridConfig, PatternKind, build_partition, build_pilot_pattern
from .rxml import MlArchitecture, MlReceiver, PreparedBatch, prepare_batch
from .txchain import assemble_tx_grid, build_constellation, random_bits

log = logging.getLogger(__name__)

RECEIVERS = ("baseline", "ml", "perfect_csi")
CHANNEL_KINDS = ("tdl", "awgn")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    n_rgs: int = 300
    steps: int = 1000
    batch: int = 27
    lr: float = 1e-3
    seed: int = 0
    arch: MlArchitecture = field(default_factory=MlArchitecture)


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 1000
    max_codeword_errors: int = 100
    max_frames: int = 2000
    min_frames: int = 0
    frames_per_chunk: int = 9
    decoder_iterations: int = 40


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "desk"
    grid: GridConfig = field(default_factory=GridConfig)
    pattern: str = "2P"
    interpolation: str = "freq_nire"
    speed_ranges_kmh: tuple[tuple[float, float], ...] = ((50.0, 70.0), (80.0, 100.0), (110.0, 130.0))
    snr_db: tuple[float, ...] = (8.0, 12.0, 16.0)
    channel_kind: str = "tdl"
    channel: ChannelModelParams = field(default_factory=ChannelModelParams)
    group: tuple[int, int] | None = None
    receiver: str = "baseline"
    covariance_samples: int = 4000
    oracle_samples: int = 10000
    train: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "out"

    def __post_init__(self):
        if not self.snr_db:
            raise ConfigError("snr_db must not be empty")
        if not self.speed_ranges_kmh:
            raise ConfigError("speed_ranges_kmh must not be empty")
        for lo, hi in self.speed_ranges_kmh:
            if not 0 <= lo <= hi:
                raise ConfigError(f"bad speed range ({lo}, {hi})")
        if self.receiver not in RECEIVERS:
            raise ConfigError(f"receiver must be one of {RECEIVERS}")
        if self.channel_kind not in CHANNEL_KINDS:
            raise ConfigError(f"channel_kind must be one of {CHANNEL_KINDS}")
        if self.interpolation not in rxconv.INTERP_MODES:
            raise ConfigError(f"interpolation must be one of {rxconv.INTERP_MODES}")
        PatternKind.parse(self.pattern)

    @property
    def speed_range(self) -> tuple[float, float]:
        return min(r[0] for r in self.speed_ranges_kmh), max(r[1] for r in self.speed_ranges_kmh)

    @property
    def snr_span(self) -> tuple[float, float]:
        return min(self.snr_db), max(self.snr_db)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "grid" in d:
                d["grid"] = GridConfig(**d["grid"])
            if "channel" in d:
                d["channel"] = ChannelModelParams(**d["channel"])
            if "train" in d:
                t = dict(d["train"])
                if "arch" in t:
                    t["arch"] = MlArchitecture.from_dict(t["arch"])
                d["train"] = TrainingConfig(**t)
            if "eval" in d:
                d["eval"] = EvalConfig(**d["eval"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if "speed_ranges_kmh" in d:
            d["speed_ranges_kmh"] = tuple(tuple(float(v) for v in r) for r in d["speed_ranges_kmh"])
        if "snr_db" in d:
            d["snr_db"] = tuple(float(v) for v in d["snr_db"])
        if d.get("group") is not None:
            d["group"] = tuple(d["group"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_grid(self, **changes) -> "ScenarioConfig":
        return replace(self, grid=replace(self.grid, **changes))


# ----------------------------------------------------------------------------
# scenario objects


class Scenario:
    """Grid objects, code, covariances and oracles derived from a config."""

    def __init__(self, config: ScenarioConfig, cache_dir=None):
        self.config = config
        self.cfg = config.grid
        self.pattern = build_pilot_pattern(self.cfg, config.pattern)
        gf, gt = config.group if config.group else (None, None)
        self.partition = build_partition(self.cfg, self.pattern, gf, gt)
        self.constellation = build_constellation(self.cfg.m_bits)
        self.mask = self.pattern.data_mask()
        self.n_data = int(self.mask.sum())
        self.cache_dir = None if cache_dir is None else Path(cache_dir)

    @cached_property
    def code(self) -> LdpcCode:
        return LdpcCode.ieee80211n_1296()

    def draw_channels(self, n: int, rng: np.random.Generator, range_index=None):
        """``n`` channels, their speeds and speed-range indices.

        Without ``range_index`` the ranges are assigned round robin.
        """
        cfg = self.cfg
        ranges = np.asarray(self.config.speed_ranges_kmh, dtype=float)
        idx = np.arange(n) % len(ranges) if range_index is None else np.asarray(range_index)
        speeds = rng.uniform(ranges[idx, 0], ranges[idx, 1])
        if self.config.channel_kind == "awgn":
            h = np.ones((n, cfg.n_f, cfg.n_t, cfg.n_m, cfg.n_k), dtype=complex)
        else:
            fd = doppler_from_speed(speeds, cfg.center_freq_hz)
            h = generate_channels(cfg, self.config.channel, n, rng, fd)
        return h, speeds, idx

    @property
    def sampler(self) -> ChannelSampler:
        return lambda n, rng: self.draw_channels(n, rng)[0]

    @cached_property
    def covariance(self) -> rxconv.PilotCovariance:
        c = self.config
        params = {"grid": asdict(self.cfg), "channel": c.channel.key(), "kind": c.channel_kind,
                  "speeds": c.speed_ranges_kmh}
        return rxconv.estimate_pilot_covariance(
            self.sampler,
            self.pattern,
            c.covariance_samples,
            seed=c.channel.seed,
            cache_dir=None if self.cache_dir is None else self.cache_dir,
            cache_params=params,
        )

    @cached_property
    def perfect_csi_error(self) -> np.ndarray:
        """Monte-Carlo ``E_{f,t}`` with true pilot channels, ``(n_f, n_t, n_m, n_m)``."""
        return perfect_csi_oracle(self, self.config.oracle_samples, seed=self.config.channel.seed + 1).e_re


# ----------------------------------------------------------------------------
# frames and datasets


@dataclass
class Frames:
    """``n`` transmitted resource grids with unit-power noise.

    ``h`` ``(n, n_f, n_t, n_m, n_k)``, ``x`` ``(n, n_f, n_t, n_k)``,
    ``bits`` ``(n, n_k, n_data, m_bits)``, ``noise`` ``(n, n_f, n_t, n_m)``.
    """

    h: np.ndarray
    x: np.ndarray
    bits: np.ndarray
    noise: np.ndarray
    speeds: np.ndarray
    range_index: np.ndarray

    def __len__(self) -> int:
        return len(self.h)

    def received(self, sigma2) -> np.ndarray:
        s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (len(self),))
        y = np.einsum("nftmk,nftk->nftm", self.h, self.x)
        return y + np.sqrt(s2)[:, None, None, None] * self.noise

    def bit_grid(self, mask: np.ndarray) -> np.ndarray:
        """Bits placed on their REs, ``(n, n_f, n_t, n_k, m_bits)``."""
        n, k, _, m = self.bits.shape
        out = np.zeros((n,) + mask.shape + (k, m), dtype=np.int8)
        fi, ti = np.nonzero(mask)
        out[:, fi, ti] = np.transpose(self.bits, (0, 2, 1, 3))
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.h, self.x, self.bits, self.noise, self.speeds):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def make_frame(scn: Scenario, seed, bits=None, range_index=None) -> Frames:
    """One resource grid from its own seed."""
    rng = np.random.default_rng(seed)
    cfg = scn.cfg
    h, speeds, idx = scn.draw_channels(1, rng, None if range_index is None else [range_index])
    if bits is None:
        bits = random_bits(rng, (cfg.n_k, scn.n_data, cfg.m_bits))
    tx = assemble_tx_grid(cfg, scn.pattern, bits, scn.constellation)
    noise = complex_noise(rng, (1, cfg.n_f, cfg.n_t, cfg.n_m), 1.0)
    return Frames(h, tx.x[None], tx.bits[None], noise, speeds, idx)


def concat_frames(parts: list[Frames]) -> Frames:
    return Frames(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(Frames)))


@dataclass
class Dataset:
    frames: Frames
    sigma2: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)

    @cached_property
    def y(self) -> np.ndarray:
        return self.frames.received(self.sigma2)

    def digest(self) -> str:
        return hashlib.sha256((self.frames.digest() + self.sigma2.tobytes().hex()).encode()).hexdigest()

    def range_counts(self, n_ranges: int) -> list[int]:
        return np.bincount(self.frames.range_index, minlength=n_ranges).tolist()

    def prepare(self, scn: Scenario) -> PreparedBatch:
        return prepare_batch(
            self.y,
            self.sigma2,
            scn.pattern,
            scn.covariance,
            scn.config.interpolation,
            bits=self.frames.bit_grid(scn.mask),
        )


def generate_dataset(scn: Scenario, n_rgs: int, seed: int) -> Dataset:
    """``n_rgs`` grids split evenly over the speed sub-ranges.

    Grid ``i`` uses the seed ``(seed, i)``, the sub-range ``i mod R`` and an
    SNR drawn uniformly over the configured sweep span.
    """
    if n_rgs < 1:
        raise ValueError("n_rgs must be >= 1")
    n_ranges = len(scn.config.speed_ranges_kmh)
    lo, hi = scn.config.snr_span
    parts, snrs = [], []
    for i in range(n_rgs):
        parts.append(make_frame(scn, (seed, i), range_index=i % n_ranges))
        snrs.append(np.random.default_rng((seed, i, 1)).uniform(lo, hi))
    sigma2 = 10 ** (-np.asarray(snrs) / 10)
    return Dataset(concat_frames(parts), sigma2)


# ----------------------------------------------------------------------------
# perfect-CSI oracle


@dataclass
class OracleResult:
    """``e_re`` summed over users per RE ``(n_f, n_t, n_m, n_m)``;
    ``e_pilots`` per user at its own pilots ``(n_k, n_p, n_m, n_m)``."""

    e_re: np.ndarray
    e_pilots: np.ndarray
    n_samples: int


def perfect_csi_oracle(
    scn: Scenario,
    n_samples: int,
    seed: int = 0,
    estimator: str = "true_pilots",
    sigma2: float | None = None,
    chunk: int = 256,
) -> OracleResult:
    """Sample mean of ``h_err h_err^H`` over channel realizations.

    With ``estimator="true_pilots"`` the pilot channels are exact and the
    error is pure interpolation and aging error. With ``"lmmse"`` the pilot
    observations carry noise of power ``sigma2`` and are estimated with the
    scenario's pilot covariance, which makes the pilot-RE blocks comparable
    to the analytic posterior error covariance.
    """
    if estimator not in ("true_pilots", "lmmse"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if estimator == "lmmse" and not sigma2:
        raise ValueError("the lmmse estimator needs sigma2 > 0")
    cfg, pattern = scn.cfg, scn.pattern
    rng = np.random.default_rng(seed)
    m = cfg.n_m
    e_re = np.zeros((cfg.n_f, cfg.n_t, m, m), dtype=complex)
    e_p = np.zeros((cfg.n_k, pattern.n_pf * pattern.n_pt, m, m), dtype=complex)
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        h = scn.sampler(n, rng)
        hp = rxconv.true_pilot_channel(h, pattern)  # (n, K, P, M)
        if estimator == "lmmse":
            yp = hp + complex_noise(rng, hp.shape, sigma2)
            vec = rxconv.lmmse_pilot_estimate(yp.reshape(n, cfg.n_k, -1), scn.covariance.sigma_mat, sigma2)
            hp_hat = vec.reshape(hp.shape)
        else:
            hp_hat = hp
        err = h - rxconv.interpolate(hp_hat, pattern, scn.config.interpolation)
        e_re += np.einsum("nftmk,nftjk->ftmj", err, np.conj(err))
        ep = hp - hp_hat
        e_p += np.einsum("nkpm,nkpj->kpmj", ep, np.conj(ep))
        done += n
    return OracleResult(rxconv.hermitian_part(e_re / n_samples), rxconv.hermitian_part(e_p / n_samples), n_samples)


# ----------------------------------------------------------------------------
# receivers


ReceiveFn = Callable[[np.ndarray, np.ndarray, Frames], np.ndarray]


def make_receiver(scn: Scenario, kind: str, ml: MlReceiver | None = None) -> ReceiveFn:
    """``fn(y, sigma2, frames) -> llr (n, n_f, n_t, n_k, m_bits)``.

    ``frames`` is only read by the perfect-CSI receiver (true pilot channels).
    """
    mode = scn.config.interpolation
    if kind == "baseline":

        def fn(y, sigma2, frames):
            return rxconv.conventional_receive(
                y, sigma2, scn.pattern, scn.partition, scn.covariance, scn.constellation, mode
            )

    elif kind == "perfect_csi":

        def fn(y, sigma2, frames):
            h_hat = rxconv.interpolate(rxconv.true_pilot_channel(frames.h, scn.pattern), scn.pattern, mode)
            e = np.broadcast_to(scn.perfect_csi_error, h_hat.shape[:3] + scn.perfect_csi_error.shape[-2:])
            llr, _, _ = rxconv.equalize_and_demap(y, sigma2, h_hat, e, scn.partition, scn.constellation)
            return llr

    elif kind == "ml":
        if ml is None:
            raise ValueError("the ml receiver needs trained parameters")

        def fn(y, sigma2, frames):
            batch = prepare_batch(y, sigma2, scn.pattern, scn.covariance, mode)
            return ml.receive(batch)

    else:
        raise ValueError(f"unknown receiver {kind!r}")
    return fn


# ----------------------------------------------------------------------------
# BER sweep


@dataclass
class BerPoint:
    snr_db: float
    coded_ber: float
    uncoded_ber: float
    bits: int
    errors: int
    ci95: float
    frames: int
    codewords: int
    codeword_errors: int
    uncoded_bits: int
    uncoded_errors: int


@dataclass
class BerReport:
    receiver: str
    points: list[BerPoint]
    metadata: dict

    CSV_HEADER = ("snr_db", "coded_ber", "uncoded_ber", "bits", "errors", "ci95")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for p in self.points:
            w.writerow([repr(p.snr_db), repr(p.coded_ber), repr(p.uncoded_ber), p.bits, p.errors, repr(p.ci95)])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        meta = dict(self.metadata, receiver=self.receiver, points=[asdict(p) for p in self.points])
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
        return path

    def coded(self) -> np.ndarray:
        return np.array([p.coded_ber for p in self.points])


def read_ber_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(BerReport.CSV_HEADER) - set(rows[0]):
        raise ValueError(f"{path}: not a BER report")
    return {k: np.array([float(r[k]) for r in rows]) for k in BerReport.CSV_HEADER}


def git_hash() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            cwd=Path(__file__).parent,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def wald_ci95(errors: int, trials: int) -> float:
    if trials == 0:
        return 0.0
    p = errors / trials
    return float(1.96 * np.sqrt(p * (1 - p) / trials))


class CodewordPacker:
    """Maps LDPC codewords onto the data REs of a chunk of grids.

    Per user the chunk offers ``n_frames * n_data * m_bits`` bit slots, filled
    grid by grid, RE by RE (f-major) and bit by bit; whole codewords come
    first and any remaining slots carry uncoded random bits.
    """

    def __init__(self, scn: Scenario, n_frames: int):
        self.scn, self.n_frames = scn, n_frames
        cfg = scn.cfg
        self.slots = n_frames * scn.n_data * cfg.m_bits
        self.n_cw = self.slots // scn.code.n
        if self.n_cw == 0:
            raise ConfigError(
                f"frames_per_chunk={n_frames} gives {self.slots} bits per user, less than one codeword"
            )

    def draw(self, rng: np.random.Generator):
        """Info bits ``(n_k, n_cw, k_info)`` and per-frame tx bits ``(n_frames, n_k, n_data, m)``."""
        cfg, code = self.scn.cfg, self.scn.code
        info = random_bits(rng, (cfg.n_k, self.n_cw, code.k_info))
        cw = code.encode(info).reshape(cfg.n_k, -1)
        fill = random_bits(rng, (cfg.n_k, self.slots - cw.shape[1]))
        stream = np.concatenate([cw, fill], axis=1)
        tx = stream.reshape(cfg.n_k, self.n_frames, self.scn.n_data, cfg.m_bits)
        return info, np.transpose(tx, (1, 0, 2, 3))

    def codeword_llrs(self, llr: np.ndarray) -> np.ndarray:
        """``(n_frames, n_f, n_t, n_k, m)`` LLRs -> ``(n_k, n_cw, n)``."""
        cfg = self.scn.cfg
        fi, ti = np.nonzero(self.scn.mask)
        data = llr[:, fi, ti]  # (frames, n_data, K, m)
        stream = np.transpose(data, (2, 0, 1, 3)).reshape(cfg.n_k, -1)
        return stream[:, : self.n_cw * self.scn.code.n].reshape(cfg.n_k, self.n_cw, -1)


def run_ber_sweep(
    scn: Scenario,
    receiver: str,
    ml: MlReceiver | None = None,
    snr_db=None,
    progress: Callable[[str], None] | None = None,
) -> BerReport:
    """Coded and uncoded BER per SNR point.

    Frames are processed in chunks of ``frames_per_chunk``; each SNR point
    stops once ``max_codeword_errors`` codewords failed (after at least
    ``min_frames`` frames) or ``max_frames`` frames were used.
    """
    ev = scn.config.eval
    fn = make_receiver(scn, receiver, ml)
    packer = CodewordPacker(scn, ev.frames_per_chunk)
    code = scn.code
    points = []
    cache: dict[int, tuple] = {}
    for snr in scn.config.snr_db if snr_db is None else snr_db:
        sigma2 = float(10 ** (-snr / 10))
        tot = dict(frames=0, codewords=0, cw_err=0, bits=0, err=0, ubits=0, uerr=0)
        chunk = 0
        while tot["frames"] < ev.max_frames:
            if tot["cw_err"] >= ev.max_codeword_errors and tot["frames"] >= ev.min_frames:
                break
            if chunk not in cache:
                rng = np.random.default_rng((ev.seed, chunk))
                info, tx_bits = packer.draw(rng)
                frames = concat_frames(
                    [make_frame(scn, (ev.seed, chunk, j), bits=tx_bits[j]) for j in range(ev.frames_per_chunk)]
                )
                cw_bits = code.encode(info)
                cache[chunk] = (info, frames, cw_bits)
            info, frames, cw_bits = cache[chunk]
            llr = fn(frames.received(sigma2), np.full(len(frames), sigma2), frames)
            cw_llr = packer.codeword_llrs(llr)
            dec, _ = code.decode(cw_llr.reshape(-1, code.n), max_iter=ev.decoder_iterations)
            dec = dec.reshape(cw_llr.shape)
            info_err = (dec[..., : code.k_info] != info).sum(axis=-1)
            hard = (cw_llr > 0).astype(np.int8)
            tot["frames"] += len(frames)
            tot["codewords"] += info_err.size
            tot["cw_err"] += int((info_err > 0).sum())
            tot["bits"] += info.size
            tot["err"] += int(info_err.sum())
            tot["ubits"] += hard.size
            tot["uerr"] += int((hard != cw_bits).sum())
            chunk += 1
        point = BerPoint(
            snr_db=float(snr),
            coded_ber=tot["err"] / tot["bits"],
            uncoded_ber=tot["uerr"] / tot["ubits"],
            bits=tot["bits"],
            errors=tot["err"],
            ci95=wald_ci95(tot["err"], tot["bits"]),
            frames=tot["frames"],
            codewords=tot["codewords"],
            codeword_errors=tot["cw_err"],
            uncoded_bits=tot["ubits"],
            uncoded_errors=tot["uerr"],
        )
        points.append(point)
        if progress:
            progress(f"{receiver} {snr:g} dB: coded {point.coded_ber:.3e} uncoded {point.uncoded_ber:.3e} "
                     f"({point.frames} frames, {point.codeword_errors} codeword errors)")
    meta = {
        "git": git_hash(),
        "seed": ev.seed,
        "config_hash": scn.config.config_hash(),
        "scenario": scn.config.name,
    }
    return BerReport(receiver, points, meta)


# ----------------------------------------------------------------------------
# loss-based evaluation


def evaluate_receiver(scn: Scenario, dataset: Dataset, receiver: str, ml: MlReceiver | None = None) -> dict:
    """Cross-entropy (bits per grid), rate estimate and uncoded BER on a dataset."""
    fn = make_receiver(scn, receiver, ml)
    llr = fn(dataset.y, dataset.sigma2, dataset.frames)
    bits = dataset.frames.bit_grid(scn.mask)
    sel = np.broadcast_to(scn.mask[None, :, :, None, None], llr.shape)
    z, b = llr[sel], bits[sel].astype(float)
    per_bit = np.maximum(z, 0) - b * z + np.log1p(np.exp(-np.abs(z)))
    loss = float(per_bit.sum() / (len(dataset) * np.log(2)))
    cfg = scn.cfg
    return {
        "receiver": receiver,
        "n_rgs": len(dataset),
        "loss_bits": loss,
        "rate_per_user": scn.n_data * cfg.m_bits * (1 - loss / (scn.n_data * cfg.m_bits * cfg.n_k)),
        "uncoded_ber": float(((z > 0) != (b > 0.5)).mean()),
    }
