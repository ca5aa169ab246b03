"""Command line entry point: ``mlrx {train,evaluate,sweep,oracle,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import harness, rxml

log = logging.getLogger("mlrx")

BUILTIN_CONFIGS = ("desk", "paper")


class UsageError(Exception):
    pass


def resolve_config(name: str | None) -> harness.ScenarioConfig:
    """A config file path, or the name of a shipped config (``desk``, ``paper``)."""
    name = name or "desk"
    path = Path(name)
    if path.exists():
        return harness.ScenarioConfig.load(path)
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    if stem in BUILTIN_CONFIGS:
        text = resources.files("mlrx.configs").joinpath(f"{stem}.json").read_text()
        return harness.ScenarioConfig.from_dict(json.loads(text))
    raise UsageError(f"config {name!r} not found")


def _out_dir(args, cfg: harness.ScenarioConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir)


def _scenario(args) -> harness.Scenario:
    cfg = resolve_config(args.config)
    if getattr(args, "receiver", None):
        cfg = replace(cfg, receiver=args.receiver)
    return harness.Scenario(cfg, cache_dir=args.cache_dir)


def _load_ml(args, scn: harness.Scenario):
    if scn.config.receiver != "ml":
        return None
    if not args.checkpoint:
        raise UsageError("the ml receiver needs --checkpoint")
    return rxml.load_receiver(args.checkpoint, scn.cfg, scn.pattern, scn.partition)


# ----------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    scn = _scenario(args)
    tc = scn.config.train
    seed = tc.seed if args.seed is None else args.seed
    out = _out_dir(args, scn.config)
    out.mkdir(parents=True, exist_ok=True)
    data = harness.generate_dataset(scn, tc.n_rgs, seed).prepare(scn)
    rx = rxml.MlReceiver(scn.cfg, scn.pattern, scn.partition, tc.arch, seed=seed, constellation=scn.constellation)
    if args.checkpoint:
        rx.load_state_dict(rxml.load_receiver(args.checkpoint, scn.cfg, scn.pattern, scn.partition).state_dict())
    res = rxml.train(rx, data, tc.steps, tc.batch, tc.lr, seed=seed)
    ckpt = out / "ml.ckpt"
    rxml.save_receiver(ckpt, rx)
    (out / "train_loss.csv").write_text("step,loss_bits\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res.losses)))
    print(f"trained {res.steps} steps in {res.seconds:.0f} s, final loss {res.losses[-1]:.1f} bits; wrote {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    scn = _scenario(args)
    ml = _load_ml(args, scn)
    seed = scn.config.eval.seed if args.seed is None else args.seed
    ds = harness.generate_dataset(scn, args.n_rgs, seed)
    result = harness.evaluate_receiver(scn, ds, scn.config.receiver, ml)
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    scn = _scenario(args)
    ml = _load_ml(args, scn)
    if args.seed is not None:
        scn = harness.Scenario(replace(scn.config, eval=replace(scn.config.eval, seed=args.seed)), args.cache_dir)
    report = harness.run_ber_sweep(scn, scn.config.receiver, ml, progress=print)
    path = report.write(_out_dir(args, scn.config) / f"ber_{scn.config.receiver}.csv")
    print(f"wrote {path}")
    return 0


def cmd_oracle(args) -> int:
    scn = _scenario(args)
    seed = scn.config.channel.seed + 1 if args.seed is None else args.seed
    res = harness.perfect_csi_oracle(scn, scn.config.oracle_samples, seed=seed)
    out = _out_dir(args, scn.config)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "oracle_e.npy"
    np.save(path, res.e_re)
    power = np.real(np.trace(res.e_re, axis1=-2, axis2=-1)) / scn.cfg.n_m
    print(f"{res.n_samples} samples; per-antenna error power min {power.min():.3e} max {power.max():.3e}; wrote {path}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mlrx"
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name in args.csv:
        data = harness.read_ber_csv(name)
        ber = np.where(data["coded_ber"] > 0, data["coded_ber"], np.nan)
        label = Path(name).stem.removeprefix("ber_")
        ax.semilogy(data["snr_db"], ber, marker="o", label=label)
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel("coded BER")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    out = Path(args.out or "ber.svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {out}")
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlrx", description="MU-MIMO OFDM uplink receivers: train, sweep, plot.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, receiver=True):
        sp.add_argument("--config", help="config JSON path or shipped name (desk, paper)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--cache-dir", help="directory for cached covariance matrices")
        if receiver:
            sp.add_argument("--receiver", choices=harness.RECEIVERS)
            sp.add_argument("--checkpoint")

    sp = sub.add_parser("train", help="train the ML receiver")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("evaluate", help="loss, rate and uncoded BER on a fresh dataset")
    common(sp)
    sp.add_argument("--n-rgs", type=int, default=90)
    sp.set_defaults(func=cmd_evaluate)
    sp = sub.add_parser("sweep", help="coded/uncoded BER over the SNR list")
    common(sp)
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("oracle", help="Monte-Carlo error covariance for the perfect-CSI receiver")
    common(sp, receiver=False)
    sp.set_defaults(func=cmd_oracle)
    sp = sub.add_parser("plot", help="BER curves from sweep CSVs to SVG")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mlrx: error: {exc}", file=sys.stderr)
        return 2
    except (harness.ConfigError, ValueError, OSError, rxml.TrainingDiverged) as exc:
        print(f"mlrx: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
