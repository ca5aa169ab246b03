import json

import numpy as np
import pytest

from mlrx import cli, harness, rxconv
from mlrx.grid import GridConfig


def tiny_config(**kw):
    base = dict(
        name="tiny",
        grid=GridConfig(n_f=12, n_t=14, n_k=1, n_m=2),
        snr_db=(5.0, 10.0),
        covariance_samples=1000,
        oracle_samples=500,
        eval=harness.EvalConfig(max_frames=18, max_codeword_errors=10**6),
    )
    base.update(kw)
    return harness.ScenarioConfig(**base)


# ----------------------------------------------------------------------------
# configuration


def test_config_roundtrip(tmp_path):
    cfg = tiny_config()
    cfg.save(tmp_path / "c.json")
    back = harness.ScenarioConfig.load(tmp_path / "c.json")
    assert back == cfg and back.config_hash() == cfg.config_hash()


def test_config_validation():
    with pytest.raises(harness.ConfigError):
        tiny_config(snr_db=())
    with pytest.raises(harness.ConfigError):
        tiny_config(speed_ranges_kmh=((30.0, 10.0),))
    with pytest.raises(harness.ConfigError):
        harness.ScenarioConfig.from_dict({"snr": [1]})
    with pytest.raises(harness.ConfigError):
        harness.ScenarioConfig.from_dict({"grid": {"nf": 12}})


@pytest.mark.parametrize("name", cli.BUILTIN_CONFIGS)
def test_shipped_configs_load(name):
    cfg = cli.resolve_config(name)
    scn = harness.Scenario(cfg)
    assert len(cfg.snr_db) >= 3 and scn.n_data > 0


# ----------------------------------------------------------------------------
# datasets


def test_dataset_one_grid_per_range():
    scn = harness.Scenario(tiny_config())
    ds = harness.generate_dataset(scn, 3, seed=0)
    assert ds.range_counts(3) == [1, 1, 1]
    for speed, (lo, hi) in zip(ds.frames.speeds, scn.config.speed_ranges_kmh):
        assert lo <= speed <= hi


def test_dataset_counts_and_snr_span():
    scn = harness.Scenario(harness.ScenarioConfig())
    ds = harness.generate_dataset(scn, 300, seed=1)
    assert ds.range_counts(3) == [100, 100, 100]
    snr = 10 * np.log10(1 / ds.sigma2)
    lo, hi = scn.config.snr_span
    assert snr.min() >= lo and snr.max() <= hi
    assert ds.frames.h.shape == (300, 24, 14, 4, 2)


def test_dataset_determinism():
    scn = harness.Scenario(tiny_config())
    a, b = (harness.generate_dataset(scn, 5, seed=2) for _ in range(2))
    assert a.digest() == b.digest()
    assert harness.generate_dataset(scn, 5, seed=3).digest() != a.digest()
    # a prefix of a larger dataset is the smaller dataset
    c = harness.generate_dataset(scn, 7, seed=2)
    assert np.array_equal(c.frames.h[:5], a.frames.h) and np.array_equal(c.sigma2[:5], a.sigma2)


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        harness.generate_dataset(harness.Scenario(tiny_config()), 0, seed=0)


def test_bit_grid_matches_transmitted_symbols():
    scn = harness.Scenario(tiny_config())
    f = harness.make_frame(scn, 5)
    grid = f.bit_grid(scn.mask)
    fi, ti = np.nonzero(scn.mask)
    np.testing.assert_array_equal(scn.constellation.hard_demap(f.x[0, fi, ti, 0]), grid[0, fi, ti, 0])


# ----------------------------------------------------------------------------
# sweeps


def test_sweep_reproducible_csv(tmp_path):
    scn = harness.Scenario(tiny_config())
    a = harness.run_ber_sweep(scn, "baseline").write(tmp_path / "a" / "ber.csv")
    b = harness.run_ber_sweep(harness.Scenario(tiny_config()), "baseline").write(tmp_path / "b" / "ber.csv")
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "snr_db,coded_ber,uncoded_ber,bits,errors,ci95"
    assert len(lines) == 3
    meta = json.loads(a.with_suffix(".json").read_text())
    assert meta["seed"] == 1000 and meta["config_hash"] == scn.config.config_hash()
    rep = harness.read_ber_csv(a)
    assert ((rep["coded_ber"] >= 0) & (rep["coded_ber"] <= 1)).all()
    assert (rep["errors"] <= rep["bits"]).all()


def test_sweep_stops_on_codeword_errors():
    cfg = tiny_config(snr_db=(-5.0,), eval=harness.EvalConfig(max_frames=900, max_codeword_errors=5))
    rep = harness.run_ber_sweep(harness.Scenario(cfg), "baseline")
    p = rep.points[0]
    # four codewords per 9-frame chunk, all failing at -5 dB: two chunks
    assert (p.codewords, p.codeword_errors, p.frames) == (8, 8, 18)


def test_receivers_see_identical_frames():
    scn = harness.Scenario(tiny_config())
    seen = []

    def spy(kind):
        fn = harness.make_receiver(scn, kind)
        return lambda y, s2, frames: (seen.append((kind, frames.digest(), y.tobytes())), fn(y, s2, frames))[1]

    packer = harness.CodewordPacker(scn, 9)
    _, bits = packer.draw(np.random.default_rng((1000, 0)))
    frames = harness.concat_frames([harness.make_frame(scn, (1000, 0, j), bits=bits[j]) for j in range(9)])
    for kind in ("baseline", "perfect_csi"):
        spy(kind)(frames.received(0.1), np.full(9, 0.1), frames)
    assert seen[0][1:] == seen[1][1:]


def _mini_qam_ber(snr_db, n_sym, seed):
    """Uncoded Gray 16-QAM BER with nothing but numpy."""
    rng = np.random.default_rng(seed)
    levels = np.array([-3.0, -1.0, 1.0, 3.0]) / np.sqrt(10)
    gray = np.array([[0, 0], [0, 1], [1, 1], [1, 0]])
    i_idx, q_idx = rng.integers(0, 4, (2, n_sym))
    sigma = np.sqrt(10 ** (-snr_db / 10) / 2)
    ri = levels[i_idx] + sigma * rng.standard_normal(n_sym)
    rq = levels[q_idx] + sigma * rng.standard_normal(n_sym)
    di = np.abs(ri[:, None] - levels).argmin(axis=1)
    dq = np.abs(rq[:, None] - levels).argmin(axis=1)
    errors = (gray[di] != gray[i_idx]).sum() + (gray[dq] != gray[q_idx]).sum()
    return errors / (4 * n_sym), 4 * n_sym


def test_awgn_bypass_matches_mini_simulator():
    snrs = (6.0, 10.0, 14.0)
    cfg = tiny_config(
        grid=GridConfig(n_f=12, n_t=14, n_k=1, n_m=1),
        channel_kind="awgn",
        snr_db=snrs,
        eval=harness.EvalConfig(max_frames=90, max_codeword_errors=10**6),
    )
    rep = harness.run_ber_sweep(harness.Scenario(cfg), "perfect_csi")
    for snr, p in zip(snrs, rep.points):
        ref, n_ref = _mini_qam_ber(snr, 200_000, int(snr))
        sd = np.sqrt(ref * (1 - ref) / n_ref + p.uncoded_ber * (1 - p.uncoded_ber) / p.uncoded_bits)
        assert abs(p.uncoded_ber - ref) <= 2 * sd, (snr, p.uncoded_ber, ref)


def test_noiseless_static_flat_perfect_csi():
    cfg = tiny_config(
        grid=GridConfig(n_f=12, n_t=14, n_k=2, n_m=2),
        channel=harness.ChannelModelParams(n_taps=1, delay_spread_s=0.0),
        speed_ranges_kmh=((0.0, 0.0),),
        snr_db=(120.0,),
    )
    rep = harness.run_ber_sweep(harness.Scenario(cfg), "perfect_csi")
    assert rep.points[0].coded_ber == 0 and rep.points[0].uncoded_ber == 0


def test_ml_receiver_requires_parameters():
    with pytest.raises(ValueError):
        harness.make_receiver(harness.Scenario(tiny_config()), "ml")


def test_wald_interval():
    assert harness.wald_ci95(0, 100) == 0
    assert harness.wald_ci95(50, 100) == pytest.approx(1.96 * 0.05)


# ----------------------------------------------------------------------------
# perfect-CSI oracle


def test_oracle_vanishes_without_doppler_or_noise():
    cfg = tiny_config(
        grid=GridConfig(n_f=12, n_t=14, n_k=2, n_m=2),
        channel=harness.ChannelModelParams(n_taps=1, delay_spread_s=0.0),
        speed_ranges_kmh=((0.0, 0.0),),
    )
    res = harness.perfect_csi_oracle(harness.Scenario(cfg), 200)
    assert np.abs(res.e_re).max() < 1e-20
    res = harness.perfect_csi_oracle(harness.Scenario(cfg), 200, estimator="lmmse", sigma2=1e-12)
    assert np.abs(res.e_re).max() < 1e-8


def test_oracle_hermitian_psd():
    res = harness.perfect_csi_oracle(harness.Scenario(tiny_config()), 300)
    e = res.e_re
    assert np.abs(e - np.conj(np.swapaxes(e, -1, -2))).max() < 1e-12
    assert np.linalg.eigvalsh(e).min() >= -1e-12


def test_oracle_matches_posterior_at_pilots():
    cfg = tiny_config(grid=GridConfig(n_f=12, n_t=14, n_k=2, n_m=2), covariance_samples=4000)
    scn = harness.Scenario(cfg)
    sigma2 = 0.1
    res = harness.perfect_csi_oracle(scn, 4000, seed=11, estimator="lmmse", sigma2=sigma2)
    cov = scn.covariance
    post = rxconv.posterior_error_cov(cov.sigma_mat, sigma2)
    analytic = np.stack([cov.spatial_block(post, p) for p in range(cov.n_p)])
    mc = res.e_pilots.mean(axis=0)
    assert np.linalg.norm(mc - analytic) / np.linalg.norm(analytic) < 0.05


# ----------------------------------------------------------------------------
# command line


@pytest.fixture()
def tiny_json(tmp_path):
    path = tmp_path / "tiny.json"
    tiny_config(snr_db=(10.0,)).save(path)
    return path


def test_cli_sweep_writes_csv(tmp_path, tiny_json, capsys):
    out = tmp_path / "res"
    assert cli.main(["sweep", "--config", str(tiny_json), "--receiver", "baseline", "--out", str(out)]) == 0
    assert (out / "ber_baseline.csv").read_text().splitlines()[0] == "snr_db,coded_ber,uncoded_ber,bits,errors,ci95"


def test_cli_ml_without_checkpoint_is_usage_error(tiny_json, capsys):
    assert cli.main(["evaluate", "--config", str(tiny_json), "--receiver", "ml"]) == 2
    assert "--checkpoint" in capsys.readouterr().err
    assert cli.main(["sweep", "--config", str(tiny_json), "--receiver", "ml"]) == 2


def test_cli_runtime_errors_exit_one(tmp_path, tiny_json, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["sweep", "--config", str(bad)]) == 1
    rc = cli.main(["sweep", "--config", str(tiny_json), "--receiver", "ml", "--checkpoint", str(tmp_path / "none")])
    assert rc == 1
    assert "mlrx:" in capsys.readouterr().err


def test_cli_argparse_usage_exit_two():
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--receiver", "magic"])
    assert exc.value.code == 2


def test_cli_evaluate_and_oracle(tmp_path, tiny_json, capsys):
    out = tmp_path / "eval.json"
    assert cli.main(["evaluate", "--config", str(tiny_json), "--n-rgs", "3", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["n_rgs"] == 3 and 0 <= res["uncoded_ber"] <= 1
    assert cli.main(["oracle", "--config", str(tiny_json), "--out", str(tmp_path)]) == 0
    assert np.load(tmp_path / "oracle_e.npy").shape == (12, 14, 2, 2)


def test_cli_train_then_sweep(tmp_path, capsys):
    cfg = tiny_config(
        snr_db=(10.0,),
        train=harness.TrainingConfig(n_rgs=6, steps=2, batch=3, arch=harness.MlArchitecture(4, (3, 3), "relu", 4, 4)),
    )
    path = tmp_path / "c.json"
    cfg.save(path)
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train_loss.csv").read_text().count("\n") == 3
    ckpt = tmp_path / "ml.ckpt"
    args = ["sweep", "--config", str(path), "--receiver", "ml", "--checkpoint", str(ckpt), "--out", str(tmp_path)]
    assert cli.main(args) == 0
    assert (tmp_path / "ber_ml.csv").exists()


def _report(snr, coded):
    pts = [harness.BerPoint(s, c, 0.1, 1000, int(c * 1000), 0.0, 9, 8, 1, 1000, 100) for s, c in zip(snr, coded)]
    return harness.BerReport("x", pts, {})


def test_cli_plot_svg(tmp_path, capsys):
    a = _report([0, 5, 10], [1e-1, 1e-2, 0.0]).write(tmp_path / "ber_baseline.csv")
    b = _report([0, 5, 10], [5e-2, 1e-3, 1e-4]).write(tmp_path / "ber_ml.csv")
    svg = tmp_path / "plot.svg"
    assert cli.main(["plot", str(a), str(b), "--out", str(svg)]) == 0
    text = svg.read_text()
    assert text.lstrip().startswith("<?xml") and "<svg" in text
    assert "baseline" in text and "ml" in text
    first = svg.read_bytes()
    cli.main(["plot", str(a), str(b), "--out", str(svg)])
    assert svg.read_bytes() == first
