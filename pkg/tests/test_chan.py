import numpy as np
import pytest
from scipy.special import j0

from mlrx.chan import (
    ChannelModelParams,
    NoiseSpec,
    apply_channel,
    generate_channel,
    generate_channels,
    jakes_gains,
    read_channel_file,
    symbol_period,
    write_channel_file,
)
from mlrx.grid import GridConfig

CFG = GridConfig(n_f=24, n_t=14, n_k=2, n_m=4)


def test_flat_static_channel_is_constant():
    h = generate_channel(CFG, ChannelModelParams(n_taps=1, delay_spread_s=0, doppler_hz=0, seed=3))
    np.testing.assert_allclose(h, np.broadcast_to(h[:1, :1], h.shape), atol=1e-12)


@pytest.mark.parametrize("doppler", [0.0, 300.0])
def test_per_user_energy_normalization(doppler):
    h = generate_channels(CFG, ChannelModelParams(doppler_hz=doppler), 5, np.random.default_rng(0))
    energy = np.sum(np.abs(h) ** 2, axis=(1, 2, 3))
    np.testing.assert_allclose(energy, CFG.n_f * CFG.n_t * CFG.n_m, rtol=1e-6)


def test_reproducible():
    p = ChannelModelParams(doppler_hz=100, seed=7)
    assert np.array_equal(generate_channel(CFG, p), generate_channel(CFG, p))
    assert not np.array_equal(generate_channel(CFG, p), generate_channel(CFG, ChannelModelParams(doppler_hz=100, seed=8)))


def test_average_coefficient_power():
    h = generate_channels(CFG, ChannelModelParams(doppler_hz=50), 10_000 // CFG.n_k, np.random.default_rng(1))
    assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, rel=0.02)


def test_jakes_autocorrelation():
    fd = 200.0
    dt = symbol_period(CFG)
    times = np.arange(6) * dt
    g = jakes_gains(np.random.default_rng(2), fd, times, (20_000,), 16)
    for lag in range(6):
        r = np.mean(g[:, lag] * np.conj(g[:, 0]))
        assert abs(r - j0(2 * np.pi * fd * lag * dt)) < 0.05


def test_apply_channel_unit():
    h = np.ones((24, 14, 4, 1), dtype=complex)
    x = np.full((24, 14, 1), 0.3 - 0.1j)
    y = apply_channel(h, x, 1e-30, rng=0)
    np.testing.assert_allclose(y, 0.3 - 0.1j, atol=1e-12)


def test_apply_channel_matches_loop():
    rng = np.random.default_rng(4)
    h = rng.standard_normal((3, 2, 4, 2)) + 1j * rng.standard_normal((3, 2, 4, 2))
    x = rng.standard_normal((3, 2, 2)) + 1j * rng.standard_normal((3, 2, 2))
    y = apply_channel(h, x, 0.0)
    ref = np.zeros((3, 2, 4), dtype=complex)
    for f in range(3):
        for t in range(2):
            for m in range(4):
                for k in range(2):
                    ref[f, t, m] += h[f, t, m, k] * x[f, t, k]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_noise_statistics():
    n = 100_000
    sigma2 = 0.3
    h = np.zeros((n, 1, 3, 1), dtype=complex)
    y = apply_channel(h, np.zeros((n, 1, 1)), NoiseSpec(sigma2), rng=5)[:, 0]
    cov = y.T @ y.conj() / n
    np.testing.assert_allclose(cov, sigma2 * np.eye(3), atol=0.02 * sigma2)
    # distinct REs are independent
    r = np.mean(y[:-1, 0] * np.conj(y[1:, 0])) / sigma2
    assert abs(r) < 3 / np.sqrt(n)


def test_noise_spec():
    spec = NoiseSpec.from_snr_db(10)
    assert spec.sigma2 == pytest.approx(0.1)
    assert spec.snr_db == pytest.approx(10)
    with pytest.raises(ValueError):
        NoiseSpec(0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        apply_channel(np.ones((2, 2, 3, 2)), np.ones((2, 2, 3)), 0.1)


def test_channel_file_roundtrip(tmp_path):
    h = generate_channel(CFG, ChannelModelParams(seed=1))
    write_channel_file(tmp_path / "h.bin", h)
    raw = (tmp_path / "h.bin").read_bytes()
    assert np.frombuffer(raw[:16], "<u4").tolist() == [24, 14, 4, 2]
    assert np.array_equal(read_channel_file(tmp_path / "h.bin"), h)
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_channel_file(tmp_path / "bad.bin")


def test_param_validation():
    with pytest.raises(ValueError):
        ChannelModelParams(n_taps=0)
    with pytest.raises(ValueError):
        ChannelModelParams(doppler_hz=-1)
