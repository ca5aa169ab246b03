import itertools

import numpy as np
import pytest

from mlrx.grid import GridConfig, build_pilot_pattern
from mlrx.txchain import assemble_tx_grid, build_constellation, n_data_bits, random_bits


@pytest.fixture(scope="module")
def qam():
    return build_constellation(4)


def test_energy_and_distance(qam):
    assert qam.size == 16
    assert np.mean(np.abs(qam.points) ** 2) == pytest.approx(1.0, abs=1e-12)
    d = [abs(a - b) ** 2 for a, b in itertools.combinations(qam.points, 2)]
    assert min(d) == pytest.approx(0.4, abs=1e-12)
    levels = {round(v * np.sqrt(10), 9) for p in qam.points for v in (p.real, p.imag)}
    assert levels == {-3.0, -1.0, 1.0, 3.0}


def test_gray_adjacency(qam):
    step = 2 / np.sqrt(10)
    for i, p in enumerate(qam.points):
        for j, q in enumerate(qam.points):
            dr, di = abs(p.real - q.real), abs(p.imag - q.imag)
            neighbours = (np.isclose(dr, step) and np.isclose(di, 0)) or (np.isclose(di, step) and np.isclose(dr, 0))
            if neighbours:
                assert np.sum(qam.labels[i] != qam.labels[j]) == 1


def test_first_half_bits_select_in_phase(qam):
    for i, p in enumerate(qam.points):
        for j, q in enumerate(qam.points):
            if (qam.labels[i, :2] == qam.labels[j, :2]).all():
                assert np.isclose(p.real, q.real)


def test_label_roundtrip(qam):
    labels = np.array(list(itertools.product([0, 1], repeat=4)))
    np.testing.assert_array_equal(qam.hard_demap(qam.modulate(labels)), labels)


def test_unsupported_order():
    with pytest.raises(ValueError):
        build_constellation(3)


def test_grid_assembly():
    cfg = GridConfig(n_f=12, n_t=14, n_k=2, n_m=2)
    pat = build_pilot_pattern(cfg, "1P")
    assert n_data_bits(cfg, pat) == 156 * 4
    rng = np.random.default_rng(0)
    bits = random_bits(rng, (2, 156, 4))
    tx = assemble_tx_grid(cfg, pat, bits)
    assert tx.n_data == 156
    qam = build_constellation(4)
    for k in range(2):
        own = pat.pilot_sets[k]
        other = pat.pilot_sets[1 - k]
        assert (tx.x[own[:, 0], own[:, 1], k] == 1).all()
        assert (tx.x[other[:, 0], other[:, 1], k] == 0).all()
        fi, ti = np.nonzero(tx.data_mask)
        np.testing.assert_array_equal(qam.hard_demap(tx.x[fi, ti, k]), bits[k])
    sym = tx.x[tx.data_mask]
    assert np.mean(np.abs(sym) ** 2) == pytest.approx(1.0, rel=0.1)


def test_all_zero_bits_use_zero_label():
    cfg = GridConfig(n_f=12, n_k=1, n_m=1)
    pat = build_pilot_pattern(cfg, "1P")
    tx = assemble_tx_grid(cfg, pat, np.zeros(n_data_bits(cfg, pat), dtype=int))
    zero_point = build_constellation(4).points[0]
    assert np.all(tx.x[tx.data_mask] == zero_point)


def test_bit_count_mismatch():
    cfg = GridConfig(n_f=12, n_k=1, n_m=1)
    with pytest.raises(ValueError):
        assemble_tx_grid(cfg, build_pilot_pattern(cfg, "1P"), np.zeros(10))
