import json

import numpy as np
import pytest

from mlrx.grid import (
    DimensionError,
    GridConfig,
    PatternKind,
    build_partition,
    build_pilot_pattern,
    position_planes,
)


def as_set(p):
    return {tuple(int(v) for v in row) for row in p}


def test_two_user_one_pilot_example():
    cfg = GridConfig(n_f=12, n_k=2, n_m=2)
    pat = build_pilot_pattern(cfg, "1P")
    # 1-based (1,3),(3,3),...,(11,3) is 0-based (0,2),(2,2),...,(10,2)
    assert as_set(pat.pilot_sets[0]) == {(f, 2) for f in (0, 2, 4, 6, 8, 10)}
    assert (pat.n_pf, pat.n_pt) == (6, 1)


def test_single_user_covers_symbol():
    pat = build_pilot_pattern(GridConfig(n_f=12, n_k=1, n_m=1), PatternKind.ONE_P)
    assert as_set(pat.pilot_sets[0]) == {(f, 2) for f in range(12)}


def test_four_users_two_pilots_tile_symbols():
    cfg = GridConfig(n_f=72, n_k=4, n_m=16)
    pat = build_pilot_pattern(cfg, "2P")
    sets = [as_set(p) for p in pat.pilot_sets]
    assert all(len(s) == 36 for s in sets)
    for a in range(4):
        for b in range(a + 1, 4):
            assert not sets[a] & sets[b]
    union = set().union(*sets)
    assert union == {(f, t) for f in range(72) for t in (2, 11)}


def test_relabeling_users_keeps_union():
    pat = build_pilot_pattern(GridConfig(n_f=24, n_k=4, n_m=4), "2P")
    union = set().union(*(as_set(p) for p in pat.pilot_sets))
    rolled = set().union(*(as_set(p) for p in pat.pilot_sets[1:] + pat.pilot_sets[:1]))
    assert union == rolled


def test_pattern_errors():
    with pytest.raises(DimensionError):
        build_pilot_pattern(GridConfig(n_f=24, n_k=5, n_m=5), "1P")
    with pytest.raises(DimensionError):
        GridConfig(n_f=20)
    with pytest.raises(DimensionError):
        GridConfig(n_k=4, n_m=2)


def test_masks():
    pat = build_pilot_pattern(GridConfig(n_f=12, n_k=2, n_m=2), "1P")
    assert pat.data_mask().sum() == 12 * 14 - 12
    assert pat.pilot_mask()[:, 2].all()


@pytest.mark.parametrize(
    "n_f,gf,gt,count", [(12, 12, 14, 1), (72, 12, 7, 12), (24, 12, 7, 4)]
)
def test_partition_tiles_grid(n_f, gf, gt, count):
    cfg = GridConfig(n_f=n_f, n_k=2, n_m=2)
    part = build_partition(cfg, build_pilot_pattern(cfg, "2P"), gf, gt)
    assert part.n_groups == count
    hits = np.zeros((n_f, 14), dtype=int)
    for fb, fe, tb, te in part.groups:
        hits[fb : fe + 1, tb : te + 1] += 1
    assert (hits == 1).all()
    gi = part.group_index()
    for g, (fb, fe, tb, te) in enumerate(part.groups):
        assert (gi[fb : fe + 1, tb : te + 1] == g).all()


def test_one_pilot_groups_map_to_single_symbol():
    cfg = GridConfig(n_f=24, n_k=2, n_m=2)
    pat = build_pilot_pattern(cfg, "1P")
    part = build_partition(cfg, pat, 12, 7)
    for k in range(2):
        assert (pat.pilot_sets[k][part.nearest_pilot[:, k], 1] == 2).all()


def test_two_pilot_groups_use_their_half():
    cfg = GridConfig(n_f=24, n_k=2, n_m=2)
    pat = build_pilot_pattern(cfg, "2P")
    part = build_partition(cfg, pat)
    assert (part.group_f, part.group_t) == (12, 7)
    t_of = pat.pilot_sets[0][part.nearest_pilot[:, 0], 1]
    starts = np.array([g[2] for g in part.groups])
    assert (t_of[starts == 0] == 2).all() and (t_of[starts == 7] == 11).all()


def test_nearest_pilot_brute_force():
    cfg = GridConfig(n_f=24, n_k=2, n_m=2)
    pat = build_pilot_pattern(cfg, "2P")
    part = build_partition(cfg, pat, 6, 7)
    for g, (fb, fe, tb, te) in enumerate(part.groups):
        cf, ct = (fb + fe) / 2, (tb + te) / 2
        for k, pset in enumerate(pat.pilot_sets):
            d = [abs(f - cf) + abs(t - ct) for f, t in pset]
            assert part.nearest_pilot[g, k] == d.index(min(d))


def test_partition_divisibility():
    cfg = GridConfig(n_f=24, n_k=2, n_m=2)
    with pytest.raises(DimensionError):
        build_partition(cfg, build_pilot_pattern(cfg, "2P"), 5, 7)


def test_json_roundtrip():
    cfg = GridConfig()
    pat = build_pilot_pattern(cfg, "2P")
    d = json.loads(pat.to_json())
    assert d["kind"] == "2P" and len(d["pilot_sets"]) == cfg.n_k
    assert len(json.loads(build_partition(cfg, pat).to_json())["groups"]) == 4


def test_position_planes():
    pos_f, pos_t = position_planes(24, 14)
    assert pos_f.shape == pos_t.shape == (24, 14)
    np.testing.assert_array_equal(pos_f[:, 0], np.r_[-12:0, 1:13])
    np.testing.assert_array_equal(pos_t[0], np.r_[-7:0, 1:8])
    assert not (pos_f == 0).any() and not (pos_t == 0).any()
    np.testing.assert_array_equal(pos_f[::-1], -pos_f)
    np.testing.assert_array_equal(pos_t[:, ::-1], -pos_t)
