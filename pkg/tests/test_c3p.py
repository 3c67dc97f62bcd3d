import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cytoforge import c3p
from cytoforge.c3p import CellBank, CellImage, PastePolicy
from cytoforge.errors import DimensionError
from cytoforge.synthetic import synthetic_cell_bank


def _fill(h, w, v):
    return np.full((h, w, 3), v, dtype=np.uint8)


def _noise(rng, h, w):
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


@pytest.fixture(scope="module")
def bank():
    return synthetic_cell_bank(5, seed=1, size=10)


class TestLocation:
    def test_uniform_over_offsets(self):
        rng = np.random.default_rng(0)
        xs, ys = zip(*(c3p.sample_paste_location((320, 320), (100, 100), rng) for _ in range(100_000)))
        for v in (xs, ys):
            counts = np.bincount(v, minlength=221)
            assert counts.size == 221
            assert stats.chisquare(counts).pvalue > 0.001

    def test_full_size_cell(self):
        rng = np.random.default_rng(1)
        assert {c3p.sample_paste_location((320, 320), (320, 320), rng) for _ in range(20)} == {(0, 0)}

    def test_too_large(self):
        with pytest.raises(DimensionError):
            c3p.sample_paste_location((320, 320), (321, 100), np.random.default_rng(0))


def test_paste_small_example():
    out = c3p.paste(_fill(2, 2, 10), _fill(4, 4, 200), (0, 0))
    expected = _fill(4, 4, 200)
    expected[:2, :2] = 10
    np.testing.assert_array_equal(out, expected)


def test_paste_full_canvas_returns_cell():
    cell = _noise(np.random.default_rng(2), 8, 8)
    np.testing.assert_array_equal(c3p.paste(cell, _fill(8, 8, 0), (0, 0)), cell)


def test_paste_out_of_bounds():
    with pytest.raises(DimensionError):
        c3p.paste(_fill(3, 3, 0), _fill(4, 4, 0), (2, 0))


@pytest.mark.parametrize("lam,value", [(0.0, 100), (1.0, 200), (0.5, 150), (0.25, 125)])
def test_blend_values(lam, value):
    out = c3p.blend(_fill(2, 2, 100), _fill(4, 4, 200), (1, 1), lam)
    assert (out[1:3, 1:3] == value).all()
    assert out[0, 0, 0] == 200


def test_blend_rejects_bad_lambda():
    with pytest.raises(ValueError):
        c3p.blend(_fill(2, 2, 0), _fill(4, 4, 0), (0, 0), 1.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_blend_stays_between_inputs(seed, lam):
    rng = np.random.default_rng(seed)
    cell, canvas = _noise(rng, 5, 6), _noise(rng, 5, 6)
    out = c3p.blend(cell, canvas, (0, 0), lam).astype(int)
    lo = np.minimum(cell, canvas).astype(int) - 1
    hi = np.maximum(cell, canvas).astype(int) + 1
    assert ((lo <= out) & (out <= hi)).all()


def test_poisson_paste_constant_cell_disappears():
    out = c3p.poisson_paste(_fill(9, 9, 30), _fill(20, 20, 180), (5, 5))
    assert (out == 180).all()


def test_poisson_paste_self_cut_is_identity():
    canvas = _noise(np.random.default_rng(3), 24, 24)
    cell = canvas[4:14, 6:18].copy()
    np.testing.assert_array_equal(c3p.poisson_paste(cell, canvas, (6, 4)), canvas)


def test_poisson_paste_keeps_border_ring():
    rng = np.random.default_rng(4)
    canvas, cell = _noise(rng, 24, 24), _noise(rng, 10, 10)
    out = c3p.poisson_paste(cell, canvas, (7, 7))
    ring = np.zeros((24, 24), bool)
    ring[7:17, 7:17] = True
    ring[8:16, 8:16] = False
    np.testing.assert_array_equal(out[ring], canvas[ring])
    assert not np.array_equal(out, canvas)


def test_no_negative_pasting(bank):
    policy = PastePolicy(mode="paste", p_neg=0.0)
    canvas = _fill(32, 32, 77)
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = c3p.apply_c3p(canvas, 0, bank, policy, rng)
        assert not t.pasted and t.label == 0
        np.testing.assert_array_equal(t.image, canvas)


def test_positive_always_pasted(bank):
    policy = PastePolicy(mode="paste", p_pos=1.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = c3p.apply_c3p(_fill(32, 32, 77), 1, bank, policy, rng)
        assert t.pasted and t.label == 1 and t.cell_id.startswith("cell1_")


def test_seeded_sequence_repeats(bank):
    policy = PastePolicy(mode="blend", p_neg=1.0)

    def run():
        rng = np.random.default_rng(42)
        return [(t.cell_id, t.offset, t.lam) for t in
                (c3p.apply_c3p(_fill(32, 32, 77), 0, bank, policy, rng) for _ in range(30))]

    assert run() == run()


def test_empty_bank_for_label():
    bank = CellBank([CellImage(_fill(4, 4, 0), 1)])
    with pytest.raises(ValueError):
        c3p.apply_c3p(_fill(8, 8, 0), 0, bank, PastePolicy(p_neg=0.5), np.random.default_rng(0))
    # with zero probability the empty side is never needed
    c3p.apply_c3p(_fill(8, 8, 0), 0, bank, PastePolicy(p_neg=0.0), np.random.default_rng(0))


def test_label_bookkeeping(bank):
    policy = PastePolicy(mode="paste", p_pos=0.7, p_neg=0.3)
    rng = np.random.default_rng(9)
    cells = {c.cell_id: c.label for c in bank.cells}
    for i in range(1000):
        pol = i % 2
        t = c3p.apply_c3p(_fill(16, 16, 1), pol, bank, policy, rng)
        assert t.label == (cells[t.cell_id] if t.pasted else pol)
        assert t.label == pol


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
def test_paste_frequency(bank, p):
    policy = PastePolicy(mode="paste", p_neg=p)
    rng = np.random.default_rng(int(p * 100))
    n = 10_000
    hits = sum(c3p.apply_c3p(_fill(12, 12, 0), 0, bank, policy, rng).pasted for _ in range(n))
    assert abs(hits - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_cell_class_must_agree_with_label():
    CellImage(_fill(4, 4, 0), 1, "herlev", "CIS")
    CellImage(_fill(4, 4, 0), 0, "sipakmed", "SI")
    with pytest.raises(ValueError):
        CellImage(_fill(4, 4, 0), 0, "herlev", "SD")
    with pytest.raises(ValueError):
        CellImage(_fill(4, 4, 0), 1, "sipakmed", "XX")


def test_policy_defaults_and_validation():
    p = PastePolicy()
    assert (p.mode, p.p_pos, p.p_neg, p.canvases_per_class) == ("poisson", 1.0, 0.5, 2000)
    with pytest.raises(ValueError):
        PastePolicy(mode="stamp")
    with pytest.raises(ValueError):
        PastePolicy(p_pos=1.2)


class TestDataset:
    @staticmethod
    def _pools(n=4):
        rng = np.random.default_rng(5)
        return {pol: [(f"c{pol}_{i}", _noise(rng, 24, 24)) for i in range(n)] for pol in (0, 1)}

    def test_eight_outputs(self, bank, tmp_path):
        pools = self._pools()
        ds = c3p.generate_pasted_dataset(bank, pools, PastePolicy(p_pos=1.0, p_neg=1.0), 8, tmp_path)
        assert len(list((tmp_path / "images").glob("*.png"))) == 8
        ids = {cid for pool in pools.values() for cid, _ in pool}
        for i, it in enumerate(ds.items):
            assert it["canvas_id"] in ids
            assert it["canvas_id"].startswith(f"c{i % 2}_")
            assert it["label"] == i % 2 and it["mode"] == "poisson"
        doc = json.loads((tmp_path / "manifest.json").read_text())
        assert doc["items"] == ds.items

    def test_byte_identical(self, bank, tmp_path):
        for d in ("a", "b"):
            c3p.generate_pasted_dataset(bank, self._pools(), PastePolicy(mode="blend", seed=3), 10, tmp_path / d)
        for f in sorted((tmp_path / "a").rglob("*.*")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_zero_outputs(self, bank, tmp_path):
        ds = c3p.generate_pasted_dataset(bank, {}, PastePolicy(), 0, tmp_path)
        assert ds.items == []
        assert not (tmp_path / "images").exists()
        assert json.loads((tmp_path / "manifest.json").read_text())["items"] == []

    def test_pool_subsampled(self, bank, tmp_path):
        pools = self._pools(6)
        ds = c3p.generate_pasted_dataset(bank, pools, PastePolicy(mode="paste", canvases_per_class=2), 40, tmp_path)
        for pol in (0, 1):
            used = {it["canvas_id"] for it in ds.items if it["label"] == pol or it["cell_id"] is None}
            assert len({u for u in used if u.startswith(f"c{pol}_")}) <= 2
