import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

from meshlgcp.likelihood import poisson_loglik
from meshlgcp.preprocess import (CountGrid, GridSpec, PointPattern, ValidationError, apply_mask,
                                 bin_pattern, label_order, read_counts, read_points_csv,
                                 rescale_dataset, write_counts)


def _pattern(image_id, x, y, types, extent):
    return PointPattern(image_id, np.asarray(x, float), np.asarray(y, float),
                        np.asarray(types, dtype=object), extent)


def test_rescale_single_image():
    pat = _pattern("a", [0, 100], [0, 75], ["t", "t"], (100.0, 75.0))
    (out,), l_star = rescale_dataset([pat])
    assert l_star == 100.0
    assert out.extent == (1.0, 0.75)
    np.testing.assert_allclose(out.x, [0, 1])


def test_rescale_uses_largest_axis_over_dataset():
    a = _pattern("a", [], [], [], (100.0, 75.0))
    b = _pattern("b", [], [], [], (80.0, 120.0))
    out, l_star = rescale_dataset([a, b])
    assert l_star == 120.0
    assert out[0].extent == pytest.approx((100 / 120, 75 / 120))
    assert out[0].extent == pytest.approx((0.8333333333, 0.625))


def test_rescale_unit_image_unchanged_and_idempotent():
    rng = np.random.default_rng(0)
    pat = _pattern("a", rng.random(20), rng.random(20), ["t"] * 20, (1.0, 1.0))
    (once,), l1 = rescale_dataset([pat])
    (twice,), l2 = rescale_dataset([once])
    assert l1 == l2 == 1.0
    np.testing.assert_array_equal(once.x, pat.x)
    np.testing.assert_array_equal(twice.y, once.y)


def test_rescale_errors():
    with pytest.raises(ValidationError):
        rescale_dataset([])
    with pytest.raises(ValidationError):
        rescale_dataset([_pattern("a", [], [], [], (0.0, 1.0))])


def test_bin_empty_pattern_gives_zero_counts():
    g = bin_pattern(_pattern("a", [], [], [], (1, 1)), GridSpec(3, 3), labels=("t",))
    assert g.counts.shape == (9, 1)
    assert g.counts.sum() == 0


def test_bin_three_points_in_first_pixel():
    pat = _pattern("a", [0.1, 0.2, 0.3], [0.1, 0.4, 0.2], ["t"] * 3, (1, 1))
    g = bin_pattern(pat, GridSpec(2, 2))
    assert g.counts[0, 0] == 3
    assert g.counts[1:].sum() == 0


def test_bin_boundary_convention():
    # interior edge goes to the upper cell, domain edge to the last cell
    pat = _pattern("a", [0.5, 1.0, 0.0], [0.0, 1.0, 0.5], ["t"] * 3, (1, 1))
    g = bin_pattern(pat, GridSpec(2, 2))
    grid = g.grid
    assert g.counts[grid.pixel_index(1, 0), 0] == 1
    assert g.counts[grid.pixel_index(1, 1), 0] == 1
    assert g.counts[grid.pixel_index(0, 1), 0] == 1


def test_bin_point_outside_domain_names_row():
    pat = _pattern("img", [0.2, 1.5], [0.2, 0.2], ["t", "t"], (1, 1))
    with pytest.raises(ValidationError, match="point 1"):
        bin_pattern(pat, GridSpec(2, 2))


def test_bin_mass_conservation_500_points():
    rng = np.random.default_rng(1)
    n = 500
    types = rng.choice(["b", "a", "c"], n)
    pat = _pattern("a", rng.random(n), rng.random(n) * 0.75, types, (1.0, 0.75))
    g = bin_pattern(pat, GridSpec(7, 5, extent_y=0.75))
    assert g.labels == ("a", "b", "c")
    for j, lab in enumerate(g.labels):
        assert g.counts[:, j].sum() == np.sum(types == lab)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 200), st.integers(0, 2**31))
def test_bin_mass_conservation_property(nx, ny, n, seed):
    rng = np.random.default_rng(seed)
    pat = _pattern("a", rng.random(n), rng.random(n), rng.choice(["x", "y"], n), (1, 1))
    g = bin_pattern(pat, GridSpec(nx, ny), labels=("x", "y"))
    assert g.counts.sum() == n
    assert g.counts[:, 0].sum() == np.sum(pat.cell_type == "x")


def test_label_order_is_lexicographic():
    pats = [_pattern("a", [0], [0], ["tumor"], (1, 1)), _pattern("b", [0], [0], ["CD8"], (1, 1))]
    assert label_order(pats) == ("CD8", "tumor")


def test_mask_empty_set_keeps_everything():
    g = CountGrid("a", GridSpec(2, 2), np.ones((4, 1), dtype=int))
    assert apply_mask(g, set()).mask.all()


def test_mask_all_pixels_zero_likelihood():
    g = CountGrid("a", GridSpec(2, 2), np.full((4, 2), 3))
    m = apply_mask(g, range(4))
    W = np.random.default_rng(0).normal(size=(4, 2))
    assert poisson_loglik(m.counts, W, m.mask) == 0.0


def test_mask_half_pixels_observed_total():
    rng = np.random.default_rng(2)
    counts = rng.poisson(3.0, size=(16, 2))
    g = CountGrid("a", GridSpec(4, 4), counts)
    missing = set(range(0, 16, 2))
    m = apply_mask(g, missing)
    keep = [p for p in range(16) if p not in missing]
    np.testing.assert_array_equal(m.observed_total(), counts[keep].sum(axis=0))


def test_mask_index_out_of_range():
    g = CountGrid("a", GridSpec(2, 2), np.zeros((4, 1), dtype=int))
    with pytest.raises(ValidationError):
        apply_mask(g, {4})


def test_counts_validation():
    with pytest.raises(ValidationError):
        CountGrid("a", GridSpec(2, 2), -np.ones((4, 1), dtype=int))
    with pytest.raises(ValidationError):
        CountGrid("a", GridSpec(1, 1), np.array([[2_000_000]]))


def test_shared_grid_distance_multisets_identical():
    g = GridSpec(5, 4, scale=100.0, extent_y=0.8)
    d1 = np.sort(pdist(g.unit_coords()))
    d2 = np.sort(pdist(GridSpec(5, 4, scale=100.0, extent_y=0.8).unit_coords()))
    np.testing.assert_array_equal(d1, d2)


def test_grid_pixel_size_in_microns():
    g = GridSpec(10, 5, scale=700.0, extent_x=1.0, extent_y=0.5)
    assert g.pixel_size == pytest.approx((70.0, 70.0))


def test_counts_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    grids = [CountGrid(f"im{i}", GridSpec(3, 2, scale=50.0), rng.poisson(2, (6, 2)), labels=("a", "b"))
             for i in range(2)]
    grids[1] = apply_mask(grids[1], {0, 4})
    write_counts(grids, tmp_path / "c.csv", tmp_path / "m.json", header={"seed": 1, "config_hash": "x"})
    back = read_counts(tmp_path / "c.csv", tmp_path / "m.json")
    assert [g.image_id for g in back] == ["im0", "im1"]
    for a, b in zip(grids, back):
        np.testing.assert_array_equal(a.counts, b.counts)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.grid == b.grid
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["labels"] == ["a", "b"] and manifest["config_hash"] == "x"


def test_read_points_csv(tmp_path):
    p = tmp_path / "pts.csv"
    p.write_text("image_id,x,y,cell_type\na,10,20,t1\na,110,95,t2\nb,0,0,t1\nb,50,40,t1\n")
    pats = read_points_csv(p)
    assert [q.image_id for q in pats] == ["a", "b"]
    assert pats[0].extent == (100.0, 75.0)
    assert pats[0].origin == (10.0, 20.0)


def test_read_points_csv_bad_row(tmp_path):
    p = tmp_path / "pts.csv"
    p.write_text("image_id,x,y,cell_type\na,1,2,t\na,foo,2,t\n")
    with pytest.raises(ValidationError, match="row 3"):
        read_points_csv(p)
