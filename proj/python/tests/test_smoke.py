import numpy as np
import pytest

import gradval

SMALL_GRID = {
    "n_lat": 16,
    "n_lon": 20,
    "lat_min": 40.0,
    "lat_max": 55.0,
    "lon_min": 0.0,
    "lon_max": 19.0,
    "variables": ["t2m", "u10m", "msl"],
}


def test_version_and_stages():
    assert gradval.__version__ == "0.1.0"
    assert gradval.stage_names()[0] == "gen"


def test_config_round_trip():
    c = gradval.default_config()
    gradval.validate_config(c)
    h = gradval.config_hash(c)
    c["seed"] += 1
    assert gradval.config_hash(c) != h
    c["n_timestamps"] = 5
    with pytest.raises(ValueError):
        gradval.validate_config(c)


def test_gradient_and_completeness():
    fields, clim = gradval.synth_fields(3, 2, 50, grid=SMALL_GRID)
    assert fields.shape == (2, 3, 16, 20)
    m = gradval.model(seed=2, depth=2, grid=SMALL_GRID)
    x = fields[0]
    g = m.gradient(x)
    assert g.shape == m.shape
    v, i, j = 1, 8, 9
    h = 1e-3
    xp, xm = x.copy(), x.copy()
    xp[v, i, j] += h
    xm[v, i, j] -= h
    fd = (m.forward(xp) - m.forward(xm)) / (2 * h)
    assert fd == pytest.approx(g[v, i, j], rel=1e-4, abs=1e-9)
    ig = m.attribute(x, clim, "IG", 50)
    assert ig.sum() == pytest.approx(m.forward(x) - m.forward(clim), rel=1e-3)
    gti = m.attribute(x, clim, "GTI")
    np.testing.assert_array_equal(gti, g * (x - clim))


def test_linear_ig_equals_gti():
    fields, clim = gradval.synth_fields(4, 1, 20, grid=SMALL_GRID)
    m = gradval.model("linear", grid=SMALL_GRID)
    ig = m.attribute(fields[0], clim, "IG", 1)
    gti = m.attribute(fields[0], clim, "GTI")
    np.testing.assert_allclose(ig, gti, rtol=1e-12, atol=1e-12 * np.abs(gti).max())


def test_metrics():
    rho, p = gradval.spearman(np.arange(10.0), np.arange(10.0) ** 3)
    assert rho == pytest.approx(1.0)
    assert gradval.topk_overlap([5, 4, 3, 2, 1], [5, 4, 0, 0, 9], 2) == 0.5
    assert gradval.gini([0, 0, 0, 4.0]) == pytest.approx(0.75)
    assert gradval.pr_auc([0.9, 0.8, 0.7, 0.6], [True, False, True, False]) == pytest.approx(19 / 24)
    assert gradval.bh_fdr([0.01, 0.02, 0.30, 0.04]) == [True, True, False, False]
    w, p = gradval.wilcoxon(np.arange(1.0, 11.0))
    assert p == pytest.approx(1 / 1024)


def test_bad_shape():
    m = gradval.model(grid=SMALL_GRID, depth=1)
    with pytest.raises(ValueError):
        m.forward(np.zeros((2, 16, 20)))
