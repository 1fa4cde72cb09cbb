"""Predictor forward/backward, parameter handling, and checkpoints."""

import math

import numpy as np
import pytest

from conftest import straight_scenario
from trajcast.core import Trajectory, Window, agent_frame
from trajcast.predictor import (EmptyHistory, ModelConfig, StaleTrace,
                                _layer_shapes, backward,
                                complete_trajectories, encode, featurize,
                                forward, init_params, load_checkpoint,
                                predict, predict_goals, refine,
                                refine_backward, refine_forward,
                                save_checkpoint, zero_params)

SMALL = ModelConfig(n_modes=2, horizon=3, history_len=20, feature_dim=8)


def make_window(scenario=None, maps=None):
    sc = scenario or straight_scenario()
    polylines = sc.map_polylines if maps is None else tuple(maps)
    return Window(scenario_id=sc.scenario_id,
                  history_xy=sc.target.xy[:sc.history_len],
                  history_mask=sc.target.present[:sc.history_len],
                  map_polylines=polylines, frame=agent_frame(sc),
                  gt_future=sc.gt_future(), shift=0, dt=0.1)


def test_featurize_layout():
    win = make_window()
    points = featurize(win)
    assert points.shape == (20 + 50, 5)       # history rows then one 50-point polyline
    np.testing.assert_allclose(points[:20, 2], (np.arange(20) - 19) * 0.1)
    assert np.all(points[:20, 3] == 0.0) and np.all(points[20:, 3] == 1.0)
    assert np.all(points[:, 4] == 1.0)
    # straight track at 10 m/s: agent-frame history runs -19..0 along x
    np.testing.assert_allclose(points[:20, 0], np.arange(-19.0, 1.0), atol=1e-12)
    np.testing.assert_allclose(points[:20, 1], 0.0, atol=1e-12)


def test_empty_history_raises():
    sc = straight_scenario()
    win = Window(scenario_id="empty", history_xy=np.zeros((0, 2)),
                 history_mask=np.zeros(0, dtype=bool),
                 map_polylines=sc.map_polylines, frame=agent_frame(sc))
    with pytest.raises(EmptyHistory):
        encode(init_params(SMALL, 0), win)
    with pytest.raises(EmptyHistory):
        forward(init_params(SMALL, 0), SMALL, win)


def test_init_params_bounds_shapes_determinism():
    a = init_params(SMALL, seed=3)
    b = init_params(SMALL, seed=3)
    c = init_params(SMALL, seed=4)
    declared = dict(_layer_shapes(SMALL))
    assert set(a.keys()) == set(declared)
    any_differs = False
    for name, shape in declared.items():
        assert a[name].shape == shape
        fan_in = shape[0] if len(shape) == 2 else declared[name.replace(".b", ".w")][0]
        assert np.all(np.abs(a[name]) <= math.sqrt(1.0 / fan_in))
        assert np.array_equal(a[name], b[name])
        any_differs = any_differs or not np.array_equal(a[name], c[name])
    assert any_differs


def test_zero_params_zero_outputs_uniform_probs():
    win = make_window()
    for cfg in (SMALL,
                ModelConfig(n_modes=2, horizon=3, history_len=20, feature_dim=8, use_refine=False),
                ModelConfig(n_modes=2, horizon=3, history_len=20, feature_dim=8, use_goal=False)):
        out, _ = forward(zero_params(cfg), cfg, win)
        assert np.all(out["completion"] == 0.0)
        assert np.all(out["offsets"] == 0.0)
        assert np.all(out["refined"] == 0.0)
        assert np.all(out["raw_cls"] == 0.0)
        np.testing.assert_array_equal(out["probs"], np.full(cfg.n_modes, 0.5))


def test_bias_propagates_through_sum_pool():
    """With only enc.b2 set, phi = (number of input points) per channel."""
    win = make_window()
    params = zero_params(SMALL)
    params.arrays["enc.b2"][:] = 1.0
    phi = encode(params, win)
    np.testing.assert_array_equal(phi, np.full(SMALL.feature_dim, 70.0))


def test_map_polyline_order_invariance():
    sc = straight_scenario()
    poly_a = sc.map_polylines[0]
    poly_b = Trajectory(points=sc.target.xy[:30] + np.array([0.0, 3.5]), dt=0.1)
    win_ab = make_window(sc, maps=(poly_a, poly_b))
    win_ba = make_window(sc, maps=(poly_b, poly_a))
    params = init_params(SMALL, seed=1)
    out_ab, _ = forward(params, SMALL, win_ab)
    out_ba, _ = forward(params, SMALL, win_ba)
    for key in ("phi", "goals", "completion", "refined", "probs"):
        np.testing.assert_allclose(out_ab[key], out_ba[key], atol=1e-9)


def test_forward_golden_vector():
    """Frozen outputs for seed-0 params on the canonical straight scenario."""
    out, _ = forward(init_params(SMALL, seed=0), SMALL, make_window())
    np.testing.assert_allclose(
        out["phi"][:4],
        [0.0, 130.60136930724775, 90.39975480037654, 145.0598172985647], rtol=1e-12)
    np.testing.assert_allclose(
        out["goals"],
        [[-10.640761411837563, 15.363682029080241],
         [57.7343693328726, -41.320301058231095]], rtol=1e-12)
    np.testing.assert_allclose(
        out["refined"][0],
        [[-5.872841619635835, 12.476366653481872],
         [3.5230054401475153, 9.90115203313814],
         [-18.43849997891857, 9.46470641657264]], rtol=1e-12)
    np.testing.assert_allclose(
        out["raw_cls"], [-2.679796730457845, -2.8430065087121226], rtol=1e-12)
    np.testing.assert_allclose(
        out["probs"], [0.5407121124831552, 0.45928788751684485], rtol=1e-12)


def test_forward_is_bit_reproducible():
    win = make_window()
    params = init_params(SMALL, seed=5)
    out1, _ = forward(params, SMALL, win)
    out2, _ = forward(params, SMALL, win)
    for key, val in out1.items():
        if val is not None:
            np.testing.assert_array_equal(val, out2[key])


def test_ops_compose_to_forward():
    win = make_window()
    params = init_params(SMALL, seed=2)
    out, trace = forward(params, SMALL, win)
    phi = encode(params, win)
    np.testing.assert_array_equal(phi, out["phi"])
    goals = predict_goals(params, SMALL, phi)
    np.testing.assert_array_equal(goals, out["goals"])
    completion = complete_trajectories(params, SMALL, phi, goals)
    np.testing.assert_array_equal(completion, out["completion"])
    offsets, raw_cls = refine(params, SMALL, completion, trace.hist_flat)
    np.testing.assert_array_equal(offsets, out["offsets"])
    np.testing.assert_array_equal(raw_cls, out["raw_cls"])


def _scalar_and_grads(params, cfg, win, w_refined, w_probs):
    out, trace = forward(params, cfg, win)
    value = float((out["refined"] * w_refined).sum() + (out["probs"] * w_probs).sum())
    grads = backward(params, trace, {"refined": w_refined, "probs": w_probs})
    return value, grads


@pytest.mark.parametrize("use_goal,use_refine", [(True, True), (True, False),
                                                 (False, True), (False, False)])
def test_backward_matches_finite_differences(use_goal, use_refine):
    cfg = ModelConfig(n_modes=2, horizon=3, history_len=20, feature_dim=8,
                      use_goal=use_goal, use_refine=use_refine)
    win = make_window()
    params = init_params(cfg, seed=7)
    rng = np.random.default_rng(17)
    w_refined = rng.normal(size=(cfg.n_modes, cfg.horizon, 2))
    w_probs = rng.normal(size=cfg.n_modes)
    _, grads = _scalar_and_grads(params, cfg, win, w_refined, w_probs)
    h = 1e-5
    names = sorted(params.keys())
    for _ in range(40):
        name = names[int(rng.integers(len(names)))]
        arr = params.arrays[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        up, _ = _scalar_and_grads(params, cfg, win, w_refined, w_probs)
        arr[idx] = orig - h
        dn, _ = _scalar_and_grads(params, cfg, win, w_refined, w_probs)
        arr[idx] = orig
        fd = (up - dn) / (2 * h)
        an = grads[name][idx]
        assert abs(an - fd) <= 1e-4 * max(1.0, abs(fd)), (name, idx, an, fd)


def test_backward_zero_upstream_gives_zero_grads():
    win = make_window()
    params = init_params(SMALL, seed=9)
    _, trace = forward(params, SMALL, win)
    grads = backward(params, trace, {})
    for name, g in grads.items():
        assert np.all(g == 0.0), name


def test_backward_is_deterministic():
    win = make_window()
    params = init_params(SMALL, seed=9)
    _, trace = forward(params, SMALL, win)
    upstream = {"refined": np.ones((2, 3, 2)), "probs": np.array([1.0, -1.0])}
    g1 = backward(params, trace, upstream)
    g2 = backward(params, trace, upstream)
    for name in g1:
        np.testing.assert_array_equal(g1[name], g2[name])


def test_stale_trace_detection():
    win = make_window()
    params = init_params(SMALL, seed=9)
    _, trace = forward(params, SMALL, win)
    params.bump()
    with pytest.raises(StaleTrace):
        backward(params, trace, {})
    fresh = params.copy()
    _, trace2 = forward(params, SMALL, win)
    with pytest.raises(StaleTrace):
        backward(fresh, trace2, {})


def test_refine_ignores_anchors_when_anchor_rows_zeroed():
    params = init_params(SMALL, seed=11)
    params.arrays["ref.w0"][: 2 * SMALL.horizon, :] = 0.0
    rng = np.random.default_rng(0)
    hist_flat = rng.normal(size=2 * SMALL.history_len)
    anchors_a = rng.normal(size=(2, 3, 2))
    anchors_b = rng.normal(size=(2, 3, 2))
    off_a, raw_a, trace = refine_forward(params, SMALL, anchors_a, hist_flat)
    off_b, raw_b, _ = refine_forward(params, SMALL, anchors_b, hist_flat)
    np.testing.assert_array_equal(off_a, off_b)
    np.testing.assert_array_equal(raw_a, raw_b)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    d_anchor = refine_backward(params, SMALL, trace, np.ones((2, 3, 2)),
                               np.ones(2), grads)
    assert np.all(d_anchor == 0.0)


def test_predict_maps_back_to_world_frame():
    sc = straight_scenario()        # heading 0, t=0 position (19, 0)
    win = make_window(sc)
    pset = predict(zero_params(SMALL), SMALL, win)
    assert pset.k == SMALL.n_modes
    for traj in pset.trajectories:
        np.testing.assert_allclose(traj.points, np.full((3, 2), (19.0, 0.0)), atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "model.json"
    params = init_params(SMALL, seed=13)
    save_checkpoint(path, params, SMALL, seed=13, epoch=4, extra={"note": "t"})
    loaded, cfg, meta = load_checkpoint(path)
    assert cfg == SMALL
    assert meta == {"seed": 13, "epoch": 4, "extra": {"note": "t"}}
    for name in params.keys():
        np.testing.assert_array_equal(loaded[name], params[name])
    win = make_window()
    out_a, _ = forward(params, SMALL, win)
    out_b, _ = forward(loaded, SMALL, win)
    np.testing.assert_array_equal(out_a["refined"], out_b["refined"])


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "model.json"
    save_checkpoint(path, init_params(SMALL, seed=0), SMALL, seed=0, epoch=0)
    text = path.read_text().replace('"format_version": 1', '"format_version": 99')
    path.write_text(text)
    with pytest.raises(ValueError):
        load_checkpoint(path)
