import json

import numpy as np
import pytest

from streamfn import net as netmod, train, volume
from streamfn.errors import DataError, UsageError
from streamfn.train import (
    AdamState,
    RakeSpec,
    TrainConfig,
    adam_step,
    default_batch_size,
    loss_perp,
    loss_pss,
    loss_seeds,
    lr_at,
    parse_rake,
    sample_batch,
    sample_rake,
)


class TestLossPerp:
    def test_orthogonal(self):
        assert loss_perp([(1, 0, 0)], [(0, 2, 0)]) == 0.0

    def test_aligned(self):
        assert loss_perp([(1, 1, 0)], [(1, 0, 0)]) == 1.0

    def test_mean(self):
        assert loss_perp([(1, 0, 0), (0, 1, 0)], [(1, 0, 0), (1, 0, 0)]) == 0.5

    def test_sign_invariance(self):
        g = [(0.3, -0.7, 0.2)]
        v = [(1.0, 2.0, 3.0)]
        assert loss_perp(g, v) == loss_perp([(-0.3, 0.7, -0.2)], v)

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            loss_perp([], [])

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            loss_perp([(1, 0, 0)], [(1, 0, 0), (0, 1, 0)])


class TestLossPss:
    def test_parallel_any_scale(self):
        for s in (1.0, -3.0, 0.01):
            assert loss_pss([(0, 0, 2)], [(0, 0, 2 * s)]) == pytest.approx(0.0, abs=1e-12)

    def test_perpendicular(self):
        assert loss_pss([(1, 0, 0)], [(0, 1, 0)]) == pytest.approx(1.0)

    def test_45_degrees(self):
        assert loss_pss([(1, 0, 0)], [(1, 1, 0)]) == pytest.approx(0.5)

    def test_degenerate_excluded_and_counted(self):
        value, excluded = loss_pss(
            [(1, 0, 0), (0, 0, 0)], [(0, 1, 0), (1, 0, 0)], return_excluded=True
        )
        assert value == pytest.approx(1.0)
        assert excluded == 1

    def test_all_degenerate(self):
        with pytest.raises(UsageError):
            loss_pss([(0, 0, 0)], [(1, 0, 0)])


class TestLossSeeds:
    def make_constant_net(self, c):
        snet = netmod.init(netmod.Architecture(hidden_layers=4, width=16), 0)
        snet.weights[-1][:] = 0.0
        snet.biases[-1][:] = c
        return snet

    def test_zero_on_rake(self):
        assert loss_seeds(self.make_constant_net(0.0), np.zeros((5, 3))) == 0.0

    def test_absolute_value_convention(self):
        # f = -1 on every seed: the |.| convention reports 1, not -1
        assert loss_seeds(self.make_constant_net(-1.0), np.zeros((4, 3))) == pytest.approx(1.0)

    def test_signed_flag(self):
        assert loss_seeds(self.make_constant_net(-1.0), np.zeros((4, 3)), signed=True) == (
            pytest.approx(-1.0)
        )

    def test_half(self):
        assert loss_seeds(self.make_constant_net(0.5), np.zeros((2, 3))) == pytest.approx(0.5)

    def test_empty(self):
        with pytest.raises(UsageError):
            loss_seeds(self.make_constant_net(0.0), np.zeros((0, 3)))


class TestSchedule:
    def test_base(self):
        assert lr_at(0) == 5e-5

    def test_first_decay(self):
        assert lr_at(3333) == pytest.approx(5e-6)
        assert lr_at(3332) == pytest.approx(5e-5)

    def test_third_decade(self):
        assert lr_at(9999) == pytest.approx(5e-8)

    def test_custom_lr0(self):
        assert lr_at(0, 1e-3) == 1e-3
        assert lr_at(6666, 1e-3) == pytest.approx(1e-5)

    def test_negative_rejected(self):
        with pytest.raises(UsageError):
            lr_at(-1)


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = [np.array([1.0, 2.0])]
        state = AdamState.for_params(p)
        adam_step(p, [np.zeros(2)], state, 0.1)
        assert np.allclose(p[0], [1.0, 2.0])
        assert state.step == 1

    def test_first_step_magnitude(self):
        # bias-corrected Adam with g=1 at t=1 moves by ~lr regardless of scale
        p = [np.array([0.0])]
        state = AdamState.for_params(p)
        adam_step(p, [np.array([1.0])], state, 0.1)
        assert p[0][0] == pytest.approx(-0.1, rel=1e-6)

    def test_determinism(self):
        def run():
            p = [np.array([0.5, -0.5], dtype=np.float32)]
            state = AdamState.for_params(p)
            for i in range(10):
                adam_step(p, [np.array([0.1 * i, -0.2], dtype=np.float32)], state, 0.01)
            return p[0]

        assert np.array_equal(run(), run())

    def test_shape_mismatch(self):
        p = [np.zeros((2, 2))]
        state = AdamState.for_params(p)
        with pytest.raises(UsageError):
            adam_step(p, [np.zeros(3)], state, 0.1)


class TestBatchSampling:
    def test_default_batch_sizes(self):
        assert default_batch_size(128 ** 3) == 10_000
        assert default_batch_size(32 ** 3) == 1024  # 1% would be 327, clamped up
        assert default_batch_size(10 ** 9) == 10_000

    def test_points_are_voxel_centers(self):
        fld = volume.gen_analytic("rigid_rotation", (6, 6, 6))
        P, W = sample_batch(fld, np.random.default_rng(0), 200)
        centers = {tuple(np.round(c, 6)) for c in fld.voxel_coordinates()}
        assert all(tuple(np.round(p, 6)) in centers for p in P)
        assert P.shape == (200, 3) and W.shape == (200, 3)

    def test_vectors_match_points(self):
        fld = volume.gen_analytic("rigid_rotation", (6, 6, 6))
        P, W = sample_batch(fld, np.random.default_rng(1), 100)
        expected = volume.analytic_velocity("rigid_rotation", P)
        assert np.allclose(W, expected, atol=1e-6)

    def test_degenerate_voxels_skipped(self):
        data = np.zeros((3, 3, 3, 3), dtype=np.float32)
        data[2, 1, 0] = (1.0, 0.0, 0.0)
        fld = volume.VectorField(data)
        P, W = sample_batch(fld, np.random.default_rng(0), 8)
        assert np.allclose(W, (1.0, 0.0, 0.0))
        assert np.allclose(P, P[0])

    def test_all_degenerate(self):
        fld = volume.VectorField(np.zeros((3, 3, 3, 3), dtype=np.float32))
        with pytest.raises(DataError):
            sample_batch(fld, np.random.default_rng(0), 4)

    def test_bad_batch_size(self):
        fld = volume.gen_analytic("rigid_rotation", (4, 4, 4))
        with pytest.raises(UsageError):
            sample_batch(fld, np.random.default_rng(0), 0)


class TestRake:
    def test_segment_even_spacing(self):
        spec = RakeSpec(kind="segment", start=(-1, 0, 0), end=(1, 0, 0), sample_count=3)
        pts = sample_rake(spec)
        assert np.allclose(pts, [(-1, 0, 0), (0, 0, 0), (1, 0, 0)])

    def test_circle_radius_zero(self):
        spec = RakeSpec(kind="circle", center=(0.1, 0.2, 0.3), radius=0.0, sample_count=16)
        assert np.allclose(sample_rake(spec), (0.1, 0.2, 0.3))

    def test_circle_on_plane(self):
        spec = RakeSpec(kind="circle", center=(0, 0, 0.5), radius=0.3,
                        normal=(0, 0, 1), sample_count=64)
        pts = sample_rake(spec)
        assert np.allclose(pts[:, 2], 0.5)
        assert np.allclose(np.linalg.norm(pts[:, :2], axis=1), 0.3)

    def test_outside_domain(self):
        spec = RakeSpec(kind="segment", start=(0, 0, 0), end=(1.5, 0, 0))
        with pytest.raises(UsageError):
            sample_rake(spec)

    def test_bad_kind(self):
        with pytest.raises(UsageError):
            RakeSpec(kind="spiral", start=(0, 0, 0), end=(1, 0, 0))

    def test_parse_inline_segment(self):
        spec = parse_rake("segment:-1,0,0,1,0,0")
        assert spec.kind == "segment" and spec.end == (1.0, 0.0, 0.0)

    def test_parse_inline_circle(self):
        spec = parse_rake("circle:0,0,0,0.5")
        assert spec.kind == "circle" and spec.radius == 0.5

    def test_parse_json(self):
        spec = parse_rake(json.dumps(
            {"kind": "segment", "start": [0, 0, 0], "end": [0, 0, 1]}))
        assert spec.kind == "segment"

    def test_parse_garbage(self):
        with pytest.raises(UsageError):
            parse_rake("segment:1,2")
        with pytest.raises(UsageError):
            parse_rake("/no/such/rake.json")

    def test_json_round_trip(self):
        spec = RakeSpec(kind="circle", center=(0, 0, 0), radius=0.4, sample_count=7)
        assert RakeSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


class TestConfig:
    def test_seeds_requires_rake(self):
        with pytest.raises(UsageError):
            TrainConfig(loss_kind="perp+seeds")

    def test_unknown_loss(self):
        with pytest.raises(UsageError):
            TrainConfig(loss_kind="magic")

    def test_batch_limit(self):
        with pytest.raises(UsageError):
            TrainConfig(batch_size=150_001)
        TrainConfig(batch_size=150_000)  # boundary accepted

    def test_json_round_trip(self):
        cfg = TrainConfig(
            loss_kind="pss+seeds",
            iterations=5,
            batch_size=64,
            rake=RakeSpec(kind="segment", start=(0, 0, 0), end=(0, 0, 1)),
            width=16,
        )
        assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


class TestParamGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        snet = netmod.init(netmod.Architecture(hidden_layers=4, width=16), 7,
                           dtype=np.float64)
        P = rng.uniform(-0.9, 0.9, (8, 3))
        W = rng.normal(size=(8, 3))
        parts, grads = train.param_gradients(snet, P, vectors=W, loss_kind="perp")
        flat_grad = np.concatenate([g.ravel() for g in grads])

        def loss_at(flat):
            other = snet.with_flat_parameters(flat)
            _, g = netmod.forward_with_grad(other, P)
            return loss_perp(g, W)

        theta = snet.flat_parameters()
        d = rng.normal(size=theta.shape)
        d /= np.linalg.norm(d)
        h = 1e-6
        fd = (loss_at(theta + h * d) - loss_at(theta - h * d)) / (2 * h)
        assert fd == pytest.approx(float(flat_grad @ d), rel=1e-4, abs=1e-10)

    def test_pss_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        snet = netmod.init(netmod.Architecture(hidden_layers=4, width=16), 2,
                           dtype=np.float64)
        P = rng.uniform(-0.9, 0.9, (8, 3))
        N = rng.normal(size=(8, 3))
        _, grads = train.param_gradients(snet, P, normals=N, loss_kind="pss")
        flat_grad = np.concatenate([g.ravel() for g in grads])

        def loss_at(flat):
            other = snet.with_flat_parameters(flat)
            _, g = netmod.forward_with_grad(other, P)
            return loss_pss(g, N)

        theta = snet.flat_parameters()
        d = rng.normal(size=theta.shape)
        d /= np.linalg.norm(d)
        h = 1e-6
        fd = (loss_at(theta + h * d) - loss_at(theta - h * d)) / (2 * h)
        assert fd == pytest.approx(float(flat_grad @ d), rel=1e-4, abs=1e-10)

    def test_seeds_term_included(self):
        snet = netmod.init(netmod.Architecture(hidden_layers=4, width=16), 1,
                           dtype=np.float64)
        rng = np.random.default_rng(1)
        P = rng.uniform(-0.9, 0.9, (4, 3))
        W = rng.normal(size=(4, 3))
        S = rng.uniform(-0.5, 0.5, (6, 3))
        parts, grads = train.param_gradients(
            snet, P, vectors=W, rake_points=S, loss_kind="perp+seeds", seeds_weight=2.0
        )
        assert set(parts) == {"perp", "seeds"}
        flat_grad = np.concatenate([g.ravel() for g in grads])

        def loss_at(flat):
            other = snet.with_flat_parameters(flat)
            _, g = netmod.forward_with_grad(other, P)
            return loss_perp(g, W) + 2.0 * loss_seeds(other, S)

        theta = snet.flat_parameters()
        d = rng.normal(size=theta.shape)
        d /= np.linalg.norm(d)
        h = 1e-6
        fd = (loss_at(theta + h * d) - loss_at(theta - h * d)) / (2 * h)
        assert fd == pytest.approx(float(flat_grad @ d), rel=1e-4, abs=1e-10)

    def test_missing_inputs(self):
        snet = netmod.init(netmod.Architecture(hidden_layers=4, width=16), 0)
        with pytest.raises(UsageError):
            train.param_gradients(snet, np.zeros((2, 3)), loss_kind="perp")
        with pytest.raises(UsageError):
            train.param_gradients(snet, np.zeros((2, 3)), loss_kind="pss")


@pytest.fixture(scope="module")
def tiny_field():
    return volume.gen_analytic("rigid_rotation", (8, 8, 8))


class TestTrainLoop:
    def small_config(self, **kw):
        base = dict(loss_kind="perp", iterations=20, batch_size=64,
                    hidden_layers=4, width=16, seed=0)
        base.update(kw)
        return TrainConfig(**base)

    def test_deterministic(self, tiny_field):
        n1, h1 = train.train(tiny_field, self.small_config())
        n2, h2 = train.train(tiny_field, self.small_config())
        for a, b in zip(n1.parameters(), n2.parameters()):
            assert np.array_equal(a, b)
        assert [r["loss"] for r in h1] == [r["loss"] for r in h2]

    def test_history_shape(self, tiny_field):
        _, hist = train.train(tiny_field, self.small_config(iterations=5))
        assert len(hist) == 5
        assert hist[0]["iteration"] == 0 and hist[-1]["iteration"] == 4
        assert all(r["lr"] == 5e-5 for r in hist)
        assert all(np.isfinite(r["loss"]) for r in hist)

    def test_loss_decreases(self, tiny_field):
        _, hist = train.train(tiny_field, self.small_config(iterations=150, lr0=1e-3))
        first = np.mean([r["loss"] for r in hist[:10]])
        last = np.mean([r["loss"] for r in hist[-10:]])
        assert last < first

    def test_normalize_vectors_changes_run(self, tiny_field):
        _, h1 = train.train(tiny_field, self.small_config())
        _, h2 = train.train(tiny_field, self.small_config(normalize_vectors=True))
        assert h1[0]["loss"] != h2[0]["loss"]

    def test_seeds_history_column(self, tiny_field):
        cfg = self.small_config(
            loss_kind="perp+seeds",
            rake=RakeSpec(kind="segment", start=(0.5, 0, -0.9), end=(0.5, 0, 0.9),
                          sample_count=32),
        )
        _, hist = train.train(tiny_field, cfg)
        assert all(isinstance(r["loss_seeds"], float) for r in hist)

    def test_history_csv(self, tiny_field, tmp_path):
        _, hist = train.train(tiny_field, self.small_config(iterations=3))
        p = tmp_path / "h.csv"
        train.write_history_csv(hist, p)
        lines = p.read_text().strip().splitlines()
        assert lines[0].split(",") == train.HISTORY_COLUMNS
        assert len(lines) == 4
