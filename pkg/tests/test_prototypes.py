import numpy as np
import pytest

from hyperfl.poincare import BallPoint, geodesic_distance
from hyperfl.prototypes import (
    PrototypeSet,
    TammesConfig,
    build_prototypes,
    contract,
    load_prototypes,
    max_pairwise_cosine,
    optimize_prototypes,
    random_prototypes,
    save_prototypes,
    tammes_loss,
)

SIMPLEX_CASES = [(2, 2), (3, 2), (4, 3), (5, 4), (10, 20), (21, 20)]


class TestTammesLoss:
    def test_antipodal_pair(self):
        w = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert tammes_loss(w) == pytest.approx(-1.0, abs=1e-12)

    def test_equilateral_triangle(self):
        angles = np.deg2rad([0.0, 120.0, 240.0])
        w = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        assert tammes_loss(w) == pytest.approx(-0.5, abs=1e-12)

    def test_identical_rows_worst_case(self):
        w = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert tammes_loss(w) == pytest.approx(1.0, abs=1e-12)

    def test_rejects_non_unit_rows(self):
        with pytest.raises(ValueError):
            tammes_loss(np.array([[2.0, 0.0], [0.0, 1.0]]))


class TestOptimizePrototypes:
    def test_two_classes_become_antipodal(self):
        w, report = optimize_prototypes(2, 3, seed=0)
        assert report.max_pairwise_cosine == pytest.approx(-1.0, abs=1e-6)

    def test_tetrahedron(self):
        # analytic simplex optimum -1/(C-1) for C <= n+1
        _, report = optimize_prototypes(4, 3, seed=0)
        assert report.max_pairwise_cosine <= -1.0 / 3.0 + 1e-2

    @pytest.mark.parametrize("c,n", SIMPLEX_CASES)
    def test_simplex_bound(self, c, n):
        _, report = optimize_prototypes(c, n, seed=11)
        assert report.max_pairwise_cosine <= -1.0 / (c - 1) + 1e-2

    def test_seed_stability_of_optimum(self):
        _, r1 = optimize_prototypes(10, 20, seed=1)
        _, r2 = optimize_prototypes(10, 20, seed=2)
        assert abs(r1.max_pairwise_cosine - r2.max_pairwise_cosine) < 5e-2

    def test_deterministic(self):
        w1, _ = optimize_prototypes(6, 5, seed=42)
        w2, _ = optimize_prototypes(6, 5, seed=42)
        assert np.array_equal(w1, w2)

    def test_rows_stay_unit(self):
        w, _ = optimize_prototypes(7, 6, seed=3)
        assert np.max(np.abs(np.linalg.norm(w, axis=1) - 1.0)) < 1e-9

    def test_trace_non_increasing(self):
        _, report = optimize_prototypes(5, 4, seed=5)
        trace = np.array(report.loss_trace)
        assert np.all(np.diff(trace) <= 0)

    def test_pairwise_cosines_nearly_equal_for_simplex(self):
        # simplex symmetry: every pair ends within 1e-2 of every other pair
        for c, n in [(4, 3), (5, 4), (10, 20)]:
            w, _ = optimize_prototypes(c, n, seed=9)
            m = w @ w.T
            off = m[~np.eye(c, dtype=bool)]
            assert off.max() - off.min() < 1e-2

    def test_budget_exhaustion_returns_best(self):
        _, report = optimize_prototypes(10, 3, seed=0, cfg=TammesConfig(max_iters=5))
        assert not report.converged
        assert np.isfinite(report.final_loss)


class TestContract:
    def test_row_norms_equal_slope(self):
        w, _ = optimize_prototypes(5, 4, seed=0)
        ps = contract(w, 0.9)
        assert np.max(np.abs(np.linalg.norm(ps.weights, axis=1) - 0.9)) < 1e-12

    def test_cosines_unchanged(self):
        w, _ = optimize_prototypes(6, 4, seed=1)
        ps = contract(w, 0.37)
        before = w @ w.T
        scaled = ps.weights / 0.37
        after = scaled @ scaled.T
        assert np.max(np.abs(before - after)) < 1e-12

    def test_slope_range_enforced(self):
        w, _ = optimize_prototypes(3, 3, seed=2)
        for bad in (0.0, -0.5, 1.0, 1.5):
            # s = 1 would pin the prototypes on the open ball's boundary
            with pytest.raises(ValueError):
                contract(w, bad)

    def test_scaling_is_exact_multiplication(self):
        w, _ = optimize_prototypes(3, 3, seed=2)
        ps = contract(w, 0.5)
        assert np.array_equal(ps.weights, 0.5 * w)


class TestGeodesicSeparation:
    def test_contracted_prototypes_separated(self):
        for c, n in [(4, 3), (5, 4)]:
            ps, _ = build_prototypes(c, n, 0.9, seed=4)
            dists = []
            for i in range(c):
                for j in range(i + 1, c):
                    dists.append(
                        geodesic_distance(BallPoint(ps.weights[i]), BallPoint(ps.weights[j]))
                    )
            dists = np.array(dists)
            assert np.all(dists > 0)
            # simplex case: all pairwise geodesic distances agree
            assert dists.max() - dists.min() < 1e-3


class TestPrototypeSet:
    def test_validates_row_norms(self):
        with pytest.raises(ValueError):
            PrototypeSet(weights=np.array([[0.9, 0.0], [0.5, 0.0]]), slope=0.9)

    def test_immutable(self):
        ps, _ = build_prototypes(3, 3, 0.9, seed=0)
        with pytest.raises(ValueError):
            ps.weights[0, 0] = 0.0

    def test_random_prototypes_shape(self):
        ps = random_prototypes(7, 5, 0.8, seed=3)
        assert ps.weights.shape == (7, 5)
        assert np.max(np.abs(np.linalg.norm(ps.weights, axis=1) - 0.8)) < 1e-12


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        ps, _ = build_prototypes(5, 4, 0.9, seed=17)
        path = tmp_path / "protos.bin"
        save_prototypes(ps, path)
        back = load_prototypes(path)
        assert np.array_equal(back.weights, ps.weights)
        assert back.slope == ps.slope
        assert back.seed == ps.seed

    def test_truncated_file_rejected(self, tmp_path):
        ps, _ = build_prototypes(4, 3, 0.9, seed=0)
        path = tmp_path / "protos.bin"
        save_prototypes(ps, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 9])
        with pytest.raises(ValueError):
            load_prototypes(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a prototype file at all")
        with pytest.raises(ValueError):
            load_prototypes(path)


def test_build_prototypes_is_deterministic():
    a, _ = build_prototypes(6, 4, 0.9, seed=123)
    b, _ = build_prototypes(6, 4, 0.9, seed=123)
    assert np.array_equal(a.weights, b.weights)
    assert a.to_bytes() == b.to_bytes()


def test_max_pairwise_cosine_matches_loss_for_symmetric_config():
    angles = np.deg2rad([0.0, 120.0, 240.0])
    w = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    assert max_pairwise_cosine(w) == pytest.approx(-0.5, abs=1e-12)
