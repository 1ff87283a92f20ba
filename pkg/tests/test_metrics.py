import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdad.errors import (
    AllClassesEmpty,
    ClassOutOfRange,
    EmptyInput,
    NotSymmetric,
    SchemaError,
    ShapeMismatch,
    StatsError,
    UnknownEventKind,
)
from sdad.manifest import default_taxonomy
from sdad.metrics import (
    ConfusionMatrix,
    DEFAULT_PENALTIES,
    DrivingSummary,
    FeatureStats,
    RouteResult,
    aggregate_driving,
    frechet_distance,
    infraction_score,
    load_route_log,
    matrix_sqrt_psd,
    mf1,
    miou,
    per_class_f1,
    per_class_iou,
)


def random_spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return a @ a.T * scale / d + np.eye(d) * 1e-3


class TestFeatureStats:
    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        rows = rng.standard_normal((50, 7)) * 3.0 + 1.5
        stats = FeatureStats.from_rows(rows)
        assert np.allclose(stats.mean, rows.mean(axis=0), atol=1e-12)
        assert np.allclose(stats.covariance(), np.cov(rows, rowvar=False, ddof=1), atol=1e-10)

    def test_shifted_data_stability(self):
        # catastrophic cancellation check: huge offset, small variance
        rng = np.random.default_rng(1)
        base = rng.standard_normal((200, 3)) * 1e-3
        rows = base + 1e9
        stats = FeatureStats.from_rows(rows)
        oracle = np.cov(base, rowvar=False, ddof=1)
        assert np.allclose(stats.covariance(), oracle, rtol=1e-6, atol=1e-9)

    @given(
        st.integers(min_value=2, max_value=40),
        st.integers(min_value=1, max_value=39),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_merge_equals_whole(self, n, cut, seed):
        cut = min(cut, n - 1)
        rng = np.random.default_rng(seed)
        rows = rng.standard_normal((n, 4))
        left = FeatureStats.from_rows(rows[:cut])
        right = FeatureStats.from_rows(rows[cut:])
        merged = left.merge(right)
        whole = FeatureStats.from_rows(rows)
        assert merged.n == n
        assert np.allclose(merged.mean, whole.mean, atol=1e-10)
        if n >= 2:
            assert np.allclose(merged.covariance(), whole.covariance(), atol=1e-8)

    def test_merge_with_empty(self):
        rows = np.random.default_rng(3).standard_normal((5, 2))
        stats = FeatureStats.from_rows(rows)
        merged = stats.merge(FeatureStats(2))
        assert np.allclose(merged.mean, stats.mean)
        assert merged.n == 5

    def test_covariance_needs_two(self):
        stats = FeatureStats(3)
        stats.update(np.ones(3))
        with pytest.raises(StatsError):
            stats.covariance()


class TestMatrixSqrt:
    def test_reconstruction_on_random_psd(self):
        rng = np.random.default_rng(5)
        for d in (2, 8, 32, 128):
            a = random_spd(rng, d)
            root = matrix_sqrt_psd(a)
            err = np.linalg.norm(root @ root - a) / np.linalg.norm(a)
            assert err < 1e-6

    def test_identity(self):
        assert np.allclose(matrix_sqrt_psd(np.eye(4)), np.eye(4), atol=1e-12)

    def test_diagonal(self):
        root = matrix_sqrt_psd(np.diag([4.0, 9.0, 16.0]))
        assert np.allclose(root, np.diag([2.0, 3.0, 4.0]), atol=1e-12)

    def test_tiny_negative_eigenvalues_clamped(self):
        a = np.diag([1.0, -1e-12])
        root = matrix_sqrt_psd(a)
        assert np.all(np.isfinite(root))

    def test_asymmetric_rejected(self):
        with pytest.raises(NotSymmetric):
            matrix_sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestFrechet:
    def _stats(self, mean, cov, n=1000):
        # package moments directly instead of sampling
        stats = FeatureStats(len(mean))
        rng = np.random.default_rng(0)
        rows = rng.multivariate_normal(mean, cov, size=n)
        return FeatureStats.from_rows(rows)

    def test_self_distance_zero(self):
        rng = np.random.default_rng(7)
        rows = rng.standard_normal((64, 12))
        stats = FeatureStats.from_rows(rows)
        assert frechet_distance(stats, stats) < 1e-8

    def test_symmetry(self):
        rng = np.random.default_rng(8)
        a = FeatureStats.from_rows(rng.standard_normal((50, 6)) + 1.0)
        b = FeatureStats.from_rows(rng.standard_normal((60, 6)) * 2.0)
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8

    def test_diagonal_closed_form(self):
        """mean/cov diagonal case: FD = |dmu|^2 + sum (sqrt a - sqrt b)^2."""
        rng = np.random.default_rng(9)
        for _ in range(100):
            d = int(rng.integers(2, 65))
            mu_a = rng.standard_normal(d)
            mu_b = rng.standard_normal(d)
            var_a = rng.uniform(0.1, 4.0, d)
            var_b = rng.uniform(0.1, 4.0, d)
            stats_a = FeatureStats(d)
            stats_b = FeatureStats(d)
            # forge exact moments through the private fields is off limits;
            # instead build tiny row sets realizing them exactly
            a_rows = _rows_with_moments(mu_a, var_a)
            b_rows = _rows_with_moments(mu_b, var_b)
            stats_a = FeatureStats.from_rows(a_rows)
            stats_b = FeatureStats.from_rows(b_rows)
            got = frechet_distance(stats_a, stats_b)
            mu_a_r = a_rows.mean(axis=0)
            mu_b_r = b_rows.mean(axis=0)
            va = np.cov(a_rows, rowvar=False, ddof=1).diagonal()
            vb = np.cov(b_rows, rowvar=False, ddof=1).diagonal()
            expect = float(
                np.sum((mu_a_r - mu_b_r) ** 2)
                + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
            )
            assert abs(got - expect) <= 1e-6 * max(1.0, abs(expect))

    def test_dimension_mismatch(self):
        a = FeatureStats.from_rows(np.ones((3, 2)) + np.arange(3)[:, None])
        b = FeatureStats.from_rows(np.ones((3, 3)) + np.arange(3)[:, None])
        with pytest.raises(Exception):
            frechet_distance(a, b)

    def test_known_scalar_case(self):
        # 1-D Gaussians: FD = (mu1-mu2)^2 + (s1-s2)^2
        rows_a = np.array([[0.0], [2.0]])  # mean 1, var 2
        rows_b = np.array([[1.0], [5.0]])  # mean 3, var 8
        a = FeatureStats.from_rows(rows_a)
        b = FeatureStats.from_rows(rows_b)
        expect = (1.0 - 3.0) ** 2 + (math.sqrt(2.0) - math.sqrt(8.0)) ** 2
        assert abs(frechet_distance(a, b) - expect) < 1e-10


def _rows_with_moments(mu, var):
    """2n rows with exact sample mean mu and exact diagonal sample covariance.

    Pairs mu +/- delta_i e_i on axis i give zero cross terms and per-axis
    unbiased variance delta_i^2 * 2 / (2n - 1) ... solved for delta.
    """
    d = len(mu)
    n = 2 * d
    rows = np.tile(mu, (n, 1))
    for i in range(d):
        delta = math.sqrt(var[i] * (n - 1) / 2.0)
        rows[2 * i, i] += delta
        rows[2 * i + 1, i] -= delta
    return rows


class TestConfusion:
    def brute_force(self, gt, pred, k, ignore=None):
        counts = np.zeros((k, k), dtype=np.int64)
        for g, p in zip(gt.reshape(-1), pred.reshape(-1)):
            if ignore is not None and (g == ignore or p == ignore):
                continue
            counts[g, p] += 1
        return counts

    def test_matches_brute_force_on_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            k = int(rng.integers(2, 6))
            gt = rng.integers(0, k, (16, 16))
            pred = rng.integers(0, k, (16, 16))
            cm = ConfusionMatrix(k)
            cm.update(gt, pred)
            assert np.array_equal(cm.counts, self.brute_force(gt, pred, k))

    def test_ignore_label(self):
        rng = np.random.default_rng(12)
        k = 4
        gt = rng.integers(0, k, (10, 10))
        pred = rng.integers(0, k, (10, 10))
        cm = ConfusionMatrix(k)
        cm.update(gt, pred, ignore_label=2)
        assert np.array_equal(cm.counts, self.brute_force(gt, pred, k, ignore=2))

    def test_shape_mismatch(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ShapeMismatch):
            cm.update(np.zeros((2, 2), dtype=int), np.zeros((3, 2), dtype=int))

    def test_out_of_range(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ClassOutOfRange):
            cm.update(np.array([[0, 3]]), np.array([[0, 1]]))

    def test_merge_is_addition(self):
        rng = np.random.default_rng(13)
        gt1, p1 = rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))
        gt2, p2 = rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))
        a = ConfusionMatrix(3)
        a.update(gt1, p1)
        b = ConfusionMatrix(3)
        b.update(gt2, p2)
        whole = ConfusionMatrix(3)
        whole.update(gt1, p1)
        whole.update(gt2, p2)
        assert np.array_equal(a.merge(b).counts, whole.counts)


class TestSegScores:
    def iou_oracle(self, counts, k):
        out = []
        for c in range(k):
            inter = counts[c, c]
            union = counts[c, :].sum() + counts[:, c].sum() - inter
            out.append(np.nan if union == 0 else inter / union)
        return out

    def f1_oracle(self, counts, k):
        out = []
        for c in range(k):
            denom = counts[c, :].sum() + counts[:, c].sum()
            out.append(np.nan if denom == 0 else 2.0 * counts[c, c] / denom)
        return out

    def test_against_oracle_500_random_pairs(self):
        rng = np.random.default_rng(14)
        for _ in range(500):
            k = int(rng.integers(2, 6))
            gt = rng.integers(0, k, (16, 16))
            pred = rng.integers(0, k, (16, 16))
            cm = ConfusionMatrix(k)
            cm.update(gt, pred)
            got_iou = per_class_iou(cm)
            got_f1 = per_class_f1(cm)
            want_iou = self.iou_oracle(cm.counts, k)
            want_f1 = self.f1_oracle(cm.counts, k)
            for a, b in zip(got_iou, want_iou):
                assert (math.isnan(a) and math.isnan(b)) or a == b
            for a, b in zip(got_f1, want_f1):
                assert (math.isnan(a) and math.isnan(b)) or a == b

    def test_perfect_prediction(self):
        rng = np.random.default_rng(15)
        gt = rng.integers(0, 4, (16, 16))
        cm = ConfusionMatrix(4)
        cm.update(gt, gt)
        assert miou(cm) == 1.0
        assert mf1(cm) == 1.0

    def test_absent_class_excluded_from_mean(self):
        # class 2 never appears on either side
        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        cm = ConfusionMatrix(3)
        cm.update(gt, pred)
        iou = per_class_iou(cm)
        assert math.isnan(iou[2])
        manual = np.nanmean(np.asarray(iou, dtype=float))
        assert abs(miou(cm) - float(manual)) < 1e-15

    def test_include_empty_as_nan_flag(self):
        gt = np.array([[0, 0], [1, 1]])
        cm = ConfusionMatrix(3)
        cm.update(gt, gt)
        assert math.isnan(miou(cm, include_empty_as_nan=True))
        assert miou(cm) == 1.0

    def test_all_classes_empty(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(AllClassesEmpty):
            miou(cm)


class TestInfraction:
    def test_product_oracle(self):
        events = ["collision_vehicle", "red_light", "red_light", "stop_sign"]
        expect = 0.60 * 0.70 * 0.70 * 0.80
        assert abs(infraction_score(events) - expect) < 1e-15

    def test_order_independence_100_shuffles(self):
        rng = random.Random(16)
        events = (
            ["collision_pedestrian"]
            + ["collision_vehicle"] * 2
            + ["collision_static"]
            + ["red_light"] * 3
            + ["stop_sign"] * 2
        )
        baseline = infraction_score(events)
        for _ in range(100):
            shuffled = events[:]
            rng.shuffle(shuffled)
            assert infraction_score(shuffled) == baseline

    def test_counted_form(self):
        events = [{"kind": "red_light", "count": 3}]
        assert abs(infraction_score(events) - 0.7**3) < 1e-15

    def test_no_events_is_one(self):
        assert infraction_score([]) == 1.0

    def test_unknown_kind(self):
        with pytest.raises(UnknownEventKind):
            infraction_score(["jaywalking"])

    def test_custom_penalties(self):
        assert infraction_score(["x"], penalties={"x": 0.5}) == 0.5

    def test_default_table(self):
        assert DEFAULT_PENALTIES == {
            "collision_pedestrian": 0.50,
            "collision_vehicle": 0.60,
            "collision_static": 0.65,
            "red_light": 0.70,
            "stop_sign": 0.80,
        }


class TestDriving:
    def _routes(self, taxonomy, specs):
        zs = taxonomy.from_values
        return [
            RouteResult(
                route_id=f"r{i}",
                subgroup=zs(["Clear", "Day"]),
                rc=rc,
                infraction=inf,
            )
            for i, (rc, inf) in enumerate(specs)
        ]

    def test_ds_is_mean_of_products(self, taxonomy):
        routes = self._routes(taxonomy, [(1.0, 0.5), (0.5, 1.0), (0.8, 0.25)])
        summary = aggregate_driving(routes)
        expect = (1.0 * 0.5 + 0.5 * 1.0 + 0.8 * 0.25) / 3.0
        assert abs(summary.ds_mean - expect) < 1e-12
        assert abs(summary.rc_mean - (1.0 + 0.5 + 0.8) / 3.0) < 1e-12
        assert abs(summary.is_mean - (0.5 + 1.0 + 0.25) / 3.0) < 1e-12

    def test_mean_of_products_not_product_of_means(self, taxonomy):
        routes = self._routes(taxonomy, [(1.0, 0.2), (0.2, 1.0)])
        summary = aggregate_driving(routes)
        assert abs(summary.ds_mean - 0.2) < 1e-12
        assert summary.ds_mean != summary.rc_mean * summary.is_mean

    def test_range_validation(self, taxonomy):
        with pytest.raises(SchemaError):
            RouteResult(
                route_id="r",
                subgroup=taxonomy.from_values(["Clear", "Day"]),
                rc=1.5,
                infraction=1.0,
            )

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            aggregate_driving([])

    def test_paper_style_rendering(self, taxonomy):
        routes = [
            RouteResult(
                route_id="a",
                subgroup=taxonomy.from_values(["Clear", "Day"]),
                rc=1.0,
                infraction=0.29111726476405764,
            ),
            RouteResult(
                route_id="b",
                subgroup=taxonomy.from_values(["Rain", "Night"]),
                rc=0.2922,
                infraction=0.4848827352359424,
            ),
        ]
        assert aggregate_driving(routes).rendered() == "64.61 / 0.388 / 21.64"

    def test_per_subgroup_breakdown(self, taxonomy):
        routes = [
            RouteResult(
                route_id="a",
                subgroup=taxonomy.from_values(["Clear", "Day"]),
                rc=1.0,
                infraction=1.0,
            ),
            RouteResult(
                route_id="b",
                subgroup=taxonomy.from_values(["Rain", "Night"]),
                rc=0.5,
                infraction=0.8,
            ),
        ]
        summary = aggregate_driving(routes)
        assert set(summary.per_subgroup) == {"Clear, Day", "Rain, Night"}
        sub = summary.per_subgroup["Rain, Night"]
        assert sub.route_count == 1
        assert abs(sub.ds_mean - 0.4) < 1e-15

    def test_route_log_round_trip(self, tmp_path, taxonomy):
        import json

        lines = [
            {
                "route_id": "r0",
                "subgroup": [1, 1],
                "rc": 0.75,
                "events": ["red_light", {"kind": "stop_sign", "count": 2}],
            },
            {"route_id": "r1", "subgroup": [0, 2], "rc": 1.0, "events": []},
        ]
        path = tmp_path / "routes.jsonl"
        path.write_text("\n".join(json.dumps(l) for l in lines) + "\n", "utf-8")
        routes = load_route_log(path, taxonomy)
        assert routes[0].infraction == pytest.approx(0.7 * 0.8 * 0.8)
        assert routes[0].subgroup.phrase == "Clear, Day"
        assert routes[1].infraction == 1.0
        assert routes[1].subgroup.phrase == "Rain, Night"


class TestSummaryRendering:
    def test_format_digits(self):
        s = DrivingSummary(
            rc_mean=0.6461,
            is_mean=0.388,
            ds_mean=0.2163994119,
            route_count=2,
            per_subgroup={},
        )
        assert s.rendered() == "64.61 / 0.388 / 21.64"
