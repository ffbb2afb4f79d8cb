import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxprobe.errors import ArgumentError, DataError
from ctxprobe.roistats import (
    ContextResult,
    RoiCurve,
    analyze_parcels,
    bh_fdr,
    fit_slope,
    group_ttest,
    load_atlas,
    max_context_size,
    read_results_csv,
    roi_score,
    select_roi_voxels,
    write_curves_csv,
    write_results_csv,
)
from ctxprobe.rng import named_stream

from oracles import brute_force_bh, slope_oracle, ttest_oracle


class TestSelectRoiVoxels:
    def test_hand_computed_cumulative_mass(self):
        sel = select_roi_voxels({0: 0.5, 1: 0.3, 2: 0.15, 3: 0.05})
        assert sel == [0, 1, 2]  # cumulative 0.95 >= 0.9

    def test_single_voxel(self):
        assert select_roi_voxels({7: 0.4}) == [7]

    def test_uniform_ties_brute_force(self):
        loadings = {v: 1.0 for v in range(10)}
        sel = select_roi_voxels(loadings)
        # brute force over prefixes in tie-break order
        order = sorted(loadings, key=lambda v: (-loadings[v], v))
        total = sum(loadings.values())
        expected = next(
            order[: k + 1]
            for k in range(10)
            if sum(loadings[v] for v in order[: k + 1]) >= 0.9 * total
        )
        assert sel == expected == list(range(9))

    def test_minimality(self):
        rng = named_stream(1, "roi-minimal")
        for _ in range(50):
            loadings = {v: float(rng.uniform(0.01, 1.0)) for v in range(12)}
            sel = select_roi_voxels(loadings)
            total = sum(loadings.values())
            assert sum(loadings[v] for v in sel) >= 0.9 * total
            assert sum(loadings[v] for v in sel[:-1]) < 0.9 * total

    def test_empty_parcel(self):
        with pytest.raises(DataError):
            select_roi_voxels({})


class TestRoiScore:
    def test_odd_median(self):
        assert roi_score(np.array([0.1, 0.2, 0.9]), [0, 1, 2]) == pytest.approx(0.2)

    def test_even_median(self):
        assert roi_score(np.array([0.1, 0.3]), [0, 1]) == pytest.approx(0.2)

    def test_full_sort_oracle(self):
        rng = named_stream(2, "roi-median")
        r = rng.standard_normal(40)
        voxels = sorted(rng.choice(40, size=11, replace=False).tolist())
        vals = sorted(r[v] for v in voxels)
        expected = vals[len(vals) // 2] if len(vals) % 2 else 0.5 * (
            vals[len(vals) // 2 - 1] + vals[len(vals) // 2]
        )
        assert roi_score(r, voxels) == pytest.approx(expected, abs=1e-12)

    def test_order_invariance(self):
        r = np.array([0.5, -0.2, 0.9, 0.1])
        assert roi_score(r, [0, 2, 3]) == roi_score(r, [3, 0, 2])

    def test_empty_set(self):
        with pytest.raises(ArgumentError):
            roi_score(np.array([0.1]), [])


class TestFitSlope:
    def test_exact_line(self):
        assert fit_slope([(1, 0.1), (2, 0.2), (3, 0.3)]) == pytest.approx(0.1)

    def test_constant(self):
        assert fit_slope([(1, 0.4), (5, 0.4), (9, 0.4)]) == 0.0

    def test_sigma_formula_oracle(self):
        rng = named_stream(3, "slope")
        x = np.array([1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16, 18, 20, 24, 28, 32, 36, 40, 45])
        y = 0.002 * x + rng.standard_normal(21) * 0.01
        assert fit_slope(list(zip(x, y))) == pytest.approx(slope_oracle(x, y), abs=1e-10)

    def test_equivariance(self):
        pts = [(1, 0.1), (2, 0.5), (4, 0.3)]
        s = fit_slope(pts)
        assert fit_slope([(x, y + 3.0) for x, y in pts]) == pytest.approx(s, abs=1e-12)
        assert fit_slope([(x, 2.5 * y) for x, y in pts]) == pytest.approx(2.5 * s, abs=1e-12)

    def test_degenerate_x(self):
        with pytest.raises(ArgumentError):
            fit_slope([(3, 0.1), (3, 0.2)])


class TestGroupTtest:
    def test_pinned_sample(self):
        t, p, degen = group_ttest([0.5, 0.7, 0.9, 0.3, 0.6])
        assert not degen
        assert t == pytest.approx(6.0, abs=1e-12)
        t_ref, p_ref = ttest_oracle([0.5, 0.7, 0.9, 0.3, 0.6])
        assert p == pytest.approx(p_ref, abs=1e-9)
        assert p == pytest.approx(0.0019, abs=2e-4)

    def test_symmetric_sample(self):
        t, p, _ = group_ttest([-0.2, 0.0, 0.2])
        assert t == 0.0 and p == pytest.approx(0.5)

    def test_all_negative_one_sided(self):
        _, p, _ = group_ttest([-0.5, -0.1, -0.3, -0.2])
        assert p > 0.5

    def test_zero_variance_degenerate(self):
        t, p, degen = group_ttest([0.2, 0.2, 0.2])
        assert degen and p == 0.0 and t == np.inf
        t, p, degen = group_ttest([-0.2, -0.2, -0.2])
        assert degen and p == 1.0

    def test_oracle_sweep(self):
        rng = named_stream(4, "ttest")
        for _ in range(100):
            n = int(rng.integers(3, 12))
            slopes = rng.standard_normal(n) * float(rng.uniform(0.01, 2.0))
            if np.std(slopes, ddof=1) == 0:
                continue
            t, p, _ = group_ttest(slopes)
            t_ref, p_ref = ttest_oracle(slopes)
            assert t == pytest.approx(t_ref, abs=1e-9)
            assert p == pytest.approx(p_ref, abs=1e-6)

    def test_two_sided(self):
        t1, p1, _ = group_ttest([0.5, 0.7, 0.9, 0.3, 0.6], tail="two")
        _, p_one, _ = group_ttest([0.5, 0.7, 0.9, 0.3, 0.6], tail="one")
        assert p1 == pytest.approx(2 * p_one, rel=1e-9)

    def test_needs_three(self):
        with pytest.raises(ArgumentError):
            group_ttest([0.1, 0.2])


class TestBhFdr:
    def test_spec_example(self):
        flags = bh_fdr([0.001, 0.008, 0.039, 0.041], q=0.05)
        assert flags == [True, True, True, True]  # k=4: 0.041 <= 0.05

    def test_all_zero(self):
        assert bh_fdr([0.0, 0.0, 0.0], q=0.01) == [True, True, True]

    def test_all_one(self):
        assert bh_fdr([1.0, 1.0], q=0.05) == [False, False]

    @settings(max_examples=300, deadline=None)
    @given(
        st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=12),
        st.floats(min_value=0.001, max_value=0.999),
    )
    def test_matches_brute_force(self, p, q):
        assert bh_fdr(p, q) == brute_force_bh(p, q)

    def test_monotone_in_q(self):
        rng = named_stream(5, "bh")
        for _ in range(50):
            p = rng.uniform(0, 1, size=10).tolist()
            r1 = bh_fdr(p, 0.01)
            r2 = bh_fdr(p, 0.1)
            assert all(b or not a for a, b in zip(r1, r2))  # r1 subset of r2

    def test_errors(self):
        with pytest.raises(ArgumentError):
            bh_fdr([], 0.05)
        with pytest.raises(ArgumentError):
            bh_fdr([0.5], 1.5)
        with pytest.raises(ArgumentError):
            bh_fdr([1.5], 0.05)


def _curve(subject, scores, sizes=(1, 5, 10, 20, 45)):
    return RoiCurve(subject_id=subject, parcel_id="p", sizes=list(sizes), scores=list(scores))


class TestMaxContextSize:
    def test_hand_evaluated_example(self):
        # sigma = 0.0194, threshold = max - sigma; last size below it is 5
        got = max_context_size([_curve("s1", [0.00, 0.02, 0.04, 0.05, 0.05])])
        assert got == 5

    def test_flat_curve_returns_smallest(self):
        assert max_context_size([_curve("s1", [0.3, 0.3, 0.3, 0.3, 0.3])]) == 1

    def test_below_threshold_only_at_first(self):
        assert max_context_size([_curve("s1", [0.0, 0.5, 0.5, 0.5, 0.5])]) == 1

    def test_per_subject_offset_invariance(self):
        base = [
            _curve("s1", [0.00, 0.02, 0.04, 0.05, 0.05]),
            _curve("s2", [0.01, 0.02, 0.05, 0.06, 0.06]),
        ]
        shifted = [
            _curve("s1", [v + 5.0 for v in base[0].scores]),
            _curve("s2", base[1].scores),
        ]
        assert max_context_size(base) == max_context_size(shifted)

    def test_methods_rule(self):
        curves = [_curve("s1", [0.00, 0.02, 0.04, 0.05, 0.05])]
        assert max_context_size(curves, rule="methods") == 5

    def test_mismatched_schedules(self):
        a = _curve("s1", [0.1, 0.2, 0.3], sizes=(1, 2, 3))
        b = _curve("s2", [0.1, 0.2, 0.3], sizes=(1, 2, 4))
        with pytest.raises(DataError):
            max_context_size([a, b])


class TestAtlasIO:
    def test_load(self, tmp_path):
        p = tmp_path / "atlas.csv"
        p.write_text(
            "parcel_id,voxel_index,loading,hemisphere\n"
            "roiA,0,0.5,L\nroiA,1,0.3,L\nroiB,2,1.0,R\nroiB,3,0.0,R\n",
            encoding="utf-8",
        )
        atlas = load_atlas(p)
        assert atlas.parcel_ids() == ["roiA", "roiB"]
        assert atlas.loadings["roiB"] == {2: 1.0}  # zero loading dropped
        assert atlas.hemisphere == {"roiA": "L", "roiB": "R"}

    def test_without_hemisphere(self, tmp_path):
        p = tmp_path / "atlas.csv"
        p.write_text("parcel_id,voxel_index,loading\nroiA,0,0.5\n", encoding="utf-8")
        atlas = load_atlas(p)
        assert atlas.hemisphere == {}

    def test_negative_loading_rejected(self, tmp_path):
        p = tmp_path / "atlas.csv"
        p.write_text("parcel_id,voxel_index,loading\nroiA,0,-0.5\n", encoding="utf-8")
        with pytest.raises(DataError, match="negative"):
            load_atlas(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "atlas.csv"
        p.write_text("a,b,c\n1,2,3\n", encoding="utf-8")
        with pytest.raises(DataError, match="header"):
            load_atlas(p)

    def test_all_zero_parcel_rejected(self, tmp_path):
        p = tmp_path / "atlas.csv"
        p.write_text("parcel_id,voxel_index,loading\nroiA,0,0.0\n", encoding="utf-8")
        with pytest.raises(DataError, match="nonzero"):
            load_atlas(p)


class TestAnalyzeParcels:
    def _atlas(self, tmp_path):
        p = tmp_path / "atlas.csv"
        rows = ["parcel_id,voxel_index,loading,hemisphere"]
        for v in range(4):
            rows.append(f"rising,{v},1.0,L")
        for v in range(4, 8):
            rows.append(f"flat,{v},1.0,R")
        p.write_text("\n".join(rows) + "\n", encoding="utf-8")
        return load_atlas(p)

    def test_end_to_end(self, tmp_path):
        atlas = self._atlas(tmp_path)
        sizes = [1, 2, 4, 8, 16]
        rng = named_stream(6, "parcels")
        rscores = {}
        for s in range(6):
            mat = np.zeros((5, 8))
            for k, size in enumerate(sizes):
                mat[k, :4] = 0.1 + 0.02 * size + rng.normal(0, 0.002, size=4)
                mat[k, 4:] = 0.3 + rng.normal(0, 0.002, size=4)
            rscores[f"sub-{s}"] = mat
        results, curves = analyze_parcels(atlas, rscores, sizes, q=0.01)
        by_id = {r.parcel_id: r for r in results}
        assert by_id["rising"].significant
        assert not by_id["flat"].significant
        assert by_id["flat"].max_context_size is None
        assert by_id["rising"].max_context_size in sizes
        assert by_id["rising"].hemisphere == "L"
        assert len(curves["rising"]) == 6

    def test_csv_round_trip(self, tmp_path):
        results = [
            ContextResult("a", 0.01, 5.0, 0.001, True, 12),
            ContextResult("b", -0.001, -0.5, 0.7, False, None),
        ]
        path = tmp_path / "results.csv"
        write_results_csv(path, results)
        back = read_results_csv(path)
        assert back[0].parcel_id == "a" and back[0].max_context_size == 12
        assert back[1].significant is False and back[1].max_context_size is None

    def test_curves_csv(self, tmp_path):
        curves = {
            "p": [
                _curve("s1", [0.0, 0.1, 0.2, 0.3, 0.3]),
                _curve("s2", [0.1, 0.2, 0.3, 0.4, 0.4]),
            ]
        }
        path = tmp_path / "curves.csv"
        write_curves_csv(path, curves)
        lines = path.read_text().splitlines()
        assert lines[0] == "parcel_id,context_size,mean_centered_score,sem"
        assert len(lines) == 6
