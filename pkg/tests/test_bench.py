"""MAC accounting, parameter comparison, and latency harness tests."""

import numpy as np
import pytest

from mammoth import bench


class TestCountMacs:
    def test_linear_exact(self):
        assert bench.count_macs("linear", 10_000, 1024, 512) == 5_242_880_000

    def test_linear_is_n_d_dout(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n, d, do = (int(rng.integers(1, 500)) for _ in range(3))
            assert bench.count_macs("linear", n, d, do) == n * d * do

    def test_zero_instances_zero_macs(self):
        for variant in bench.VARIANTS:
            assert bench.count_macs(variant, 0, 1024, 512) == 0

    def test_mammoth_band_at_table_shape(self):
        macs = bench.count_macs("mammoth", 10_000, 1024, 512)
        assert macs < bench.count_macs("linear", 10_000, 1024, 512)
        assert 2.0e9 <= macs <= 4.5e9

    def test_mammoth_monotone_in_each_knob(self):
        base = dict(heads=8, partition_dim=8, experts=10, slots=4, q=8)
        ref = bench.count_macs("mammoth", 500, 256, 128, **base)
        for key, grow in (("experts", 20), ("slots", 8), ("q", 16),
                          ("heads", 16), ("partition_dim", 15)):
            kw = dict(base, **{key: grow})
            assert bench.count_macs("mammoth", 500, 256, 128, **kw) >= ref, key
        assert bench.count_macs("mammoth", 1000, 256, 128, **base) >= ref

    def test_sparse_convention(self):
        macs = bench.count_macs("sparse_softmax", 100, 64, 32, experts=5, topk=2)
        assert macs == 100 * 64 * 5 + 100 * 2 * 64 * 32


class TestCompareParams:
    def test_linear_budget(self):
        row = bench.compare_params(["linear"], 1024, 512)[0]
        assert row["params"] == 524_288 and not row["exceeds_linear_budget"]

    def test_sparse_softmax_5_experts(self):
        row = bench.compare_params(["sparse_softmax"], 1024, 512, experts=5)[0]
        assert row["params"] == 5 * 524_288 + 5 * 1024   # ~2.6M
        assert row["exceeds_linear_budget"]

    def test_mammoth_within_budget_across_expert_sweep(self):
        rows = bench.mammoth_params_across_experts(1024, 512, [5, 10, 20, 30])
        budget = 524_288
        for row in rows:
            assert row["params"] <= 1.15 * budget, row

    def test_expert_sweep_q_shrinks(self):
        rows = bench.mammoth_params_across_experts(1024, 512, [5, 30])
        assert rows[0]["q"] > rows[1]["q"]
        assert rows[1]["q"] == 16

    def test_sparse_mh_counts_match_dense_expert_budget(self):
        # hidden dim is chosen so one FFN expert costs ~one dense d x d_out
        row = bench.compare_params(["sparse_mh"], 1024, 512, experts=5,
                                   mh_heads=16)[0]
        assert row["params"] == pytest.approx(5 * 524_288, rel=0.01)


class TestLatency:
    def test_single_trial_zero_std(self):
        mean, std = bench.measure_latency("linear", 16, 8, 8, trials=1, warmup=0)
        assert std == 0.0 and mean > 0.0

    def test_scaling_band_for_linear(self):
        # doubling N lands within a wide throughput band of 2x; the baseline
        # N is already past the cache cliff so both runs stream from memory
        n = 40_000
        mean1, _ = bench.measure_latency("linear", n, 256, 128, trials=10, warmup=3,
                                         rng=np.random.default_rng(0))
        mean2, _ = bench.measure_latency("linear", 2 * n, 256, 128, trials=10,
                                         warmup=3, rng=np.random.default_rng(1))
        assert 1.5 * mean1 <= mean2 <= 3.0 * mean1

    def test_peak_bytes_deterministic_and_monotone(self):
        for variant in bench.VARIANTS:
            kw = dict(heads=4, partition_dim=4, experts=4, slots=2, q=2,
                      total_slots=8, mh_heads=4)
            a = bench.peak_bytes(variant, 100, 64, 32, **kw)
            b = bench.peak_bytes(variant, 100, 64, 32, **kw)
            c = bench.peak_bytes(variant, 200, 64, 32, **kw)
            assert a == b and c >= a > 0


class TestRunBench:
    def test_csv_roundtrip(self, tmp_path):
        results = bench.run_bench(["linear", "sparse_softmax"], 64, 32, 16,
                                  trials=2, warmup=1, experts=3,
                                  rng=np.random.default_rng(2),
                                  heads=2, partition_dim=4, slots=2)
        path = tmp_path / "bench.csv"
        bench.write_bench_csv(results, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("variant,N,D,D_out,macs")
        assert len(lines) == 3
        assert lines[1].split(",")[0] == "linear"
        assert int(lines[1].split(",")[4]) == 64 * 32 * 16
