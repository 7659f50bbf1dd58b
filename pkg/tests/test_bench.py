import pytest

from keyprop.harness.bench import BENCH_OPS, MIN_REPS, BenchRow, bench, check_fft_speedup, format_rows, median_time


class TestBench:
    def test_median_never_below_minimum_reps(self):
        calls = []
        median_time(lambda: calls.append(1), reps=3)
        assert len(calls) >= MIN_REPS + 1  # warm-up plus timed reps

    def test_rows_cover_every_op(self):
        rows = bench()
        assert list(dict.fromkeys(r.op for r in rows)) == list(BENCH_OPS)
        assert all(r.median_s > 0 and r.elements > 0 for r in rows)

    def test_ns_per_element(self):
        row = BenchRow("x", "4", 1000, 1e-6)
        assert row.ns_per_element == pytest.approx(1.0)
        assert "ns/element" in format_rows([row])

    def test_fft_speedup(self):
        assert check_fft_speedup(64) >= 10.0
