import json
import math

import numpy as np
import pytest

from windlass import bench as B
from windlass.errors import DegenerateFit, ModeMismatch
from windlass.fabric import FabricConfig, Mode

SIZES = [2 ** i for i in range(17)]


@pytest.mark.parametrize("kind", ["put", "get"])
def test_latency_model_recovery(kind):
    res = B.bench_latency(kind, 2, SIZES, samples=3)
    fit = B.fit_model(res, "size")
    assert fit.intercept == pytest.approx(1e-6, rel=0.05)
    assert fit.slope == pytest.approx(0.16e-9, rel=0.05)
    assert all(pt.ops_remote == 1 for pt in res.points)


def test_latency_custom_constants():
    cfg = FabricConfig(alpha_inter=3e-6, beta_inter=1e-9)
    fit = B.fit_model(B.bench_latency("put", 2, SIZES, 2, cfg))
    assert fit.intercept == pytest.approx(3e-6, rel=0.05)
    assert fit.slope == pytest.approx(1e-9, rel=0.05)


def test_message_rate():
    inter = B.bench_message_rate(2, batch=200, samples=3).points[0].median_s
    intra = B.bench_message_rate(2, batch=200, intra=True, samples=3).points[0].median_s
    assert inter == pytest.approx(416e-9, rel=0.05)
    assert intra == pytest.approx(80e-9, rel=0.05)


def test_fence_log_p():
    ps = [2, 4, 8, 16, 32, 64]
    res = B.bench_sync("fence", ps, samples=2)
    per = [pt.median_s / math.ceil(math.log2(pt.p)) for pt in res.points]
    assert max(per) / min(per) < 1.10
    assert [pt.ops_remote for pt in res.points] == [int(math.log2(p)) for p in ps]
    fit = B.fit_model(res, "log_p")
    assert fit.slope == pytest.approx(2.4e-6, rel=0.05)


def test_pscw_ring_ops_flat():
    res = B.bench_sync("pscw_ring", [4, 8, 16, 32], samples=2, k=2)
    for pt in res.points:
        assert (pt.extra["ops_post"], pt.extra["ops_complete"]) == (4, 2)
        assert pt.extra["ops_start"] == pt.extra["ops_wait"] == 0


def test_lock_unlock_flat_in_p():
    res = B.bench_sync("lock_unlock", [2, 8, 32], samples=2)
    assert len({pt.median_s for pt in res.points}) == 1
    assert {pt.ops_remote for pt in res.points} == {4}


def test_fit_needs_six_points():
    with pytest.raises(DegenerateFit):
        B.fit_model(([1, 2, 3], [1, 2, 3]))
    with pytest.raises(DegenerateFit):
        B.fit_model(([2] * 8, list(range(8))))


def test_fit_exact_line():
    xs = np.arange(10.0)
    fit = B.fit_model((xs, 3 + 2 * xs))
    assert (fit.intercept, fit.slope) == pytest.approx((3, 2))
    assert fit.residual == pytest.approx(0, abs=1e-12)


def test_model_benches_reject_preemptive():
    with pytest.raises(ModeMismatch):
        B.bench_latency("put", 2, [8], 1, FabricConfig(mode=Mode.PREEMPTIVE))


def test_output_schema_and_determinism():
    a = B.bench_latency("get", 2, [8, 64], samples=2)
    b = B.bench_latency("get", 2, [8, 64], samples=2)
    assert B.to_csv([a]) == B.to_csv([b])
    header = B.to_csv([a]).splitlines()[0].split(",")
    assert header == list(B.COLUMNS)
    recs = json.loads(B.to_json([a]))
    assert [r["size"] for r in recs] == [8, 64]
    assert set(B.COLUMNS) <= set(recs[0])
