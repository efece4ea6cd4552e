import csv
import io
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sandmesh.perfmodel import (
    PER_JOB_TRANSFER_MB,
    SWEEP_COLUMNS,
    ClusterSpec,
    CommSpec,
    PerfReport,
    WorkloadSpec,
    build_mesh,
    parallel_efficiency,
    simulate_run,
    speedup,
    sweep,
    sweep_csv,
    theoretical_runtime,
    wave_bound,
)
from sandmesh.plots import FIGURE_NAMES, render_sweep_figures

SMALL = WorkloadSpec(n_jobs=24)


def test_theoretical_runtime_examples():
    assert theoretical_runtime(1261, 188, 3, 300) == pytest.approx(670.74, abs=0.01)
    assert theoretical_runtime(1261, 188, 3, 520) == pytest.approx(1162.62, abs=0.01)
    assert theoretical_runtime(0, 4, 3, 520) == 0
    with pytest.raises(ValueError):
        theoretical_runtime(10, 0, 3, 520)
    with pytest.raises(ValueError):
        theoretical_runtime(-1, 1, 3, 520)


def test_wave_bound_rounds_up():
    assert wave_bound(6, 3, 10) == 20
    assert wave_bound(7, 3, 10) == 30
    assert wave_bound(0, 3, 10) == 0


def test_comm_spec_maps_to_head_link():
    t = CommSpec(0.24).transport()
    assert t.per_job_transfer_mb == PER_JOB_TRANSFER_MB
    assert PER_JOB_TRANSFER_MB * 8 / t.head_bandwidth_mbps == pytest.approx(0.24)
    assert CommSpec(0).transport().per_job_transfer_mb == 0
    with pytest.raises(ValueError):
        CommSpec(-0.1)


@pytest.mark.parametrize("kwargs,field", [
    ({"n_jobs": -1}, "n_jobs"),
    ({"stimulate_s": 0}, "stimulate_s"),
    ({"fixed_wait_s": -1}, "fixed_wait_s"),
    ({"wait_jitter_s": 500}, "wait_jitter_s"),
    ({"app_refs": ()}, "app_refs"),
    ({"retry_limit": -1}, "retry_limit"),
])
def test_workload_errors_name_the_field(kwargs, field):
    with pytest.raises(ValueError, match=field):
        WorkloadSpec(**kwargs)


def test_cluster_errors_and_failed_nodes():
    with pytest.raises(ValueError, match="n_nodes"):
        ClusterSpec(0)
    with pytest.raises(ValueError, match="vms_per_node"):
        ClusterSpec(1, 0)
    mesh = build_mesh(ClusterSpec(3, node_failure_ids=frozenset({"node-001"})), CommSpec())
    assert mesh.members() == {"node-000", "node-002"}


def test_jobs_cycle_app_refs():
    jobs = WorkloadSpec(n_jobs=5, app_refs=("a", "b")).jobs()
    assert [j.app_ref for j in jobs] == ["a", "b", "a", "b", "a"]
    assert len({j.job_id for j in jobs}) == 5


def test_single_wave_takes_one_service_time():
    rep = simulate_run(ClusterSpec(2), WorkloadSpec(n_jobs=6), CommSpec(0), ip_fail_prob=0, seed=1)
    assert rep.wall_time_s == pytest.approx(520)
    assert (rep.jobs_done, rep.jobs_failed, rep.comm_time_s) == (6, 0, 0)
    assert all(u == pytest.approx(1.0) for u in rep.utilization.values())


def test_comm_adds_to_wall_time():
    rep = simulate_run(ClusterSpec(1), WorkloadSpec(n_jobs=3), CommSpec(0.24), ip_fail_prob=0, seed=1)
    assert rep.comm_time_s == pytest.approx(0.72)
    assert rep.wall_time_s > 520
    assert 0 < rep.comm_fraction < 0.01


def test_zero_jobs():
    rep = simulate_run(ClusterSpec(1), WorkloadSpec(n_jobs=0), seed=1)
    assert (rep.wall_time_s, rep.n_jobs, rep.throughput_per_hour, rep.comm_fraction) == (0, 0, 0, 0)


def test_keep_results_flag():
    rep = simulate_run(ClusterSpec(1), WorkloadSpec(n_jobs=2), seed=1, keep_results=True)
    assert len(rep.results) == 2 and rep.transitions
    assert simulate_run(ClusterSpec(1), WorkloadSpec(n_jobs=2), seed=1).results == []


def test_same_seed_same_report():
    a = simulate_run(ClusterSpec(3), SMALL, ip_fail_prob=0.2, seed=9)
    b = simulate_run(ClusterSpec(3), SMALL, ip_fail_prob=0.2, seed=9)
    assert (a.wall_time_s, a.jobs_failed, a.comm_time_s) == (b.wall_time_s, b.jobs_failed, b.comm_time_s)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 40), st.integers(0, 1000))
def test_wall_time_between_bounds_without_failures(n, jobs, seed):
    rep = simulate_run(ClusterSpec(n), WorkloadSpec(n_jobs=jobs), CommSpec(0), ip_fail_prob=0, seed=seed)
    assert rep.jobs_done == jobs
    assert rep.wall_time_s >= theoretical_runtime(jobs, n, 3, 520) - 1e-6
    # each later wave may wait up to one 5 s retry poll for a freed slot
    waves = -(-jobs // (3 * n))
    assert rep.wall_time_s <= wave_bound(jobs, 3 * n, 520) + 5.0 * max(waves - 1, 0) + 1e-6


def test_sweep_rows_csv_and_speedup():
    rows = sweep([4, 2, 1], workload=SMALL, comm=CommSpec(0), ip_fail_prob=0, seed=1)
    assert [r.n_nodes for r in rows] == [1, 2, 4]
    assert rows[0].speedup == pytest.approx(1.0)
    assert rows[1].speedup == pytest.approx(2.0, rel=0.01)
    assert rows[2].ideal_speedup == 4.0
    assert parallel_efficiency(rows, 4) == pytest.approx(rows[2].speedup / 4)
    parsed = list(csv.DictReader(io.StringIO(sweep_csv(rows))))
    assert tuple(parsed[0]) == SWEEP_COLUMNS
    assert [int(r["n_nodes"]) for r in parsed] == [1, 2, 4]


def test_speedup_pins_baseline_count():
    reps = [PerfReport(20, 1000.0, 0, 1, 0, 1), PerfReport(40, 500.0, 0, 1, 0, 1)]
    assert speedup(reps, 20) == [(20, 20.0, 20.0), (40, 40.0, 40.0)]
    with pytest.raises(ValueError):
        speedup(reps, 10)


def test_sweep_errors():
    with pytest.raises(ValueError):
        sweep([])
    with pytest.raises(ValueError):
        sweep([0, 2])


def test_figures_are_written_and_reproducible(tmp_path):
    rows = sweep([1, 2], workload=WorkloadSpec(n_jobs=6), comm=CommSpec(0.24), ip_fail_prob=0, seed=1)
    a = render_sweep_figures(rows, tmp_path / "a")
    b = render_sweep_figures(rows, tmp_path / "b")
    assert [p.name for p in a] == list(FIGURE_NAMES)
    for pa, pb in zip(a, b):
        data = pa.read_bytes()
        assert data.startswith(b"\x89PNG") and data == pb.read_bytes()
    assert not any(math.isnan(r.speedup) for r in rows)
