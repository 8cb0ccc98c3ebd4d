import io
import json
import statistics

import pytest
from hypothesis import given, strategies as st

from lpjsched.queueing import LPJ, TraceError, TraceJob, oracle_predictor
from lpjsched.sim import (BENCH_FIELDS, BenchConfig, LpjConfig, SimConfig, TraceConfig, benchmark, dump_trace,
                          generate_trace, load_settings, load_trace, replay, write_bench_csv)
from lpjsched.topology import build_topology, topology_spec
from lpjsched.workload import JobSpec

TOPO = build_topology(topology_spec([16] * 4))


def small_trace(seed=0, jobs=60, lead=2 * 3600, **kw):
    return generate_trace(TraceConfig(jobs=jobs, arrival_rate=40, max_nodes=10, seed=seed,
                                      lpj=LpjConfig(dp=24, tp=4, pp=4, announce_time=1800, lead_time=lead,
                                                    duration=3600), **kw))


def test_empty_trace():
    res = replay([], TOPO)
    assert len(res.log) == 0 and res.series == [] and res.violations == []


def test_single_job_lifecycle():
    res = replay([TraceJob("a", 5, 100, 3)], TOPO)
    assert [(e.time, e.kind) for e in res.log.events] == [(5, "Submit"), (30, "Schedule"), (130, "Complete")]


def test_event_tie_order_and_delay():
    trace = [TraceJob("big", 0, 100, 64), TraceJob("next", 0, 50, 1)]
    res = replay(trace, TOPO)
    kinds = [(e.time, e.kind, e.job) for e in res.log.events]
    assert kinds[:3] == [(0, "Submit", "big"), (0, "Submit", "next"), (0, "Schedule", "big")]
    assert (0, "Delay", "next") in kinds
    assert (100, "Complete", "big") in kinds and (120, "Schedule", "next") in kinds


def test_replay_rejects_bad_traces():
    with pytest.raises(TraceError):
        replay([TraceJob("a", 5, 1, 1), TraceJob("b", 1, 1, 1)], TOPO)
    with pytest.raises(TraceError):
        replay([TraceJob("a", 1, 1, 1), TraceJob("a", 2, 1, 1)], TOPO)
    with pytest.raises(TraceError):
        replay([TraceJob("a", 1, 1, 65)], TOPO)
    spec = JobSpec.from_parallelism(12, 4, 2)
    two = [TraceJob("L1", 0, 10, 12, kind=LPJ, spec=spec, arrival_time=100),
           TraceJob("L2", 50, 10, 12, kind=LPJ, spec=spec, arrival_time=200)]
    with pytest.raises(TraceError):
        replay(two, TOPO)
    with pytest.raises(ValueError):
        replay([], TOPO, SimConfig(interval=0))


def _check_log(trace, res):
    events = res.log.events
    assert [e.time for e in events] == sorted(e.time for e in events)
    submitted = {j.id for j in trace}
    assert {e.job for e in res.log.of_kind("Submit")} == submitted
    # every start ends by completion or preemption; every job eventually completes
    starts = [e.job for e in res.log.of_kind("Schedule")]
    ends = [e.job for e in events if e.kind in ("Complete", "Preempt")]
    assert sorted(starts) == sorted(ends)
    assert {e.job for e in res.log.of_kind("Complete")} == submitted
    # capacity safety: replay node ownership over time
    owner = {}
    for e in events:
        if e.kind == "Schedule":
            for n in e.detail["nodes"]:
                assert n not in owner, f"node {n} double-booked at {e.time}"
                owner[n] = e.job
        elif e.kind in ("Complete", "Preempt"):
            for n in [n for n, j in owner.items() if j == e.job]:
                del owner[n]
    assert owner == {}
    preempted = {e.job for e in res.log.of_kind("Preempt")}
    assert all(j.preemptable for j in trace if j.id in preempted)


@given(st.integers(0, 10_000))
def test_replay_properties(seed):
    trace = small_trace(seed, jobs=40)
    res = replay(trace, TOPO, SimConfig(alpha=0.5))
    _check_log(trace, res)
    for row in res.series:
        assert 0 <= row.retention_rate <= 1 and 0 <= row.allocation_rate <= 1


def test_replay_deterministic():
    trace = small_trace(7, jobs=120)
    a = replay(trace, TOPO, SimConfig(alpha=0.3), oracle_predictor(noise=2, seed=1))
    b = replay(trace, TOPO, SimConfig(alpha=0.3), oracle_predictor(noise=2, seed=1))
    assert a.log.to_jsonl() == b.log.to_jsonl() and a.series == b.series


def test_oracle_keeps_zone_clean():
    trace = small_trace(3, jobs=150)
    res = replay(trace, TOPO, SimConfig(alpha=0.5))
    assert res.retention_at_arrival == 0 and res.violations == []
    lpj_start = [e for e in res.log.of_kind("Schedule") if e.job == "lpj0"]
    assert lpj_start and lpj_start[0].time == 1800 + 2 * 3600


def test_generate_trace_examples(tmp_path):
    only = generate_trace(TraceConfig(arrival_rate=0, lpj=LpjConfig()))
    assert [j.id for j in only] == ["lpj0"] and only[0].nodes == 96 and only[0].arrival_time == 3600 + 4 * 3600
    assert dump_trace(small_trace(5)) == dump_trace(small_trace(5))
    assert dump_trace(small_trace(5)) != dump_trace(small_trace(6))
    big = generate_trace(TraceConfig(jobs=10_000, mean_duration=3600, duration_sigma=1.0, seed=11))
    assert statistics.fmean(j.duration for j in big) == pytest.approx(3600, rel=0.05)
    assert statistics.fmean(j.nodes for j in big) == pytest.approx(1 / 0.3, rel=0.05)
    with pytest.raises(ValueError):
        TraceConfig(arrival_rate=-1)
    path = tmp_path / "t.jsonl"
    path.write_text(dump_trace(small_trace(5)))
    assert load_trace(path) == small_trace(5)


def test_load_trace_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps(TraceJob("a", 0, 10, 1).to_dict())
    path.write_text(good + "\n\n" + '{"id": "b", "submit_time": 1, "duration": -4, "nodes": 1}\n')
    with pytest.raises(TraceError, match=r"bad.jsonl:3"):
        load_trace(path)
    path.write_text("not json\n")
    with pytest.raises(TraceError, match=r":1"):
        load_trace(path)
    path.write_text('{"id": "a"}\n')
    with pytest.raises(TraceError, match=r":1"):
        load_trace(path)


def test_bundled_settings():
    s = load_settings()
    assert [x.minipods for x in s] == [(6, 6, 6), (88, 88, 88, 87, 87), (93,) * 7 + (92,) * 4]
    assert [(x.dp, x.tp, x.pp) for x in s] == [(12, 4, 2), (24, 4, 8), (46, 8, 8)]
    assert [sum(x.minipods) for x in s] == [18, 438, 1019]


def test_benchmark_rows_and_csv():
    settings = load_settings()[:1]
    rows = benchmark(settings, ["arnold", "bestfit", "gpupack", "topoaware", "random", "enum"], [0.0, 0.5])
    assert len(rows) == 12 and all(r.status == "ok" for r in rows)
    out = io.StringIO()
    write_bench_csv(rows, out, timing=False)
    lines = out.getvalue().splitlines()
    assert lines[0] == ",".join(BENCH_FIELDS) and len(lines) == 13
    assert lines[1].startswith("i,arnold,0,1,")
    empty = io.StringIO()
    write_bench_csv(benchmark(settings, [], [0.0]), empty)
    assert empty.getvalue() == ",".join(BENCH_FIELDS) + "\n"


def test_benchmark_enum_timeout_row():
    ii = load_settings()[1]
    rows = benchmark([ii], ["enum"], [0.5], BenchConfig(time_limit=0.2))
    assert rows[0].status == "timeout" and rows[0].score is None


def test_benchmark_parallel_matches_serial():
    settings = load_settings()[:1]
    serial = benchmark(settings, ["arnold", "bestfit"], [0.1, 0.3])
    parallel = benchmark(settings, ["arnold", "bestfit"], [0.1, 0.3], jobs=2)
    assert [r.cells(False) for r in serial] == [r.cells(False) for r in parallel]
