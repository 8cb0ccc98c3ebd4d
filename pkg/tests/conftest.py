import pytest
from hypothesis import HealthCheck, settings

from lpjsched.topology import AllocationState, Occupied, build_topology, topology_spec

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def cluster(free):
    """Topology whose minipods have exactly ``free`` free nodes (0 allowed)."""
    topo = build_topology(topology_spec([max(1, c) for c in free]))
    state = AllocationState.empty(topo).apply(
        (topo.minipods[j].nodes[0], Occupied("other")) for j, c in enumerate(free) if c == 0)
    return topo, state


@pytest.fixture
def setting_i():
    topo = build_topology(topology_spec([6, 6, 6]))
    return topo, AllocationState.empty(topo)


ACCEPTANCE = {}


def record(number, ok, detail):
    """Log an acceptance outcome for the summary, then assert it."""
    ACCEPTANCE[number] = (ok, detail)
    assert ok, f"criterion {number}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
