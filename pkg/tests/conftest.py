import pytest

from statebench import faults
from statebench.backends import StoreProvider, get_backend, registry_list

# small tuning so a few hundred writes exercise flushes, compactions and splits
SMALL_OPTIONS = {
    "memory": {},
    "lsm": {"memtable_bytes": 4096, "tier_fanout": 3},
    "btree": {"max_entries": 4, "inline_limit": 16},
}

BACKENDS = [d.name for d in registry_list()]
DURABLE = [d.name for d in registry_list() if d.durable]

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _no_armed_faults():
    faults.disarm()
    yield
    faults.disarm()


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture(params=DURABLE)
def durable_backend(request):
    return request.param


@pytest.fixture
def make_provider(tmp_path):
    providers = []

    def make(name, small=True, **options):
        opts = {**(SMALL_OPTIONS[name] if small else {}), **options}
        p = StoreProvider(get_backend(name), tmp_path / name, **opts)
        providers.append(p)
        return p

    yield make
    for p in providers:
        p.close()


@pytest.fixture
def store(make_provider, backend):
    return make_provider(backend).open("ledger", sync=False)


@pytest.fixture
def acceptance_report():
    def record(criterion: str, passed: bool, detail: str = ""):
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
