import pytest

from windtunnel.harness import ExperimentSpec


def tiny_dict(**over):
    d = {
        "name": "tiny",
        "seed": 1,
        "seq_len": 16,
        "model": {"d_m": 32, "d_ff": 64, "d_h": 16, "n_q": 2, "n_kv": 1, "n_layers": 1, "vocab": 256},
        "schedule": {"kind": "wsd", "eta": 0.01, "W": 5, "T": 20, "S": 30, "half_life": 3},
        "batch_ramp": 64,
        "sources": {"main": {"synthetic": {"seed": 7, "n_bytes": 20000}},
                    "alt": {"synthetic": {"seed": 8, "n_bytes": 20000, "order": 1}}},
        "corpus": {"stable": {"main": 1.0}, "decay": {"main": 0.5, "alt": 0.5}},
        "eval": {"sources": ["main"], "every": 10, "windows": 8},
        "probes": {"cadence": 1},
        "checkpoints": [10, 20],
    }
    d.update(over)
    return d


def tiny_spec(**over):
    return ExperimentSpec.from_dict(tiny_dict(**over))


@pytest.fixture
def spec():
    return tiny_spec()


# -- acceptance summary ----------------------------------------------------------
#
# Tests tagged ``@pytest.mark.criterion(n, title)`` get one summary line each;
# a test may add context with ``record_property("detail", text)``.

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if rep.passed:
            status = "PASS"
        elif hasattr(rep, "wasxfail"):
            status = "FAIL (known, see ledger)"
        else:
            status = "FAIL"
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:2d}: {status} - {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
