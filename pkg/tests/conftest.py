import pytest

from nas_tracksearch.space import Space, random_genome

BASE = random_genome(2024)


def small_space(base=BASE, **overrides) -> Space:
    """Single-choice space around ``base`` with some genes opened up.

    ``backbone`` and ``head_layers`` take ``{index: choices}`` maps.
    """
    bb = {i: (v,) for i, v in enumerate(base.backbone)}
    bb.update(overrides.pop("backbone", {}))
    hl = {i: (base.cls.layers[i],) for i in range(7)}
    hl.update(overrides.pop("head_layers", {}))
    kw = dict(output_layers=(base.output_layer,), head_channels=(base.cls.channels,),
              head_first_kernels=(base.cls.first_kernel,))
    kw.update(overrides)
    return Space.reduced(backbone=bb, head_layers=hl, **kw)


@pytest.fixture(scope="session")
def store():
    return _shared_store()


_STORE = {}


def _shared_store():
    """Seed-0 full store shared with hypothesis tests, which cannot take fixtures."""
    if "s" not in _STORE:
        from nas_tracksearch.supernet import init_weights

        _STORE["s"] = init_weights(seed=0)
    return _STORE["s"]


# -- acceptance summary -----------------------------------------------------

_CRITERIA: dict[int, list] = {}
_NAMES = {
    1: "cardinality", 2: "space extrema", 3: "cost oracle equality", 4: "budget presets",
    5: "oracle equivalence", 6: "sampling uniformity", 7: "shape contract",
    8: "batch-norm recalibration", 9: "proxy pipeline",
}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when != "call" and not report.failed:
        return
    number = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
    _CRITERIA.setdefault(number, []).append(report)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        reports = _CRITERIA[number]
        ok = all(r.passed for r in reports)
        detail = ""
        if not ok:
            failed = next(r for r in reports if not r.passed)
            crash = getattr(failed.longrepr, "reprcrash", None)
            detail = f"  ({crash.message.splitlines()[0]})" if crash else ""
        seconds = sum(r.duration for r in reports)
        terminalreporter.write_line(
            f"criterion {number} [{_NAMES[number]}]: {'PASS' if ok else 'FAIL'} in {seconds:.1f}s{detail}")
