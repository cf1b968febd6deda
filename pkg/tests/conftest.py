import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): part of numbered acceptance criterion n")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = item.config._criteria.setdefault(n, {"title": title, "parts": {}, "seconds": 0.0})
    entry["seconds"] += rep.duration
    if rep.when == "call" or rep.outcome != "passed":
        # an expected failure still fails the criterion
        ok = rep.outcome == "passed" and not hasattr(rep, "wasxfail")
        notes = [str(v) for k, v in item.user_properties if k == "detail"]
        prev = entry["parts"].get(item.name, (True, []))
        entry["parts"][item.name] = (prev[0] and ok, notes or prev[1])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        e = crit[n]
        ok = all(p[0] for p in e["parts"].values())
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {e['title']}  "
                                    f"[{e['seconds']:.1f} s]")
        for name, (part_ok, notes) in e["parts"].items():
            extra = f"  ({'; '.join(notes)})" if notes else ""
            terminalreporter.write_line(f"    {'ok  ' if part_ok else 'FAIL'} {name}{extra}")
