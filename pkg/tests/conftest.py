import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            num, name = int(m.group(1)), m.group(2)
            entry = lines.setdefault(num, {"name": name, "ok": True, "detail": []})
            # parametrised criteria pass only if every variant passes
            entry["ok"] &= outcome == "passed"
            entry["detail"] += [f"{k}={v}" for k, v in rep.user_properties]
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            e = lines[num]
            detail = "; ".join(e["detail"])
            status = "PASS" if e["ok"] else "FAIL"
            terminalreporter.write_line(f"criterion {num:2d} {status}  {e['name']}" + (f"  [{detail}]" if detail else ""))
