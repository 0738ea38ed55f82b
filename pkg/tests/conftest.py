import sys

CRITERIA = {
    1: "gradient suite",
    2: "causality suite",
    3: "formula fixtures",
    4: "DTW oracle",
    5: "ablation direction",
    6: "conditional batch norm",
    7: "pairwise beats the resampled source",
    8: "forward-attention bound",
    9: "identity mapping",
    10: "determinism",
}


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if module is None:
        return
    results = module.RESULTS
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n in results:
            passed, detail = results[n]
            terminalreporter.write_line(f"[{n:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        else:
            terminalreporter.write_line(f"[{n:2d}] FAIL  {title}: no result recorded")
