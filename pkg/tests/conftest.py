"""Shared pytest config: per-criterion summary lines for the acceptance suite."""

import re

CRITERIA = {
    1: "gradient suite vs central finite differences",
    2: "partition/alignment invariants on random triples",
    3: "prompt-attention degeneracy",
    4: "budget loss prevents granularity collapse",
    5: "ETTh1 96->96 accuracy reproduction",
    6: "patch-structure trends on ETT data",
    7: "exact Wilcoxon oracle and reference tables",
    8: "training determinism and evaluation batch invariance",
}

_RANKS = {"passed": 1, "skipped": 2, "failed": 3, "error": 3}
_LABELS = {0: "NOT RUN", 1: "PASS", 2: "SKIP", 3: "FAIL"}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = {}
    for status, rank in _RANKS.items():
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            match = re.search(r"test_acceptance\.py.*criterion_(\d+)", nodeid)
            if match:
                n = int(match.group(1))
                results[n] = max(results.get(n, 0), rank)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(
            f"CRITERION {n} ({CRITERIA[n]}): {_LABELS[results.get(n, 0)]}"
        )
