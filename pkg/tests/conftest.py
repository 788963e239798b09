import collections

# (criterion, description, passed, detail) rows filled in by test_acceptance
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    grouped = collections.defaultdict(list)
    for row in ACCEPTANCE_RESULTS:
        grouped[row[0]].append(row)
    for n in sorted(grouped):
        rows = grouped[n]
        ok = all(r[2] for r in rows)
        detail = "; ".join(f"{r[1]}: {'ok' if r[2] else 'failed'}, {r[3]}" for r in rows)
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
