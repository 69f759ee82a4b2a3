import re


def pytest_terminal_summary(terminalreporter):
    # surface the acceptance PASS/FAIL lines even when output is captured
    found = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            for line in rep.capstdout.splitlines():
                m = re.match(r"(PASS|FAIL) criterion (\d+):", line)
                if m:
                    found.append((int(m.group(2)), line))
    if found:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(found):
            terminalreporter.write_line(line)
