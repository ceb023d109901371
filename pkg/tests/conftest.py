import csv

import numpy as np
import pytest

from flowtext.ingest import INSDN_COLUMNS, SOCKET_FEATURES


def insdn_row(rng, label="Normal"):
    row = []
    for col in INSDN_COLUMNS:
        if col == "Label":
            row.append(label)
        elif col == "Flow ID":
            row.append("10.0.0.1-10.0.0.2-80-5555-6")
        elif col in ("Src IP", "Dst IP"):
            row.append("10.0.0.%d" % rng.integers(1, 250))
        elif col == "Timestamp":
            row.append("30/11/2020 12:00")
        else:
            row.append(str(int(rng.integers(0, 5000))))
    return row


@pytest.fixture
def insdn_csv(tmp_path):
    """Factory writing an 84-column InSDN-style file."""

    def make(n_rows=100, labels=None, corrupt=None, name="insdn.csv"):
        rng = np.random.default_rng(0)
        path = tmp_path / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            # the public files carry stray spaces in some header names
            w.writerow([" " + c if i % 9 == 0 else c for i, c in enumerate(INSDN_COLUMNS)])
            for i in range(n_rows):
                label = labels[i] if labels else ("Normal" if i % 2 else "DDoS")
                row = insdn_row(rng, label)
                if corrupt and i in corrupt:
                    row[INSDN_COLUMNS.index("Flow Duration")] = corrupt[i]
                w.writerow(row)
        return path

    return make


assert len(SOCKET_FEATURES) == 7


# ---------------------------------------------------------------------------
# acceptance verdict lines
# ---------------------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
