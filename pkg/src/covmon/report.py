"""Detection / benchmark reports: aligned text tables and lossless CSV."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

SAFE_ROW = "Safe Samples"
CSV_FIELDS = ("input", "detector", "samples", "accepted", "rejected", "accuracy")


@dataclass
class DetectionReport:
    """Per input type (rows) and detector (columns): accepted / rejected counts.

    Accuracy is the rejected fraction for unsafe rows and the accepted fraction
    for the safe row.
    """

    rows: list = field(default_factory=list)
    columns: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)  # (row, col) -> (accepted, rejected)

    def add(self, row, col, accepted: int, rejected: int):
        if row not in self.rows:
            self.rows.append(row)
        if col not in self.columns:
            self.columns.append(col)
        self.counts[row, col] = (int(accepted), int(rejected))

    def accuracy(self, row, col) -> float:
        acc, rej = self.counts[row, col]
        n = acc + rej
        if n == 0:
            return float("nan")
        return (acc if row == SAFE_ROW else rej) / n

    def records(self):
        for r in self.rows:
            for c in self.columns:
                if (r, c) in self.counts:
                    a, j = self.counts[r, c]
                    yield {"input": r, "detector": c, "samples": a + j, "accepted": a, "rejected": j,
                           "accuracy": self.accuracy(r, c)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in self.records():
            w.writerow(dict(rec, accuracy=repr(rec["accuracy"])))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DetectionReport":
        rep = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            rep.add(rec["input"], rec["detector"], int(rec["accepted"]), int(rec["rejected"]))
        return rep

    def to_text(self, digits: int = 3) -> str:
        header = ["Input"] + list(self.columns) + ["n"]
        body = []
        for r in self.rows:
            cells = [r]
            n = ""
            for c in self.columns:
                if (r, c) in self.counts:
                    cells.append(f"{self.accuracy(r, c):.{digits}f}")
                    n = str(sum(self.counts[r, c]))
                else:
                    cells.append("-")
            body.append(cells + [n])
        return format_table(header, body)

    def __eq__(self, other):
        return (isinstance(other, DetectionReport) and self.rows == other.rows
                and self.columns == other.columns and self.counts == other.counts)


def format_table(header, rows) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)] if header else []

    def line(cells):
        return "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                         for i, (c, w) in enumerate(zip(cells, widths))).rstrip()

    out = [line(header), "  ".join("-" * w for w in widths)]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def records_to_csv(records, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in records:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def records_to_text(records, fields, digits: int = 4) -> str:
    def fmt(v):
        return f"{v:.{digits}g}" if isinstance(v, float) else str(v)

    return format_table(list(fields), [[fmt(r.get(f, "")) for f in fields] for r in records])
