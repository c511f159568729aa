"""Freeze reference base scores for every CVSS v3.1 base vector.

Uses the third-party ``cvss`` package as an independent reference. Run once;
the output fixture is checked in and the package is not a runtime dependency.
"""
import itertools
import json
import sys

from cvss import CVSS3

LABELS = [
    ("AV", "NALP"), ("AC", "LH"), ("PR", "NLH"), ("UI", "NR"),
    ("S", "UC"), ("C", "NLH"), ("I", "NLH"), ("A", "NLH"),
]


def main(out):
    rows = {}
    for combo in itertools.product(*(labels for _, labels in LABELS)):
        vec = "CVSS:3.1/" + "/".join(f"{m}:{v}" for (m, _), v in zip(LABELS, combo))
        c = CVSS3(vec)
        rows[vec] = {
            "base": float(c.base_score),
            "impact": float(c.isc),
            "exploitability": float(c.esc),
        }
    with open(out, "w") as fh:
        json.dump(rows, fh, indent=0, sort_keys=True)
    print(len(rows), "vectors written to", out)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/cvss31_reference_scores.json")
