"""Smoke test for the `nesy` extension module.

Build and install first, e.g. `pip install maturin && maturin develop -m crates/py/Cargo.toml`.
"""

import json
import sys

import nesy


def main() -> int:
    rows = [[1, 0], [1, 0], [1, 0], [0, 1], [0, 1], [0, 1]]
    labels = ["a", "a", "a", "b", "b", "b"]
    rs = nesy.fold_sem(rows, labels)
    print(rs.render(), end="")
    assert rs.size == 4, rs.size
    assert rs.classify([0]) == "a"
    assert rs.classify([1]) == "b"
    assert rs.classify([]) is None

    parsed = nesy.RuleSet.parse("target(X,'a') :- 0(X), not ab1(X).\nab1(X) :- 1(X).\n")
    assert parsed.classify([0]) == "a"
    assert parsed.classify([0, 1]) is None
    tree = json.loads(parsed.justify([0], as_json=True))
    assert tree["rule"].startswith("target(X,'a')"), tree

    ledger = json.loads(nesy.check_claims())
    assert all(e["pass"] for e in ledger["entries"]), ledger
    assert nesy.round_half_up(86.5) == 87

    try:
        nesy.RuleSet.parse("target(X,'a') :- not ab1(X).\nab1(X) :- not ab1(X).\n")
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("unstratified program accepted")

    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
