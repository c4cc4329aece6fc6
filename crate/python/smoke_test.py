"""Smoke test for the trinode extension module.

Build and run from the workspace root:

    cargo build -p trinode-py --release --features extension-module
    cp target/release/libtrinode.so python/trinode.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import trinode  # noqa: E402


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    print("trinode", trinode.version())

    ab = trinode.link_budget("ab")
    assert close(ab["combined"], 0.191, 0.005), ab
    bc = trinode.link_budget("bc")
    assert close(bc["combined"], 0.186, 0.005), bc

    ghz = trinode.analyze_ghz()
    assert close(ghz["fidelity"], 0.594, 0.01), ghz
    assert set(ghz["correlators"]) == {"IZZ", "ZIZ", "ZZI", "XXX", "XYY", "YXY", "YYX"}

    swap = trinode.analyze_swap()
    assert 0.5 < swap["fidelity_any"] < 1.0, swap

    # the reference config round-trips through a dict
    cfg = trinode.reference_config()
    again = trinode.analyze_ghz(cfg)
    assert close(again["fidelity"], ghz["fidelity"], 1e-12)

    s = trinode.run_batch_summary("ghz", 20000, seed=7)
    assert s == trinode.run_batch_summary("ghz", 20000, seed=7)
    f = s["fidelity"]
    assert abs(f["mean"] - ghz["fidelity"]) <= 4 * f["sem"] + 1e-3, f

    corrected = trinode.correct_readout([880, 120], [(0.928, 0.994)])
    assert close(sum(corrected["probabilities"]), 1.0, 1e-12)

    assert close(trinode.ghz_fidelity([1, 1, 1, 1, -1, -1, -1]), 1.0, 1e-15)
    assert close(trinode.bell_fidelity(1, 1, -1, "psi+"), 1.0, 1e-15)

    n = [0, 500, 1000, 2000, 3000, 4000]
    y = [0.9 * math.exp(-((x / 2000) ** 1.5)) for x in n]
    fit = trinode.fit_memory_decay(n, y, [0.01] * len(n))
    assert close(fit["n_1e"], 2000, 1.0), fit

    bundle = trinode.reproduce("table-s4", runs=2000)
    assert bundle["comparisons"], bundle

    try:
        trinode.run_batch_summary("triangle", 10)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown protocol accepted")

    print("smoke test OK")


if __name__ == "__main__":
    main()
