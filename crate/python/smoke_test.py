"""Smoke test for the ordelta_py extension module.

Build and install first:

    cd crates/py && maturin build --release -o dist && pip install dist/*.whl
"""

import math

import ordelta_py as od


def main():
    full, masked = od.simulate_data("nonhier-extreme", rep=0)
    assert full.n == masked.n == 2000
    assert full.n_missing == 0 and masked.n_missing > 0
    print(masked)

    fit = od.fit_ordinal(masked)
    assert len(fit["zeta"]) == masked.k - 1
    assert all(a < b for a, b in zip(fit["zeta"], fit["zeta"][1:]))

    mar = od.impute(masked, m=5, seed=7)
    again = od.impute(masked, m=5, seed=7)
    assert mar.copies == again.copies, "imputation is not reproducible"
    observed = [(i, v) for i, v in enumerate(masked.x1) if v is not None]
    for copy in mar.copies:
        assert all(copy[i] == v for i, v in observed)
    print(mar)

    adjusted = od.adjust(masked, mar, [0, 0, 0, -2], seed=7)
    base = od.profiles(masked, mar)[0]["proportions"]
    shifted = od.profiles(masked, adjusted, label="MNAR")[0]["proportions"]
    assert abs(sum(shifted) - 1.0) < 1e-12
    assert shifted[-1] > base[-1], "a negative last delta should move mass to the top category"
    print("top-category share", round(base[-1], 3), "->", round(shifted[-1], 3))

    fits = od.analyze(masked, adjusted)
    pooled = od.pool(fits)
    for row in pooled["rows"]:
        assert row["t"] >= row["w"]
        assert math.isfinite(row["se"])
    print("pooled terms", [r["name"] for r in pooled["rows"]])

    grid = [{"label": "d2", "delta": {"default": [0, 0, 0, -2]}}]
    scan = od.delta_scan(masked, mar, grid, seed=3)
    assert [p["scenario"] for p in scan] == ["MAR", "d2"]

    report = od.simulate("nonhier-extreme", r=2, m=2, seed=11)
    assert report["metadata"]["replications_used"] == 2

    assert abs(od.icc(0.45) - 0.0580) < 1e-4
    try:
        od.adjust(masked, mar, [0, 0], seed=1)
    except ValueError as e:
        print("rejected bad delta:", e)
    else:
        raise AssertionError("a delta of the wrong length must be rejected")

    print("ok", od.__version__)


if __name__ == "__main__":
    main()
