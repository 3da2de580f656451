"""Smoke test for the `igsaft` extension module.

Build and run from the repository root:

    cargo build --release -p igsaft-python --features extension-module
    cp target/release/libigsaft.so python/igsaft.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import igsaft  # noqa: E402


def main():
    data = igsaft.simulate_dataset(case=1, n=1500, p=5, cr=0.2, seed=3)
    assert len(data) == 1500 and data.p == 5
    assert abs(data.censoring_rate - 0.2) < 0.05

    cfg = igsaft.FitConfig(families=["el", "cue"], km_conditioning="d_only")
    res = igsaft.fit(data, cfg)
    print(res)
    assert abs(res.beta_hat - 1.0) < 0.3
    lo, hi = res.ci
    assert lo < res.beta_hat < hi
    est, se = res.exp_beta
    assert math.isclose(est, math.exp(res.beta_hat))
    assert [e[0] for e in res.estimates()] == ["EL", "CUE"]
    report = json.loads(res.to_json())
    assert report["m"] == res.m

    # round trip through a CSV file and the JSON config
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "d.csv")
        z = data.instruments()
        with open(path, "w") as fh:
            fh.write("t,s,d," + ",".join(f"z{j + 1}" for j in range(data.p)) + "\n")
            for t, s, d, zi in zip(data.time(), data.status(), data.exposure(), z):
                fh.write(f"{t!r},{int(s)},{d!r}," + ",".join(repr(v) for v in zi) + "\n")
        again = igsaft.Dataset.from_csv(path, "t", "s", "d", [f"z{j + 1}" for j in range(data.p)])
        res2 = igsaft.fit(again, igsaft.FitConfig.from_json(cfg.to_json()))
        assert res2.beta_hat == res.beta_hat

    try:
        igsaft.FitConfig(families=["gmm"])
    except ValueError as err:
        print("rejected bad family:", err)
    else:
        raise AssertionError("bad family accepted")

    print(igsaft.monte_carlo(n=500, p=4, reps=2))
    print("smoke test passed")


if __name__ == "__main__":
    main()
