"""Smoke test for the frogsim extension module.

Build and install with
    pip install --no-build-isolation ./crates/python
then run
    python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import frogsim


def check_tree():
    tree = frogsim.Tree({"kind": "dary", "d": 3})
    assert tree.children("r.0.2") == 3
    lo, hi = tree.hit_parent_prob("r.0", 30)
    assert lo <= 1 / 3 <= hi and hi - lo < 1e-6
    text = tree.truncate(2).splitlines()
    assert text[0] == "r\t3" and len(text) == 13
    for _, f in tree.first_hit_level(3):
        assert math.isclose(f, 3.0**-3, rel_tol=1e-12)


def check_engines():
    tree = frogsim.Tree({"kind": "gw", "offspring": {"law": "two_point", "a": 2, "b": 3, "q": 0.5}}, seed=4)
    stats = frogsim.run_fm(tree, 9, {"lambda": 0.3, "horizon": 200})
    assert stats["root_returns_by_time"][-1] == stats["total_root_returns"]
    out = frogsim.coupled_run(tree, 0.5, 9, {"horizon": 200, "max_active": 2000})
    assert out["z1"] >= out["z2"] and out["audit"]["dominance"]
    check = frogsim.contraction_check({"schedule": "regular", "k": 2, "eta_mean": 0.1}, 200)
    assert check["pass"] and check["worst_ratio"] <= check["m"] + 1e-12
    traj = frogsim.run_brw(
        frogsim.Tree({"kind": "dary", "d": 2}),
        {"schedule": "regular", "k": 2, "eta_mean": 0.1},
        {"law": "poisson", "mean": 0.1},
        3,
        {"horizon": 20},
    )
    assert traj["rows"][0]["w"] == 1.0


def check_harness():
    spec = """
experiment = "phase_sweep"
lambda_grid = [0.02, 0.05]
horizons = [100, 200]
replicas = 10
"""
    with tempfile.TemporaryDirectory() as d:
        res = frogsim.run_experiment(spec, d)
        assert res["records"] == 20 and res["abort_rate"] == 0.0
        again = frogsim.run_experiment(spec)
        assert json.dumps(res["summary"]) == json.dumps(again["summary"])
        rep = frogsim.verify(str(Path(d) / "records.jsonl"), 1.0)
        assert rep["checked"] == 20 and not rep["mismatches"]
    r = frogsim.bisect({"lo": 0.4, "hi": 0.4})
    assert (r["lo"], r["hi"]) == (0.4, 0.4)
    try:
        frogsim.run_experiment("replicas = 0")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid spec accepted")


if __name__ == "__main__":
    check_tree()
    check_engines()
    check_harness()
    print("smoke test ok")
