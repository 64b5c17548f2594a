"""Smoke test for the nijlab Python bindings.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import json

import nijlab


def test_standard_energies_vanish():
    e = nijlab.energies("standard")
    assert e["N"] <= 1e-24 and e["Ntilde"] <= 1e-24


def test_shear_energy_positive_and_density_matches():
    e = nijlab.energies("shear", res=8)
    assert e["N"] > 1e-3
    dens = nijlab.nijenhuis_density("shear", res=8)
    assert len(dens) == 8**4
    assert abs(sum(dens) / 8**4 - e["N"]) <= 1e-12 * e["N"]


def test_grad_check():
    for r in nijlab.grad_check("shear", "N", eps=1e-4, directions=2):
        assert r["rel_err"] <= 1e-6


def test_coords_exact_and_rejects_bad_input():
    n = 2
    def tensor(seed):
        return [[[[[(seed + k + 2 * l + 3 * m) % 5 - 2, 1 + (k + m) % 3], [(k * l + m) % 3 - 1, 2]] for m in range(n)] for l in range(n)] for k in range(n)]
    doc = {"n": n, "a": tensor(1), "a_prime": tensor(2), "tau": tensor(3)}
    out = nijlab.coords(json.dumps(doc))
    assert out["exact"] is True
    try:
        nijlab.coords(json.dumps({"n": 2}))
    except ValueError:
        pass
    else:
        raise AssertionError("missing fields accepted")


def test_verify_and_cli():
    checks = nijlab.verify("coords", seed=1)
    assert checks and all(c["passed"] for c in checks)
    assert nijlab.run_cli(["verify", "--suite", "nijenhuis"]) == 0
    assert nijlab.run_cli(["frobnicate"]) == 1


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name}: ok")
