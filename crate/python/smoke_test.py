"""Smoke test for the Python bindings.

Builds the extension with cargo if `pyctflow` is not importable, then checks
a few results against closed forms. Run from anywhere:

    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        import pyctflow

        return pyctflow
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "ctflow-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    build = tempfile.mkdtemp()
    shutil.copy(os.path.join(ROOT, "target", "release", "libpyctflow.so"), os.path.join(build, "pyctflow.so"))
    sys.path.insert(0, build)
    import pyctflow

    return pyctflow


def main():
    ct = load()

    assert "ou" in ct.target_names()

    mean, var = ct.ou_moments(3.0, 4.0, 2.0)
    assert abs(mean - 3.0 * math.exp(-1.0)) < 1e-12
    assert abs(var - (1.0 + 3.0 * math.exp(-2.0))) < 1e-12

    # a shifted copy is transported by its shift
    a = [[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]]
    b = [[x + 3.0, y] for x, y in a]
    assert abs(ct.wasserstein(a, b, 1) - 3.0) < 1e-12
    assert abs(ct.wasserstein(a, b) - 3.0) < 1e-12

    start = [[3.0]] * 2000
    end = ct.simulate("ou", start, 0.01, 200, 1)
    m = sum(z[0] for z in end) / len(end)
    assert abs(m - 3.0 * math.exp(-1.0)) < 0.1, m
    assert end == ct.simulate("ou", start, 0.01, 200, 1)

    try:
        ct.simulate("banana", start, 0.01, 10, 1)
    except ValueError as e:
        assert "banana" in str(e)
    else:
        raise AssertionError("unknown target accepted")

    spec = """
version = 1
target = "ou"
seeds = [3]
output = "ignored"

[experiment]
kind = "mse_rate"
ks = [10, 40]
c = 1.0
repetitions = 20
initial_mean = 0.0
initial_variance = 0.0
test_function = { coordinate = 0 }
"""
    with tempfile.TemporaryDirectory() as out:
        manifest = json.loads(ct.run_spec(spec, os.path.join(out, "run")))
        assert manifest["kind"] == "mse_rate"
        assert {f["path"] for f in manifest["files"]} == {"spec.toml", "seed-3/mse.csv"}

    failed = [c for c in ct.selftest() if not c[1]]
    assert not failed, failed
    print("python smoke test passed")


if __name__ == "__main__":
    main()
