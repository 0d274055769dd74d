"""Smoke test for the lowrank_py extension.

Builds the extension with cargo if it is not importable, then runs a small
rank-1 pipeline end to end.
"""

import importlib
import json
import math
import pathlib
import shutil
import subprocess
import sys
import sysconfig
import tempfile

CRATE = pathlib.Path(__file__).resolve().parents[1]


def load_module():
    try:
        return importlib.import_module("lowrank_py")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "lowrank-py", "--features", "extension-module"],
        cwd=CRATE,
        check=True,
    )
    meta = subprocess.run(
        ["cargo", "metadata", "--format-version", "1", "--no-deps"],
        cwd=CRATE,
        check=True,
        capture_output=True,
        text=True,
    ).stdout
    target = pathlib.Path(json.loads(meta)["target_directory"]) / "release"
    built = next(p for p in (target / "liblowrank_py.so", target / "liblowrank_py.dylib") if p.exists())
    out = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(built, out / ("lowrank_py" + sysconfig.get_config_var("EXT_SUFFIX")))
    sys.path.insert(0, str(out))
    return importlib.import_module("lowrank_py")


def main():
    lr = load_module()

    assert abs(lr.oscillator(2, 1.0)) < 1e-15
    assert lr.basis_size(2, 3) == 10
    assert abs(lr.linearization_coeff(1, 1, 2) - math.sqrt(2)) < 1e-12

    inst = lr.Instance.phase_retrieval(20, 1, seed=3)
    truth = inst.truth
    batch = inst.sample(2000, seed=4)
    assert len(batch) == 2000
    assert inst.prediction_error(truth, batch) < 1e-20
    assert lr.Parameters.from_json(truth.to_json()).to_json() == truth.to_json()

    frame = lr.trimmed_pca(inst, 1, seed=5, samples_per_round=50_000)
    warm = lr.procrustes_distance(frame, truth.frame)
    assert warm < 0.3, warm

    config = lr.BoostConfig(
        eta_coef=0.1, eta_vec=0.05 / 20, t_outer=10, t_realign=200, b_realign=64, t_subspace=400
    )
    params = lr.geo_sgd(inst, frame, 2, config, seed=6)
    final = lr.procrustes_distance(params.frame, truth.frame)
    assert final < 1e-6, final
    assert inst.coef_error(params) < 1e-6

    try:
        lr.BoostConfig(eta_coef=0.1, eta_vec=0.1, t_outer=1, t_realign=1, b_realign=0, t_subspace=1)
    except ValueError:
        pass
    else:
        raise AssertionError("b_realign = 0 should be rejected")

    bad = lr.BoostConfig(eta_coef=1e3, eta_vec=0.01, t_outer=1, t_realign=200, b_realign=64, t_subspace=10)
    try:
        lr.realign_polynomial(inst, frame, 2, bad)
    except lr.NumericalGuardError:
        pass
    else:
        raise AssertionError("divergent realignment should raise NumericalGuardError")

    rows, failures = lr.run_experiment(
        json.dumps({"n": 10, "r": 1, "d": 2, "alpha_min": 0.5, "seed": 1, "trials": 2,
                    "warm": {"samples_per_round": 20000}, "record_wall_time": False,
                    "boost": {"eta_coef": 0.1, "eta_vec": 0.005, "t_outer": 2, "t_realign": 50,
                              "b_realign": 64, "t_subspace": 200, "target_eps": 1e-4}})
    )
    assert not failures and rows[0]["phase"] == "warmstart"

    print(f"smoke test passed: warm dP {warm:.3e} -> boosted dP {final:.3e}")


if __name__ == "__main__":
    main()
