"""Smoke test for the fairrank Python extension.

Build the extension first:

    cargo build --release -p fairrank-py --features extension-module

The script copies the compiled library next to a temporary `fairrank.so`
and imports it. Set FAIRRANK_LIB to point at a specific build instead.
"""

import importlib
import math
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def find_library():
    override = os.environ.get("FAIRRANK_LIB")
    if override:
        return pathlib.Path(override)
    for profile in ("release", "debug"):
        for name in ("libfairrank_py.so", "libfairrank_py.dylib", "fairrank_py.dll"):
            candidate = ROOT / "target" / profile / name
            if candidate.exists():
                return candidate
    sys.exit("compiled extension not found; run cargo build -p fairrank-py --features extension-module")


def load_module(workdir):
    lib = find_library()
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy(lib, workdir / f"fairrank{suffix}")
    sys.path.insert(0, str(workdir))
    return importlib.import_module("fairrank")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        fr = load_module(tmp)

        data = fr.Dataset.synthetic(40, 60, minority_fraction=0.3, bias=2.0, seed=1)
        data.save(str(tmp / "data.csv"))
        again = fr.Dataset.load(str(tmp / "data.csv"))
        assert again.total_pairs == data.total_pairs == 40 * 60

        train, valid, test = data.split((0.8, 0.1, 0.1), seed=0)
        results = {}
        for c in (0, 1e4):
            cfg = fr.TrainConfig(K=10, C=c, eta1=5, dim=8, epochs=4, seed=3)
            run = fr.train(train, cfg, valid=valid)
            metrics = fr.evaluate(run.model, test, k_list=[10], irrelevant=60, exclude=[train, valid])
            results[c] = metrics[0]
            print(f"C={c:<7g} ndcg@10={metrics[0]['ndcg_mean']:.4f} mae={metrics[0]['mae']:.3e}")
        assert results[1e4]["mae"] < results[0]["mae"]

        run.model.save(str(tmp / "model.ckpt"))
        loaded = fr.Model.load(str(tmp / "model.ckpt"))
        assert loaded.params == run.model.params

        assert abs(sum(fr.exposures([0.1, 0.5, 2.0])) - 1.0) < 1e-12
        lam = fr.solve_lambda([5.0, 4.0, 3.0, 2.0, 1.0], 2, tau1=1e-3, tau2=1e-6)
        assert abs(lam - 3.0) < 0.05
        gap = fr.topk_disparity([3.0, 2.0, 1.0, 0.0], [0, 1, 0, 1], 2)
        assert not math.isnan(gap)

        errors = fr.grad_check(seed=7)
        print("grad-check:", {k: f"{v:.2e}" for k, v in errors.items()})
        assert all(v <= 1e-3 for v in errors.values())
    print("smoke test passed")


if __name__ == "__main__":
    main()
