"""Smoke test for the downscale_py extension.

Build first:
    cargo build --release -p downscale-py --features extension-module
then run:
    python3 python/smoke_test.py [path/to/libdownscale_py.so]
"""

import importlib.util
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def find_library():
    if len(sys.argv) > 1:
        return pathlib.Path(sys.argv[1])
    for profile in ("release", "debug"):
        for name in ("libdownscale_py.so", "libdownscale_py.dylib", "downscale_py.dll"):
            p = ROOT / "target" / profile / name
            if p.exists():
                return p
    sys.exit("extension not built; see the docstring")


def load(lib):
    tmp = pathlib.Path(tempfile.mkdtemp())
    dst = tmp / "downscale_py.so"
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("downscale_py", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    ds = load(find_library())

    pair = ds.GridPair(20.0, 22.0, 100.0, 103.0, 0.25, 0.0625)
    assert pair.coarse_shape == (8, 12) and pair.fine_shape == (32, 48), pair
    coarse = [[float(r + c) for c in range(12)] for r in range(8)]
    fine = pair.upsample(coarse)
    assert len(fine) == 32 and len(fine[0]) == 48
    back = pair.coarsen(fine)
    assert len(back) == 8

    assert abs(ds.crps([[0.0], [2.0]], [1.0]) - 0.5) < 1e-12
    assert ds.mae([1.0, 2.0], [1.0, 4.0]) == 1.0
    field = [[float((r * 7 + c) % 5) for c in range(9)] for r in range(9)]
    assert ds.fss(field, field, 2.0, 3) == 1.0
    groups = ds.variance_groups([float(i) for i in range(8)], [float(i) for i in range(8)])
    assert groups["MAE75-100"] > groups["MAE0-25"]

    sched = ds.edm_schedule(18)
    assert len(sched) == 19 and sched[-1] == 0.0 and abs(sched[0] - 80.0) < 1e-9
    c_skip, c_out, c_in, c_noise = ds.edm_precondition(0.5)
    assert abs(c_skip - 0.5) < 1e-12 and abs(c_noise - math.log(0.5) / 4) < 1e-12

    cfg = ds.ExperimentConfig(seed=3, members=4)
    assert cfg.n_members == 4
    same = ds.ExperimentConfig.from_toml(cfg.to_toml())
    assert same.stage_hash("diffusion") == cfg.stage_hash("diffusion")
    try:
        ds.ExperimentConfig.from_toml("bogus = 1")
    except ds.DownscaleError as e:
        assert "exit 2" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print("downscale_py smoke test passed")


if __name__ == "__main__":
    main()
