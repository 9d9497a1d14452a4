"""Smoke test for the Python extension.

Build first, e.g. `maturin develop -m crates/python/Cargo.toml --features extension-module`,
or copy the built cdylib next to this script as `manifold_prune_py.so`.
"""

import math
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import manifold_prune_py as mp


def main() -> None:
    cfg = mp.RunConfig()
    cfg.set("lambda1=4.0")
    assert "lambda1 = 4.0" in cfg.to_toml()
    try:
        cfg.set("nonsense=1")
    except ValueError as e:
        assert "config" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    v, soft = mp.gumbel_sigmoid([-2.0, 2.0], [0.0, 0.0], 1.0)
    assert v == [1.0, 0.0]
    assert abs(soft[0] - 1 / (1 + math.exp(-2))) < 1e-9
    assert mp.sparsity([1.0, 0.0, 1.0, 0.0]) == 0.5

    g = mp.Network.init(cfg, "generator")
    ones = [1.0] * g.num_units
    assert g.macs(ones) == g.t_total + g.fixed_macs
    assert g.resource_loss(ones, 1.0) == 0.0
    assert abs(g.resource_loss(ones, 0.5) - math.log(2)) < 1e-9
    bits = g.harden([1.0 if i % 2 else 0.0 for i in range(g.num_units)])
    small = g.extract(bits)
    assert small.num_units == sum(bits)
    assert small.macs([1.0] * small.num_units) == g.macs([float(b) for b in bits])

    nb = mp.neighborhoods([0, 1, 2, 3], [[1, 0], [0.9, 0.1], [0, 1], [0.1, 0.9]], 1)
    assert [j for j, _ in nb[0]] == [1] and [j for j, _ in nb[2]] == [3]
    assert abs(mp.frechet([[0.0], [2.0]], [[1.0], [3.0]]) - 1.0) < 1e-9

    cfg.set("data.train=12")
    cfg.set("data.test=4")
    cfg.set("data.val=4")
    ds = mp.generate_split(cfg, "train")
    assert len(ds) == 12
    src, tgt = ds.pair(ds.ids()[0])
    assert len(src) == 32 and len(tgt[0][0]) == 3

    with tempfile.TemporaryDirectory() as tmp:
        try:
            mp.run_stage("prune", tmp, cfg)
        except FileNotFoundError as e:
            assert "gen-data" in str(e)
        else:
            raise AssertionError("prune ran without upstream artifacts")
        out = mp.run_stage("gen-data", tmp, cfg)
        assert Path(out, "meta.json").exists()
    print("python smoke test passed")


if __name__ == "__main__":
    main()
