"""Smoke test for the tmn_py extension.

Build it first:
    cargo build --release -p tmn-py --features extension-module
    cp target/release/libtmn_py.so python/tmn_py.so
"""
import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import tmn_py


def main():
    p = tmn_py.Program("exist(filter_color[red](scene()))")
    assert len(p) == 3
    assert str(p) == "exist(filter_color[red](scene()))"
    assert [s["position"] for s in p.plan("stack")] == [0, 1, 2]
    assert p.violations() == []

    try:
        tmn_py.Program("exist(filter_color[red](scene())")
    except ValueError:
        pass
    else:
        raise AssertionError("unbalanced program parsed")

    with tempfile.TemporaryDirectory() as d:
        spec = 'kind = "closure"\nseed = 1\nn_train = 900\nn_val = 200\nn_test = 100\n'
        audit = tmn_py.generate_dataset(spec, d)
        assert all(c["passed"] for c in audit["checks"])

        with open(os.path.join(d, "train.jsonl")) as f:
            f.readline()
            line = f.readline()
        sample = json.loads(line)
        prog = tmn_py.Program("count(scene())")
        assert prog.execute(json.dumps(sample["scene"])) == str(
            sum(c is not None for c in sample["scene"]["cells"])
        )

        model = tmn_py.Model(kind="tmn", d_model=16, d_ff=32, seed=3)
        out = model.forward(line)
        assert len(out["logits"]) == len(model.answers) == 22
        assert out["layers"] == len(sample["program"])
        assert out["answer"] in model.answers

        ckpt = os.path.join(d, "m.ckpt")
        model.save(ckpt)
        again = tmn_py.Model.load(ckpt)
        assert again.forward(line)["logits"] == out["logits"]
        assert again.num_params == model.num_params

        cfg = os.path.join(d, "run.toml")
        with open(cfg, "w") as f:
            f.write(
                'name = "smoke"\nmodel_kind = "transformer_pr"\n'
                f'data_dir = "{d}"\nout_dir = "{d}/run"\nepochs = 1\nbatch_size = 16\n'
                "[model]\nd_model = 16\nd_ff = 32\nn_layers_monolithic = 1\n"
            )
        res = tmn_py.train_config(cfg)
        assert abs(res["initial_loss"] - math.log(22)) < 0.2
        ev = tmn_py.evaluate(res["checkpoint"], os.path.join(d, "val.jsonl"))
        assert abs(ev["accuracy"] - res["val_accuracy"]) < 1e-12
    print("smoke test ok")


if __name__ == "__main__":
    main()
