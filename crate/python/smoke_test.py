"""Smoke test for the pyglae extension: tiny end-to-end run plus metrics."""

import json
import math
import sys
import tempfile
from pathlib import Path

import pyglae

TOY = """
seed = 3
data.max_age = 9
data.image_size = 16
data.head_center = 4
data.head_count = 16
data.tail_min = 2
data.decay = 3
backbone.widths = 8,16
backbone.strides = 2,2
backbone.norm_groups = 2
head.r = 2
head.kernel = 2
head.stride = 2
head.proj_width = 16
train.batch_size = 10
train.stage1_epochs = 2
train.stage2_epochs = 1
protocol.head_range = 3-6
protocol.group_width = 2
"""


def main() -> int:
    z = pyglae.label_distribution(40)
    assert abs(sum(z) - 1.0) < 1e-12 and max(range(101), key=z.__getitem__) == 40
    assert abs(pyglae.aar_score(1.73, 0.69) - 7.58) < 1e-9

    flat, shape = pyglae.rearrange([1.0, 2.0, 3.0, 4.0], 4, 1, 1, 2)
    assert shape == (1, 2, 2) and flat == [1.0, 2.0, 3.0, 4.0]

    perfect = pyglae.report([5, 30, 30, 80], [5.0, 30.0, 30.0, 80.0])
    assert perfect.mae == 0.0 and perfect.cmae == 0.0

    cfg = pyglae.RunConfig(TOY)
    try:
        cfg.set("no.such.key", "1")
        raise AssertionError("unknown key accepted")
    except ValueError as e:
        assert str(e).startswith("config:")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        n_train, n_test = pyglae.gen_data(tmp / "data", cfg)
        assert n_train > 0 and n_test > 0
        pyglae.train(1, tmp / "data", tmp / "run", cfg)
        ckpt = pyglae.train(2, tmp / "data", tmp / "run", cfg)
        reports = dict(pyglae.evaluate(ckpt, tmp / "data", tmp / "eval"))
        assert set(reports) == {"vanilla", "balanced", "bigger_upsilon", "smaller_upsilon"}
        for r in reports.values():
            assert math.isfinite(r.mae) and 0.0 <= r.aar <= 10.0

        scored = pyglae.score(tmp / "eval" / "predictions_smaller_upsilon.csv", cfg)
        assert json.loads(scored.to_json()) == json.loads(reports["smaller_upsilon"].to_json())

        model = pyglae.Model.load(ckpt)
        age, head, u_v, u_b = model.predict(bytes(range(0, 256, 1))[: model.input_size**2])
        assert 0.0 <= age <= 9.0 and head in ("vanilla", "balanced") and u_v >= 0 and u_b >= 0

    print("pyglae smoke test passed:", reports["smaller_upsilon"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
