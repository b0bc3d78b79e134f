import numpy as np
import pytest

from seamil.ablation import aggregation_sweep, kept_val_accuracy, seanet_sweep
from seamil.backbone import BackboneConfig
from seamil.mil import Bag
from seamil.training import SourceTrainConfig, TargetTrainConfig, TrainResult, train_source

TINY = BackboneConfig([4, 8], input_size=(16, 16, 3), se_reduction_ratio=2)


def _patches(n=24, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.uniform(0.3, 0.7, size=(n, 16, 16, 3))
    x[y == 1, :, :, 0] += 0.25
    return x, y


def test_kept_val_accuracy_reads_the_kept_epoch():
    log = [{"epoch": e, "split": s, "loss": 0.0, "acc": a}
           for e, a in ((1, 0.5), (2, 0.9), (3, 0.4)) for s in ("train", "val")]
    assert kept_val_accuracy(TrainResult(None, log, None, 2)) == 0.9
    with pytest.raises(ValueError):
        kept_val_accuracy(TrainResult(None, [r for r in log if r["split"] == "train"], None, 1))


def test_seanet_sweep_shapes_and_modes():
    x, y = _patches()
    base = SourceTrainConfig(backbone=TINY, epochs=2, lr=0.05, batch_size=8)
    out = seanet_sweep(x[:16], y[:16], x[16:], y[16:], [0, 1], base)
    assert set(out) == {True, False}
    assert all(len(v) == 2 and all(0.0 <= a <= 1.0 for a in v) for v in out.values())
    again = seanet_sweep(x[:16], y[:16], x[16:], y[16:], [0, 1], base, known={(False, 1): 0.5})
    assert again[False] == [out[False][0], 0.5] and again[True] == out[True]


def test_aggregation_sweep_uses_known_runs():
    x, y = _patches()
    src = train_source(x, y, SourceTrainConfig(backbone=TINY, epochs=1, lr=0.05, batch_size=8)).model
    bags = [Bag(f"b{i}", x[i * 4 : i * 4 + 4], int(i % 2), [str(j) for j in range(4)]) for i in range(6)]
    base = TargetTrainConfig(epochs=2, lr=0.01, attention_dim=4)
    out = aggregation_sweep(bags[:4], bags[4:], src, [0], base, known={("bgas", 0): 0.123})
    assert out["bgas"] == [0.123]
    assert set(out) == {"bgas", "bgap", "bgmp"} and all(len(v) == 1 for v in out.values())
    assert aggregation_sweep(bags[:4], bags[4:], src, [0], base)["bgap"] == out["bgap"]
