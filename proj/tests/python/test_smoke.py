"""Smoke tests for the numsnet python module (built via CMake/scikit-build)."""

import math

import numpy as np
import pytest

import numsnet

TABLE1 = {
    "unet": (7_767_523, 7_763_555, 3_968),
    "wunet": (9_290_998, 9_286_658, 4_340),
    "unetpp": (9_045_507, 9_043_587, 1_920),
    "numsnet": (11_713_943, 11_711_843, 2_100),
    "numsall": (14_526_368, 14_524_268, 2_100),
}

TINY = [2, 2, 2, 2, 2]


@pytest.mark.parametrize("arch,expected", sorted(TABLE1.items()))
def test_parameter_counts_match_published_table(arch, expected):
    assert numsnet.count_params(arch, classes=3) == expected


def test_forward_shape_and_range():
    model = numsnet.Model("numsnet", classes=2, widths=TINY, seed=1)
    x = np.random.default_rng(0).random((1, 1, 32, 32), dtype=np.float32)
    y = model.forward(x)
    assert y.shape == (1, 2, 32, 32)
    assert (y > 0).all() and (y < 1).all()
    assert model.propagated_layers == [(1, 2), (1, 3), (1, 4), (2, 2), (2, 3), (3, 2)]


def test_sequence_forward_uses_state():
    model = numsnet.Model("numsnet", classes=1, widths=TINY, seed=2)
    x = np.random.default_rng(1).random((1, 1, 32, 32), dtype=np.float32)
    out = model.forward_sequence([x, x])
    assert not np.array_equal(out[0], out[1])  # second scan sees the first's state

    plain = numsnet.Model("unet", classes=1, widths=TINY, seed=2)
    out = plain.forward_sequence([x, x])
    assert np.array_equal(out[0], out[1])


def test_metrics_match_numpy():
    rng = np.random.default_rng(7)
    pred = (rng.random((3, 8, 8)) < 0.4).astype(np.float32)
    gt = (rng.random((3, 8, 8)) < 0.4).astype(np.float32)
    got = numsnet.metrics(pred, gt)
    for c in range(3):
        inter = float(np.logical_and(pred[c], gt[c]).sum())
        p, g = float(pred[c].sum()), float(gt[c].sum())
        union = p + g - inter
        assert got["iou"]["per_class"][c] == (1.0 if union == 0 else inter / union)
        assert got["dice"]["per_class"][c] == (2 * inter + 1) / (p + g + 1)
        if p:
            assert got["precision"]["per_class"][c] == inter / p
        if g:
            assert got["recall"]["per_class"][c] == inter / g


def test_loss_identities():
    rng = np.random.default_rng(3)
    pred = rng.uniform(0.02, 0.98, (1, 2, 8, 8)).astype(np.float32)
    gt = (rng.random((1, 2, 8, 8)) < 0.5).astype(np.float32)
    out = numsnet.losses(pred, gt)
    assert math.isclose(out["bdl"], out["bcl"] / 2 + out["dl"], abs_tol=1e-12)
    perfect = numsnet.losses(gt, gt)
    assert math.isclose(perfect["dl"], -1.0, abs_tol=1e-9)


def test_split_sizes_and_order():
    plan = numsnet.sample_split(829, "RandomOrdered", seed=5)
    assert len(plan["train"]) == 82
    assert plan["train"] == sorted(plan["train"])
    assert len(plan["train"]) + len(plan["val"]) + len(plan["test"]) == 829
    mid = numsnet.sample_split(10, "MidSeq")
    assert plan is not None and mid["train"] == [5]


def test_synth_stack_deterministic():
    img1, msk1, pix1 = numsnet.synth_stack(n=12, classes=3, size=32, seed=9)
    img2, msk2, _ = numsnet.synth_stack(n=12, classes=3, size=32, seed=9)
    assert np.array_equal(img1, img2)
    assert np.array_equal(msk1, msk2)
    assert img1.shape == (12, 32, 32)
    assert pix1 == [205, 420, 500]
    assert set(np.unique(msk1)) <= {0, 205, 420, 500}


def test_checkpoint_roundtrip(tmp_path):
    model = numsnet.Model("unetpp", classes=2, widths=TINY, seed=4)
    x = np.random.default_rng(2).random((1, 1, 32, 32), dtype=np.float32)
    before = model.forward(x)
    path = str(tmp_path / "m.ckpt")
    model.save(path)
    again = numsnet.load(path).forward(x)
    assert np.array_equal(before, again)

    adapted = numsnet.transfer_adapt(numsnet.load(path), 5, seed=1)
    assert adapted.classes == 5

    with pytest.raises(numsnet.ChecksumError):
        (tmp_path / "broken.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes()[:100])
        numsnet.load(str(tmp_path / "broken.ckpt"))


def test_tiny_training_runs():
    out = numsnet.train_synth(arch="numsnet", slices=14, classes=2, size=32, widths=TINY,
                              epochs=2, batch=5, strategy="MidSeq", seed=6)
    assert len(out["epoch_losses"]) == 2
    assert all(math.isfinite(v) for v in out["epoch_losses"])
    assert 0.0 <= out["mean_dice"] <= 100.0


def test_gradcheck_subset_passes():
    results = numsnet.gradcheck(ops=["linear", "conv2d", "dice-loss"])
    assert all(r["pass"] for r in results)
