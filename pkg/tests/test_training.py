import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rainpp.autodiff import Tensor, check_gradients, log_softmax
from rainpp.errors import BadMagicError, ConfigError, FormatError, TruncatedFileError, VersionMismatchError
from rainpp.grid import compute_stats, normalize, synthesize
from rainpp.labeling import smooth_field, smooth_label
from rainpp.model import ModelConfig, PatchSpec, init_params
from rainpp.training import (PRESETS, Checkpoint, PhaseConfig, checkpoint_bytes, checkpoints_equal,
                             finetune, load_checkpoint, predict_proba, pretrain,
                             reconstruction_loss, segmentation_loss, store_checkpoint)

SMALL = ModelConfig(in_channels=4, patch=PatchSpec(t=2, p=2, embed_dim=12),
                    stages=((1, 8), (1, 8), (1, 8), (1, 8)), groups=2, decoder_channels=6,
                    recon_channels=6, pool_bins=(1, 2))
QUICK_PRE = replace(PRESETS["tiny-pretrain"], iterations=3, batch_size=2)
QUICK_FT = replace(PRESETS["tiny-finetune"], iterations=3, batch_size=2)


@pytest.fixture(scope="module")
def data():
    d = synthesize(4, 4, 32, 32, proportions=(0.6, 0.3, 0.1), seed=0)
    return normalize(d, compute_stats(d))


@pytest.fixture(scope="module")
def pretrained(data):
    return pretrain(QUICK_PRE, data, SMALL)


# -- losses ---------------------------------------------------------------
def test_reconstruction_loss_examples(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    mask = np.zeros_like(x, dtype=bool)
    mask[0, 0, :2] = True
    assert reconstruction_loss(x, x.copy(), mask).item() == 0
    assert reconstruction_loss(np.zeros_like(x), np.full_like(x, 2.0), mask).item() == 2.0
    with pytest.raises(ValueError):
        reconstruction_loss(x, x, np.zeros_like(mask))


def test_reconstruction_loss_ignores_unmasked(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    mask = rng.random(x.shape) < 0.5
    a = rng.normal(size=x.shape)
    b = np.where(mask, a, rng.normal(size=x.shape) * 100)
    assert reconstruction_loss(x, a, mask).item() == reconstruction_loss(x, b, mask).item()


def test_reconstruction_loss_gradient(rng):
    x = rng.normal(size=(2, 3, 3))
    xh = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    mask = rng.random(x.shape) < 0.6
    assert check_gradients(lambda: reconstruction_loss(x, xh, mask), [xh])[0] < 1e-6


def test_segmentation_loss_closed_forms():
    logits = Tensor(np.log(np.array([0.25, 0.5, 0.25])).reshape(3, 1, 1))
    onehot = np.array([0, 1, 0.0]).reshape(3, 1, 1)
    assert segmentation_loss(logits, onehot).item() == pytest.approx(np.log(2), abs=1e-12)
    soft = smooth_label(5.0, (0.1, 10.0)).reshape(3, 1, 1)
    assert segmentation_loss(Tensor(np.zeros((3, 1, 1))), soft).item() == pytest.approx(np.log(3), abs=1e-12)
    with pytest.raises(ValueError, match="sum to 1"):
        segmentation_loss(logits, np.array([0.5, 0.2, 0.2]).reshape(3, 1, 1))


def test_segmentation_loss_matches_reference_ce(rng):
    logits = rng.normal(size=(2, 3, 4, 5))
    cls = rng.integers(0, 3, size=(2, 4, 5))
    onehot = np.moveaxis(np.eye(3)[cls], -1, 1)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ref = -np.take_along_axis(logp, cls[:, None], axis=1).mean()
    assert abs(segmentation_loss(Tensor(logits), onehot, np.ones(3)).item() - ref) < 1e-6


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_segmentation_loss_is_entropy_plus_kl(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3), size=(2, 2)).transpose(2, 0, 1)
    logits = rng.normal(size=(3, 2, 2))
    f = np.exp(log_softmax(Tensor(logits), axis=0).data)
    entropy = -(np.where(p > 0, p * np.log(np.where(p > 0, p, 1)), 0)).sum(axis=0).mean()
    kl = (p * (np.log(p) - np.log(f))).sum(axis=0).mean()
    loss = segmentation_loss(Tensor(logits), p).item()
    assert abs(loss - entropy - kl) < 1e-10 and kl >= 0
    at_target = segmentation_loss(Tensor(np.log(p)), p).item()
    assert abs(at_target - entropy) < 1e-10
    assert segmentation_loss(Tensor(np.log(p) + rng.normal(size=p.shape) * 0.1), p).item() > at_target


def test_uniform_weights_equal_no_weights(rng):
    logits = Tensor(rng.normal(size=(3, 4, 4)))
    p = smooth_field(rng.uniform(0, 40, size=(4, 4)), (0.1, 10.0))
    assert segmentation_loss(logits, p, np.ones(3)).item() == segmentation_loss(logits, p).item()


# -- configuration --------------------------------------------------------
@pytest.mark.parametrize("change", [dict(lr=0), dict(iterations=0), dict(mask_ratio=1.2),
                                    dict(label_mode="fuzzy"), dict(class_weighting="x"),
                                    dict(thresholds=(10.0, 0.1)), dict(batch_size=0)])
def test_phase_config_rejects(change):
    with pytest.raises(ConfigError):
        replace(PRESETS["tiny-pretrain"], **change).validate()


def test_phase_config_round_trip_and_presets():
    for p in PRESETS.values():
        p.validate()
        assert PhaseConfig.from_dict(p.to_dict()) == p
    assert PRESETS["full-pretrain"].mask_ratio == 0.9 and PRESETS["full-pretrain"].lr == 1.6e-3
    assert PRESETS["full-finetune"].mask_ratio == 0.25 and PRESETS["full-finetune"].lr == 1e-4
    assert PRESETS["full-pretrain"].iterations == 150_000 and PRESETS["full-finetune"].iterations == 35_000
    with pytest.raises(ConfigError):
        PhaseConfig.from_dict({"nope": 1})


# -- training loops -------------------------------------------------------
def test_pretrain_single_iteration(data):
    ck = pretrain(replace(QUICK_PRE, iterations=1), data, SMALL)
    assert len(ck.history["loss"]) == 1 and ck.optim.step == 1
    assert ck.phase.phase == "pretrain"


def test_pretrain_is_deterministic(data, pretrained):
    again = pretrain(QUICK_PRE, data, SMALL)
    assert again.history == pretrained.history
    assert checkpoints_equal(again, pretrained)


def test_pretrain_leaves_segmentation_head(data, pretrained):
    fresh = init_params(SMALL, QUICK_PRE.seed)
    for n in pretrained.store.names("seg."):
        assert np.array_equal(pretrained.store[n].data, fresh[n].data)
    assert not np.array_equal(pretrained.store["rec.out.w"].data, fresh["rec.out.w"].data)


def test_pretrain_rejects_bad_inputs(data):
    with pytest.raises(ConfigError):
        pretrain(QUICK_PRE, data, replace(SMALL, in_channels=5))
    with pytest.raises(ConfigError):
        pretrain(replace(QUICK_PRE, mask_ratio=0.0), data, SMALL)


def test_finetune_freezes_encoder(data, pretrained):
    ft = finetune(QUICK_FT, data, pretrained)
    for n in pretrained.store:
        same = np.array_equal(ft.store[n].data, pretrained.store[n].data)
        if n.startswith(("embed.", "enc.")):
            assert same, n
            assert n in ft.store.frozen
    assert any(not np.array_equal(ft.store[n].data, pretrained.store[n].data) for n in ft.store.names("seg."))
    assert ft.extra["pretrained"] is True and len(ft.extra["class_weights"]) == 3


def test_finetune_without_pretraining(data):
    ft = finetune(QUICK_FT, data, None, SMALL)
    assert ft.extra["pretrained"] is False
    probs = predict_proba(ft.store, ft.model, data.variables)
    assert probs.shape == (4, 3, 32, 32)
    assert np.allclose(probs.sum(axis=1), 1, atol=1e-5)


def test_finetune_class_weights_follow_target_mass(data, pretrained):
    soft = finetune(QUICK_FT, data, pretrained).extra["class_weights"]
    hard = finetune(replace(QUICK_FT, label_mode="onehot"), data, pretrained).extra["class_weights"]
    uni = finetune(replace(QUICK_FT, class_weighting="uniform"), data, pretrained).extra["class_weights"]
    assert uni == [1.0, 1.0, 1.0]
    assert soft[2] < hard[2]  # continuous targets move mass into the heavy class


def test_finetune_threshold_class_mismatch(data, pretrained):
    with pytest.raises(ConfigError):
        finetune(replace(QUICK_FT, thresholds=(0.1, 2.0, 10.0)), data, pretrained)


# -- checkpoints ------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path, data, pretrained):
    ck = finetune(QUICK_FT, data, pretrained)
    ck.norm_stats = {"a": {"mean": 1.5, "std": 0.25}}
    store_checkpoint(ck, tmp_path / "c.nwpp")
    back = load_checkpoint(tmp_path / "c.nwpp")
    assert checkpoints_equal(ck, back)
    assert back.store.frozen == ck.store.frozen
    assert checkpoint_bytes(back) == checkpoint_bytes(ck)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), dtype=st.sampled_from([np.float32, np.float64]))
def test_checkpoint_round_trip_random_store(tmp_path_factory, seed, dtype):
    rng = np.random.default_rng(seed)
    store = init_params(SMALL, seed % 100, dtype)
    for n in store:
        store[n].data[...] = rng.normal(size=store[n].shape)
    ck = Checkpoint(store, SMALL, PRESETS["tiny-pretrain"], None, {"loss": list(rng.normal(size=3))})
    path = tmp_path_factory.mktemp("ck") / "c.nwpp"
    store_checkpoint(ck, path)
    assert checkpoints_equal(ck, load_checkpoint(path))


def test_checkpoint_corruption(tmp_path, pretrained):
    raw = checkpoint_bytes(pretrained)
    cases = {
        "magic": b"NOPE" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 99) + raw[8:],
        "length": raw[:8] + struct.pack("<I", len(raw) * 2) + raw[12:],
        "truncated": raw[: len(raw) // 2],
        "trailing": raw + b"\0",
    }
    expected = {"magic": BadMagicError, "version": VersionMismatchError, "length": TruncatedFileError,
                "truncated": TruncatedFileError, "trailing": FormatError}
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(expected[name]):
            load_checkpoint(tmp_path / name)
