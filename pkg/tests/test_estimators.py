import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rainpp.estimators import ContinuousLabeler, GridScaler, MaskedPretrainer, PrecipitationSegmenter
from rainpp.grid import synthesize
from rainpp.labeling import classify, smooth_field
from rainpp.model import ModelConfig, PatchSpec

SMALL = ModelConfig(in_channels=4, patch=PatchSpec(t=2, p=2, embed_dim=12),
                    stages=((1, 8), (1, 8), (1, 8), (1, 8)), groups=2, decoder_channels=6,
                    recon_channels=6, pool_bins=(1, 2))


@pytest.fixture(scope="module")
def grid():
    d = synthesize(4, 4, 32, 32, proportions=(0.6, 0.3, 0.1), seed=5)
    return d.variables.astype(np.float64), d.qpe.astype(np.float64)


def test_grid_scaler(grid):
    x, _ = grid
    scaler = GridScaler().fit(x)
    z = scaler.transform(x)
    assert np.allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    assert np.allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-6)
    assert np.allclose(scaler.inverse_transform(z), x, rtol=1e-9)
    with pytest.raises(ValueError):
        scaler.transform(x[:, :2])
    with pytest.raises(NotFittedError):
        GridScaler().transform(x)
    with pytest.raises(ValueError):
        GridScaler().fit(np.full((2, 1, 4, 4), np.nan))


def test_continuous_labeler(grid):
    _, q = grid
    lab = ContinuousLabeler().fit(q)
    assert lab.n_classes_ == 3
    assert np.array_equal(lab.transform(q), smooth_field(q, (0.1, 10.0)))
    hard = ContinuousLabeler(smooth=False).fit_transform(q)
    assert set(np.unique(hard)) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        lab.transform(q + 200)
    assert clone(lab).get_params() == {"thresholds": (0.1, 10.0), "smooth": True}


def test_pretrainer_and_segmenter(grid):
    x, q = grid
    x = GridScaler().fit_transform(x)
    pre = MaskedPretrainer(model=SMALL, iterations=3, batch_size=2).fit(x)
    assert len(pre.history_) == 3
    z = pre.transform(x)
    assert z.shape == (4, 8)
    seg = PrecipitationSegmenter(pretrained=pre, iterations=3, batch_size=2).fit(x, q)
    proba = seg.predict_proba(x)
    assert proba.shape == (4, 3, 32, 32)
    pred = seg.predict(x)
    assert pred.shape == (4, 32, 32)
    assert seg.score(x, q) == np.mean(pred == classify(q, (0.1, 10.0)))
    for name in pre.checkpoint_.store.names("enc."):
        assert np.array_equal(seg.checkpoint_.store[name].data, pre.checkpoint_.store[name].data)


def test_segmenter_without_pretraining(grid):
    x, q = grid
    seg = PrecipitationSegmenter(model=SMALL, iterations=2, batch_size=2)
    assert clone(seg).get_params()["iterations"] == 2
    seg.fit(x, q)
    assert seg.checkpoint_.extra["pretrained"] is False
    with pytest.raises(ValueError):
        seg.fit(x, q[:, :5])
    with pytest.raises(NotFittedError):
        PrecipitationSegmenter().predict(x)
