import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adgen.errors import ConfigError, ShapeError
from adgen.features import (
    BiFPNLayer,
    ExtractorConfig,
    FeatureExtractor,
    FeaturePyramid,
    extract_pyramid,
    patchify,
    unpatchify,
)
from adgen.model import build_model

from conftest import tiny_model_config


@pytest.mark.parametrize("levels,bifpn", [(1, 0), (2, 1), (3, 2), (4, 1)])
def test_pyramid_shapes(levels, bifpn):
    cfg = ExtractorConfig(input_size=64, width=8, channels=8, levels=levels, bifpn_repeats=bifpn)
    ext = FeatureExtractor(cfg).eval()
    maps = ext(torch.rand(2, 3, 64, 64))
    assert len(maps) == levels
    for m, s in zip(maps, cfg.strides):
        assert m.shape == (2, 8, 64 // s, 64 // s)
    assert cfg.grid_sizes() == [64 // s for s in cfg.strides]


def test_default_grids_for_256():
    cfg = ExtractorConfig()
    assert cfg.strides == (8, 16, 32)
    assert cfg.grid_sizes() == [32, 16, 8]


@pytest.mark.parametrize("size", [250, 33, 100])
def test_incompatible_size_names_valid_sizes(size):
    ext = FeatureExtractor(ExtractorConfig(width=8, channels=8)).eval()
    with pytest.raises(ShapeError, match="multiple of 32"):
        ext(torch.rand(1, 3, size, size))


def test_rejects_non_rgb():
    ext = FeatureExtractor(ExtractorConfig(width=8, channels=8)).eval()
    with pytest.raises(ShapeError):
        ext(torch.rand(1, 1, 32, 32))


@pytest.mark.parametrize(
    "kwargs", [{"backbone": "vgg"}, {"levels": 0}, {"levels": 5}, {"channels": 4}, {"bifpn_repeats": -1}]
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ExtractorConfig(**kwargs)


def test_pyramid_channel_mismatch():
    with pytest.raises(ShapeError):
        FeaturePyramid([torch.zeros(4, 2, 2), torch.zeros(5, 1, 1)], (8, 16))


def test_bifpn_preserves_shapes():
    layer = BiFPNLayer(3, 8)
    feats = [torch.rand(1, 8, 8, 8), torch.rand(1, 8, 4, 4), torch.rand(1, 8, 2, 2)]
    out = layer(feats)
    assert [o.shape for o in out] == [f.shape for f in feats]


def test_deterministic_given_seed():
    a = build_model(tiny_model_config(), seed=3)
    b = build_model(tiny_model_config(), seed=3)
    x = torch.rand(2, 3, 32, 32)
    for ma, mb in zip(a(x), b(x)):
        assert torch.equal(ma, mb)


def test_per_image_independent_of_batch(tiny_model):
    x = torch.rand(3, 3, 32, 32)
    full = tiny_model(x)
    single = tiny_model(x[1:2])
    for f, s in zip(full, single):
        torch.testing.assert_close(f[1:2], s, atol=1e-6, rtol=1e-5)


@settings(max_examples=20)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 3))
def test_patchify_round_trip(h, w, c, idx):
    level = torch.randn(c, h, w)
    pyr = FeaturePyramid([level], (8,))
    (ps,) = patchify(pyr)
    assert ps.n == h * w and ps.grid == (h, w)
    assert torch.equal(unpatchify(ps), level)
    r, col = divmod(min(idx, h * w - 1), w)
    assert torch.equal(ps.patches[r * w + col], level[:, r, col])
    np.testing.assert_array_equal(ps.coords[r * w + col], [r, col])


def test_extract_pyramid_splits_batch(tiny_model):
    x = torch.rand(2, 3, 32, 32)
    pyrs = extract_pyramid(x, tiny_model.extractor)
    assert len(pyrs) == 2
    assert pyrs[0].strides == tiny_model.config.extractor.strides
    assert [lvl.shape[-1] for lvl in pyrs[0].levels] == [4, 2, 1]
