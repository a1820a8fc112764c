import numpy as np
import pytest

from occlusynth.errors import ShapeError
from occlusynth.kernels.folding import (FEAT_DIM, FoldingConfig, FoldingParams,
                                        folding_densify, folding_weight_grads)
from occlusynth.rng import SeededRng


@pytest.fixture(scope="module")
def params():
    return FoldingParams.random(SeededRng(3, ("folding",)))


def test_layer_widths(params):
    assert [w.shape for w in params.fold1.weights] == [(285, 285), (128, 285), (3, 128)]
    assert [w.shape for w in params.fold2.weights] == [(286, 286), (128, 286), (3, 128)]


def test_grid():
    g = FoldingConfig().grid()
    assert g.shape == (9, 2)
    assert g.min() == -0.05 and g.max() == 0.05
    assert len(np.unique(g, axis=0)) == 9
    with pytest.raises(ValueError):
        FoldingConfig(r=8, u=3)


def test_zero_parameters_give_tiled_points(gen, params):
    coarse = gen.uniform(-1, 1, (3072, 3))
    feats = gen.normal(size=(3072, FEAT_DIM))
    out = folding_densify(coarse, feats, params.zeros_like())
    assert out.shape == (27_648, 3)
    assert np.array_equal(out, np.repeat(coarse, 9, axis=0))


def test_row_permutation_equivariance(gen, params):
    coarse = gen.uniform(-1, 1, (20, 3))
    feats = gen.normal(size=(20, FEAT_DIM))
    perm = gen.permutation(20)
    out = folding_densify(coarse, feats, params).reshape(20, 9, 3)
    outp = folding_densify(coarse[perm], feats[perm], params).reshape(20, 9, 3)
    assert np.allclose(outp, out[perm], rtol=0, atol=1e-14)


def test_manual_composition(gen, params):
    """Two shared MLPs written out step by step for one coarse point."""
    c = gen.uniform(-1, 1, (1, 3))
    f = gen.normal(size=(1, FEAT_DIM))
    grid = FoldingConfig().grid()

    def mlp(layer, x):
        for k in range(3):
            x = layer.weights[k] @ x + layer.biases[k]
            if k < 2:
                x = np.maximum(x / np.sqrt(1.0 + 1e-5), 0.0)
        return x

    want = []
    for j in range(9):
        a = mlp(params.fold1, np.concatenate([c[0], f[0], grid[j]]))
        want.append(c[0] + mlp(params.fold2, np.concatenate([a, c[0], f[0]])))
    assert np.allclose(folding_densify(c, f, params), want, rtol=0, atol=1e-13)


def test_shape_errors(gen, params):
    with pytest.raises(ShapeError):
        folding_densify(np.zeros((3, 3)), np.zeros((4, FEAT_DIM)), params)
    with pytest.raises(ShapeError):
        folding_densify(np.zeros((3, 3)), np.zeros((3, 100)), params)
    with pytest.raises(ShapeError):
        folding_densify(np.zeros((3, 2)), np.zeros((3, FEAT_DIM)), params)


def test_weight_grads_match_differences(gen):
    params = FoldingParams.random(SeededRng(9))
    coarse = gen.uniform(-1, 1, (2, 3))
    feats = gen.normal(size=(2, FEAT_DIM))
    up = gen.normal(size=(18, 3))
    grads = folding_weight_grads(coarse, feats, params, up)
    layers = {"fold1": params.fold1, "fold2": params.fold2}
    checked = 0
    for name in sorted(grads):
        layer = layers[name.split(".")[0]]
        kind, k = name.split(".")[1][0], int(name.split(".")[1][1])
        arr = layer.weights[k] if kind == "w" else layer.biases[k]
        assert grads[name].shape == arr.shape
        for _ in range(4):
            idx = tuple(int(gen.integers(s)) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + 1e-6
            hi = np.sum(up * folding_densify(coarse, feats, params))
            arr[idx] = old - 1e-6
            lo = np.sum(up * folding_densify(coarse, feats, params))
            arr[idx] = old
            num = (hi - lo) / 2e-6
            assert grads[name][idx] == pytest.approx(num, rel=1e-5, abs=1e-7)
            checked += 1
    assert checked == 48
    with pytest.raises(ShapeError):
        folding_weight_grads(coarse, feats, params, up[:5])
