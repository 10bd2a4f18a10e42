"""Small builders shared by the test modules."""
import numpy as np

from heatmil.bags import BagOfPatches
from heatmil.model import ModelConfig, ModelParams
from heatmil.tensor import relative_error

FD_EPS = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-8


def toy_config(**kw):
    base = dict(embed_dim=5, proj_dim=4, hidden_dim=3, num_labels=2, otsu_bins=32)
    base.update(kw)
    return ModelConfig(**base)


def toy_bag(rng, cfg, coords=((0, 0), (0, 1)), patch=(3, 3), labels=None, mask=False, bag_id="toy"):
    coords = np.asarray(coords)
    emb = rng.normal(size=(len(coords), cfg.embed_dim) + tuple(patch))
    if labels is None:
        labels = rng.integers(0, 2, size=cfg.num_labels)
    m = None
    if mask:
        rows, cols = coords.max(axis=0) + 1
        m = rng.random((cfg.num_labels, rows * patch[0], cols * patch[1])) < 0.3
    return BagOfPatches(bag_id, emb, coords, labels, m)


def random_params(cfg, seed, scale=1.0, dtype=np.float64):
    """Params with random values everywhere (biases and norm affines included)."""
    rng = np.random.default_rng(seed)
    p = ModelParams.init(cfg, seed=seed, dtype=dtype)
    for name, pair in p.tensors.items():
        if name.endswith(".gain"):
            pair.value[...] = rng.uniform(0.5, 1.5, size=pair.value.shape)
        elif name.endswith(".kernel"):
            pair.value[...] *= scale
        else:
            pair.value[...] = rng.normal(scale=0.3, size=pair.value.shape)
    return p


def fd_close(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL):
    err = relative_error(analytic, numeric, atol)
    assert err < rtol, f"max relative error {err:.3e}"
    return err
