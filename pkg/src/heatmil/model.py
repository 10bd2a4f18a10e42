"""Heatmap aggregator: projection, detection/context stacks, fusion,
Otsu masking and global pooling over a bag of patch embeddings.

The forward pass of a bag is

    project -> detection & context stacks -> fuse per patch -> stitch
    -> per-label Otsu mask on the full map -> pool per label -> y_hat

and :func:`backward_bag` walks the same graph in reverse, treating the
Otsu mask as a constant.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .bags import BagOfPatches
from .errors import ConfigError, DimensionError, LayoutError
from .otsu import OtsuResult, otsu_threshold
from .pooling import pool
from .tensor import (
    ConvLayer,
    GradPair,
    conv2d,
    conv2d_backward,
    conv2d_with_cols,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    sigmoid,
)

POOLING_MODES = ("smoothmax", "max", "lp")
PROB_CLIP = 1e-7
STACK_DEPTH = 3


@dataclass
class ModelConfig:
    embed_dim: int = 1024
    proj_dim: int = 128
    hidden_dim: int = 64
    num_labels: int = 1
    detection_kernel: int = 1
    context_kernel: int = 3
    alpha: float = 8.0
    otsu_bins: int = 256
    pooling_mode: str = "smoothmax"
    lp_p: float = 2.0
    context_enabled: bool = True
    threshold_enabled: bool = True

    def __post_init__(self):
        if not 1 <= self.proj_dim <= self.embed_dim:
            raise ConfigError("proj_dim must be in [1, embed_dim]")
        if self.hidden_dim < 1 or self.num_labels < 1:
            raise ConfigError("hidden_dim and num_labels must be positive")
        for k in (self.detection_kernel, self.context_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.otsu_bins < 2:
            raise ConfigError("otsu_bins must be at least 2")
        if self.pooling_mode not in POOLING_MODES:
            raise ConfigError(f"pooling_mode must be one of {POOLING_MODES}")
        if self.pooling_mode == "lp" and self.lp_p < 2:
            raise ConfigError("lp_p must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _stack_shapes(prefix, c_in, hidden, c_out, k):
    chans = [c_in, hidden, hidden, c_out]
    shapes = []
    for i in range(STACK_DEPTH):
        shapes.append((f"{prefix}.conv{i}.kernel", (chans[i + 1], chans[i], k, k)))
        shapes.append((f"{prefix}.conv{i}.bias", (chans[i + 1],)))
        if i < STACK_DEPTH - 1:
            shapes.append((f"{prefix}.norm{i}.gain", (chans[i + 1],)))
            shapes.append((f"{prefix}.norm{i}.shift", (chans[i + 1],)))
    return shapes


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list of every learnable tensor."""
    shapes = [
        ("projection.kernel", (cfg.proj_dim, cfg.embed_dim, 1, 1)),
        ("projection.bias", (cfg.proj_dim,)),
    ]
    shapes += _stack_shapes("detection", cfg.proj_dim, cfg.hidden_dim, cfg.num_labels, cfg.detection_kernel)
    shapes += _stack_shapes("context", cfg.proj_dim, cfg.hidden_dim, cfg.num_labels, cfg.context_kernel)
    return shapes


class ModelParams:
    """Named learnable tensors, each paired with a gradient buffer."""

    def __init__(self, config: ModelConfig, tensors: dict[str, GradPair]):
        self.config = config
        self.tensors = tensors
        expected = parameter_shapes(config)
        if [n for n, _ in expected] != list(tensors):
            raise ConfigError("parameter names do not match the model configuration")
        for name, shape in expected:
            if tensors[name].value.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {tensors[name].value.shape}")

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "ModelParams":
        tensors = {}
        for name, shape in parameter_shapes(config):
            fill = 1.0 if name.endswith(".gain") else 0.0
            tensors[name] = GradPair(np.full(shape, fill, dtype=dtype))
        return cls(config, tensors)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        """Fan-in scaled uniform kernels, zero biases, unit norm gains."""
        rng = np.random.default_rng(seed)
        params = cls.zeros(config, dtype)
        for name, pair in params.tensors.items():
            if name.endswith(".kernel"):
                fan_in = int(np.prod(pair.value.shape[1:]))
                bound = np.sqrt(1.0 / fan_in)
                pair.value[...] = rng.uniform(-bound, bound, size=pair.value.shape)
        return params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name].value

    def conv(self, prefix: str) -> ConvLayer:
        return ConvLayer(self[f"{prefix}.kernel"], self[f"{prefix}.bias"])

    @property
    def dtype(self):
        return self["projection.kernel"].dtype

    def count(self) -> int:
        return sum(p.value.size for p in self.tensors.values())

    def zero_grad(self):
        for p in self.tensors.values():
            p.zero_grad()

    def accumulate(self, grads: dict[str, np.ndarray], scale: float = 1.0):
        for name, g in grads.items():
            self.tensors[name].grad += scale * g

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: GradPair(p.value.astype(dtype), p.grad.astype(dtype)) for n, p in self.tensors.items()},
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def equals(self, other: "ModelParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self[n], other[n]) for n in self.tensors
        )


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count (independent of :func:`parameter_shapes`)."""
    p, h, c = cfg.proj_dim, cfg.hidden_dim, cfg.num_labels

    def stack(k):
        return (p * h * k * k + h) + 2 * h + (h * h * k * k + h) + 2 * h + (h * c * k * k + c)

    return cfg.embed_dim * p + p + stack(cfg.detection_kernel) + stack(cfg.context_kernel)


# ---------------------------------------------------------------- forward parts


def project(embedding: np.ndarray, params: ModelParams) -> np.ndarray:
    """Pure 1x1 linear projection ``embed_dim -> proj_dim``."""
    return conv2d(embedding, params.conv("projection"))


def _stack_forward(x, params, prefix):
    cache = []
    for i in range(STACK_DEPTH):
        layer = params.conv(f"{prefix}.conv{i}")
        y, cols = conv2d_with_cols(x, layer)
        if i == STACK_DEPTH - 1:
            cache.append((x, layer, cols, None, None))
            return y, cache
        a = gelu(y)
        n, ln_cache = layer_norm(a, params[f"{prefix}.norm{i}.gain"], params[f"{prefix}.norm{i}.shift"])
        cache.append((x, layer, cols, y, ln_cache))
        x = n


def _stack_backward(dout, cache, prefix, grads):
    for i in reversed(range(STACK_DEPTH)):
        x, layer, cols, y, ln_cache = cache[i]
        if ln_cache is not None:
            da, dgain, dshift = layer_norm_backward(dout, ln_cache)
            grads[f"{prefix}.norm{i}.gain"] = dgain
            grads[f"{prefix}.norm{i}.shift"] = dshift
            dout = gelu_backward(da, y)
        dout, dk, db = conv2d_backward(dout, x, layer, cols)
        grads[f"{prefix}.conv{i}.kernel"] = dk
        grads[f"{prefix}.conv{i}.bias"] = db
    return dout


def detection_forward(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Raw (pre-sigmoid) detection scores, one channel per label."""
    return _stack_forward(x, params, "detection")[0]


def context_forward(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Raw (pre-sigmoid) context suppression scores, one channel per label."""
    return _stack_forward(x, params, "context")[0]


def fuse(h_det: np.ndarray, h_con: np.ndarray | None, context_enabled: bool = True) -> np.ndarray:
    """``sigmoid((1 - sigmoid(h_con)) * h_det)``; ``sigmoid(h_det)`` without context."""
    if not context_enabled or h_con is None:
        return sigmoid(h_det)
    if h_det.shape != h_con.shape:
        raise DimensionError(f"detection map {h_det.shape} and context map {h_con.shape} differ")
    return sigmoid((1.0 - sigmoid(h_con)) * h_det)


def fuse_backward(dh, h, h_det, h_con, context_enabled=True):
    """Return ``(d_det, d_con)``; ``d_con`` is None when context is disabled."""
    du = dh * h * (1.0 - h)
    if not context_enabled or h_con is None:
        return du, None
    s = sigmoid(h_con)
    return du * (1.0 - s), -du * h_det * s * (1.0 - s)


def stitch(patch_maps: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Place ``(N, C, h, w)`` patch maps on the grid given by ``(N, 2)`` coords.

    Returns the ``(C, rows*h, cols*w)`` full map (zeros where no patch
    exists) and the boolean coverage mask of shape ``(rows*h, cols*w)``.
    """
    patch_maps = np.asarray(patch_maps)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if patch_maps.ndim != 4 or patch_maps.shape[0] != coords.shape[0]:
        raise DimensionError("stitch expects (N, C, h, w) maps with one coordinate pair each")
    if np.unique(coords, axis=0).shape[0] != coords.shape[0]:
        raise LayoutError("duplicate patch coordinates")
    n, c, h, w = patch_maps.shape
    rows, cols = coords.max(axis=0) + 1
    full = np.zeros((c, rows * h, cols * w), dtype=patch_maps.dtype)
    coverage = np.zeros((rows * h, cols * w), dtype=bool)
    for m, (r, q) in zip(patch_maps, coords):
        full[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = m
        coverage[r * h:(r + 1) * h, q * w:(q + 1) * w] = True
    return full, coverage


def unstitch(full: np.ndarray, coords: np.ndarray, patch_shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`stitch` for covered positions."""
    h, w = patch_shape
    return np.stack([full[:, r * h:(r + 1) * h, q * w:(q + 1) * w] for r, q in coords])


# ---------------------------------------------------------------- bag level


@dataclass
class BagPrediction:
    y_hat: np.ndarray
    z: np.ndarray
    full_heatmap: np.ndarray
    masked_heatmap: np.ndarray
    coverage: np.ndarray
    thresholds: list[OtsuResult | None] = field(default_factory=list)


def logit(p: np.ndarray, clip: float = PROB_CLIP) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), clip, 1 - clip)
    return np.log(p) - np.log1p(-p)


def _canonical_order(coords: np.ndarray) -> np.ndarray:
    return np.lexsort((coords[:, 1], coords[:, 0]))


def forward_bag(bag: BagOfPatches, params: ModelParams, config: ModelConfig | None = None, return_cache=False):
    """Run the full aggregator on one bag.

    Patches are processed in canonical (row, col) order so the result does
    not depend on how the bag enumerates them.
    """
    cfg = config or params.config
    if bag.embed_dim != cfg.embed_dim:
        raise DimensionError(f"bag embeddings have {bag.embed_dim} channels, model expects {cfg.embed_dim}")
    order = _canonical_order(bag.coords)
    coords = bag.coords[order]
    emb = bag.embeddings[order].astype(params.dtype, copy=False)

    proj = project(emb, params)
    h_det, det_cache = _stack_forward(proj, params, "detection")
    if cfg.context_enabled:
        h_con, con_cache = _stack_forward(proj, params, "context")
    else:
        h_con, con_cache = None, None
    h = fuse(h_det, h_con, cfg.context_enabled)

    full, coverage = stitch(h, coords)
    masked = full.copy()
    keep = np.empty(full.shape, dtype=bool)
    keep[:] = coverage
    thresholds = []
    y_hat = np.empty(cfg.num_labels)
    pool_grads = []
    for c in range(cfg.num_labels):
        vals = full[c][coverage]
        if cfg.threshold_enabled:
            res = otsu_threshold(vals, cfg.otsu_bins)
            thresholds.append(res)
            if not res.degenerate:
                keep[c] &= full[c] > res.threshold
        else:
            thresholds.append(None)
        masked[c][~keep[c]] = 0
        y, g = pool(masked[c][coverage], cfg.pooling_mode, cfg.alpha, cfg.lp_p)
        y_hat[c] = y
        pool_grads.append(g)

    pred = BagPrediction(y_hat, logit(y_hat), full, masked, coverage, thresholds)
    if not return_cache:
        return pred
    cache = dict(
        cfg=cfg, params=params, coords=coords, emb=emb, proj=proj, h_det=h_det, h_con=h_con, h=h,
        det_cache=det_cache, con_cache=con_cache, keep=keep, coverage=coverage, pool_grads=pool_grads,
        patch_shape=bag.patch_shape,
    )
    return pred, cache


def backward_bag(cache: dict, d_y_hat: np.ndarray, need_param_grads: bool = True):
    """Backpropagate ``dL/dy_hat`` through a cached forward pass.

    Returns ``(grads, d_projected)``: a dict of parameter gradients and the
    gradient with respect to the projected patch features (canonical patch
    order), which the saliency baseline reuses.
    """
    cfg, params = cache["cfg"], cache["params"]
    coverage, keep = cache["coverage"], cache["keep"]
    d_full = np.zeros((cfg.num_labels,) + coverage.shape, dtype=params.dtype)
    for c in range(cfg.num_labels):
        d_full[c][coverage] = d_y_hat[c] * cache["pool_grads"][c]
    d_full *= keep  # the mask is held constant
    dh = unstitch(d_full, cache["coords"], cache["patch_shape"])
    d_det, d_con = fuse_backward(dh, cache["h"], cache["h_det"], cache["h_con"], cfg.context_enabled)

    grads: dict[str, np.ndarray] = {}
    d_proj = _stack_backward(d_det, cache["det_cache"], "detection", grads)
    if d_con is not None:
        d_proj = d_proj + _stack_backward(d_con, cache["con_cache"], "context", grads)
    else:
        for name, pair in params.tensors.items():
            if name.startswith("context."):
                grads[name] = np.zeros_like(pair.value)
    if need_param_grads:
        _, dk, db = conv2d_backward(d_proj, cache["emb"], params.conv("projection"))
        grads["projection.kernel"] = dk
        grads["projection.bias"] = db
    return grads, d_proj
