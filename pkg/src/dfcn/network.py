"""Full encoder-decoder: D-Conv before every down and up block, skip links, per-point head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from dfcn import autodiff as ad
from dfcn.dconv import DConvSpec, dconv_forward, glorot, init_dconv_params
from dfcn.dknn import Space
from dfcn.hierarchy import LevelState, down_block, up_block

LOSS_EQ7 = "eq7"
LOSS_CATEGORICAL = "categorical"


@dataclass
class NetworkConfig:
    """Architecture description.

    ``radii[l]`` is the search radius at point level ``l`` (0 = input). It
    is used by every D-Conv at that level and by the down block that
    produces that level.
    """

    level_sizes: Sequence[int] = (8192, 1024, 256, 64)
    radii: Sequence[float] = (2.0, 2.0, 5.0, 10.0)
    stem_width: int = 32
    down_widths: Sequence[int] = (64, 128, 256)
    up_widths: Sequence[int] = (256, 128, 128)
    head_width: int = 128
    n_dirs: int = 8
    k_dconv: int = 2
    dconv_blocks: int = 2
    space: str = Space.PROJECTED_2D.value
    use_dconv: bool = True
    n_classes: int = 9
    alpha: float | None = 1.2
    input_features: Sequence[str] = ("intensity", "z")
    nsample: int = 32
    interp_k: int = 32
    interp_power: float = 2.0
    fps_start: int = 0
    loss: str = LOSS_EQ7
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.level_sizes = tuple(int(v) for v in self.level_sizes)
        self.radii = tuple(float(v) for v in self.radii)
        self.down_widths = tuple(int(v) for v in self.down_widths)
        self.up_widths = tuple(int(v) for v in self.up_widths)
        self.input_features = tuple(self.input_features)
        self.space = Space(self.space).value
        self.validate()

    @property
    def n_levels(self) -> int:
        return len(self.level_sizes)

    @property
    def d0(self) -> int:
        return len(self.input_features)

    def validate(self):
        ls = self.level_sizes
        if len(ls) < 2 or any(b >= a for a, b in zip(ls, ls[1:])) or min(ls) < 1:
            raise ValueError("level_sizes must be strictly decreasing positive counts")
        depth = len(ls) - 1
        if len(self.radii) != len(ls):
            raise ValueError("radii needs one entry per point level")
        if len(self.down_widths) != depth or len(self.up_widths) != depth:
            raise ValueError(f"down_widths and up_widths need {depth} entries")
        if min(self.down_widths + self.up_widths + (self.stem_width, self.head_width)) < 1:
            raise ValueError("channel widths must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.alpha is not None and not self.alpha > 1:
            raise ValueError("alpha must be > 1 (or None to disable class balancing)")
        if self.loss not in (LOSS_EQ7, LOSS_CATEGORICAL):
            raise ValueError(f"unknown loss {self.loss!r}")
        unknown = set(self.input_features) - {"intensity", "z"}
        if unknown or not self.input_features:
            raise ValueError(f"unsupported input features {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("level_sizes", "radii", "down_widths", "up_widths", "input_features"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def sizes_for(self, n: int) -> list[int]:
        """Point counts per level for an input of ``n`` points (exact schedule at n = level_sizes[0])."""
        sizes = [int(n)]
        for target in self.level_sizes[1:]:
            m = max(1, math.ceil(n * target / self.level_sizes[0]))
            sizes.append(min(m, sizes[-1]))
        return sizes


@dataclass
class DFCN:
    config: NetworkConfig
    params: ad.ParamStore
    dconv_specs: list = field(default_factory=list)

    @property
    def dtype(self):
        return self.params.dtype

    def forward(self, points, point_features, trace: list | None = None) -> ad.Tensor:
        """Per-point logits N x C. ``trace`` (if given) receives the point count at every stage."""
        return forward(self, points, point_features, trace)


def _dconv_plan(cfg: NetworkConfig):
    """(level, d_in, d_out) for the D-Conv in front of each down block and each up block."""
    depth = cfg.n_levels - 1
    plan = []
    width_in = cfg.d0
    down_in = []
    for lvl in range(depth):
        d_out = cfg.stem_width if lvl == 0 else width_in
        if not cfg.use_dconv:
            d_out = width_in
        plan.append((lvl, width_in, d_out))
        down_in.append(d_out)
        width_in = cfg.down_widths[lvl]
    src_width = width_in
    for i in range(depth):
        lvl = depth - i
        plan.append((lvl, src_width, src_width))
        src_width = cfg.up_widths[i]
    return plan, down_in


def build_dfcn(config: NetworkConfig, seed: int | None = None) -> DFCN:
    """Create parameters for ``config``; identical seeds give identical parameters."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    store = ad.ParamStore(np.dtype(config.dtype))
    plan, down_in = _dconv_plan(config)
    depth = config.n_levels - 1
    specs = []
    for i, (lvl, d_in, d_out) in enumerate(plan):
        spec = DConvSpec(config.n_dirs, config.k_dconv, config.radii[lvl], d_in, d_out,
                         config.dconv_blocks, Space(config.space))
        specs.append(spec)
        if config.use_dconv:
            init_dconv_params(store, f"dconv{i}", spec, rng)

    skip_widths = []
    for lvl in range(depth):
        d_in = down_in[lvl]
        skip_widths.append(d_in)
        d_out = config.down_widths[lvl]
        store.add(f"down{lvl}.mlp.weight", glorot(rng, (d_out, 3 + d_in), 3 + d_in, d_out))
        store.add(f"down{lvl}.mlp.bias", np.zeros(d_out))

    src_width = config.down_widths[-1]
    for i in range(depth):
        skip_w = skip_widths[depth - 1 - i]
        d_out = config.up_widths[i]
        store.add(f"up{i}.mlp.weight", glorot(rng, (d_out, src_width + skip_w), src_width + skip_w, d_out))
        store.add(f"up{i}.mlp.bias", np.zeros(d_out))
        src_width = d_out

    hw = config.head_width
    store.add("head.hidden.weight", glorot(rng, (hw, src_width), src_width, hw))
    store.add("head.hidden.bias", np.zeros(hw))
    store.add("head.out.weight", glorot(rng, (config.n_classes, hw), hw, config.n_classes))
    store.add("head.out.bias", np.zeros(config.n_classes))
    return DFCN(config, store, specs)


def _dconv(model: DFCN, i: int, state: LevelState) -> LevelState:
    if not model.config.use_dconv:
        return state
    out = dconv_forward(state.points, state.features, model.dconv_specs[i], model.params, f"dconv{i}")
    return LevelState(state.points, out, state.level)


def forward(model: DFCN, points, point_features, trace: list | None = None) -> ad.Tensor:
    cfg = model.config
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if isinstance(point_features, ad.Tensor):
        feats = point_features
    else:
        feats = ad.Tensor(np.asarray(point_features, dtype=model.dtype))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ad.ShapeError("points must be N x 3")
    if feats.shape != (len(pts), cfg.d0):
        raise ad.ShapeError(f"point features must be N x {cfg.d0}, got {feats.shape}")
    depth = cfg.n_levels - 1
    sizes = cfg.sizes_for(len(pts))
    params = model.params

    state = LevelState(pts, feats, 0)
    skips = []
    for lvl in range(depth):
        state = _dconv(model, lvl, state)
        skips.append(state)
        if trace is not None:
            trace.append(len(state))
        state, _ = down_block(state, sizes[lvl + 1], cfg.radii[lvl + 1], cfg.nsample, params,
                              f"down{lvl}", start=min(cfg.fps_start, len(state) - 1))
    if trace is not None:
        trace.append(len(state))
    for i in range(depth):
        state = _dconv(model, depth + i, state)
        state = up_block(state, skips[depth - 1 - i], cfg.interp_k, cfg.interp_power, params, f"up{i}")
        if trace is not None:
            trace.append(len(state))

    h = ad.relu(ad.pointwise_mlp(state.features, params["head.hidden.weight"], params["head.hidden.bias"]))
    return ad.pointwise_mlp(h, params["head.out.weight"], params["head.out.bias"])


# ---------------------------------------------------------------- loss


def class_weights(counts, alpha: float | None) -> np.ndarray:
    """Class balance weights 1 / ln(alpha + N_c / sum N). ``alpha=None`` gives all ones."""
    counts = np.asarray(counts, dtype=np.float64)
    if alpha is None:
        return np.ones(len(counts))
    total = counts.sum()
    if not total > 0:
        raise ValueError("class counts must sum to a positive number")
    arg = alpha + counts / total
    if np.any(arg <= 1.0):
        raise ValueError(f"alpha={alpha} makes ln(alpha + fraction) <= 0 for some class")
    return 1.0 / np.log(arg)


_P_FLOOR = 1e-15


def weighted_loss(logits, labels, weights, mode: str = LOSS_EQ7) -> ad.Tensor:
    """Class-weighted loss on softmax probabilities, mean over labeled points.

    ``eq7``: -w_i * sum_c [y_ic ln p_ic + (1 - y_ic) ln(1 - p_ic)].
    ``categorical``: -w_i * ln p_i,y_i.
    Labels >= C (the unlabeled sentinel) are masked out. Probabilities are
    floored at 1e-15 inside the logarithms.
    """
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n, c = logits.shape
    if len(labels) != n:
        raise ad.ShapeError("labels do not match logits")
    if len(weights) != c:
        raise ad.ShapeError("one weight per class expected")
    mask = (labels >= 0) & (labels < c)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("every point is unlabeled; loss is undefined")
    probs = ad.softmax_rows(logits)
    p = probs.data
    y = np.zeros_like(p)
    y[np.flatnonzero(mask), labels[mask]] = 1.0
    w = np.where(mask, weights[np.where(mask, labels, 0)], 0.0)[:, None] / count

    if mode == LOSS_EQ7:
        pc = np.maximum(p, _P_FLOOR)
        qc = np.maximum(1.0 - p, _P_FLOOR)
        value = -np.sum(w * (y * np.log(pc) + (1.0 - y) * np.log(qc)))

        def backward(g):
            dp = -(w * (y / pc * (p > _P_FLOOR) - (1.0 - y) / qc * ((1.0 - p) > _P_FLOOR)))
            return (g * dp,)
    elif mode == LOSS_CATEGORICAL:
        pc = np.maximum(p, _P_FLOOR)
        value = -np.sum(w * y * np.log(pc))

        def backward(g):
            return (g * (-(w * y / pc) * (p > _P_FLOOR)),)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")

    return ad.Tensor.from_op(np.asarray(value, dtype=p.dtype), (probs,), backward)


def predict_labels(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class id."""
    data = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)
