"""Full hierarchical model: patch embedding, four stages of dual-attention
blocks with patch merging in between, and a GAP + linear classifier head.

Parameters live in a flat name -> array mapping (ModelState). Names follow
    patch_embed.{weight,bias}
    stage{i}.merge.{weight,bias}                     i = 2..4
    stage{i}.peg.{weight,bias}
    stage{i}.block{j}.{lw|gp}.{q|k|v|out}.{weight,bias}
    stage{i}.block{j}.{lw|gp}.{ln1|ln2}.{gain,shift}
    stage{i}.block{j}.{lw|gp}.{mlp_in|mlp_out}.{weight,bias}
    stage{i}.block{j}.gp.pool{s}.{time|space}.{weight,bias}
    head.{weight,bias}
with stages 1-based and blocks 0-based.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_io
from .attention import (
    WHOLE,
    AttentionParams,
    PegParams,
    PyramidKernels,
    PyramidSpec,
    WindowGrid,
    gp_msa_backward,
    gp_msa_sublayer,
    lw_msa_backward,
    lw_msa_sublayer,
    peg,
    peg_backward,
    pyramid_factor_extents,
)
from .numerics import (
    ConfigError,
    ConvKernel3D,
    ShapeError,
    ensure_finite,
    trunc_normal,
)

PRESET_NAMES = ("tiny", "small", "base")

_AXES = ("time", "height", "width")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    channels: int
    blocks: int
    window: tuple[int, int, int]
    pyramid: PyramidSpec
    merge: tuple[int, int, int]  # stage 1: the patch-embedding extent

    @property
    def temporal_pool_rate(self) -> int:
        return self.merge[0]


@dataclass(frozen=True)
class ModelConfig:
    input_extent: tuple[int, int, int]
    stages: tuple[StageConfig, ...]
    num_classes: int = 400
    head_dim: int = 32
    preset_name: str | None = None

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages, got {len(self.stages)}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for n, s in enumerate(self.stages, 1):
            if s.channels % self.head_dim != 0:
                raise ConfigError(
                    f"stage {n} channels {s.channels} not divisible by "
                    f"head_dim {self.head_dim}")

    def heads(self, stage_index: int) -> int:
        return self.stages[stage_index].channels // self.head_dim

    def map_extents(self) -> list[tuple[int, int, int]]:
        """Per-stage token-map extents; validates all divisibility constraints."""
        extents = []
        current = tuple(self.input_extent)
        for n, stage in enumerate(self.stages, 1):
            nxt = []
            for size, rate, axis in zip(current, stage.merge, _AXES):
                if rate < 1 or size % rate != 0:
                    raise ShapeError(
                        f"stage {n} merge rate {rate} does not divide extent "
                        f"{size} along {axis}")
                nxt.append(size // rate)
            current = tuple(nxt)
            WindowGrid(current, stage.window)   # validates window divisibility
            stage.pyramid.resolve(current)      # validates pyramid divisibility
            extents.append(current)
        return extents


def preset(name: str) -> ModelConfig:
    """The three published configurations (tiny / small / base)."""
    if name not in PRESET_NAMES:
        raise ConfigError(
            f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
    channels = {
        "tiny": (64, 128, 256, 512),
        "small": (96, 192, 384, 768),
        "base": (128, 256, 512, 1024),
    }[name]
    blocks = {
        "tiny": (1, 1, 5, 2),
        "small": (1, 1, 9, 1),
        "base": (1, 1, 9, 1),
    }[name]
    pyramids = (
        PyramidSpec(((4, 4, 4), (8, 7, 7))),
        PyramidSpec(((4, 4, 4), (8, 7, 7))),
        PyramidSpec(((8, 7, 7),)),
        PyramidSpec((WHOLE,)),
    )
    merges = ((2, 4, 4), (1, 2, 2), (1, 2, 2), (1, 2, 2))
    stages = tuple(
        StageConfig(channels=c, blocks=b, window=(8, 7, 7), pyramid=p, merge=m)
        for c, b, p, m in zip(channels, blocks, pyramids, merges))
    cfg = ModelConfig(input_extent=(32, 224, 224), stages=stages,
                      num_classes=400, head_dim=32, preset_name=name)
    cfg.map_extents()
    return cfg


def micro_config(num_classes: int = 5) -> ModelConfig:
    """Small four-stage config used by the gradient / identity checks:
    one block per stage, channels (8, 16, 32, 64), input (4, 16, 16, 3)."""
    stages = (
        StageConfig(8, 1, (2, 2, 2), PyramidSpec(((1, 2, 2), (2, 2, 2))),
                    (2, 4, 4)),
        StageConfig(16, 1, (2, 2, 2), PyramidSpec(((1, 1, 1), (2, 2, 2))),
                    (1, 2, 2)),
        StageConfig(32, 1, (2, 1, 1), PyramidSpec(((2, 1, 1),)), (1, 2, 2)),
        StageConfig(64, 1, (2, 1, 1), PyramidSpec((WHOLE,)), (1, 1, 1)),
    )
    return ModelConfig(input_extent=(4, 16, 16), stages=stages,
                       num_classes=num_classes, head_dim=4,
                       preset_name="micro")


def random_micro_config(rng: np.random.Generator) -> ModelConfig:
    """Random small but valid config (used by the counting cross-checks)."""
    def divisors(n):
        return [d for d in range(1, n + 1) if n % d == 0]

    def pick_triple(extent):
        return tuple(int(rng.choice(divisors(s))) for s in extent)

    t_in = int(rng.choice([4, 8]))
    hw_in = int(rng.choice([8, 16]))
    patch = (2, 2, 2)
    head_dim = int(rng.choice([2, 4]))
    c1 = head_dim * int(rng.choice([2, 4]))
    # keep every stage map at >= 2 tokens: the late temporal halving is only
    # available when the time axis can absorb it
    rate3 = int(rng.choice([1, 2])) if t_in == 8 else 1
    merges = [patch, (1, 2, 2), (rate3, 2, 2), (1, 1, 1)]

    current = (t_in, hw_in, hw_in)
    stages = []
    for i in range(4):
        current = tuple(s // r for s, r in zip(current, merges[i]))
        window = pick_triple(current)
        scales = [pick_triple(current)]
        if rng.random() < 0.5:
            extra = WHOLE if rng.random() < 0.3 else pick_triple(current)
            if extra != scales[0]:
                scales.append(extra)
        stages.append(StageConfig(
            channels=c1 * 2 ** i,
            blocks=int(rng.choice([1, 2])),
            window=window,
            pyramid=PyramidSpec(tuple(scales)),
            merge=merges[i]))
    cfg = ModelConfig(input_extent=(t_in, hw_in, hw_in), stages=tuple(stages),
                      num_classes=int(rng.integers(2, 8)), head_dim=head_dim)
    cfg.map_extents()
    return cfg


def config_from_dict(data: dict) -> ModelConfig:
    """Build a config from a JSON-style dict, optionally starting from a
    preset via the "base" key and overriding fields."""
    base = preset(data["base"]) if "base" in data else None

    def stage_from(entry: dict, fallback: StageConfig | None) -> StageConfig:
        def get(key, default):
            return entry.get(key, default)
        if fallback is None:
            required = ("channels", "blocks", "window", "pyramid", "merge")
            missing = [k for k in required if k not in entry]
            if missing:
                raise ConfigError(f"stage entry missing fields: {missing}")
        merge = get("merge", fallback.merge if fallback else None)
        if "temporal_pool_rate" in entry:
            merge = (int(entry["temporal_pool_rate"]), 2, 2)
        pyramid = entry.get("pyramid")
        if pyramid is not None:
            pyramid = PyramidSpec(tuple(
                WHOLE if s == WHOLE else tuple(s) for s in pyramid))
        else:
            pyramid = fallback.pyramid
        return StageConfig(
            channels=int(get("channels", fallback.channels if fallback else 0)),
            blocks=int(get("blocks", fallback.blocks if fallback else 0)),
            window=tuple(get("window", fallback.window if fallback else None)),
            pyramid=pyramid,
            merge=tuple(merge))

    stage_entries = data.get("stages")
    if stage_entries is None:
        if base is None:
            raise ConfigError("config needs either \"base\" or \"stages\"")
        stages = base.stages
    else:
        if len(stage_entries) != 4:
            raise ConfigError("\"stages\" must list exactly 4 entries")
        fallbacks = base.stages if base else (None,) * 4
        stages = tuple(stage_from(e or {}, f)
                       for e, f in zip(stage_entries, fallbacks))

    cfg = ModelConfig(
        input_extent=tuple(data.get(
            "input_extent", base.input_extent if base else None)),
        stages=stages,
        num_classes=int(data.get(
            "num_classes", base.num_classes if base else 400)),
        head_dim=int(data.get("head_dim", base.head_dim if base else 32)),
        preset_name=data.get("base", "custom") if base else "custom")
    cfg.map_extents()
    return cfg


def config_to_dict(config: ModelConfig) -> dict:
    """JSON-ready dict; config_from_dict(config_to_dict(c)) round-trips."""
    return {
        "input_extent": list(config.input_extent),
        "num_classes": config.num_classes,
        "head_dim": config.head_dim,
        "stages": [{
            "channels": s.channels,
            "blocks": s.blocks,
            "window": list(s.window),
            "pyramid": [sc if sc == WHOLE else list(sc)
                        for sc in s.pyramid.scales],
            "merge": list(s.merge),
        } for s in config.stages],
    }


# ---------------------------------------------------------------------------
# parameter inventory
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    kind: str  # conv3d | dwconv3d | matrix | vector


def _attention_param_specs(prefix: str, dim: int) -> list[ParamSpec]:
    hidden = 4 * dim
    specs = []
    for proj in ("q", "k", "v", "out"):
        specs.append(ParamSpec(f"{prefix}.{proj}.weight", (dim, dim), "matrix"))
        specs.append(ParamSpec(f"{prefix}.{proj}.bias", (dim,), "vector"))
    for ln in ("ln1", "ln2"):
        specs.append(ParamSpec(f"{prefix}.{ln}.gain", (dim,), "vector"))
        specs.append(ParamSpec(f"{prefix}.{ln}.shift", (dim,), "vector"))
    specs.append(ParamSpec(f"{prefix}.mlp_in.weight", (dim, hidden), "matrix"))
    specs.append(ParamSpec(f"{prefix}.mlp_in.bias", (hidden,), "vector"))
    specs.append(ParamSpec(f"{prefix}.mlp_out.weight", (hidden, dim), "matrix"))
    specs.append(ParamSpec(f"{prefix}.mlp_out.bias", (dim,), "vector"))
    return specs


def param_specs(config: ModelConfig) -> list[ParamSpec]:
    """Ordered inventory of every parameter tensor of a model."""
    maps = config.map_extents()
    specs: list[ParamSpec] = []
    prev_c = 3
    for i, stage in enumerate(config.stages, 1):
        c = stage.channels
        name = "patch_embed" if i == 1 else f"stage{i}.merge"
        specs.append(ParamSpec(f"{name}.weight", stage.merge + (prev_c, c),
                               "conv3d"))
        specs.append(ParamSpec(f"{name}.bias", (c,), "vector"))
        specs.append(ParamSpec(f"stage{i}.peg.weight", (c, 3, 3, 3), "dwconv3d"))
        specs.append(ParamSpec(f"stage{i}.peg.bias", (c,), "vector"))
        for j in range(stage.blocks):
            blk = f"stage{i}.block{j}"
            specs.extend(_attention_param_specs(f"{blk}.lw", c))
            specs.extend(_attention_param_specs(f"{blk}.gp", c))
            for s, scale in enumerate(stage.pyramid.resolve(maps[i - 1])):
                te, se = pyramid_factor_extents(scale, maps[i - 1])
                specs.append(ParamSpec(f"{blk}.gp.pool{s}.time.weight",
                                       (c,) + te, "dwconv3d"))
                specs.append(ParamSpec(f"{blk}.gp.pool{s}.time.bias", (c,),
                                       "vector"))
                specs.append(ParamSpec(f"{blk}.gp.pool{s}.space.weight",
                                       (c,) + se, "dwconv3d"))
                specs.append(ParamSpec(f"{blk}.gp.pool{s}.space.bias", (c,),
                                       "vector"))
        prev_c = c
    specs.append(ParamSpec("head.weight",
                           (config.stages[-1].channels, config.num_classes),
                           "matrix"))
    specs.append(ParamSpec("head.bias", (config.num_classes,), "vector"))
    return specs


class ModelState:
    """Flat name -> ndarray parameter store."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def element_count(self) -> int:
        return sum(int(a.size) for a in self.params.values())

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name]).tobytes())
        return digest.hexdigest()

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()})


def init_random(config: ModelConfig, seed: int) -> ModelState:
    """Reproducible init: truncated-normal (std 0.02) conv/linear weights,
    zero biases, unit LN gains, zero peg kernels."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for spec in param_specs(config):
        if spec.name.endswith((".bias", ".shift")):
            arr = np.zeros(spec.shape)
        elif spec.name.endswith(".gain"):
            arr = np.ones(spec.shape)
        elif ".peg." in spec.name:
            arr = np.zeros(spec.shape)
        else:
            arr = trunc_normal(rng, spec.shape, 0.02)
        params[spec.name] = arr
    return ModelState(params)


def attention_params(config: ModelConfig, state: ModelState, stage: int,
                     block: int, which: str) -> AttentionParams:
    """View of one sub-layer's parameters (no copies)."""
    p = state.params
    pre = f"stage{stage}.block{block}.{which}"
    return AttentionParams(
        heads=config.heads(stage - 1),
        q_weight=p[f"{pre}.q.weight"], q_bias=p[f"{pre}.q.bias"],
        k_weight=p[f"{pre}.k.weight"], k_bias=p[f"{pre}.k.bias"],
        v_weight=p[f"{pre}.v.weight"], v_bias=p[f"{pre}.v.bias"],
        out_weight=p[f"{pre}.out.weight"], out_bias=p[f"{pre}.out.bias"],
        ln1_gain=p[f"{pre}.ln1.gain"], ln1_shift=p[f"{pre}.ln1.shift"],
        ln2_gain=p[f"{pre}.ln2.gain"], ln2_shift=p[f"{pre}.ln2.shift"],
        mlp_in_weight=p[f"{pre}.mlp_in.weight"],
        mlp_in_bias=p[f"{pre}.mlp_in.bias"],
        mlp_out_weight=p[f"{pre}.mlp_out.weight"],
        mlp_out_bias=p[f"{pre}.mlp_out.bias"])


def pyramid_kernels(config: ModelConfig, state: ModelState, stage: int,
                    block: int) -> PyramidKernels:
    p = state.params
    pre = f"stage{stage}.block{block}.gp"
    pairs = []
    for s in range(config.stages[stage - 1].pyramid.n_scales):
        tw = p[f"{pre}.pool{s}.time.weight"]
        sw = p[f"{pre}.pool{s}.space.weight"]
        pairs.append((
            ConvKernel3D(tw, stride=tuple(tw.shape[1:]),
                         bias=p[f"{pre}.pool{s}.time.bias"]),
            ConvKernel3D(sw, stride=tuple(sw.shape[1:]),
                         bias=p[f"{pre}.pool{s}.space.bias"])))
    return PyramidKernels(tuple(pairs))


def peg_params(state: ModelState, stage: int) -> PegParams:
    w = state.params[f"stage{stage}.peg.weight"]
    return PegParams(ConvKernel3D(w, stride=(1, 1, 1),
                                  bias=state.params[f"stage{stage}.peg.bias"]))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def nonoverlap_conv3d(x: np.ndarray, weight: np.ndarray,
                      bias: np.ndarray | None, counter=None, label: str = "",
                      kind: str = "embed") -> np.ndarray:
    """Non-overlapping convolution (extent == stride): equivalent to flattening
    each (kt, kh, kw, Cin) patch and applying one linear projection.

    weight has shape (kt, kh, kw, Cin, Cout).
    """
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeError(
            f"nonoverlap_conv3d expects a 4-D map and 5-D weight, got "
            f"{x.shape} / {weight.shape}")
    kt, kh, kw, cin, cout = weight.shape
    t, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weight expects {cin}")
    for size, k, axis in zip((t, h, w), (kt, kh, kw), _AXES):
        if size % k != 0:
            raise ShapeError(
                f"patch extent {k} does not divide map extent {size} along "
                f"{axis}")
    ot, oh, ow = t // kt, h // kh, w // kw
    patches = x.reshape(ot, kt, oh, kh, ow, kw, cin)
    patches = patches.transpose(0, 2, 4, 1, 3, 5, 6).reshape(
        ot * oh * ow, kt * kh * kw * cin)
    out = patches @ weight.reshape(-1, cout)
    if bias is not None:
        out = out + bias
    if counter is not None:
        counter.add(label, kind, patches.shape[0] * patches.shape[1] * cout)
    return out.reshape(ot, oh, ow, cout)


def nonoverlap_conv3d_vjp(g: np.ndarray, x: np.ndarray, weight: np.ndarray):
    kt, kh, kw, cin, cout = weight.shape
    t, h, w, _ = x.shape
    ot, oh, ow = t // kt, h // kh, w // kw
    patches = x.reshape(ot, kt, oh, kh, ow, kw, cin)
    patches = patches.transpose(0, 2, 4, 1, 3, 5, 6).reshape(
        ot * oh * ow, kt * kh * kw * cin)
    gf = g.reshape(-1, cout)
    d_patches = gf @ weight.reshape(-1, cout).T
    dx = d_patches.reshape(ot, oh, ow, kt, kh, kw, cin)
    dx = dx.transpose(0, 3, 1, 4, 2, 5, 6).reshape(t, h, w, cin)
    d_weight = (patches.T @ gf).reshape(weight.shape)
    return np.ascontiguousarray(dx), d_weight, gf.sum(axis=0)


def patch_embed(clip: np.ndarray, state: ModelState, counter=None
                ) -> np.ndarray:
    """Project non-overlapping input patches to the stage-1 token map."""
    return nonoverlap_conv3d(clip, state["patch_embed.weight"],
                             state["patch_embed.bias"], counter,
                             "patch_embed", "embed")


def patch_merge(x: np.ndarray, state: ModelState, stage: int, counter=None
                ) -> np.ndarray:
    """Downsample by the stage's merge rate while growing the channel width."""
    return nonoverlap_conv3d(x, state[f"stage{stage}.merge.weight"],
                             state[f"stage{stage}.merge.bias"], counter,
                             f"stage{stage}.merge", "embed")


def dual_block(x: np.ndarray, grid: WindowGrid, spec: PyramidSpec,
               lw: AttentionParams, gp: AttentionParams,
               pools: PyramidKernels, peg_p: PegParams | None = None,
               counter=None, label: str = "block",
               peg_label: str = "peg") -> np.ndarray:
    """One block: local window attention, optional peg, global pyramid
    attention; shape-preserving."""
    y = lw_msa_sublayer(x, grid, lw, counter, f"{label}.lw")
    if peg_p is not None:
        y = peg(y, peg_p, counter, peg_label)
    return gp_msa_sublayer(y, spec, pools, gp, counter=counter,
                           label=f"{label}.gp")


def forward(clip: np.ndarray, config: ModelConfig, state: ModelState,
            counter=None) -> np.ndarray:
    """Run the full network on one clip (T, H, W, 3); returns the logits."""
    expected = tuple(config.input_extent) + (3,)
    if clip.shape != expected:
        raise ShapeError(f"clip shape {clip.shape} != configured {expected}")
    maps = config.map_extents()
    x = ensure_finite(patch_embed(clip, state, counter), "patch_embed")
    for i, stage in enumerate(config.stages, 1):
        if i > 1:
            x = ensure_finite(patch_merge(x, state, i, counter),
                              f"stage{i}.merge")
        grid = WindowGrid(maps[i - 1], stage.window)
        for j in range(stage.blocks):
            x = dual_block(
                x, grid, stage.pyramid,
                attention_params(config, state, i, j, "lw"),
                attention_params(config, state, i, j, "gp"),
                pyramid_kernels(config, state, i, j),
                peg_params(state, i) if j == 0 else None,
                counter, f"stage{i}.block{j}", f"stage{i}.peg")
            x = ensure_finite(x, f"stage{i}.block{j}")
    c4 = config.stages[-1].channels
    tokens = x.reshape(-1, c4)
    pooled = tokens.mean(axis=0)
    logits = pooled @ state["head.weight"] + state["head.bias"]
    if counter is not None:
        counter.add("head", "head", c4 * config.num_classes)
        counter.elementwise(tokens.shape[0] * c4)  # global average pool
    return ensure_finite(logits, "head")


def synthetic_clip(input_extent: tuple[int, int, int], seed: int) -> np.ndarray:
    """Seeded uniform [-1, 1] input clip."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=tuple(input_extent) + (3,))


# ---------------------------------------------------------------------------
# backward pass (test harness for the gradient checks)
# ---------------------------------------------------------------------------

def _dual_block_backward(x, grid, spec, lw, gp, pools, peg_p, g):
    y1 = lw_msa_sublayer(x, grid, lw)
    y2 = peg(y1, peg_p) if peg_p is not None else y1
    d_y2, gp_grads, pool_grads = gp_msa_backward(y2, spec, pools, gp, g)
    peg_grads = None
    if peg_p is not None:
        d_y2, peg_grads = peg_backward(y1, peg_p, d_y2)
    dx, lw_grads = lw_msa_backward(x, grid, lw, d_y2)
    return dx, lw_grads, gp_grads, pool_grads, peg_grads


def forward_backward(clip: np.ndarray, config: ModelConfig, state: ModelState,
                     g_logits: np.ndarray):
    """Forward pass plus hand-written backprop of a scalar loss whose gradient
    w.r.t. the logits is g_logits. Returns (logits, name -> gradient dict)."""
    maps = config.map_extents()
    grads: dict[str, np.ndarray] = {}

    stage_inputs: list[list[np.ndarray]] = []
    merge_inputs: dict[int, np.ndarray] = {}
    x = patch_embed(clip, state)
    for i, stage in enumerate(config.stages, 1):
        if i > 1:
            merge_inputs[i] = x
            x = patch_merge(x, state, i)
        grid = WindowGrid(maps[i - 1], stage.window)
        block_inputs = []
        for j in range(stage.blocks):
            block_inputs.append(x)
            x = dual_block(
                x, grid, stage.pyramid,
                attention_params(config, state, i, j, "lw"),
                attention_params(config, state, i, j, "gp"),
                pyramid_kernels(config, state, i, j),
                peg_params(state, i) if j == 0 else None)
        stage_inputs.append(block_inputs)

    c4 = config.stages[-1].channels
    tokens = x.reshape(-1, c4)
    m4 = tokens.shape[0]
    pooled = tokens.mean(axis=0)
    logits = pooled @ state["head.weight"] + state["head.bias"]

    grads["head.weight"] = np.outer(pooled, g_logits)
    grads["head.bias"] = g_logits.copy()
    d_pooled = state["head.weight"] @ g_logits
    dx = np.broadcast_to(d_pooled / m4, (m4, c4)).reshape(x.shape).copy()

    for i in range(4, 0, -1):
        stage = config.stages[i - 1]
        grid = WindowGrid(maps[i - 1], stage.window)
        for j in range(stage.blocks - 1, -1, -1):
            x_in = stage_inputs[i - 1][j]
            peg_p = peg_params(state, i) if j == 0 else None
            dx, lw_g, gp_g, pool_g, peg_g = _dual_block_backward(
                x_in, grid, stage.pyramid,
                attention_params(config, state, i, j, "lw"),
                attention_params(config, state, i, j, "gp"),
                pyramid_kernels(config, state, i, j), peg_p, dx)
            blk = f"stage{i}.block{j}"
            for k, v in lw_g.items():
                grads[f"{blk}.lw.{k}"] = v
            for k, v in gp_g.items():
                grads[f"{blk}.gp.{k}"] = v
            for k, v in pool_g.items():
                grads[f"{blk}.gp.{k}"] = v
            if peg_g is not None:
                for k, v in peg_g.items():
                    grads[f"stage{i}.peg.{k}"] = v
        if i > 1:
            dx, dw, db = nonoverlap_conv3d_vjp(
                dx, merge_inputs[i], state[f"stage{i}.merge.weight"])
            grads[f"stage{i}.merge.weight"] = dw
            grads[f"stage{i}.merge.bias"] = db
    _, dw, db = nonoverlap_conv3d_vjp(dx, clip, state["patch_embed.weight"])
    grads["patch_embed.weight"] = dw
    grads["patch_embed.bias"] = db

    for spec in param_specs(config):
        if spec.name not in grads:
            grads[spec.name] = np.zeros(spec.shape)
    return logits, grads


# ---------------------------------------------------------------------------
# kernel inflation (2D -> 3D)
# ---------------------------------------------------------------------------

def inflate_2d(weights_2d: np.ndarray, t_extent: int) -> np.ndarray:
    """Replicate a (kh, kw, Cin, Cout) kernel along time and divide by the
    temporal extent, so responses on temporally constant input are preserved."""
    if t_extent < 1:
        raise ConfigError("t_extent must be >= 1")
    if weights_2d.ndim != 4:
        raise ShapeError(
            f"expected (kh, kw, Cin, Cout) weights, got {weights_2d.shape}")
    return np.repeat(weights_2d[None] / t_extent, t_extent, axis=0)


def inflate_2d_depthwise(weights_2d: np.ndarray, t_extent: int) -> np.ndarray:
    """Depth-wise variant: (C, kh, kw) -> (C, t, kh, kw) / t."""
    if t_extent < 1:
        raise ConfigError("t_extent must be >= 1")
    if weights_2d.ndim != 3:
        raise ShapeError(
            f"expected (C, kh, kw) weights, got {weights_2d.shape}")
    return np.repeat(weights_2d[:, None] / t_extent, t_extent, axis=1)


# ---------------------------------------------------------------------------
# weight manifests
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def save_state(directory, config: ModelConfig, state: ModelState) -> None:
    """Write a manifest plus one binary tensor container per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    kinds = {s.name: s.kind for s in param_specs(config)}
    for name, arr in state.params.items():
        fname = f"{name}.dftk"
        tensor_io.save_tensor(directory / fname, arr)
        entries.append({"name": name, "kind": kinds.get(name, "matrix"),
                        "shape": list(arr.shape), "file": fname})
    manifest = {"format": "dftk-weights", "version": 1, "params": entries}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def load_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ConfigError(f"no {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed manifest {path}: {exc}") from exc
    if manifest.get("format") != "dftk-weights" or "params" not in manifest:
        raise ConfigError(f"{path} is not a weight manifest")
    return manifest


def load_state(directory) -> ModelState:
    directory = Path(directory)
    manifest = load_manifest(directory)
    params: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        arr = tensor_io.load_tensor(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise ShapeError(
                f"{entry['name']}: container shape {arr.shape} != manifest "
                f"{entry['shape']}")
        params[entry["name"]] = arr
    return ModelState(params)
