"""Analytic cost model and exact instrumented counters.

Unit convention: one multiply-accumulate (MAC) is one FLOP-unit, matching the
de-facto convention of published GFLOPs tables. The analytic attention
formulas deliberately exclude Q/K/V/output projections and MLPs; the
itemized counters include everything. Softmax, layer norm, GELU and residual
additions are excluded from MAC totals and reported as a separate
elementwise-op count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import PyramidSpec
from .model import ModelConfig, ModelState, forward, param_specs
from .numerics import ShapeError

from fractions import Fraction

KINDS = ("attention", "projection", "mlp", "conv", "embed", "head")


# ---------------------------------------------------------------------------
# paper-formula costs
# ---------------------------------------------------------------------------

def cost_lw(t: int, h: int, w: int, m: int, d: int) -> int:
    """Window-attention cost t*h*w*M*D: (thw)^2 D per window summed over the
    M/(thw) windows."""
    if min(t, h, w, m, d) < 1:
        raise ShapeError("cost_lw arguments must be positive")
    if m % (t * h * w) != 0:
        raise ShapeError(f"window volume {t * h * w} does not divide M={m}")
    return t * h * w * m * d


def cost_full(m: int, d: int) -> int:
    """Full space-time attention cost M^2 D."""
    if m < 1 or d < 1:
        raise ShapeError("cost_full arguments must be positive")
    return m * m * d


def cost_gp(spec: PyramidSpec, map_extent: tuple[int, int, int], d: int
            ) -> tuple[int, int]:
    """Pyramid-attention cost, (unfactorized, factorized).

    unfactorized: (S + N_g) * M * D.
    factorized:   (S + sum_i(k1/T + k2*k3/(H*W))) * M * D, evaluated in
    rational arithmetic and rounded to the nearest integer at the end.
    """
    t, h, w = map_extent
    m = t * h * w
    resolved = spec.resolve(map_extent)
    s = sum(k1 * k2 * k3 for k1, k2, k3 in resolved)
    unfactorized = (s + len(resolved)) * m * d
    factor = Fraction(s)
    for k1, k2, k3 in resolved:
        factor += Fraction(k1, t) + Fraction(k2 * k3, h * w)
    factorized = round(factor * m * d)
    return unfactorized, int(factorized)


def cost_gp_conv_exact(spec: PyramidSpec, map_extent: tuple[int, int, int],
                       d: int) -> int:
    """Exact MAC count of the factorized depth-wise downsampling convolutions
    as implemented: per scale, M*D for the temporal pass at full resolution
    plus k1*H*W*D for the spatial pass."""
    t, h, w = map_extent
    m = t * h * w
    return sum((m + k1 * h * w) * d for k1, _, _ in spec.resolve(map_extent))


# ---------------------------------------------------------------------------
# report containers
# ---------------------------------------------------------------------------

@dataclass
class CostTerm:
    label: str
    kind: str
    macs: int = 0
    params: int = 0


@dataclass
class StageAnalytic:
    """Per-stage paper-formula values, evaluated once per block instance."""

    stage: int
    map_extent: tuple[int, int, int]
    tokens: int                 # M
    priors: int                 # S
    channels: int               # D
    window: tuple[int, int, int]
    blocks: int
    lw: int                     # thw * M * D
    gp_unfactorized: int        # (S + N_g) M D
    gp_factorized: int
    gp_conv_exact: int          # implementation-exact dwconv MACs
    full: int                   # M^2 D


@dataclass
class StageComparison:
    stage: int
    full: int
    dual: int                   # lw + gp_factorized
    ratio: float                # full / dual
    kv_ratio: float             # M / S, the key/value reduction
    flagged: bool               # dual >= full (no saving at this stage)


@dataclass
class CostReport:
    terms: list[CostTerm] = field(default_factory=list)
    elementwise_ops: int = 0
    analytic: list[StageAnalytic] = field(default_factory=list)
    comparisons: list[StageComparison] = field(default_factory=list)
    unit: str = "MAC"

    def total_macs(self) -> int:
        return sum(t.macs for t in self.terms)

    def total_params(self) -> int:
        return sum(t.params for t in self.terms)

    def shares(self, basis: str = "macs") -> dict[str, float]:
        totals: dict[str, int] = {}
        for t in self.terms:
            totals[t.kind] = totals.get(t.kind, 0) + getattr(t, basis)
        grand = sum(totals.values())
        if grand == 0:
            return {}
        return {k: v / grand for k, v in totals.items()}

    def kind_totals(self, basis: str = "macs") -> dict[str, int]:
        totals: dict[str, int] = {}
        for t in self.terms:
            totals[t.kind] = totals.get(t.kind, 0) + getattr(t, basis)
        return totals

    def attention_macs_by_stage(self) -> dict[int, int]:
        """Instrumented/itemized attention-matmul MACs grouped by stage."""
        out: dict[int, int] = {}
        for t in self.terms:
            if t.kind != "attention" or not t.label.startswith("stage"):
                continue
            stage = int(t.label[5:t.label.index(".")])
            out[stage] = out.get(stage, 0) + t.macs
        return out

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "unit": self.unit,
            "terms": [vars(t).copy() for t in self.terms],
            "totals": {"macs": self.total_macs(),
                       "params": self.total_params()},
            "shares": {"macs": self.shares("macs"),
                       "params": self.shares("params")},
            "elementwise_ops": self.elementwise_ops,
            "analytic": [
                {**vars(a), "map_extent": list(a.map_extent),
                 "window": list(a.window)}
                for a in self.analytic],
            "comparisons": [vars(c).copy() for c in self.comparisons],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["label", "kind", "macs", "params"])
        for t in self.terms:
            writer.writerow([t.label, t.kind, t.macs, t.params])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = []
        if self.terms:
            width = max(len(t.label) for t in self.terms)
            lines.append(f"{'term'.ljust(width)}  {'kind':<10} "
                         f"{'macs':>16} {'params':>12}")
            for t in self.terms:
                lines.append(f"{t.label.ljust(width)}  {t.kind:<10} "
                             f"{t.macs:>16,} {t.params:>12,}")
            lines.append(
                f"{'total'.ljust(width)}  {'':<10} "
                f"{self.total_macs():>16,} {self.total_params():>12,}")
            basis = "macs" if self.total_macs() else "params"
            share_txt = "  ".join(
                f"{k}={v:.1%}" for k, v in sorted(self.shares(basis).items()))
            lines.append(f"shares ({basis}): {share_txt}")
            if self.elementwise_ops:
                lines.append(f"elementwise ops (not in {self.unit} totals): "
                             f"{self.elementwise_ops:,}")
        if self.analytic:
            lines.append("")
            lines.append("analytic attention costs per block "
                         "(projections/MLP omitted):")
            lines.append(f"{'stage':>5} {'map':>12} {'M':>8} {'S':>6} "
                         f"{'lw':>14} {'gp_unfact':>14} {'gp_fact':>14} "
                         f"{'conv_exact':>12} {'full':>16}")
            for a in self.analytic:
                ext = "x".join(str(e) for e in a.map_extent)
                lines.append(
                    f"{a.stage:>5} {ext:>12} {a.tokens:>8} {a.priors:>6} "
                    f"{a.lw:>14,} {a.gp_unfactorized:>14,} "
                    f"{a.gp_factorized:>14,} {a.gp_conv_exact:>12,} "
                    f"{a.full:>16,}")
        if self.comparisons:
            lines.append("")
            lines.append("dual-level vs full attention:")
            for c in self.comparisons:
                flag = "  [no saving at this stage]" if c.flagged else ""
                lines.append(
                    f"  stage {c.stage}: full/dual = {c.ratio:8.2f}  "
                    f"M/S = {c.kv_ratio:8.2f}{flag}")
        return "\n".join(lines)


class MacCounter:
    """Per-invocation accumulator threaded through forward passes."""

    def __init__(self):
        self.terms: list[CostTerm] = []
        self.elementwise_ops = 0

    def add(self, label: str, kind: str, macs: int) -> None:
        self.terms.append(CostTerm(label=label, kind=kind, macs=int(macs)))

    def elementwise(self, count: int) -> None:
        self.elementwise_ops += int(count)


# ---------------------------------------------------------------------------
# analytic sections
# ---------------------------------------------------------------------------

def analytic_stages(config: ModelConfig) -> list[StageAnalytic]:
    maps = config.map_extents()
    rows = []
    for i, stage in enumerate(config.stages, 1):
        ext = maps[i - 1]
        m = math.prod(ext)
        d = stage.channels
        s = stage.pyramid.prior_count(ext)
        unfact, fact = cost_gp(stage.pyramid, ext, d)
        rows.append(StageAnalytic(
            stage=i, map_extent=ext, tokens=m, priors=s, channels=d,
            window=stage.window, blocks=stage.blocks,
            lw=cost_lw(*stage.window, m, d),
            gp_unfactorized=unfact, gp_factorized=fact,
            gp_conv_exact=cost_gp_conv_exact(stage.pyramid, ext, d),
            full=cost_full(m, d)))
    return rows


def stage_comparisons(config: ModelConfig) -> list[StageComparison]:
    rows = []
    for a in analytic_stages(config):
        dual = a.lw + a.gp_factorized
        rows.append(StageComparison(
            stage=a.stage, full=a.full, dual=dual,
            ratio=a.full / dual, kv_ratio=a.tokens / a.priors,
            flagged=dual >= a.full))
    return rows


# ---------------------------------------------------------------------------
# parameter and MAC counting
# ---------------------------------------------------------------------------

def _param_kind(name: str) -> str:
    if name.startswith(("patch_embed", "head")):
        return "embed" if name.startswith("patch_embed") else "head"
    if ".merge." in name:
        return "embed"
    if ".peg." in name or ".pool" in name:
        return "conv"
    if ".mlp_in." in name or ".mlp_out." in name:
        return "mlp"
    return "projection"   # q/k/v/out projections and the layer norms


def count_params(config: ModelConfig) -> CostReport:
    """Exact per-tensor parameter counts from shapes alone."""
    report = CostReport(analytic=analytic_stages(config))
    for spec in param_specs(config):
        report.terms.append(CostTerm(
            label=spec.name, kind=_param_kind(spec.name),
            params=int(np.prod(spec.shape))))
    return report


def count_macs(config: ModelConfig,
               input_extent: tuple[int, int, int] | None = None) -> CostReport:
    """Itemized MAC counts of a single-view forward pass, computed from
    shapes. Term labels and values match instrument_forward exactly."""
    if input_extent is not None and tuple(input_extent) != tuple(
            config.input_extent):
        config = replace(config, input_extent=tuple(input_extent))
    maps = config.map_extents()
    counter = MacCounter()
    prev_c = 3
    for i, stage in enumerate(config.stages, 1):
        ext = maps[i - 1]
        m = math.prod(ext)
        d = stage.channels
        if i == 1:
            counter.add("patch_embed", "embed",
                        m * math.prod(stage.merge) * prev_c * d)
        else:
            counter.add(f"stage{i}.merge", "embed",
                        m * math.prod(stage.merge) * prev_c * d)
        n_tok = math.prod(stage.window)
        n_win = m // n_tok
        heads = config.heads(i - 1)
        s = stage.pyramid.prior_count(ext)
        for j in range(stage.blocks):
            blk = f"stage{i}.block{j}"
            counter.add(f"{blk}.lw.qkv", "projection", 3 * m * d * d)
            counter.add(f"{blk}.lw.attn_qk", "attention", m * n_tok * d)
            counter.add(f"{blk}.lw.attn_av", "attention", m * n_tok * d)
            counter.add(f"{blk}.lw.out", "projection", m * d * d)
            counter.add(f"{blk}.lw.mlp", "mlp", 8 * m * d * d)
            counter.elementwise(8 * m * d + n_win * heads * n_tok * n_tok)
            if j == 0:
                counter.add(f"stage{i}.peg", "conv", 27 * m * d)
                counter.elementwise(m * d)
            counter.add(f"{blk}.gp.pool", "conv",
                        cost_gp_conv_exact(stage.pyramid, ext, d))
            counter.add(f"{blk}.gp.q", "projection", m * d * d)
            counter.add(f"{blk}.gp.kv", "projection", 2 * s * d * d)
            counter.add(f"{blk}.gp.attn_qk", "attention", m * s * d)
            counter.add(f"{blk}.gp.attn_av", "attention", m * s * d)
            counter.add(f"{blk}.gp.out", "projection", m * d * d)
            counter.add(f"{blk}.gp.mlp", "mlp", 8 * m * d * d)
            counter.elementwise(8 * m * d + heads * m * s)
        prev_c = d
    counter.add("head", "head", config.stages[-1].channels * config.num_classes)
    counter.elementwise(math.prod(maps[-1]) * config.stages[-1].channels)
    return CostReport(terms=counter.terms,
                      elementwise_ops=counter.elementwise_ops,
                      analytic=analytic_stages(config),
                      comparisons=stage_comparisons(config))


def compare_report(config: ModelConfig,
                   input_extent: tuple[int, int, int] | None = None
                   ) -> CostReport:
    """Per-stage dual-level vs full-attention comparison (plus the full
    itemization, so its totals agree with count_macs by construction)."""
    return count_macs(config, input_extent)


def instrument_forward(clip: np.ndarray, config: ModelConfig,
                       state: ModelState) -> CostReport:
    """Run a real forward pass with counting shims; term-for-term equal to
    count_macs on the same config."""
    counter = MacCounter()
    forward(clip, config, state, counter=counter)
    return CostReport(terms=counter.terms,
                      elementwise_ops=counter.elementwise_ops,
                      analytic=analytic_stages(config),
                      comparisons=stage_comparisons(config))
