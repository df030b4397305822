"""Full-scale feature fusion: masked multi-head cross-attention per scale.

Each query scale attends over the whole flattened pyramid sequence.  During
training the binary keep decisions enter as an attention mask shared by all
heads (one row of weights per query, zeroed at dropped keys before the
normalization); at inference the selected tokens are gathered up front and
attention runs unmasked.  The projection variant compresses the query
sequence to N/r rows with a learned column-stochastic matrix, attends at the
short length, and re-projects the output, which is where the quadratic
score-matrix cost actually shrinks.

Normalization note: the exp-weighted, max-shifted masked softmax is the
default; the count-normalized literal variant (`eq5_literal`) divides the
masked exponentials by the number of kept keys instead, so its rows do not
sum to one and it overflows for large scores.  Both share the all-masked-row
rule: such rows come out exactly zero and are tallied in the diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .pyramid import NUM_LEVELS, FeaturePyramid, TokenSequence
from .selection import DecisionSet
from .tensor import (
    ActivationMeter,
    ConfigurationError,
    Tensor,
    gather_rows,
    glorot_uniform,
    matmul,
    slice_axis,
    zeros_param,
)


@dataclass
class MCAParams:
    """Query/key/value and output affine maps for h heads of width D/h."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    head_count: int

    @classmethod
    def create(cls, common_dim: int, head_count: int, rng: np.random.Generator) -> "MCAParams":
        if common_dim % head_count:
            raise ConfigurationError(f"D={common_dim} not divisible by h={head_count}")
        mk = lambda: glorot_uniform(rng, (common_dim, common_dim), common_dim, common_dim)
        return cls(
            wq=mk(), bq=zeros_param((common_dim,)),
            wk=mk(), bk=zeros_param((common_dim,)),
            wv=mk(), bv=zeros_param((common_dim,)),
            wo=mk(), bo=zeros_param((common_dim,)),
            head_count=head_count,
        )

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.head_count

    def parameters(self, prefix: str):
        for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            yield f"{prefix}.{n}", getattr(self, n)


@dataclass
class AttentionMask:
    """Binary decisions for one scale, broadcast to every query row.

    The N_i x L matrix of the formulation is realized by broadcasting the
    length-L decision vector; every row is identical and all heads share it.
    """

    decisions: Tensor  # shape (L,)
    query_count: int

    @property
    def matrix(self) -> np.ndarray:
        return np.broadcast_to(self.decisions.data, (self.query_count, self.decisions.shape[0])).copy()


@dataclass
class ProjectionGenerator:
    """Per-token affine D -> N' whose column-softmax yields the projection."""

    w: Tensor
    b: Tensor
    reduction: int

    @classmethod
    def create(cls, common_dim: int, n_tokens: int, reduction: int, rng: np.random.Generator) -> "ProjectionGenerator":
        if reduction < 1:
            raise ConfigurationError(f"reduction ratio must be >= 1, got {reduction}")
        if n_tokens % reduction:
            raise ConfigurationError(f"N={n_tokens} not divisible by r={reduction}")
        n_short = n_tokens // reduction
        return cls(
            w=glorot_uniform(rng, (common_dim, n_short), common_dim, n_short),
            b=zeros_param((n_short,)),
            reduction=reduction,
        )

    def parameters(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class ScaleFusionStats:
    scale: int
    path: str  # "base" | "projected"
    attention_macs: int
    projection_macs: int
    peak_activation_floats: int

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "path": self.path,
            "attention_macs": self.attention_macs,
            "projection_macs": self.projection_macs,
            "peak_activation_floats": self.peak_activation_floats,
        }


@dataclass
class FusionDiagnostics:
    per_scale: List[ScaleFusionStats] = field(default_factory=list)
    zero_mask_rows: int = 0

    def to_dict(self) -> dict:
        return {
            "per_scale": [s.to_dict() for s in self.per_scale],
            "zero_mask_rows": self.zero_mask_rows,
        }


@dataclass
class FusedOutput:
    scale: int
    rows: Tensor   # N_i x D
    feature_map: Tensor  # D x h_i x w_i


def split_heads(x: Tensor, head_count: int) -> Tensor:
    """(N, D) -> (h, N, d_k)."""
    n, d = x.shape
    return x.reshape(n, head_count, d // head_count).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    """(h, N, d_k) -> (N, D)."""
    h, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dk)


def attention_scores(queries: Tensor, keys: Tensor, params: MCAParams) -> Tensor:
    """Per-head scaled dot products, (h, N, L); denominator sqrt(d_k)."""
    q = split_heads((queries @ params.wq) + params.bq, params.head_count)
    k = split_heads((keys @ params.wk) + params.bk, params.head_count)
    scale = 1.0 / np.sqrt(params.head_dim)
    return matmul(q, k.transpose(0, 2, 1)) * scale


def masked_normalize(
    scores: Tensor,
    mask: AttentionMask,
    literal: bool = False,
    diagnostics: Optional[FusionDiagnostics] = None,
) -> Tensor:
    """Normalize attention rows over masked-in keys; masked-out entries are 0.

    Default: exp-weighted masked softmax with a max shift taken over the kept
    keys (continuous in the scores, rows sum to 1).  Literal variant: divide
    the unshifted masked exponentials by the kept-key count.  Rows with no
    kept key are defined as exact zeros and counted in the diagnostics.
    """
    m = mask.decisions
    kept = m.data > 0
    dead_rows = 0 if kept.any() else mask.query_count
    if diagnostics is not None and dead_rows:
        diagnostics.zero_mask_rows += dead_rows

    if literal:
        weighted = scores.exp() * m
        denom = m.sum()
        safe = denom + float(not kept.any())
        return weighted / safe

    shift_src = np.where(kept, scores.data, -np.inf).max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift_src), shift_src, 0.0)  # constant offset
    weighted = (scores + Tensor(-shift)).exp() * m
    denom = weighted.sum(axis=-1, keepdims=True)
    safe = denom + float(not kept.any())
    return weighted / safe


def plain_softmax_rows(scores: Tensor) -> Tensor:
    return scores.softmax(axis=-1)


def mca_core(
    queries: Tensor,
    source: Tensor,
    params: MCAParams,
    mask: Optional[AttentionMask],
    literal: bool = False,
    diagnostics: Optional[FusionDiagnostics] = None,
) -> Tensor:
    """Attention block without the residual: scores, normalize, gather, project."""
    scores = attention_scores(queries, source, params)
    if mask is None:
        attn = plain_softmax_rows(scores)
    else:
        attn = masked_normalize(scores, mask, literal=literal, diagnostics=diagnostics)
    v = split_heads((source @ params.wv) + params.bv, params.head_count)
    fused = merge_heads(matmul(attn, v))
    return (fused @ params.wo) + params.bo


def attention_stage_macs(n_queries: int, n_keys: int, common_dim: int) -> int:
    # score matrix + attention-times-values, summed over heads
    return 2 * n_queries * n_keys * common_dim


def projection_stage_macs(n_tokens: int, n_short: int, common_dim: int) -> int:
    # generate the matrix, compress the queries, re-project the output
    return 3 * n_tokens * n_short * common_dim


def scale_mask(decisions: DecisionSet, scale: int, seq: TokenSequence, n_queries: int) -> AttentionMask:
    q_col = slice_axis(decisions.Q, 1, scale - 1, scale).reshape(seq.length)
    return AttentionMask(decisions=q_col, query_count=n_queries)


def mca_fuse(
    queries: Tensor,
    seq: TokenSequence,
    decisions: DecisionSet,
    params: MCAParams,
    scale: int,
    residual: bool = True,
    literal: bool = False,
    diagnostics: Optional[FusionDiagnostics] = None,
) -> Tensor:
    """One scale's fused rows (N_i x D): masked in training, gathered at inference."""
    n = queries.shape[0]
    if decisions.mode == "training":
        mask = scale_mask(decisions, scale, seq, n)
        out = mca_core(queries, seq.tokens, params, mask, literal=literal, diagnostics=diagnostics)
        n_keys = seq.length
    else:
        picked = gather_rows(seq.tokens, decisions.topk[scale - 1])
        out = mca_core(queries, picked, params, mask=None, diagnostics=diagnostics)
        n_keys = picked.shape[0]
    if diagnostics is not None:
        diagnostics.per_scale.append(
            ScaleFusionStats(
                scale=scale,
                path="base",
                attention_macs=attention_stage_macs(n, n_keys, queries.shape[1]),
                projection_macs=0,
                peak_activation_floats=0,
            )
        )
    return (out + queries) if residual else out


def project_tokens(queries: Tensor, gen: ProjectionGenerator):
    """Column-stochastic projection matrix and the compacted query rows."""
    n, d = queries.shape
    if n % gen.reduction:
        raise ConfigurationError(f"N={n} not divisible by r={gen.reduction}")
    raw = (queries @ gen.w) + gen.b           # N x N'
    proj = raw.softmax(axis=0)                # each column sums to 1 over tokens
    compact = proj.transpose() @ queries      # N' x D convex combinations
    return proj, compact


def mca_fuse_projected(
    queries: Tensor,
    seq: TokenSequence,
    decisions: DecisionSet,
    params: MCAParams,
    gen: ProjectionGenerator,
    scale: int,
    residual: bool = True,
    literal: bool = False,
    diagnostics: Optional[FusionDiagnostics] = None,
) -> Tensor:
    """Projected variant: attend with N/r compact rows, then re-project."""
    n, d = queries.shape
    proj, compact = project_tokens(queries, gen)
    n_short = compact.shape[0]
    if decisions.mode == "training":
        mask = scale_mask(decisions, scale, seq, n_short)
        core = mca_core(compact, seq.tokens, params, mask, literal=literal, diagnostics=diagnostics)
        n_keys = seq.length
    else:
        picked = gather_rows(seq.tokens, decisions.topk[scale - 1])
        core = mca_core(compact, picked, params, mask=None, diagnostics=diagnostics)
        n_keys = picked.shape[0]
    out = proj @ core
    if diagnostics is not None:
        diagnostics.per_scale.append(
            ScaleFusionStats(
                scale=scale,
                path="projected",
                attention_macs=attention_stage_macs(n_short, n_keys, d),
                projection_macs=projection_stage_macs(n, n_short, d),
                peak_activation_floats=0,
            )
        )
    return (out + queries) if residual else out


def fuse_all_scales(
    pyramid: FeaturePyramid,
    seq: TokenSequence,
    decisions: DecisionSet,
    params: List[MCAParams],
    generators: Dict[int, ProjectionGenerator],
    residual: bool = True,
    literal: bool = False,
    diagnostics: Optional[FusionDiagnostics] = None,
) -> List[FusedOutput]:
    """Fuse every scale against the full sequence; reshape via provenance order."""
    outputs = []
    for scale in range(1, NUM_LEVELS + 1):
        lo, hi = seq.scale_slice(scale)
        queries = slice_axis(seq.tokens, 0, lo, hi)
        with ActivationMeter() as meter:
            if scale in generators:
                rows = mca_fuse_projected(
                    queries, seq, decisions, params[scale - 1], generators[scale],
                    scale, residual=residual, literal=literal, diagnostics=diagnostics,
                )
            else:
                rows = mca_fuse(
                    queries, seq, decisions, params[scale - 1], scale,
                    residual=residual, literal=literal, diagnostics=diagnostics,
                )
        if diagnostics is not None:
            diagnostics.per_scale[-1].peak_activation_floats = meter.peak
        h, w = seq.level_shapes[scale - 1]
        d = rows.shape[1]
        outputs.append(FusedOutput(scale=scale, rows=rows, feature_map=rows.transpose().reshape(d, h, w)))
    return outputs
