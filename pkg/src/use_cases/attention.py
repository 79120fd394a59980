"""Single-head masked, biased scaled-dot-product attention.

Two forward kernels compute the same function:

* ``attn_dense`` evaluates every logit (row-chunked so the L x L score matrix is never
  held at once) and drops masked pairs from the max/sum reductions.
* ``attn_block_sparse`` only touches the rectangles of a block tiling. Rectangles with
  the same query range are merged, and query ranges sharing the same key intervals
  are gathered into one tile, so a tile is a (query index set, key index set) pair.
  Diagonal 1x1 rectangles are handled as one vectorized tile. The softmax is a
  two-pass stream: running max and rescaled sum first, weighted accumulation second.

Masked pairs are excluded from reductions rather than given a large negative logit,
which keeps their gradients exactly zero.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from src.domain.encoding import N_BIAS_CLASSES, AttentionMask, BiasRelationMap, Block
from src.domain.models import ContractViolation, InputError

from .masks import blocks_to_dense

DENSE_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class AttentionInput:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    mask: AttentionMask
    relation: BiasRelationMap | None = None
    bias_scalars: np.ndarray | None = None
    bias_values: np.ndarray | None = None
    scale: float | None = None

    def __post_init__(self):
        for name in ("q", "k", "v"):
            arr = getattr(self, name)
            if arr.ndim != 2:
                raise InputError(f"{name} must be an L x d matrix, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains NaN or Inf")
        length, dim = self.q.shape
        if length < 1 or dim < 1:
            raise InputError("attention needs L >= 1 and d >= 1")
        if self.k.shape != (length, dim) or self.v.shape[0] != length:
            raise InputError(f"shape mismatch: q {self.q.shape}, k {self.k.shape}, v {self.v.shape}")
        if self.mask.length != length:
            raise InputError(f"mask covers {self.mask.length} tokens, inputs have {length}")
        if self.relation is not None:
            if self.relation.length != length:
                raise InputError("bias relation map length differs from inputs")
            if self.bias_scalars is None or self.bias_scalars.shape != (N_BIAS_CLASSES,):
                raise InputError(f"a relation map needs {N_BIAS_CLASSES} bias scalars")
            if not np.all(np.isfinite(self.bias_scalars)):
                raise InputError("bias scalars contain NaN or Inf")
        if self.bias_values is not None:
            if self.bias_values.shape != (length, length):
                raise InputError(f"bias_values must be {length} x {length}")
            if not np.all(np.isfinite(self.bias_values[self.mask.dense])):
                raise InputError("bias_values must be finite wherever attention is allowed")
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(dim))

    @classmethod
    def build(cls, q, k, v, mask: AttentionMask, relation: BiasRelationMap | None = None,
              bias_scalars=None, dtype=np.float32) -> "AttentionInput":
        """Cast everything to one float dtype (float32 unless a test asks for float64)."""
        scalars = None if bias_scalars is None else np.asarray(bias_scalars, dtype=dtype)
        return cls(np.asarray(q, dtype=dtype), np.asarray(k, dtype=dtype), np.asarray(v, dtype=dtype),
                   mask, relation, scalars)

    @property
    def length(self) -> int:
        return self.q.shape[0]

    @property
    def has_bias(self) -> bool:
        return self.bias_values is not None or self.relation is not None

    def bias_tile(self, qi, ki) -> np.ndarray | None:
        """Bias for a (query index, key index) sub-grid; ``qi``/``ki`` are arrays or slices."""
        if self.bias_values is not None:
            return self.bias_values[_grid(qi, ki)]
        if self.relation is not None:
            return self.bias_scalars[self.relation.rel[_grid(qi, ki)]]
        return None

    def bias_diag(self, rows: np.ndarray) -> np.ndarray | None:
        if self.bias_values is not None:
            return self.bias_values[rows, rows]
        if self.relation is not None:
            return self.bias_scalars[self.relation.rel[rows, rows]]
        return None


def _grid(qi, ki):
    if isinstance(qi, slice) or isinstance(ki, slice):
        return qi, ki
    return np.ix_(qi, ki)


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    out: np.ndarray
    row_weights: np.ndarray | None = None
    row_max: np.ndarray | None = None
    row_sum: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class AttentionGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    d_bias_scalars: np.ndarray | None = None
    d_bias_values: np.ndarray | None = None


def _logits(inp: AttentionInput, qi, ki) -> np.ndarray:
    s = (inp.q[qi] @ inp.k[ki].T) * inp.q.dtype.type(inp.scale)
    bias = inp.bias_tile(qi, ki)
    if bias is not None:
        s += bias
    return s


def _masked_softmax(s: np.ndarray, allowed: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not allowed.any(axis=1).all():
        raise ContractViolation("a query row has no allowed key")
    m = np.max(s, axis=1, where=allowed, initial=-np.inf)
    p = np.exp(s - m[:, None], where=allowed, out=np.zeros_like(s))
    l = p.sum(axis=1)
    p /= l[:, None]
    return p, m, l


def attn_dense(inp: AttentionInput, return_weights: bool = False) -> AttentionOutput:
    """softmax(scale * Q K^T + bias, masked) V over every pair of the mask."""
    length = inp.length
    dtype = inp.q.dtype
    out = np.empty((length, inp.v.shape[1]), dtype=dtype)
    weights = np.empty((length, length), dtype=dtype) if return_weights else None
    row_max = np.empty(length, dtype=dtype)
    row_sum = np.empty(length, dtype=dtype)
    for start in range(0, length, DENSE_CHUNK):
        rows = slice(start, min(start + DENSE_CHUNK, length))
        s = _logits(inp, rows, slice(None))
        p, m, l = _masked_softmax(s, inp.mask.dense[rows])
        out[rows] = p @ inp.v
        row_max[rows], row_sum[rows] = m, l
        if weights is not None:
            weights[rows] = p
    return AttentionOutput(out=out, row_weights=weights, row_max=row_max, row_sum=row_sum)


@dataclass(frozen=True)
class TilePlan:
    """Gathered tiles of a block list plus the rows whose self-pair is a lone 1x1 block."""
    tiles: tuple[tuple[np.ndarray, np.ndarray], ...]
    diagonal: np.ndarray
    area: int = field(default=0)


def plan_tiles(blocks: list[Block] | tuple[Block, ...]) -> TilePlan:
    by_query: dict[tuple[int, int], list[tuple[int, int]]] = {}
    diagonal: list[int] = []
    area = 0
    for b in blocks:
        area += b.area
        if b.q1 - b.q0 == 1 and b.k1 - b.k0 == 1 and b.q0 == b.k0:
            diagonal.append(b.q0)
        else:
            by_query.setdefault((b.q0, b.q1), []).append((b.k0, b.k1))
    by_keys: dict[tuple[tuple[int, int], ...], list[tuple[int, int]]] = {}
    for q_range, keys in by_query.items():
        by_keys.setdefault(tuple(sorted(keys)), []).append(q_range)
    tiles = []
    for keys, q_ranges in by_keys.items():
        qi = np.concatenate([np.arange(q0, q1) for q0, q1 in q_ranges])
        ki = np.concatenate([np.arange(k0, k1) for k0, k1 in keys])
        tiles.append((qi, ki))
    return TilePlan(tuple(tiles), np.array(sorted(diagonal), dtype=np.int64), area)


def check_tiling(mask: AttentionMask, blocks) -> None:
    cover = blocks_to_dense(blocks, mask.length)
    if cover.max(initial=0) > 1 or not np.array_equal(cover.astype(bool), mask.dense):
        raise ContractViolation("blocks do not tile the attention mask exactly")


def _diag_logits(inp: AttentionInput, rows: np.ndarray) -> np.ndarray:
    s = np.einsum("id,id->i", inp.q[rows], inp.k[rows]) * inp.q.dtype.type(inp.scale)
    bias = inp.bias_diag(rows)
    if bias is not None:
        s += bias
    return s


def _row_stats(inp: AttentionInput, plan: TilePlan) -> tuple[np.ndarray, np.ndarray]:
    dtype = inp.q.dtype
    m = np.full(inp.length, -np.inf, dtype=dtype)
    l = np.zeros(inp.length, dtype=dtype)

    def update(rows: np.ndarray, s: np.ndarray) -> None:
        new = np.maximum(m[rows], s.max(axis=1))
        l[rows] = l[rows] * np.exp(m[rows] - new) + np.exp(s - new[:, None]).sum(axis=1)
        m[rows] = new

    for qi, ki in plan.tiles:
        update(qi, _logits(inp, qi, ki))
    if plan.diagonal.size:
        update(plan.diagonal, _diag_logits(inp, plan.diagonal)[:, None])
    if not np.all(l > 0):
        raise ContractViolation("a query row has no allowed key in the block list")
    return m, l


def attn_block_sparse(inp: AttentionInput, blocks=None, check: bool = False,
                      plan: TilePlan | None = None) -> AttentionOutput:
    """Same result as attn_dense, computing logits only inside the block rectangles."""
    if blocks is None:
        blocks = inp.mask.blocks
    if check:
        check_tiling(inp.mask, blocks)
    plan = plan or plan_tiles(blocks)
    m, l = _row_stats(inp, plan)
    acc = np.zeros((inp.length, inp.v.shape[1]), dtype=inp.q.dtype)
    for qi, ki in plan.tiles:
        p = np.exp(_logits(inp, qi, ki) - m[qi, None]) / l[qi, None]
        acc[qi] += p @ inp.v[ki]
    if plan.diagonal.size:
        d = plan.diagonal
        p = np.exp(_diag_logits(inp, d) - m[d]) / l[d]
        acc[d] += p[:, None] * inp.v[d]
    return AttentionOutput(out=acc, row_max=m, row_sum=l)


def _check_upstream(inp: AttentionInput, d_out: np.ndarray) -> np.ndarray:
    if d_out.shape != (inp.length, inp.v.shape[1]):
        raise InputError(f"upstream gradient has shape {d_out.shape}, expected {(inp.length, inp.v.shape[1])}")
    return np.asarray(d_out, dtype=inp.q.dtype)


def _class_sum(rel_tile: np.ndarray, ds: np.ndarray) -> np.ndarray:
    return np.bincount(rel_tile.ravel(), weights=ds.ravel(), minlength=N_BIAS_CLASSES)


def attn_backward_dense(inp: AttentionInput, d_out: np.ndarray, return_bias_grad: bool = False) -> AttentionGrads:
    d_out = _check_upstream(inp, d_out)
    fwd = attn_dense(inp)
    length = inp.length
    dtype = inp.q.dtype
    scale = dtype.type(inp.scale)
    delta = np.einsum("id,id->i", d_out, fwd.out)
    dq = np.zeros_like(inp.q)
    dk = np.zeros_like(inp.k)
    dv = np.zeros_like(inp.v)
    d_scalars = np.zeros(N_BIAS_CLASSES) if inp.relation is not None else None
    d_bias = np.zeros((length, length), dtype=dtype) if return_bias_grad else None
    for start in range(0, length, DENSE_CHUNK):
        rows = slice(start, min(start + DENSE_CHUNK, length))
        allowed = inp.mask.dense[rows]
        s = _logits(inp, rows, slice(None))
        p = np.exp(s - fwd.row_max[rows, None], where=allowed, out=np.zeros_like(s))
        p /= fwd.row_sum[rows, None]
        dp = d_out[rows] @ inp.v.T
        ds = p * (dp - delta[rows, None])
        dv += p.T @ d_out[rows]
        dq[rows] = scale * (ds @ inp.k)
        dk += scale * (ds.T @ inp.q[rows])
        if d_scalars is not None:
            d_scalars += _class_sum(inp.relation.rel[rows], ds)
        if d_bias is not None:
            d_bias[rows] = ds
    return AttentionGrads(dq, dk, dv, None if d_scalars is None else d_scalars.astype(dtype), d_bias)


def attn_backward_block_sparse(inp: AttentionInput, d_out: np.ndarray, blocks=None,
                               plan: TilePlan | None = None, return_bias_grad: bool = False) -> AttentionGrads:
    d_out = _check_upstream(inp, d_out)
    plan = plan or plan_tiles(inp.mask.blocks if blocks is None else blocks)
    fwd = attn_block_sparse(inp, plan=plan)
    m, l = fwd.row_max, fwd.row_sum
    dtype = inp.q.dtype
    scale = dtype.type(inp.scale)
    delta = np.einsum("id,id->i", d_out, fwd.out)
    dq = np.zeros_like(inp.q)
    dk = np.zeros_like(inp.k)
    dv = np.zeros_like(inp.v)
    d_scalars = np.zeros(N_BIAS_CLASSES) if inp.relation is not None else None
    d_bias = np.zeros((inp.length, inp.length), dtype=dtype) if return_bias_grad else None
    for qi, ki in plan.tiles:
        p = np.exp(_logits(inp, qi, ki) - m[qi, None]) / l[qi, None]
        dp = d_out[qi] @ inp.v[ki].T
        ds = p * (dp - delta[qi, None])
        dv[ki] += p.T @ d_out[qi]
        dq[qi] += scale * (ds @ inp.k[ki])
        dk[ki] += scale * (ds.T @ inp.q[qi])
        if d_scalars is not None:
            d_scalars += _class_sum(inp.relation.rel[np.ix_(qi, ki)], ds)
        if d_bias is not None:
            d_bias[np.ix_(qi, ki)] = ds
    if plan.diagonal.size:
        d = plan.diagonal
        p = np.exp(_diag_logits(inp, d) - m[d]) / l[d]
        dp = np.einsum("id,id->i", d_out[d], inp.v[d])
        ds = p * (dp - delta[d])
        dv[d] += p[:, None] * d_out[d]
        dq[d] += scale * ds[:, None] * inp.k[d]
        dk[d] += scale * ds[:, None] * inp.q[d]
        if d_scalars is not None:
            d_scalars += _class_sum(inp.relation.rel[d, d], ds)
        if d_bias is not None:
            d_bias[d, d] = ds
    return AttentionGrads(dq, dk, dv, None if d_scalars is None else d_scalars.astype(dtype), d_bias)


def attn_backward(inp: AttentionInput, d_out: np.ndarray, kernel: str = "dense",
                  return_bias_grad: bool = False) -> AttentionGrads:
    """Analytic gradients for Q, K, V, the per-class bias scalars and, on request, the full bias matrix."""
    if kernel == "dense":
        return attn_backward_dense(inp, d_out, return_bias_grad)
    if kernel == "block_sparse":
        return attn_backward_block_sparse(inp, d_out, return_bias_grad=return_bias_grad)
    raise ValueError(f"unknown attention kernel {kernel!r}")
