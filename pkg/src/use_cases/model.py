"""Toy encoder-decoder that composes every encoding factor.

The encoder input of token i is

    E_tok[w_i] + E_pos[pos_i] + E_seg[seg_i]  (+ E_row[row_i] + E_col[col_i] under E1)

and every encoder self-attention layer runs through the numpy kernels of
``attention.py`` with the factor's mask and, under B1, per-head scalars for each
token-pair relation class. The decoder is a stock causal torch decoder with dense
cross-attention.
"""
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from src.domain.encoding import N_BIAS_CLASSES, AttentionMask, BiasRelationMap, EncodedInput
from src.domain.models import (
    BiasScheme,
    EmbeddingScheme,
    FactorConfig,
    FactorConfigError,
    PositionRangeError,
    SequenceTooLongError,
    Table,
)

from .attention import (
    AttentionInput,
    TilePlan,
    attn_backward_block_sparse,
    attn_backward_dense,
    attn_block_sparse,
    attn_dense,
    plan_tiles,
)
from .linearize import DEFAULT_CONTEXT, encode
from .masks import build_bias_map, build_mask
from .vocabulary import BOS, EOS, MAX_COLUMNS, MAX_INDEXED_ROWS, PAD, VOCAB

logger = logging.getLogger(__name__)

KERNELS = ("dense", "block_sparse")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 512
    max_positions: int = DEFAULT_CONTEXT
    context_length: int = DEFAULT_CONTEXT
    max_rows: int = MAX_INDEXED_ROWS
    max_cols: int = MAX_COLUMNS
    max_answer_length: int = 64
    vocab_size: int = len(VOCAB)
    dropout: float = 0.0
    factor: FactorConfig = field(default_factory=FactorConfig)
    question_content_only: bool = False
    kernel: str = "dense"
    check_tiling: bool = False
    # training
    steps: int = 20_000
    batch_size: int = 8
    learning_rate: float = 3e-4
    patience: int = 15
    eval_every: int = 250
    eval_fraction: float = 0.1

    def __post_init__(self):
        problems = []
        if self.d_model % self.n_heads:
            problems.append(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_positions < self.context_length:
            problems.append(f"max_positions={self.max_positions} is below context_length={self.context_length}")
        if self.kernel not in KERNELS:
            problems.append(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if min(self.d_model, self.n_heads, self.n_enc_layers, self.ffn_dim, self.batch_size,
               self.max_answer_length, self.eval_every) < 1 or self.n_dec_layers < 1:
            problems.append("sizes, batch size and eval interval must be positive")
        if self.learning_rate < 0 or self.patience < 1 or not 0.0 < self.eval_fraction < 1.0:
            problems.append("learning_rate must be >= 0, patience >= 1, eval_fraction in (0, 1)")
        if problems:
            raise FactorConfigError(message="; ".join(problems))

    def to_dict(self) -> dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["factor"] = self.factor.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise FactorConfigError(message=f"unknown model config keys: {', '.join(unknown)}")
        values = dict(data)
        if "factor" in values:
            values["factor"] = FactorConfig.from_dict(values["factor"])
        return cls(**values)

    def with_factor(self, factor: FactorConfig) -> "ModelConfig":
        return replace(self, factor=factor)


@dataclass(frozen=True, eq=False)
class PreparedInput:
    """An encoded example with its mask, relation map and tile plan, plus torch index tensors."""
    enc: EncodedInput
    mask: AttentionMask
    relation: BiasRelationMap | None
    plan: TilePlan | None
    token_ids: torch.Tensor
    pos_idx: torch.Tensor
    segment: torch.Tensor
    row_idx: torch.Tensor
    col_idx: torch.Tensor

    def __len__(self) -> int:
        return len(self.enc)


def prepare(enc: EncodedInput, cfg: ModelConfig) -> PreparedInput:
    """Check an encoded input against the model's tables and build its attention structures."""
    factor = cfg.factor
    if enc.tokens is not factor.tokens or enc.pe is not factor.pe:
        pe = enc.pe.value if enc.pe else None
        raise FactorConfigError(message=f"input encoded with ({enc.tokens.value}, {pe}), "
                                        f"model expects ({factor.tokens.value}, {factor.pe.value})")
    if int(enc.pos_idx.max()) >= cfg.max_positions:
        raise PositionRangeError(f"position index {int(enc.pos_idx.max())} exceeds max_positions={cfg.max_positions}")
    if factor.emb is EmbeddingScheme.E1:
        if int(enc.row_idx.max()) > cfg.max_rows:
            raise PositionRangeError(f"row index {int(enc.row_idx.max())} exceeds max_rows={cfg.max_rows}")
        if int(enc.col_idx.max()) > cfg.max_cols:
            raise PositionRangeError(f"column index {int(enc.col_idx.max())} exceeds max_cols={cfg.max_cols}")
    mask = build_mask(enc, factor.mask, cfg.question_content_only)
    relation = build_bias_map(enc) if factor.bias is BiasScheme.B1 else None
    plan = plan_tiles(mask.blocks) if cfg.kernel == "block_sparse" else None

    def long(values) -> torch.Tensor:
        return torch.as_tensor(np.asarray(values, dtype=np.int64))

    return PreparedInput(enc, mask, relation, plan, long(enc.token_ids), long(enc.pos_idx), long(enc.segment),
                         long(enc.row_idx), long(enc.col_idx))


def prepare_example(question: str, table: Table, cfg: ModelConfig) -> PreparedInput:
    enc = encode(question, table, cfg.factor.tokens, cfg.factor.pe, max_length=cfg.context_length)
    return prepare(enc, cfg)


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


class StructuredAttentionFunction(torch.autograd.Function):
    """Multi-head masked attention on one example; q, k, v are (heads, L, d_head)."""

    @staticmethod
    def forward(ctx, q, k, v, bias, prep: PreparedInput, kernel: str, check: bool):
        inputs = []
        outs = []
        for h in range(q.shape[0]):
            inp = AttentionInput(_to_numpy(q[h]), _to_numpy(k[h]), _to_numpy(v[h]), prep.mask, prep.relation,
                                 None if prep.relation is None else _to_numpy(bias[h]))
            inputs.append(inp)
            if kernel == "block_sparse":
                outs.append(attn_block_sparse(inp, check=check, plan=prep.plan).out)
            else:
                outs.append(attn_dense(inp).out)
        ctx.inputs = inputs
        ctx.prep = prep
        ctx.kernel = kernel
        return torch.from_numpy(np.stack(outs)).to(q.dtype)

    @staticmethod
    def backward(ctx, d_out):
        d_out = _to_numpy(d_out.contiguous())
        dq, dk, dv, db = [], [], [], []
        for h, inp in enumerate(ctx.inputs):
            if ctx.kernel == "block_sparse":
                grads = attn_backward_block_sparse(inp, d_out[h], plan=ctx.prep.plan)
            else:
                grads = attn_backward_dense(inp, d_out[h])
            dq.append(grads.dq)
            dk.append(grads.dk)
            dv.append(grads.dv)
            db.append(grads.d_bias_scalars if grads.d_bias_scalars is not None
                      else np.zeros(N_BIAS_CLASSES, dtype=np.float32))
        stack = lambda arrays: torch.from_numpy(np.stack(arrays).astype(np.float32))
        return stack(dq), stack(dk), stack(dv), stack(db), None, None, None


class StructuredSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.kernel = cfg.kernel
        self.check = cfg.check_tiling
        # B1 scalars, one per head and relation class; zero start makes B1 begin as B0.
        self.bias = (nn.Parameter(torch.zeros(cfg.n_heads, N_BIAS_CLASSES))
                     if cfg.factor.bias is BiasScheme.B1 else None)

    def forward(self, x: torch.Tensor, prep: PreparedInput) -> torch.Tensor:
        length = x.shape[0]
        q, k, v = self.qkv(x).view(length, 3, self.n_heads, self.d_head).permute(1, 2, 0, 3)
        bias = self.bias if self.bias is not None else torch.zeros(self.n_heads, N_BIAS_CLASSES)
        heads = StructuredAttentionFunction.apply(q, k, v, bias, prep, self.kernel, self.check)
        return self.proj(heads.permute(1, 0, 2).reshape(length, -1))


class EncoderLayer(nn.Module):
    """Pre-LN block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = StructuredSelfAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(nn.Linear(cfg.d_model, cfg.ffn_dim), nn.GELU(), nn.Dropout(cfg.dropout),
                                 nn.Linear(cfg.ffn_dim, cfg.d_model))
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, prep: PreparedInput) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.norm1(x), prep))
        return x + self.dropout(self.ffn(self.norm2(x)))


class EmbeddingStack(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.token = nn.Embedding(cfg.vocab_size, cfg.d_model, padding_idx=VOCAB.id(PAD))
        self.position = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.segment = nn.Embedding(2, cfg.d_model)
        self.structural = cfg.factor.emb is EmbeddingScheme.E1
        if self.structural:
            self.row = nn.Embedding(cfg.max_rows + 1, cfg.d_model)
            self.col = nn.Embedding(cfg.max_cols + 1, cfg.d_model)

    def forward(self, prep: PreparedInput) -> torch.Tensor:
        x = self.token(prep.token_ids) + self.position(prep.pos_idx) + self.segment(prep.segment)
        if self.structural:
            x = x + self.row(prep.row_idx) + self.col(prep.col_idx)
        return x


class TableQAModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embeddings = EmbeddingStack(cfg)
        self.encoder_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.encoder_norm = nn.LayerNorm(cfg.d_model)
        self.answer_position = nn.Embedding(cfg.max_answer_length, cfg.d_model)
        layer = nn.TransformerDecoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.dropout,
                                           batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(layer, cfg.n_dec_layers, norm=nn.LayerNorm(cfg.d_model))
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.pad_id = VOCAB.id(PAD)
        self.bos_id = VOCAB.id(BOS)
        self.eos_id = VOCAB.id(EOS)

    def encode(self, item: PreparedInput | EncodedInput) -> torch.Tensor:
        """Contextual states (L, d_model) of one example."""
        prep = item if isinstance(item, PreparedInput) else prepare(item, self.cfg)
        x = self.embeddings(prep)
        for layer in self.encoder_layers:
            x = layer(x, prep)
        return self.encoder_norm(x)

    def memory(self, preps: Sequence[PreparedInput]) -> tuple[torch.Tensor, torch.Tensor]:
        states = [self.encode(p) for p in preps]
        longest = max(s.shape[0] for s in states)
        memory = torch.zeros(len(states), longest, self.cfg.d_model)
        padding = torch.ones(len(states), longest, dtype=torch.bool)
        for b, s in enumerate(states):
            memory[b, :s.shape[0]] = s
            padding[b, :s.shape[0]] = False
        return memory, padding

    def decode(self, targets: torch.Tensor, memory: torch.Tensor, memory_padding: torch.Tensor) -> torch.Tensor:
        steps = targets.shape[1]
        if steps > self.cfg.max_answer_length:
            raise SequenceTooLongError(steps, self.cfg.max_answer_length)
        positions = torch.arange(steps)
        y = self.embeddings.token(targets) + self.answer_position(positions)[None]
        causal = nn.Transformer.generate_square_subsequent_mask(steps)
        out = self.decoder(y, memory, tgt_mask=causal, tgt_key_padding_mask=targets == self.pad_id,
                           memory_key_padding_mask=memory_padding, tgt_is_causal=True)
        return self.head(out)

    def forward(self, preps: Sequence[PreparedInput], targets: torch.Tensor) -> torch.Tensor:
        memory, padding = self.memory(preps)
        return self.decode(targets, memory, padding)

    @torch.no_grad()
    def greedy_decode(self, preps: Sequence[PreparedInput], max_length: int | None = None) -> list[list[int]]:
        """Argmax decoding from BOS until EOS or ``max_length`` tokens."""
        max_length = min(max_length or self.cfg.max_answer_length, self.cfg.max_answer_length)
        memory, padding = self.memory(preps)
        out = torch.full((len(preps), 1), self.bos_id, dtype=torch.long)
        done = torch.zeros(len(preps), dtype=torch.bool)
        while out.shape[1] < max_length and not bool(done.all()):
            logits = self.decode(out, memory, padding)[:, -1]
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, self.pad_id), nxt)
            out = torch.cat([out, nxt[:, None]], dim=1)
            done |= nxt == self.eos_id
        return [row.tolist() for row in out]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.detach().cpu().numpy().astype(np.float32) for name, t in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = {name: torch.from_numpy(np.array(a, dtype=np.float32)) for name, a in arrays.items()}
        self.load_state_dict(state)


def build_model(cfg: ModelConfig, seed: int) -> TableQAModel:
    torch.manual_seed(seed)
    model = TableQAModel(cfg)
    logger.info("model built", extra={"factor": cfg.factor.label,
                                      "parameters": sum(p.numel() for p in model.parameters())})
    return model
