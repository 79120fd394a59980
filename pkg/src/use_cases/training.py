import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from src.domain.models import (
    Denotation,
    GenerationError,
    QAExample,
    Seed,
    SequenceTooLongError,
    TrainingDivergedError,
)

from .model import ModelConfig, PreparedInput, TableQAModel, build_model, prepare_example
from .rng import derive_rng
from .sqlexec import denotation_accuracy
from .vocabulary import PAD, VOCAB

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricPoint:
    step: int
    loss: float
    eval_da: float | None = None

    def to_dict(self) -> dict:
        return {"step": self.step, "loss": self.loss, "eval_da": self.eval_da}


@dataclass
class TrainResult:
    model: TableQAModel
    trace: list[MetricPoint] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_da: float = 0.0
    best_step: int = 0
    steps_run: int = 0
    stopped_early: bool = False


def answer_targets(examples: Sequence[QAExample], cfg: ModelConfig) -> torch.Tensor:
    """BOS v1 SEP v2 ... EOS rows padded with PAD."""
    rows = []
    for ex in examples:
        ids, _ = VOCAB.encode_answer(ex.answer)
        if len(ids) > cfg.max_answer_length:
            raise SequenceTooLongError(len(ids), cfg.max_answer_length)
        rows.append(ids)
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), VOCAB.id(PAD), dtype=torch.long)
    for b, ids in enumerate(rows):
        out[b, :len(ids)] = torch.tensor(ids, dtype=torch.long)
    return out


def split_examples(examples: Sequence[QAExample], fraction: float, seed: Seed) -> tuple[list, list]:
    """Seeded held-out split; at least one example lands on each side when possible."""
    order = derive_rng(seed, "heldout-split", 0).permutation(len(examples))
    n_eval = min(len(examples) - 1, max(1, round(fraction * len(examples)))) if len(examples) > 1 else 0
    held = sorted(order[:n_eval].tolist())
    kept = sorted(order[n_eval:].tolist())
    return [examples[i] for i in kept], [examples[i] for i in held]


def _prepare_all(examples: Sequence[QAExample], cfg: ModelConfig) -> list[PreparedInput]:
    return [prepare_example(ex.query, ex.table, cfg) for ex in examples]


def loss_on(model: TableQAModel, preps: Sequence[PreparedInput], targets: torch.Tensor) -> torch.Tensor:
    logits = model(preps, targets[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets[:, 1:].reshape(-1),
                           ignore_index=VOCAB.id(PAD))


def predict(model: TableQAModel, examples: Sequence[QAExample], batch_size: int = 1) -> list[Denotation]:
    """Greedy decoding of every example; the output list follows the input order."""
    model.eval()
    out: list[Denotation] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        preps = _prepare_all(chunk, model.cfg)
        for ids in model.greedy_decode(preps):
            out.append(Denotation(VOCAB.decode_answer(ids)))
    return out


def evaluate(model: TableQAModel, examples: Sequence[QAExample], set_semantics: bool = False) -> float:
    preds = predict(model, examples)
    return denotation_accuracy(preds, [Denotation(ex.answer) for ex in examples], set_semantics)


def train(examples: Sequence[QAExample], cfg: ModelConfig, seed: Seed,
          eval_examples: Sequence[QAExample] | None = None,
          on_eval: Callable[[MetricPoint], None] | None = None) -> TrainResult:
    """Adam on answer-token cross-entropy with periodic held-out DA and early stopping.

    Without ``eval_examples`` a seeded ``cfg.eval_fraction`` of the data is held out.
    The returned model carries the weights of the best evaluation.
    """
    if not examples:
        raise GenerationError("training needs at least one example")
    if eval_examples is None:
        examples, eval_examples = split_examples(examples, cfg.eval_fraction, seed)
        if not eval_examples:
            eval_examples = list(examples)
    answer_targets(list(examples) + list(eval_examples), cfg)

    model = build_model(cfg, seed.master % (2 ** 63))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    batches = derive_rng(seed, "train-batches", 0)
    result = TrainResult(model=model, best_da=-1.0)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    last_finite: float | None = None
    losses: list[float] = []

    for step in range(1, cfg.steps + 1):
        model.train()
        picks = batches.integers(len(examples), size=min(cfg.batch_size, len(examples)))
        chunk = [examples[int(i)] for i in picks]
        loss = loss_on(model, _prepare_all(chunk, cfg), answer_targets(chunk, cfg))
        value = float(loss.item())
        if not math.isfinite(value):
            logger.error("training diverged", extra={"step": step, "last_finite_loss": last_finite})
            raise TrainingDivergedError(step, last_finite)
        last_finite = value
        losses.append(value)
        result.step_losses.append(value)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        result.steps_run = step

        if step % cfg.eval_every == 0 or step == cfg.steps:
            da = evaluate(model, eval_examples)
            point = MetricPoint(step, float(np.mean(losses)), da)
            losses = []
            result.trace.append(point)
            logger.info("evaluation", extra={"step": step, "loss": point.loss, "eval_da": da})
            if on_eval is not None:
                on_eval(point)
            if da > result.best_da:
                result.best_da, result.best_step, stale = da, step, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= cfg.patience:
                    logger.info("early stopping", extra={"step": step, "best_step": result.best_step,
                                                         "best_da": result.best_da})
                    result.stopped_early = True
                    break

    model.load_state_dict(best_state)
    result.best_da = max(result.best_da, 0.0)
    return result
