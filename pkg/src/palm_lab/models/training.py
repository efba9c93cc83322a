"""Gradients, gradient checking, mini-batch training and greedy decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..core_math import NonFiniteError, SeededRng
from .config import ModelConfig
from .forward import Pair, batch_logits, batch_loss, build_batch
from .params import ModelParams, init_params


class TrainingDivergedError(NonFiniteError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite in epoch {epoch}")
        self.epoch = epoch


def backward(params: ModelParams, cfg: ModelConfig, pairs: Sequence[Pair], train_mode: bool = False,
             rng: SeededRng | None = None):
    """(loss breakdown, name -> gradient of the mean loss).

    Tensors the variant never reads get an exact zero gradient.
    """
    loss, breakdown = batch_loss(params, cfg, pairs, train_mode, rng)
    if not torch.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        out[name] = torch.zeros_like(params[name]) if g is None else g.detach()
    return breakdown, out


def gradient_check(params: ModelParams, cfg: ModelConfig, pairs: Sequence[Pair], h: float = 1e-6,
                   samples: int = 200, seed: int = 0, floor: float = 1e-4) -> float:
    """Max relative error between autograd and central differences.

    Up to ``samples`` scalar parameters are drawn without replacement.  The
    error is |a - n| / max(|a|, |n|, floor); the floor keeps near-zero
    gradients from turning round-off into large ratios.
    """
    if cfg.dropout != 0.0:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "dropout": 0.0})
    _, grads = backward(params, cfg, pairs)
    names = list(params)
    sizes = [params[n].numel() for n in names]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    picks = SeededRng(seed).permutation(total)[:min(samples, total)]

    def loss_value() -> float:
        with torch.no_grad():
            return float(batch_loss(params, cfg, pairs)[0])

    worst = 0.0
    for flat in sorted(int(p) for p in picks):
        k = int(np.searchsorted(offsets, flat, side="right")) - 1
        name, idx = names[k], flat - int(offsets[k])
        view = params[name].data.view(-1)
        orig = float(view[idx])
        view[idx] = orig + h
        plus = loss_value()
        view[idx] = orig - h
        minus = loss_value()
        view[idx] = orig
        numeric = (plus - minus) / (2 * h)
        analytic = float(grads[name].view(-1)[idx])
        scale = max(abs(analytic), abs(numeric), floor)
        err = abs(analytic - numeric) / scale if scale > 0 else 0.0
        worst = max(worst, err)
    return worst


@dataclass
class OptimizerSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    batch_size: int = 32
    epochs: int = 20

    def __post_init__(self):
        if not self.lr >= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr must be >= 0, batch_size >= 1, epochs >= 0")


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)


def with_eos(cfg: ModelConfig, pairs: Sequence[Pair]) -> list[tuple[list[int], list[int]]]:
    return [(list(s), list(t) + [cfg.vocab.eos]) for s, t in pairs]


def train(cfg: ModelConfig, pairs: Sequence[Pair], opt: OptimizerSettings | None = None,
          seed: int = 0) -> TrainResult:
    """Teacher-forced Adam training; targets get ``eos`` appended.

    Batch order is a per-epoch permutation drawn from ``seed``, and dropout
    masks come from the same seed, so two runs produce identical weights.
    """
    opt = opt or OptimizerSettings()
    if not pairs:
        raise ValueError("empty training corpus")
    rng = SeededRng(seed)
    params = init_params(cfg, rng.spawn(0))
    data = with_eos(cfg, pairs)
    optimizer = torch.optim.Adam(params.values(), lr=opt.lr, betas=(opt.beta1, opt.beta2), eps=opt.eps)
    log = []
    for epoch in range(1, opt.epochs + 1):
        order = rng.spawn(1).spawn(epoch).permutation(len(data))
        drop_rng = rng.spawn(2).spawn(epoch)
        sums = dict(total=0.0, decoder_nll=0.0, source_nll=0.0)
        tokens = 0
        for start in range(0, len(data), opt.batch_size):
            chunk = [data[i] for i in order[start:start + opt.batch_size]]
            loss, bd = batch_loss(params, cfg, chunk, train_mode=True, rng=drop_rng.spawn(start))
            if not math.isfinite(bd.total):
                raise TrainingDivergedError(epoch)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            n = bd.decoder_tokens + bd.source_tokens
            tokens += n
            sums["total"] += bd.total * n
            sums["decoder_nll"] += bd.decoder_nll * n
            sums["source_nll"] += bd.source_nll * n
        row = {"epoch": epoch, **{k: v / tokens for k, v in sums.items()}}
        if not math.isfinite(row["total"]):
            raise TrainingDivergedError(epoch)
        log.append(row)
    for t in params.values():
        t.grad = None
    return TrainResult(params, log)


def greedy_decode_batch(params: ModelParams, cfg: ModelConfig, sources: Sequence[Sequence[int]],
                        max_len: int) -> list[list[int]]:
    """Greedy outputs for many sources at once; ``eos`` is not included.

    Ties go to the lowest token id.  Decoding also stops when the next token
    would not fit in ``max_positions``.
    """
    eos = cfg.vocab.eos
    outputs = [[] for _ in sources]
    limits = [min(max_len, cfg.max_positions - len(s) - 1) for s in sources]
    active = [b for b in range(len(sources)) if limits[b] > 0]
    with torch.no_grad():
        while active:
            pairs = [(sources[b], outputs[b]) for b in active]
            batch = build_batch(cfg, pairs)
            logits = batch_logits(params, cfg, batch)
            if batch.family == "red":
                rows = logits[1][torch.arange(len(active)), len(outputs[active[0]])]
            elif batch.family == "ed":
                rows = logits[torch.arange(len(active)), len(outputs[active[0]])]
            else:
                last = torch.tensor(batch.tensors["lengths"]) - 1
                rows = logits[torch.arange(len(active)), last]
            choice = np.argmax(rows.numpy(), axis=1)
            still = []
            for b, tok in zip(active, choice):
                if int(tok) == eos:
                    continue
                outputs[b].append(int(tok))
                if len(outputs[b]) < limits[b]:
                    still.append(b)
            active = still
    return outputs


def greedy_decode(params: ModelParams, cfg: ModelConfig, s: Sequence[int], max_len: int) -> list[int]:
    return greedy_decode_batch(params, cfg, [s], max_len)[0]

