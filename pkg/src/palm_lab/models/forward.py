"""Forward passes for every variant, on padded batches.

Layout of one example: source ``s``, separator ``sep``, target ``t`` (the
caller appends ``eos`` to ``t`` for training).  LM-family models read the
concatenation ``a = s + [sep] + t``; ED and RED read ``s`` on the encoder side
and ``[sep] + t`` on the decoder side.  Row ``k`` of the logits predicts the
token after position ``k``; the final row has no target.

Every block is pre-norm: ``x + dropout(sublayer(layer_norm(x)))``.  For the
partial-attention sublayer the normalised rows are both the queries and, for
the first ``|s|`` rows, the input of the feedforward F_P that produces the
keys and values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..core_math import SeededRng
from .config import LossBreakdown, ModelConfig, Variant
from .params import ModelParams, decoder_prefix

Pair = tuple[Sequence[int], Sequence[int]]


def _check_tokens(cfg: ModelConfig, seq: Sequence[int]) -> None:
    cfg.vocab.check(seq)


def _pad(seqs: list[list[int]], width: int, fill: int) -> torch.Tensor:
    out = np.full((len(seqs), width), fill, dtype=np.int64)
    for b, seq in enumerate(seqs):
        out[b, :len(seq)] = seq
    return torch.from_numpy(out)


@dataclass
class Batch:
    """Padded tensors for one model family ("lm", "ed" or "red")."""

    family: str
    src_len: list[int]
    tgt_len: list[int]
    tensors: dict


def _target_arrays(rows: list[list[int]], width: int, first_target: list[int]):
    """Next-token targets and part masks for sequences laid out in ``rows``.

    Position k < len-1 predicts rows[b][k+1]; it belongs to the source part
    when k < first_target[b].
    """
    n = len(rows)
    targets = np.zeros((n, width), dtype=np.int64)
    src_part = np.zeros((n, width), dtype=bool)
    tgt_part = np.zeros((n, width), dtype=bool)
    for b, seq in enumerate(rows):
        m = len(seq) - 1
        targets[b, :m] = seq[1:]
        k = np.arange(m)
        src_part[b, :m] = k < first_target[b]
        tgt_part[b, :m] = k >= first_target[b]
    return torch.from_numpy(targets), torch.from_numpy(src_part), torch.from_numpy(tgt_part)


def build_lm_batch(cfg: ModelConfig, pairs: Sequence[Pair]) -> Batch:
    vocab = cfg.vocab
    seqs, src_len, tgt_len = [], [], []
    for s, t in pairs:
        s, t = list(map(int, s)), list(map(int, t))
        if not s:
            raise ValueError("empty source")
        _check_tokens(cfg, s)
        _check_tokens(cfg, t)
        a = s + [vocab.sep] + t
        if len(a) > cfg.max_positions:
            raise ValueError(f"sequence length {len(a)} exceeds max_positions={cfg.max_positions}")
        seqs.append(a)
        src_len.append(len(s))
        tgt_len.append(len(t))
    width = max(map(len, seqs))
    n = len(seqs)
    k = np.arange(width)
    slen = np.array(src_len)[:, None]
    if cfg.positional_mode == "SPE":
        positions = np.where(k[None] < slen, k[None], k[None] - slen)
    else:
        positions = np.broadcast_to(k, (n, width)).copy()
    lengths = np.array([len(a) for a in seqs])[:, None]
    positions = np.where(k[None] < lengths, positions, 0)
    lang = (k[None] >= slen).astype(np.int64)
    causal = np.tri(width, dtype=bool)[None]
    if cfg.source_mask == "bidirectional":
        self_allowed = causal | (k[None, None, :] < slen[:, :, None])
    else:
        self_allowed = np.broadcast_to(causal, (n, width, width))
    s_max = max(src_len)
    pa_allowed = np.broadcast_to(np.arange(s_max)[None, None, :] < slen[:, :, None], (n, width, s_max))
    # the separator is predicted from the last source position
    targets, src_part, tgt_part = _target_arrays(seqs, width, src_len)
    tensors = dict(
        tokens=_pad(seqs, width, vocab.pad),
        positions=torch.from_numpy(positions.astype(np.int64)),
        lang=torch.from_numpy(lang),
        self_allowed=torch.from_numpy(np.array(self_allowed)),
        pa_allowed=torch.from_numpy(np.array(pa_allowed)),
        targets=targets, src_part=src_part, tgt_part=tgt_part,
        lengths=[len(a) for a in seqs],
    )
    return Batch("lm", src_len, tgt_len, tensors)


def _encdec_layout(cfg: ModelConfig, pairs: Sequence[Pair]):
    vocab = cfg.vocab
    srcs, decs = [], []
    for s, t in pairs:
        s, t = list(map(int, s)), list(map(int, t))
        if not s:
            raise ValueError("empty source")
        _check_tokens(cfg, s)
        _check_tokens(cfg, t)
        if len(s) + len(t) + 1 > cfg.max_positions:
            raise ValueError(f"sequence length {len(s) + len(t) + 1} exceeds max_positions={cfg.max_positions}")
        srcs.append(s)
        decs.append([vocab.sep] + t)
    return srcs, decs


def _decoder_positions(cfg: ModelConfig, src_len: list[int], dec_width: int) -> torch.Tensor:
    k = np.arange(dec_width)[None]
    offset = np.array(src_len)[:, None] if cfg.positional_mode == "CPE" else 0
    return torch.from_numpy((k + offset).astype(np.int64))


def build_ed_batch(cfg: ModelConfig, pairs: Sequence[Pair]) -> Batch:
    srcs, decs = _encdec_layout(cfg, pairs)
    n = len(srcs)
    src_len = [len(s) for s in srcs]
    sw, dw = max(src_len), max(map(len, decs))
    slen = np.array(src_len)[:, None, None]
    j_src = np.arange(sw)[None, None, :]
    if cfg.source_mask == "bidirectional":
        enc_allowed = np.broadcast_to(j_src < slen, (n, sw, sw))
    else:
        enc_allowed = np.broadcast_to(np.tri(sw, dtype=bool)[None], (n, sw, sw))
    cross_allowed = np.broadcast_to(j_src < slen, (n, dw, sw))
    dec_allowed = np.broadcast_to(np.tri(dw, dtype=bool)[None], (n, dw, dw))
    targets, src_part, tgt_part = _target_arrays(decs, dw, [0] * n)
    tensors = dict(
        src=_pad(srcs, sw, cfg.vocab.pad),
        src_pos=torch.arange(sw).expand(n, sw),
        dec=_pad(decs, dw, cfg.vocab.pad),
        dec_pos=_decoder_positions(cfg, src_len, dw),
        enc_allowed=torch.from_numpy(np.array(enc_allowed)),
        dec_allowed=torch.from_numpy(np.array(dec_allowed)),
        cross_allowed=torch.from_numpy(np.array(cross_allowed)),
        targets=targets, src_part=src_part, tgt_part=tgt_part,
        dec_lengths=[len(x) for x in decs],
    )
    return Batch("ed", src_len, [len(x) - 1 for x in decs], tensors)


def build_red_batch(cfg: ModelConfig, pairs: Sequence[Pair]) -> Batch:
    srcs, decs = _encdec_layout(cfg, pairs)
    n = len(srcs)
    src_len = [len(s) for s in srcs]
    sw, dw = max(src_len), max(map(len, decs))
    slen = np.array(src_len)[:, None, None]
    j_src = np.arange(sw)[None, None, :]
    if cfg.source_mask == "bidirectional":
        enc_allowed = np.broadcast_to(j_src < slen, (n, sw, sw))
    else:
        enc_allowed = np.broadcast_to(np.tri(sw, dtype=bool)[None], (n, sw, sw))
    dec_allowed = np.concatenate([
        np.broadcast_to(j_src < slen, (n, dw, sw)),
        np.broadcast_to(np.tri(dw, dtype=bool)[None], (n, dw, dw)),
    ], axis=2)
    # encoder row k predicts s[k+1]; the last source row predicts the separator
    enc_rows = [s + [cfg.vocab.sep] for s in srcs]
    enc_targets, enc_src_part, _ = _target_arrays(enc_rows, sw + 1, src_len)
    dec_targets, _, dec_tgt_part = _target_arrays(decs, dw, [0] * n)
    tensors = dict(
        src=_pad(srcs, sw, cfg.vocab.pad),
        src_pos=torch.arange(sw).expand(n, sw),
        dec=_pad(decs, dw, cfg.vocab.pad),
        dec_pos=_decoder_positions(cfg, src_len, dw),
        enc_allowed=torch.from_numpy(np.array(enc_allowed)),
        dec_allowed=torch.from_numpy(np.array(dec_allowed)),
        enc_targets=enc_targets[:, :sw], enc_src_part=enc_src_part[:, :sw],
        dec_targets=dec_targets, dec_tgt_part=dec_tgt_part,
        dec_lengths=[len(x) for x in decs],
    )
    return Batch("red", src_len, [len(x) - 1 for x in decs], tensors)


def build_batch(cfg: ModelConfig, pairs: Sequence[Pair]) -> Batch:
    if cfg.variant is Variant.ED:
        return build_ed_batch(cfg, pairs)
    if cfg.variant is Variant.RED:
        return build_red_batch(cfg, pairs)
    return build_lm_batch(cfg, pairs)


class _Ctx:
    """Parameter lookup plus dropout source for one forward call."""

    def __init__(self, params: ModelParams, cfg: ModelConfig, rng: SeededRng | None,
                 train_mode: bool, trace: dict | None):
        if train_mode and cfg.dropout > 0 and rng is None:
            raise ValueError("train_mode with dropout needs an rng")
        self.p = params
        self.cfg = cfg
        self.rng = rng
        self.train = train_mode
        self.trace = trace

    def record(self, key: str, value: torch.Tensor) -> None:
        if self.trace is not None:
            self.trace.setdefault(key, []).append(value)

    def drop(self, x: torch.Tensor) -> torch.Tensor:
        rate = self.cfg.dropout
        if not self.train or rate == 0.0:
            return x
        keep = torch.from_numpy(self.rng.random(tuple(x.shape)) >= rate)
        return x * keep / (1.0 - rate)

    def norm(self, prefix: str, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, (x.shape[-1],), self.p[prefix + ".g"], self.p[prefix + ".b"], eps=1e-5)

    def attend(self, prefix: str, q_in, kv_in, allowed: torch.Tensor) -> torch.Tensor:
        p, h, d = self.p, self.cfg.heads, self.cfg.d
        q = q_in @ p[prefix + ".w_q"]
        k = kv_in @ p[prefix + ".w_k"]
        v = kv_in @ p[prefix + ".w_v"]
        b, tq, tk = q.shape[0], q.shape[1], k.shape[1]
        q = q.view(b, tq, h, d // h).transpose(1, 2)
        k = k.view(b, tk, h, d // h).transpose(1, 2)
        v = v.view(b, tk, h, d // h).transpose(1, 2)
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(d)
        logits = logits.masked_fill(~allowed[:, None], float("-inf"))
        z = torch.softmax(logits, dim=-1) @ v
        return z.transpose(1, 2).reshape(b, tq, d)

    def ffn(self, prefix: str, x: torch.Tensor) -> torch.Tensor:
        p = self.p
        hidden = torch.relu(x @ p[prefix + ".w1"] + p[prefix + ".b1"])
        return hidden @ p[prefix + ".w2"] + p[prefix + ".b2"]

    def partial_keys(self, prefix: str, rows: torch.Tensor) -> torch.Tensor:
        p = self.p
        p1 = self.drop(torch.tanh(rows @ p[prefix + ".w_p1"] + p[prefix + ".b_p1"]))
        p2 = self.drop(p1 @ p[prefix + ".w_p2"] + p[prefix + ".b_p2"])
        return p2 + p1

    def embed(self, word: str, pos: str, tokens, positions, lang_id=None) -> torch.Tensor:
        if int(positions.max()) >= self.cfg.max_positions:
            raise ValueError("position index exceeds max_positions")
        x = self.p[word][tokens] + self.p[pos][positions]
        if self.cfg.language_embedding:
            x = x + self.p["emb.lang"][lang_id]
        return x

    def project(self, word: str, x: torch.Tensor) -> torch.Tensor:
        table = self.p[word].T if self.cfg.tie_output else self.p["out.w"]
        return x @ table


def _lm_logits(ctx: _Ctx, batch: Batch) -> torch.Tensor:
    t = batch.tensors
    x = ctx.embed("emb.word", "emb.pos", t["tokens"], t["positions"], t["lang"])
    s_max = max(batch.src_len)
    for layer in range(ctx.cfg.layers):
        pre = f"layers.{layer}"
        ctx.record("G", x)
        n = ctx.norm(pre + ".ln_att", x)
        x = x + ctx.drop(ctx.attend(pre + ".att", n, n, t["self_allowed"]))
        if ctx.cfg.partial_attention:
            n = ctx.norm(pre + ".ln_pa", x)
            keys = ctx.partial_keys(pre + ".pa", n[:, :s_max])
            ctx.record("P", keys)
            x = x + ctx.drop(ctx.attend(pre + ".pa.att", n, keys, t["pa_allowed"]))
        n = ctx.norm(pre + ".ln_ffn", x)
        x = x + ctx.drop(ctx.ffn(pre + ".ffn", n))
    return ctx.project("emb.word", ctx.norm("ln_final", x))


def _ed_logits(ctx: _Ctx, batch: Batch) -> torch.Tensor:
    t, cfg = batch.tensors, ctx.cfg
    zeros = torch.zeros_like(t["src"])
    x = ctx.embed("enc.emb.word", "enc.emb.pos", t["src"], t["src_pos"], zeros)
    for layer in range(cfg.layers):
        pre = f"enc.layers.{layer}"
        ctx.record("G_enc", x)
        n = ctx.norm(pre + ".ln_att", x)
        x = x + ctx.drop(ctx.attend(pre + ".att", n, n, t["enc_allowed"]))
        n = ctx.norm(pre + ".ln_ffn", x)
        x = x + ctx.drop(ctx.ffn(pre + ".ffn", n))
    memory = ctx.norm("enc.ln_final", x)
    ctx.record("H_enc", memory)
    dp = decoder_prefix(cfg)
    y = ctx.embed(dp + "emb.word", dp + "emb.pos", t["dec"], t["dec_pos"], torch.ones_like(t["dec"]))
    for layer in range(cfg.layers):
        own, cross = f"{dp}layers.{layer}", f"dec.layers.{layer}"
        n = ctx.norm(own + ".ln_att", y)
        y = y + ctx.drop(ctx.attend(own + ".att", n, n, t["dec_allowed"]))
        n = ctx.norm(cross + ".ln_cross", y)
        y = y + ctx.drop(ctx.attend(cross + ".cross", n, memory, t["cross_allowed"]))
        n = ctx.norm(own + ".ln_ffn", y)
        y = y + ctx.drop(ctx.ffn(own + ".ffn", n))
    return ctx.project(dp + "emb.word", ctx.norm(dp + "ln_final", y))


def _red_logits(ctx: _Ctx, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    t, cfg = batch.tensors, ctx.cfg
    x = ctx.embed("emb.word", "emb.pos", t["src"], t["src_pos"], torch.zeros_like(t["src"]))
    y = ctx.embed("emb.word", "emb.pos", t["dec"], t["dec_pos"], torch.ones_like(t["dec"]))
    for layer in range(cfg.layers):
        pre = f"layers.{layer}"
        ctx.record("G_enc", x)
        ctx.record("G_dec", y)
        nx = ctx.norm(pre + ".ln_att", x)
        ny = ctx.norm(pre + ".ln_att", y)
        # decoder queries attend to this layer's encoder rows and its own prefix
        both = torch.cat([nx, ny], dim=1)
        x = x + ctx.drop(ctx.attend(pre + ".att", nx, nx, t["enc_allowed"]))
        y = y + ctx.drop(ctx.attend(pre + ".att", ny, both, t["dec_allowed"]))
        x = x + ctx.drop(ctx.ffn(pre + ".ffn", ctx.norm(pre + ".ln_ffn", x)))
        y = y + ctx.drop(ctx.ffn(pre + ".ffn", ctx.norm(pre + ".ln_ffn", y)))
    return (ctx.project("emb.word", ctx.norm("ln_final", x)),
            ctx.project("emb.word", ctx.norm("ln_final", y)))


def batch_logits(params: ModelParams, cfg: ModelConfig, batch: Batch, train_mode: bool = False,
                 rng: SeededRng | None = None, trace: dict | None = None):
    ctx = _Ctx(params, cfg, rng, train_mode, trace)
    if batch.family == "ed":
        return _ed_logits(ctx, batch)
    if batch.family == "red":
        return _red_logits(ctx, batch)
    return _lm_logits(ctx, batch)


def loss_terms(logits, cfg: ModelConfig, batch: Batch) -> tuple[torch.Tensor, LossBreakdown]:
    """Mean next-token NLL over the loss scope, split into source and decoder parts.

    Both parts are token sums divided by the same in-scope token count, so
    ``total = decoder_nll + source_nll``.
    """
    t = batch.tensors
    if batch.family == "red":
        enc_logits, dec_logits = logits
        groups = [(enc_logits, t["enc_targets"], t["enc_src_part"], True),
                  (dec_logits, t["dec_targets"], t["dec_tgt_part"], False)]
    else:
        groups = [(logits, t["targets"], t["src_part"], True),
                  (logits, t["targets"], t["tgt_part"], False)]
    use_source = cfg.loss_scope == "full_sequence"
    sums, counts = {}, {}
    for lg, tgt, mask, is_source in groups:
        part = "source" if is_source else "decoder"
        if is_source and not use_source:
            mask = torch.zeros_like(mask)
        nll = F.cross_entropy(lg.reshape(-1, lg.shape[-1]), tgt.reshape(-1), reduction="none")
        sums[part] = (nll * mask.reshape(-1)).sum()
        counts[part] = int(mask.sum())
    total_count = counts["source"] + counts["decoder"]
    if total_count == 0:
        raise ValueError("empty loss scope")
    total = (sums["source"] + sums["decoder"]) / total_count
    breakdown = LossBreakdown(
        total=float(total.detach()),
        decoder_nll=float(sums["decoder"].detach()) / total_count,
        source_nll=float(sums["source"].detach()) / total_count,
        decoder_tokens=counts["decoder"],
        source_tokens=counts["source"],
    )
    return total, breakdown


def batch_loss(params: ModelParams, cfg: ModelConfig, pairs: Sequence[Pair], train_mode: bool = False,
               rng: SeededRng | None = None) -> tuple[torch.Tensor, LossBreakdown]:
    batch = build_batch(cfg, pairs)
    return loss_terms(batch_logits(params, cfg, batch, train_mode, rng), cfg, batch)


# single-sequence entry points


def _require(cfg: ModelConfig, *variants: Variant) -> None:
    if cfg.variant not in variants:
        raise ValueError(f"{cfg.variant.value} config passed to a forward pass for "
                         f"{', '.join(v.value for v in variants)}")


_LM_FAMILY = (Variant.LM, Variant.LM_SPE, Variant.LM_LE, Variant.LM_PA, Variant.PRELM, Variant.PALM)


def forward_lm(params, cfg, s, t, train_mode=False, rng=None, trace=None) -> torch.Tensor:
    """Logits (|s| + 1 + |t|) x vocab over a = s + [sep] + t."""
    _require(cfg, *_LM_FAMILY)
    batch = build_lm_batch(cfg, [(s, t)])
    return batch_logits(params, cfg, batch, train_mode, rng, trace)[0]


def forward_palm(params, cfg, s, t, train_mode=False, rng=None, trace=None) -> torch.Tensor:
    _require(cfg, Variant.PALM)
    return forward_lm(params, cfg, s, t, train_mode, rng, trace)


def forward_ed(params, cfg, s, t, train_mode=False, rng=None, trace=None) -> torch.Tensor:
    """Decoder logits (|t| + 1) x vocab over [sep] + t."""
    _require(cfg, Variant.ED)
    batch = build_ed_batch(cfg, [(s, t)])
    return batch_logits(params, cfg, batch, train_mode, rng, trace)[0]


def forward_red(params, cfg, s, t, train_mode=False, rng=None, trace=None):
    """(encoder logits |s| x vocab, decoder logits (|t| + 1) x vocab)."""
    _require(cfg, Variant.RED)
    batch = build_red_batch(cfg, [(s, t)])
    enc, dec = batch_logits(params, cfg, batch, train_mode, rng, trace)
    return enc[0], dec[0]


def forward(params, cfg, s, t, train_mode=False, rng=None, trace=None):
    if cfg.variant is Variant.ED:
        return forward_ed(params, cfg, s, t, train_mode, rng, trace)
    if cfg.variant is Variant.RED:
        return forward_red(params, cfg, s, t, train_mode, rng, trace)
    return forward_lm(params, cfg, s, t, train_mode, rng, trace)


def compute_loss(logits, cfg: ModelConfig, s, t) -> LossBreakdown:
    """Loss breakdown for single-sequence logits (a pair of them for RED)."""
    batch = build_batch(cfg, [(s, t)])
    if batch.family == "red":
        logits = (logits[0][None], logits[1][None])
    else:
        logits = logits[None]
    return loss_terms(logits, cfg, batch)[1]
