"""Synthetic parallel corpora and generation metrics.

Token ids 0, 1, 2 are pad, separator and eos; content tokens start at 3.
Metric functions take model outputs first and references second, and every
per-step metric uses 1-indexed positions into the model output.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_math import SeededRng

FIRST_CONTENT = 3
KINDS = ("copy", "reverse", "lexicon_translation")


@dataclass(frozen=True)
class ToyTaskSpec:
    kind: str
    vocab_size: int
    source_len_range: tuple[int, int] = (4, 12)
    target_len_multiplier: float = 1.0
    pairs: int = 1000
    seed: int = 0

    def __post_init__(self):
        kind = "lexicon_translation" if self.kind == "lexicon" else self.kind
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "source_len_range", tuple(int(x) for x in self.source_len_range))
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.vocab_size <= FIRST_CONTENT:
            raise ValueError(f"vocab_size must exceed the {FIRST_CONTENT} special tokens")
        if len(self.source_len_range) != 2:
            raise ValueError("source_len_range must be [min, max]")
        lo, hi = self.source_len_range
        if lo < 1 or hi < lo:
            raise ValueError("source_len_range needs 1 <= min <= max")
        if not self.target_len_multiplier >= 1.0:
            raise ValueError("target_len_multiplier must be >= 1")
        if self.pairs < 0:
            raise ValueError("pairs must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> ToyTaskSpec:
        known = {"kind", "vocab_size", "source_len_range", "target_len_multiplier", "pairs", "seed"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown task spec keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["source_len_range"] = list(self.source_len_range)
        return out


@dataclass
class ParallelCorpus:
    pairs: list[tuple[list[int], list[int]]]
    vocab_size: int

    def __post_init__(self):
        self.pairs = [(list(map(int, s)), list(map(int, r))) for s, r in self.pairs]
        for s, r in self.pairs:
            if not s or not r:
                raise ValueError("corpus contains an empty sequence")
            for tok in s + r:
                if not 0 <= tok < self.vocab_size:
                    raise ValueError(f"token {tok} outside vocab of size {self.vocab_size}")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[list[int]]:
        return [s for s, _ in self.pairs]

    @property
    def references(self) -> list[list[int]]:
        return [r for _, r in self.pairs]


def lexicon_mapping(spec: ToyTaskSpec) -> np.ndarray:
    """Seeded bijection over the vocab that fixes specials and permutes content ids."""
    content = spec.vocab_size - FIRST_CONTENT
    perm = SeededRng(spec.seed).spawn(0).permutation(content) + FIRST_CONTENT
    return np.concatenate([np.arange(FIRST_CONTENT), perm])


def _swap_adjacent(seq: list[int]) -> list[int]:
    out = list(seq)
    for k in range(0, len(out) - 1, 2):
        out[k], out[k + 1] = out[k + 1], out[k]
    return out


def _repeat_counts(n: int, multiplier: float) -> list[int]:
    # token k is written floor((k+1)m) - floor(km) times, so the total is floor(n m)
    return [math.floor((k + 1) * multiplier) - math.floor(k * multiplier) for k in range(n)]


def stretch(seq: list[int], multiplier: float) -> list[int]:
    out = []
    for tok, reps in zip(seq, _repeat_counts(len(seq), multiplier)):
        out.extend([tok] * reps)
    return out


def make_target(source: Sequence[int], spec: ToyTaskSpec, mapping: np.ndarray | None = None) -> list[int]:
    s = list(source)
    if spec.kind == "copy":
        base = s
    elif spec.kind == "reverse":
        base = s[::-1]
    else:
        mapping = lexicon_mapping(spec) if mapping is None else mapping
        base = _swap_adjacent([int(mapping[x]) for x in s])
    return stretch(base, spec.target_len_multiplier)


def decode_lexicon(target: Sequence[int], spec: ToyTaskSpec) -> list[int]:
    """Invert :func:`make_target` for a lexicon task."""
    m = spec.target_len_multiplier
    n = next((n for n in range(len(target) + 1) if math.floor(n * m) == len(target)), None)
    if n is None:
        raise ValueError("target length is not reachable by the multiplier")
    collapsed, pos = [], 0
    for reps in _repeat_counts(n, m):
        collapsed.append(int(target[pos]))
        pos += reps
    inverse = np.argsort(lexicon_mapping(spec))
    return [int(inverse[x]) for x in _swap_adjacent(collapsed)]


def generate_dataset(spec: ToyTaskSpec) -> ParallelCorpus:
    rng = SeededRng(spec.seed).spawn(1)
    mapping = lexicon_mapping(spec) if spec.kind == "lexicon_translation" else None
    lo, hi = spec.source_len_range
    content = spec.vocab_size - FIRST_CONTENT
    pairs = []
    for j in range(spec.pairs):
        r = rng.spawn(j)
        n = lo + int(r.integers(hi - lo + 1))
        s = [int(x) + FIRST_CONTENT for x in r.spawn(1).integers(content, n)]
        pairs.append((s, make_target(s, spec, mapping)))
    return ParallelCorpus(pairs, spec.vocab_size)


def format_corpus(corpus: ParallelCorpus) -> str:
    return "".join(" ".join(map(str, s)) + "\t" + " ".join(map(str, r)) + "\n" for s, r in corpus.pairs)


def save_corpus(path, corpus: ParallelCorpus) -> None:
    Path(path).write_text(format_corpus(corpus), encoding="utf-8")


def parse_corpus(text: str, vocab_size: int | None = None) -> ParallelCorpus:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'source<TAB>target'")
        try:
            pairs.append(([int(x) for x in parts[0].split()], [int(x) for x in parts[1].split()]))
        except ValueError:
            raise ValueError(f"line {lineno}: tokens must be decimal ids") from None
    if vocab_size is None:
        vocab_size = max([FIRST_CONTENT] + [max(s + r) + 1 for s, r in pairs])
    return ParallelCorpus(pairs, vocab_size)


def load_corpus(path, vocab_size: int | None = None) -> ParallelCorpus:
    return parse_corpus(Path(path).read_text(encoding="utf-8"), vocab_size)


# metrics


def _check_step(i: int) -> None:
    if i < 1:
        raise ValueError("positions are 1-indexed; i must be >= 1")


def stepwise_precision(generated: Sequence[Sequence[int]], references: Sequence[Sequence[int]], i: int) -> float:
    """A_i: share of outputs reaching step i whose i-th token occurs in the reference."""
    _check_step(i)
    if len(generated) != len(references):
        raise ValueError("generated and references differ in length")
    hits = total = 0
    for g, r in zip(generated, references):
        if len(g) >= i:
            total += 1
            hits += g[i - 1] in set(r)
    if total == 0:
        raise ValueError(f"no sentence reaches position {i}")
    return hits / total


@dataclass(frozen=True)
class HallucinationConfig:
    alpha: float = 1.0
    beta: float = 1.0
    table_source: str = "generated"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.table_source not in ("generated", "reference"):
            raise ValueError("table_source must be 'generated' or 'reference'")


@dataclass
class CooccurrenceTable:
    """Number of sentence pairs in which source token p and output token q co-occur."""

    counts: Counter = field(default_factory=Counter)

    @classmethod
    def build(cls, sources: Sequence[Sequence[int]], outputs: Sequence[Sequence[int]]) -> CooccurrenceTable:
        counts = Counter()
        for s, t in zip(sources, outputs):
            for p in set(s):
                for q in set(t):
                    counts[p, q] += 1
        return cls(counts)

    def count(self, p: int, q: int) -> int:
        return self.counts.get((p, q), 0)

    def score(self, p: int, q: int, cfg: HallucinationConfig) -> float:
        return _sigmoid((self.count(p, q) - cfg.alpha) / cfg.beta)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def alignment_score(p: int, q: int, table: CooccurrenceTable | ParallelCorpus,
                    cfg: HallucinationConfig | None = None) -> float:
    """sigmoid((count(p, q) - alpha) / beta)."""
    cfg = cfg or HallucinationConfig()
    if isinstance(table, ParallelCorpus):
        table = CooccurrenceTable.build(table.sources, table.references)
    return table.score(p, q, cfg)


def hallucination_ratio(sources, generated, references, cfg: HallucinationConfig | None = None, i: int = 1,
                        table: CooccurrenceTable | None = None) -> float:
    """H_i: one minus the mean support of the i-th output token.

    A token's support is 1 if it occurs in the reference, otherwise its best
    alignment score against any source token.  Without an explicit table the
    counts are taken over (sources, generated) or (sources, references)
    according to ``cfg.table_source``.
    """
    _check_step(i)
    cfg = cfg or HallucinationConfig()
    if not len(sources) == len(generated) == len(references):
        raise ValueError("sources, generated and references differ in length")
    if table is None:
        other = generated if cfg.table_source == "generated" else references
        table = CooccurrenceTable.build(sources, other)
    support = 0.0
    total = 0
    for s, g, r in zip(sources, generated, references):
        if len(g) < i:
            continue
        total += 1
        q = g[i - 1]
        if q in set(r):
            support += 1.0
        else:
            support += max([table.score(p, q, cfg) for p in s], default=0.0)
    if total == 0:
        raise ValueError(f"no sentence reaches position {i}")
    return 1.0 - support / total


def average_length(outputs: Sequence[Sequence[int]]) -> float:
    if not outputs:
        raise ValueError("no outputs")
    return sum(len(o) for o in outputs) / len(outputs)


def length_stats(outputs: dict[str, Sequence[Sequence[int]]], baseline: str = "LM",
                 candidate: str = "PALM") -> dict:
    """Mean output length per model and, when both are present,
    delta_L = mean(candidate) - mean(baseline)."""
    if not outputs:
        raise ValueError("no outputs")
    avg = {name: average_length(outs) for name, outs in sorted(outputs.items())}
    out = {"avg_len": avg}
    if baseline in avg and candidate in avg:
        out["delta_L"] = avg[candidate] - avg[baseline]
    return out


def sequence_accuracy(generated: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    if not generated or len(generated) != len(references):
        raise ValueError("need equally many, non-zero, generated and reference sentences")
    return sum(list(g) == list(r) for g, r in zip(generated, references)) / len(generated)


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[k:k + n]) for k in range(len(seq) - n + 1))


def corpus_bleu(generated: Sequence[Sequence[int]], references: Sequence[Sequence[int]], max_n: int = 4) -> float:
    """Corpus BLEU with one reference per sentence.

    Clipped n-gram matches are pooled over the corpus.  Unigram precision is
    unsmoothed; orders n >= 2 use (matches + 1) / (candidates + 1).  The
    brevity penalty is exp(1 - r/c) when the output is shorter.
    """
    if not generated or len(generated) != len(references):
        raise ValueError("need equally many, non-zero, generated and reference sentences")
    matches = [0] * max_n
    cands = [0] * max_n
    hyp_len = ref_len = 0
    for g, r in zip(generated, references):
        hyp_len += len(g)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hyp, ref = _ngrams(g, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, ref[gram]) for gram, c in hyp.items())
            cands[n - 1] += max(len(g) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / cands[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (cands[n] + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p / max_n)


def moving_average(values: Sequence[float], window: int = 5) -> list[float]:
    """Trailing mean over up to ``window`` values."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    for k in range(len(values)):
        chunk = values[max(0, k - window + 1):k + 1]
        out.append(sum(chunk) / len(chunk))
    return out


def metrics_report(model: str, sources, generated, references,
                   cfg: HallucinationConfig | None = None) -> dict:
    """The evaluation JSON object: bleu, exact-match rate, mean length and
    per-step A_i / H_i for every step some output reaches."""
    cfg = cfg or HallucinationConfig()
    other = generated if cfg.table_source == "generated" else references
    table = CooccurrenceTable.build(sources, other)
    steps = []
    for i in range(1, max((len(g) for g in generated), default=0) + 1):
        steps.append({
            "i": i,
            "A_i": stepwise_precision(generated, references, i),
            "H_i": hallucination_ratio(sources, generated, references, cfg, i, table),
        })
    return {
        "model": model,
        "bleu": corpus_bleu(generated, references),
        "seq_accuracy": sequence_accuracy(generated, references),
        "avg_len": average_length(generated),
        "stepwise": steps,
    }
