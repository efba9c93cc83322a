from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Any


class Variant(str, Enum):
    ED = "ED"
    LM = "LM"
    LM_SPE = "LM_SPE"
    LM_LE = "LM_LE"
    LM_PA = "LM_PA"
    PRELM = "PreLM"
    RED = "RED"
    PALM = "PALM"


@dataclass(frozen=True)
class Vocab:
    size: int
    pad: int = 0
    sep: int = 1
    eos: int = 2

    def __post_init__(self):
        specials = (self.pad, self.sep, self.eos)
        if len(set(specials)) != 3:
            raise ValueError("pad, sep and eos must be distinct")
        if any(not 0 <= s < self.size for s in specials):
            raise ValueError("special ids must be < vocab size")
        if self.size <= 3:
            raise ValueError("vocab needs at least one non-special token")

    @property
    def first_content(self) -> int:
        return max(self.pad, self.sep, self.eos) + 1

    def check(self, tokens) -> None:
        for tok in tokens:
            if not 0 <= int(tok) < self.size:
                raise ValueError(f"unknown token id {tok}")


# variant -> defaults; anything listed can still be overridden for ablations
_VARIANT_DEFAULTS: dict[Variant, dict[str, Any]] = {
    Variant.LM: dict(positional_mode="CPE", source_mask="causal", loss_scope="full_sequence",
                     language_embedding=False, partial_attention=False,
                     share_encoder_decoder_params=True),
    Variant.LM_SPE: dict(positional_mode="SPE", source_mask="causal", loss_scope="full_sequence",
                         language_embedding=False, partial_attention=False,
                         share_encoder_decoder_params=True),
    Variant.LM_LE: dict(positional_mode="CPE", source_mask="causal", loss_scope="full_sequence",
                        language_embedding=True, partial_attention=False,
                        share_encoder_decoder_params=True),
    Variant.LM_PA: dict(positional_mode="CPE", source_mask="causal", loss_scope="full_sequence",
                        language_embedding=False, partial_attention=True,
                        share_encoder_decoder_params=True),
    Variant.PRELM: dict(positional_mode="CPE", source_mask="bidirectional", loss_scope="full_sequence",
                        language_embedding=False, partial_attention=False,
                        share_encoder_decoder_params=True),
    Variant.RED: dict(positional_mode="CPE", source_mask="causal", loss_scope="full_sequence",
                      language_embedding=False, partial_attention=False,
                      share_encoder_decoder_params=True),
    Variant.PALM: dict(positional_mode="SPE", source_mask="bidirectional", loss_scope="full_sequence",
                       language_embedding=True, partial_attention=True,
                       share_encoder_decoder_params=True),
    Variant.ED: dict(positional_mode="SPE", source_mask="bidirectional", loss_scope="target_only",
                     language_embedding=False, partial_attention=False,
                     share_encoder_decoder_params=False),
}

_CHOICES = {
    "positional_mode": ("CPE", "SPE"),
    "source_mask": ("causal", "bidirectional"),
    "loss_scope": ("full_sequence", "target_only"),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture selector.  Build with :meth:`for_variant` to get the
    variant's defaults; the remaining fields are shared hyperparameters."""

    variant: Variant
    vocab: Vocab
    layers: int = 6
    d: int = 64
    ffn_width: int = 256
    heads: int = 1
    dropout: float = 0.1
    max_positions: int = 128
    positional_mode: str = "CPE"
    language_embedding: bool = False
    source_mask: str = "causal"
    loss_scope: str = "full_sequence"
    share_encoder_decoder_params: bool = True
    partial_attention: bool = False
    tie_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if isinstance(self.vocab, int):
            object.__setattr__(self, "vocab", Vocab(self.vocab))
        elif isinstance(self.vocab, dict):
            object.__setattr__(self, "vocab", Vocab(**self.vocab))
        for name, allowed in _CHOICES.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")
        if self.layers < 1 or self.d < 1 or self.ffn_width < 1:
            raise ValueError("layers, d and ffn_width must be positive")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError("heads must divide d")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.variant is Variant.RED:
            if not self.share_encoder_decoder_params:
                raise ValueError("RED shares encoder and decoder parameters")
            if self.partial_attention:
                raise ValueError("RED has no partial attention")
        if self.variant is Variant.ED:
            if self.loss_scope != "target_only":
                raise ValueError("ED has no source prediction head; use loss_scope=target_only")
            if self.partial_attention:
                raise ValueError("ED has no partial attention")

    @classmethod
    def for_variant(cls, variant: Variant | str, vocab: Vocab | int, **overrides) -> ModelConfig:
        variant = Variant(variant)
        kwargs = dict(_VARIANT_DEFAULTS[variant])
        kwargs.update(overrides)
        return cls(variant=variant, vocab=vocab, **kwargs)

    @property
    def is_lm_family(self) -> bool:
        return self.variant not in (Variant.ED, Variant.RED)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        """Variant defaults first, then the given fields; unknown keys raise."""
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "variant" not in data or "vocab" not in data:
            raise ValueError("model config needs 'variant' and 'vocab'")
        variant = data.pop("variant")
        vocab = data.pop("vocab")
        return cls.for_variant(variant, vocab, **data)


@dataclass
class LossBreakdown:
    total: float
    decoder_nll: float
    source_nll: float
    decoder_tokens: int
    source_tokens: int
