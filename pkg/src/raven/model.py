"""The word-shifting fusion model and its ablation variants.

Per word, two recurrent encoders summarize the visual and acoustic
frames that fall inside the word's time span. Scalar influence gates
decide how much each modality matters for that word, a learned mixing
layer produces a shift vector in word-embedding space, and the word
embedding is displaced by that vector with its magnitude capped at a
fixed fraction of the embedding's own norm. The shifted sequence feeds
an utterance-level LSTM and a task head.

Ablation variants:

* ``no_sub``       frame sequences are averaged (then mapped by a learned
                   affine) instead of encoded recurrently; gating and
                   shifting unchanged.
* ``no_shift``     the per-word modality summaries are concatenated with
                   the word embedding instead of shifting it.
* ``no_sub_shift`` early fusion: temporal means concatenated with the
                   word embedding.

Word embeddings are frozen inputs: they are never trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AlignedUtterance
from .errors import ShapeError, ValidationError
from .nn import (
    AffineParams,
    LstmParams,
    ParamStore,
    affine,
    affine_params,
    init_params,
    lstm_params,
    lstm_run,
)
from .tensor import (
    Tensor,
    add,
    concat,
    div,
    l2_norm,
    mean_rows,
    minimum,
    scale,
    sigmoid,
    smul,
    stack_rows,
    tensor,
)

__all__ = [
    "ABLATIONS",
    "TASKS",
    "ModelConfig",
    "NonverbalEmbeddings",
    "ShiftRecord",
    "UtteranceEncoding",
    "RavenModel",
    "nonverbal_subnets",
    "gated_mix",
    "multimodal_shift",
    "encode_and_predict",
]

ABLATIONS = ("full", "no_sub", "no_shift", "no_sub_shift")
TASKS = ("regression", "multilabel")


@dataclass(frozen=True)
class ModelConfig:
    """All model dimensions and switches.

    The hidden-size and ``shift_cap`` defaults are workable conventions,
    not tuned values; override them per experiment.
    """

    embed_dim: int = 300
    visual_dim: int = 1
    acoustic_dim: int = 1
    visual_hidden: int = 16
    acoustic_hidden: int = 16
    encoder_hidden: int = 64
    shift_cap: float = 1.0
    ablation: str = "full"
    task: str = "regression"
    num_classes: int = 1
    seed: int = 0

    def validate(self) -> None:
        dims = {
            "embed_dim": self.embed_dim,
            "visual_dim": self.visual_dim,
            "acoustic_dim": self.acoustic_dim,
            "visual_hidden": self.visual_hidden,
            "acoustic_hidden": self.acoustic_hidden,
            "encoder_hidden": self.encoder_hidden,
            "num_classes": self.num_classes,
        }
        for name, value in dims.items():
            if not isinstance(value, int) or value < 1:
                raise ValidationError(f"model.{name} must be a positive integer, got {value!r}")
        if not (self.shift_cap >= 0.0):
            raise ValidationError(f"model.shift_cap must be >= 0, got {self.shift_cap!r}")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"model.ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.task not in TASKS:
            raise ValidationError(f"model.task must be one of {TASKS}, got {self.task!r}")
        if self.task == "regression" and self.num_classes != 1:
            raise ValidationError("regression task uses num_classes == 1")

    @property
    def output_size(self) -> int:
        return 1 if self.task == "regression" else self.num_classes

    @property
    def encoder_input_dim(self) -> int:
        if self.ablation in ("full", "no_sub"):
            return self.embed_dim
        if self.ablation == "no_shift":
            return self.embed_dim + self.visual_hidden + self.acoustic_hidden
        return self.embed_dim + self.visual_dim + self.acoustic_dim

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "visual_dim": self.visual_dim,
            "acoustic_dim": self.acoustic_dim,
            "visual_hidden": self.visual_hidden,
            "acoustic_hidden": self.acoustic_hidden,
            "encoder_hidden": self.encoder_hidden,
            "shift_cap": self.shift_cap,
            "ablation": self.ablation,
            "task": self.task,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict, where: str = "model") -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown {where} config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class NonverbalEmbeddings:
    """Final hidden states of the per-word visual and acoustic encoders."""

    visual: Tensor
    acoustic: Tensor


@dataclass
class ShiftRecord:
    """One word occurrence's embedding displacement, for later analysis."""

    word: str
    original: np.ndarray
    shift_vector: np.ndarray
    shift_scale: float
    shifted: np.ndarray
    label: float
    utterance_id: str
    position: int


@dataclass
class UtteranceEncoding:
    """Utterance summary state plus the task head's raw output."""

    hidden: Tensor
    prediction: Tensor


def nonverbal_subnets(
    visual_lstm: LstmParams, acoustic_lstm: LstmParams, visual: Tensor, acoustic: Tensor
) -> NonverbalEmbeddings:
    """Encode one word's frame sequences; the two spans may differ in length."""
    return NonverbalEmbeddings(
        visual=lstm_run(visual_lstm, visual),
        acoustic=lstm_run(acoustic_lstm, acoustic),
    )


def gated_mix(
    word_vec: Tensor,
    emb: NonverbalEmbeddings,
    visual_gate: AffineParams,
    acoustic_gate: AffineParams,
    visual_proj: AffineParams,
    acoustic_proj: AffineParams,
    mix_bias: Tensor,
) -> Tensor:
    """Combine modality embeddings into a shift vector in embedding space.

    Each modality gets a scalar sigmoid gate computed from [summary;
    word embedding]; the gated projections are summed with a shared bias.
    """
    gv = sigmoid(affine(visual_gate, concat(emb.visual, word_vec)))
    ga = sigmoid(affine(acoustic_gate, concat(emb.acoustic, word_vec)))
    mixed = add(smul(gv, affine(visual_proj, emb.visual)), smul(ga, affine(acoustic_proj, emb.acoustic)))
    return add(mixed, mix_bias)


def multimodal_shift(word_vec: Tensor, shift_vec: Tensor, cap: float) -> tuple[Tensor, Tensor]:
    """Displace the word embedding by the shift vector, magnitude-capped.

    The scaling factor is ``min(cap * |e| / |shift|, 1)``, clamping the
    displacement to at most ``cap`` times the embedding's norm while
    preserving the shift direction. A zero-norm shift (or cap 0) leaves
    the embedding untouched with scale 0.

    Returns (shifted embedding, scale) as tensors; the scale stays on
    the tape so training can adapt the gates through it.
    """
    if cap < 0.0:
        raise ValidationError(f"shift cap must be >= 0, got {cap}")
    shift_norm = l2_norm(shift_vec)
    if cap == 0.0 or shift_norm.item() == 0.0:
        zero = tensor(np.float64(0.0))
        return add(word_vec, smul(zero, shift_vec)), zero
    alpha = minimum(scale(div(l2_norm(word_vec), shift_norm), cap), 1.0)
    return add(word_vec, smul(alpha, shift_vec)), alpha


def encode_and_predict(
    encoder_lstm: LstmParams, head: AffineParams, rows: list[Tensor]
) -> UtteranceEncoding:
    """Run the utterance encoder over per-word vectors and apply the head.

    The head output is raw: a scalar for regression, logits for the
    multilabel task (sigmoid happens at loss/metric time).
    """
    if not rows:
        raise ShapeError("cannot encode an empty utterance")
    hidden = lstm_run(encoder_lstm, stack_rows(rows))
    return UtteranceEncoding(hidden=hidden, prediction=affine(head, hidden))


class RavenModel:
    """Parameter container plus the per-ablation forward pass."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.store = ParamStore()
        c = config
        if c.ablation in ("full", "no_shift"):
            self.visual_lstm = lstm_params(self.store, "visual_lstm", c.visual_dim, c.visual_hidden)
            self.acoustic_lstm = lstm_params(self.store, "acoustic_lstm", c.acoustic_dim, c.acoustic_hidden)
        if c.ablation == "no_sub":
            self.visual_mean_proj = affine_params(self.store, "visual_mean_proj", c.visual_hidden, c.visual_dim)
            self.acoustic_mean_proj = affine_params(self.store, "acoustic_mean_proj", c.acoustic_hidden, c.acoustic_dim)
        if c.ablation in ("full", "no_sub"):
            self.visual_gate = affine_params(self.store, "visual_gate", 1, c.visual_hidden + c.embed_dim)
            self.acoustic_gate = affine_params(self.store, "acoustic_gate", 1, c.acoustic_hidden + c.embed_dim)
            self.visual_proj = affine_params(self.store, "visual_proj", c.embed_dim, c.visual_hidden, bias=False)
            self.acoustic_proj = affine_params(self.store, "acoustic_proj", c.embed_dim, c.acoustic_hidden, bias=False)
            self.mix_bias = self.store.register("mix_bias", Tensor(np.zeros(c.embed_dim), requires_grad=True))
        self.encoder_lstm = lstm_params(self.store, "encoder_lstm", c.encoder_input_dim, c.encoder_hidden)
        self.head = affine_params(self.store, "head", c.output_size, c.encoder_hidden)
        init_params(self.store, seed=c.seed)

    def _check_dims(self, utt: AlignedUtterance) -> None:
        c = self.config
        if utt.embeddings[0].shape != (c.embed_dim,):
            raise ShapeError(
                f"utterance {utt.utterance_id}: embedding dim {utt.embeddings[0].shape} != ({c.embed_dim},)"
            )
        if utt.visual[0].shape[1] != c.visual_dim:
            raise ShapeError(
                f"utterance {utt.utterance_id}: visual dim {utt.visual[0].shape[1]} != {c.visual_dim}"
            )
        if utt.acoustic[0].shape[1] != c.acoustic_dim:
            raise ShapeError(
                f"utterance {utt.utterance_id}: acoustic dim {utt.acoustic[0].shape[1]} != {c.acoustic_dim}"
            )

    def _word_summaries(self, utt: AlignedUtterance, i: int) -> NonverbalEmbeddings:
        """Modality summaries for word i, recurrent or averaged per ablation."""
        visual = tensor(utt.visual[i])
        acoustic = tensor(utt.acoustic[i])
        if self.config.ablation in ("full", "no_shift"):
            return nonverbal_subnets(self.visual_lstm, self.acoustic_lstm, visual, acoustic)
        return NonverbalEmbeddings(
            visual=affine(self.visual_mean_proj, mean_rows(visual)),
            acoustic=affine(self.acoustic_mean_proj, mean_rows(acoustic)),
        )

    def forward(
        self, utt: AlignedUtterance, collect_shifts: bool = True
    ) -> tuple[UtteranceEncoding, list[ShiftRecord]]:
        """Encode one utterance; returns the prediction and, for the
        shifting variants, one ShiftRecord per word occurrence."""
        self._check_dims(utt)
        c = self.config
        rows: list[Tensor] = []
        records: list[ShiftRecord] = []
        for i, word in enumerate(utt.words):
            e = tensor(utt.embeddings[i])
            if c.ablation in ("full", "no_sub"):
                emb = self._word_summaries(utt, i)
                shift_vec = gated_mix(
                    e, emb, self.visual_gate, self.acoustic_gate,
                    self.visual_proj, self.acoustic_proj, self.mix_bias,
                )
                shifted, alpha = multimodal_shift(e, shift_vec, c.shift_cap)
                rows.append(shifted)
                if collect_shifts:
                    # Multilabel labels have no sign; record NaN so analysis
                    # routes those occurrences to its excluded bucket.
                    label_value = float(utt.label) if np.ndim(utt.label) == 0 else float("nan")
                    records.append(
                        ShiftRecord(
                            word=word,
                            original=utt.embeddings[i].copy(),
                            shift_vector=shift_vec.data.copy(),
                            shift_scale=alpha.item(),
                            shifted=shifted.data.copy(),
                            label=label_value,
                            utterance_id=utt.utterance_id,
                            position=i,
                        )
                    )
            elif c.ablation == "no_shift":
                emb = self._word_summaries(utt, i)
                rows.append(concat(concat(e, emb.visual), emb.acoustic))
            else:  # no_sub_shift: raw temporal means, early fusion
                mv = mean_rows(tensor(utt.visual[i]))
                ma = mean_rows(tensor(utt.acoustic[i]))
                rows.append(concat(concat(e, mv), ma))
        return encode_and_predict(self.encoder_lstm, self.head, rows), records
