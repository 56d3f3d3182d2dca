"""Synthetic corpus with a planted, subword-localized nonverbal signal.

Labels are constructed so they can only be recovered by combining word
identity with temporal structure inside the frame sequences:

* polarity words contribute their inherent sign (+1/-1) unless their
  frames carry an inversion pattern, in which case the contribution is
  flipped;
* polarizable nouns always carry a pattern and contribute its sign;
* neutral filler words contribute nothing and carry no pattern.

The label is the clamped sum of contributions plus a little noise. The
number of contributing words per utterance is odd, so the noise-free sum
is never zero and the label sign is unambiguous.

The pattern itself is biphasic: a fixed direction vector, scaled by the
signal-to-noise ratio, is added over the first half of a short
contiguous frame run and subtracted over the second half (or the other
way round, encoding the pattern's sign). The two halves have equal
length, so temporal averaging cancels the pattern exactly: models that
mean-pool frames keep only the word-identity signal, while recurrent
subword encoders can read the order.

Utterances also have a sampled intent (overall polarity); content words
agree with it with probability ``context_alignment``, and polarity words
that disagree are usually the inverted ones. This yields the occurrence
statistics the shift analysis expects: polarity words live mostly in
matching-sign contexts, nouns appear on both sides, and label/inversion
correlations are strong but not perfect.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AlignedUtterance
from .errors import ValidationError

__all__ = [
    "SyntheticSpec",
    "SyntheticDataset",
    "generate_synthetic",
    "rule_oracle_predict",
    "pattern_probe_features",
]

_POSITIVE = ("great", "good", "amazing", "love", "awesome", "fantastic")
_NEGATIVE = ("terrible", "awful", "bad", "boring", "hate", "horrible")
_NOUNS = ("guy", "movie", "plot", "actor", "scene", "ending")
_NEUTRAL = ("the", "a", "and", "that", "this", "it", "was", "really", "of", "to", "is", "so")


@dataclass
class SyntheticSpec:
    """Everything the generator needs; identical specs give identical bytes."""

    positive_words: tuple[str, ...] = _POSITIVE
    negative_words: tuple[str, ...] = _NEGATIVE
    polarizable_nouns: tuple[str, ...] = _NOUNS
    neutral_words: tuple[str, ...] = _NEUTRAL
    vocab_size: int | None = None            # pad neutral list with fillers up to this size
    words_per_utterance: tuple[int, int] = (5, 9)
    visual_frames: tuple[int, int] = (2, 6)   # ~30 Hz stream
    acoustic_frames: tuple[int, int] = (6, 15)  # ~100 Hz stream
    visual_dim: int = 6
    acoustic_dim: int = 10
    embed_dim: int = 16
    snr: float = 12.0
    train_count: int = 2000
    valid_count: int = 250
    test_count: int = 500
    seed: int = 0
    label_noise: float = 0.15
    sentiment_axis_strength: float = 0.4  # polarity-word embedding component along a shared axis
    context_alignment: float = 0.85   # P(content word polarity matches utterance intent)
    aligned_inversion: float = 0.1    # P(inversion | polarity word matches intent)
    crossed_inversion: float = 0.8    # P(inversion | polarity word opposes intent)
    polarity_slot_prob: float = 0.3   # P(content slot is a polarity word vs a noun)
    confuser_rate: float = 0.6        # P(neutral word carries a random-sign pattern)
    # P(pattern rides only the visual stream, only the acoustic stream, or
    # both): the other stream is plain noise for that occurrence, so a
    # model must decide per word which modality to trust.
    modality_reliability: tuple[float, float, float] = (0.4, 0.4, 0.2)
    content_counts: tuple[tuple[int, float], ...] = ((1, 0.15), (3, 0.70), (5, 0.15))
    pattern_span: tuple[float, float] = (0.3, 0.6)   # fraction of the word's frames
    intensity_jitter: tuple[float, float] = (0.7, 1.3)
    # Scale of a per-word-occurrence constant offset added to every frame
    # (speaker state, lighting, ...): label-independent nuisance that
    # dominates naive summaries but cancels in the biphasic template.
    span_offset_scale: float = 2.5

    @property
    def size(self) -> int:
        return self.train_count + self.valid_count + self.test_count

    def validate(self) -> None:
        if not (self.snr > 0):
            raise ValidationError(f"synthetic.snr must be > 0, got {self.snr!r}")
        for name in ("words_per_utterance", "visual_frames", "acoustic_frames"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise ValidationError(f"synthetic.{name} range ({lo}, {hi}) is empty or invalid")
        if self.visual_frames[0] < 2:
            raise ValidationError("synthetic.visual_frames must start at >= 2 (pattern needs two frames)")
        if self.acoustic_frames[0] < 2:
            raise ValidationError("synthetic.acoustic_frames must start at >= 2 (pattern needs two frames)")
        for name in ("visual_dim", "acoustic_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"synthetic.{name} must be >= 1")
        for name in ("train_count", "valid_count", "test_count"):
            if getattr(self, name) < 0:
                raise ValidationError(f"synthetic.{name} must be >= 0")
        for name in ("context_alignment", "aligned_inversion", "crossed_inversion", "polarity_slot_prob", "confuser_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"synthetic.{name} must be in [0, 1], got {v!r}")
        if not self.positive_words or not self.negative_words or not self.polarizable_nouns or not self.neutral_words:
            raise ValidationError("all four class-word lists must be nonempty")
        counts = [c for c, _ in self.content_counts]
        probs = [p for _, p in self.content_counts]
        if any(c < 1 or c % 2 == 0 for c in counts):
            raise ValidationError("content word counts must be odd (keeps the label sign unambiguous)")
        if abs(sum(probs) - 1.0) > 1e-9 or any(p < 0 for p in probs):
            raise ValidationError("content count probabilities must be nonnegative and sum to 1")
        rel = self.modality_reliability
        if len(rel) != 3 or abs(sum(rel) - 1.0) > 1e-9 or any(p < 0 for p in rel):
            raise ValidationError("modality_reliability must be three nonnegative probabilities summing to 1")
        if max(counts) > self.words_per_utterance[1]:
            raise ValidationError("words_per_utterance upper bound below the largest content count")
        all_words = self.all_words()
        if len(all_words) != len(set(all_words)):
            raise ValidationError("class-word lists overlap; tokens must be unique")
        if self.vocab_size is not None and self.vocab_size < len(all_words):
            raise ValidationError(
                f"vocab_size {self.vocab_size} is below the {len(all_words)} listed words"
            )

    def neutral_vocab(self) -> tuple[str, ...]:
        listed = len(self.positive_words) + len(self.negative_words) + len(self.polarizable_nouns)
        extra = 0 if self.vocab_size is None else self.vocab_size - listed - len(self.neutral_words)
        fillers = tuple(f"filler{i}" for i in range(max(0, extra)))
        return self.neutral_words + fillers

    def all_words(self) -> tuple[str, ...]:
        return self.positive_words + self.negative_words + self.polarizable_nouns + self.neutral_words

    def word_class(self, token: str) -> str:
        if token in self.positive_words:
            return "positive"
        if token in self.negative_words:
            return "negative"
        if token in self.polarizable_nouns:
            return "polarizable"
        return "neutral"

    def to_dict(self) -> dict:
        return {
            "positive_words": list(self.positive_words),
            "negative_words": list(self.negative_words),
            "polarizable_nouns": list(self.polarizable_nouns),
            "neutral_words": list(self.neutral_words),
            "vocab_size": self.vocab_size,
            "words_per_utterance": list(self.words_per_utterance),
            "visual_frames": list(self.visual_frames),
            "acoustic_frames": list(self.acoustic_frames),
            "visual_dim": self.visual_dim,
            "acoustic_dim": self.acoustic_dim,
            "embed_dim": self.embed_dim,
            "snr": self.snr,
            "train_count": self.train_count,
            "valid_count": self.valid_count,
            "test_count": self.test_count,
            "seed": self.seed,
            "label_noise": self.label_noise,
            "sentiment_axis_strength": self.sentiment_axis_strength,
            "context_alignment": self.context_alignment,
            "aligned_inversion": self.aligned_inversion,
            "crossed_inversion": self.crossed_inversion,
            "polarity_slot_prob": self.polarity_slot_prob,
            "confuser_rate": self.confuser_rate,
            "modality_reliability": list(self.modality_reliability),
            "content_counts": [list(pair) for pair in self.content_counts],
            "pattern_span": list(self.pattern_span),
            "intensity_jitter": list(self.intensity_jitter),
            "span_offset_scale": self.span_offset_scale,
        }

    @classmethod
    def from_dict(cls, data: dict, where: str = "synthetic") -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown {where} config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("positive_words", "negative_words", "polarizable_nouns", "neutral_words"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        for key in ("words_per_utterance", "visual_frames", "acoustic_frames", "pattern_span", "intensity_jitter", "modality_reliability"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "content_counts" in kwargs:
            kwargs["content_counts"] = tuple((int(c), float(p)) for c, p in kwargs["content_counts"])
        spec = cls(**kwargs)
        spec.validate()
        return spec


@dataclass
class SyntheticDataset:
    """Generated splits plus everything needed to decode them."""

    spec: SyntheticSpec
    train: list[AlignedUtterance]
    valid: list[AlignedUtterance]
    test: list[AlignedUtterance]
    embeddings: dict[str, np.ndarray]
    visual_direction: np.ndarray
    acoustic_direction: np.ndarray
    sentiment_axis: np.ndarray
    # ground truth per utterance id: list of (word, contribution, pattern sign or 0)
    truth: dict[str, list[tuple[str, int, int]]] = field(default_factory=dict)


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _inject_pattern(rng: np.random.Generator, frames: np.ndarray, direction: np.ndarray,
                    sign: int, spec: SyntheticSpec) -> None:
    """Add the biphasic pattern in place: +s over the first half of a
    contiguous run, -s over the second half (order encodes the sign)."""
    t = frames.shape[0]
    frac = rng.uniform(*spec.pattern_span)
    half = int(np.clip(round(frac * t / 2.0), 1, t // 2))
    start = int(rng.integers(0, t - 2 * half + 1))
    magnitude = rng.uniform(*spec.intensity_jitter) * spec.snr
    frames[start : start + half] += sign * magnitude * direction
    frames[start + half : start + 2 * half] -= sign * magnitude * direction


def _make_utterance(rng, spec: SyntheticSpec, uid: str, u_v, u_a, neutral_vocab):
    intent = 1 if rng.random() < 0.5 else -1
    counts = np.array([c for c, _ in spec.content_counts])
    probs = np.array([p for _, p in spec.content_counts])
    n_content = int(rng.choice(counts, p=probs))
    lo, hi = spec.words_per_utterance
    n_words = int(rng.integers(max(lo, n_content), hi + 1))

    entries = []  # (word, contribution, pattern sign or 0)
    for _ in range(n_content):
        aligned = rng.random() < spec.context_alignment
        slot_sign = intent if aligned else -intent
        if rng.random() < spec.polarity_slot_prob:
            # polarity word of sign slot_sign
            pool = spec.positive_words if slot_sign > 0 else spec.negative_words
            word = str(rng.choice(pool))
            inv_p = spec.aligned_inversion if aligned else spec.crossed_inversion
            if rng.random() < inv_p:
                contribution = -slot_sign
                pattern = contribution  # nonverbal cue reveals the flipped valence
            else:
                contribution = slot_sign
                pattern = 0
        else:
            # polarizable noun: valence comes entirely from the pattern
            word = str(rng.choice(spec.polarizable_nouns))
            contribution = slot_sign
            pattern = slot_sign
        entries.append((word, contribution, pattern))
    for _ in range(n_words - n_content):
        # Confusers: some neutral words carry a random-sign pattern that
        # contributes nothing; reading them as signal is a mistake, so a
        # model must key the nonverbal channel on the word it rides on.
        word = str(rng.choice(neutral_vocab))
        pattern = 0
        if rng.random() < spec.confuser_rate:
            pattern = 1 if rng.random() < 0.5 else -1
        entries.append((word, 0, pattern))
    order = rng.permutation(len(entries))
    entries = [entries[i] for i in order]

    visual, acoustic = [], []
    rel_probs = np.array(spec.modality_reliability)
    for _, _, pattern in entries:
        t_v = int(rng.integers(spec.visual_frames[0], spec.visual_frames[1] + 1))
        t_a = int(rng.integers(spec.acoustic_frames[0], spec.acoustic_frames[1] + 1))
        fv = rng.normal(size=(t_v, spec.visual_dim))
        fa = rng.normal(size=(t_a, spec.acoustic_dim))
        if spec.span_offset_scale > 0:
            fv += rng.normal(0.0, spec.span_offset_scale, size=spec.visual_dim)
            fa += rng.normal(0.0, spec.span_offset_scale, size=spec.acoustic_dim)
        if pattern != 0:
            carrier = int(rng.choice(3, p=rel_probs))  # 0 visual, 1 acoustic, 2 both
            if carrier in (0, 2):
                _inject_pattern(rng, fv, u_v, pattern, spec)
            if carrier in (1, 2):
                _inject_pattern(rng, fa, u_a, pattern, spec)
        visual.append(fv)
        acoustic.append(fa)

    total = sum(c for _, c, _ in entries)
    label = float(np.clip(np.clip(total, -3, 3) + rng.normal(0.0, spec.label_noise), -3.0, 3.0))
    words = [w for w, _, _ in entries]
    return words, visual, acoustic, label, entries, intent


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Produce train/valid/test splits, fully determined by the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    neutral_vocab = spec.neutral_vocab()
    vocab = (
        spec.positive_words + spec.negative_words + spec.polarizable_nouns + neutral_vocab
    )
    # Isotropic unit-scale embeddings: shift directions then stand out in
    # a global PCA because per-axis vocabulary variance is only ~1/E.
    # Polarity words additionally share a signed component along one
    # sentiment axis, so "flip this word's valence" is a concrete
    # direction in embedding space rather than a per-word lookup.
    embeddings = {w: rng.normal(0.0, 1.0 / np.sqrt(spec.embed_dim), size=spec.embed_dim) for w in vocab}
    u_v = _unit(rng, spec.visual_dim)
    u_a = _unit(rng, spec.acoustic_dim)
    axis = _unit(rng, spec.embed_dim)
    for w in spec.positive_words:
        embeddings[w] = embeddings[w] + spec.sentiment_axis_strength * axis
    for w in spec.negative_words:
        embeddings[w] = embeddings[w] - spec.sentiment_axis_strength * axis

    dataset = SyntheticDataset(
        spec=spec, train=[], valid=[], test=[],
        embeddings=embeddings, visual_direction=u_v, acoustic_direction=u_a,
        sentiment_axis=axis,
    )
    for split_name, count, bucket in (
        ("train", spec.train_count, dataset.train),
        ("valid", spec.valid_count, dataset.valid),
        ("test", spec.test_count, dataset.test),
    ):
        for idx in range(count):
            uid = f"{split_name}-{idx:05d}"
            words, visual, acoustic, label, entries, _ = _make_utterance(
                rng, spec, uid, u_v, u_a, neutral_vocab
            )
            bucket.append(
                AlignedUtterance(
                    utterance_id=uid,
                    words=words,
                    embeddings=[embeddings[w].copy() for w in words],
                    visual=visual,
                    acoustic=acoustic,
                    label=label,
                )
            )
            dataset.truth[uid] = entries
    return dataset


# ---------------------------------------------------------------------------
# Decoding oracles (used by tests and the planted-signal property)
# ---------------------------------------------------------------------------


def _matched_filter_score(frames: np.ndarray, direction: np.ndarray) -> float:
    """Best signed biphasic-template match over all (start, half) choices.

    Positive score means "+ then -" (a positive pattern); the score for
    noise-only frames stays small because each template is zero-mean.
    """
    proj = frames @ direction
    t = proj.shape[0]
    best = 0.0
    csum = np.concatenate([[0.0], np.cumsum(proj)])
    for half in range(1, t // 2 + 1):
        for start in range(0, t - 2 * half + 1):
            a = csum[start + half] - csum[start]
            b = csum[start + 2 * half] - csum[start + half]
            score = (a - b) / np.sqrt(2.0 * half)
            if abs(score) > abs(best):
                best = score
    return float(best)


def decode_pattern(visual: np.ndarray, acoustic: np.ndarray, u_v, u_a, threshold: float = 6.5) -> int:
    """Detect the planted pattern from raw frames: returns +1, -1 or 0.

    Each modality is checked on its own because the pattern may ride on
    only one of them. The default threshold sits between the worst-case
    single-modality template response at the default SNR (about 12 noise
    units) and the largest response noise alone produces (about 3), so
    decoding errors are vanishingly rare at default settings.
    """
    score_v = _matched_filter_score(visual, u_v)
    score_a = _matched_filter_score(acoustic, u_a)
    candidates = [s for s in (score_v, score_a) if abs(s) >= threshold]
    if not candidates:
        return 0
    best = max(candidates, key=abs)
    return 1 if best > 0 else -1


def rule_oracle_predict(utt: AlignedUtterance, spec: SyntheticSpec, u_v, u_a) -> float:
    """Apply the generation rule to the observable data (not the stored
    truth): per-word contribution from word class plus decoded pattern."""
    total = 0
    for i, word in enumerate(utt.words):
        cls = spec.word_class(word)
        if cls == "neutral":
            continue
        pattern = decode_pattern(utt.visual[i], utt.acoustic[i], u_v, u_a)
        if cls == "polarizable":
            total += pattern
        else:
            inherent = 1 if cls == "positive" else -1
            total += pattern if pattern != 0 else inherent
    return float(np.clip(total, -3, 3))


def pattern_probe_features(dataset: SyntheticDataset, split: str = "train"):
    """Features for the averaging-degrades-the-signal property.

    For every pattern-bearing word occurrence, emit the temporal-mean
    projections (what a mean-pooling model sees) and the order-aware
    matched-filter scores (what a subword model can see), with the
    pattern sign as the target.
    """
    utts = getattr(dataset, split)
    u_v, u_a = dataset.visual_direction, dataset.acoustic_direction
    mean_feats, full_feats, targets = [], [], []
    for utt in utts:
        for i, (word, _, pattern) in enumerate(dataset.truth[utt.utterance_id]):
            if pattern == 0:
                continue
            mean_feats.append([utt.visual[i].mean(axis=0) @ u_v, utt.acoustic[i].mean(axis=0) @ u_a])
            full_feats.append([
                _matched_filter_score(utt.visual[i], u_v),
                _matched_filter_score(utt.acoustic[i], u_a),
            ])
            targets.append(pattern)
    return np.asarray(mean_feats), np.asarray(full_feats), np.asarray(targets)
