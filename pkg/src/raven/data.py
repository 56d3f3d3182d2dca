"""Aligned multimodal data model and file IO.

The interchange format is JSON lines: one utterance per line with fields

    id          string
    words       array of token strings
    embeddings  array of per-word float arrays (optional when an
                embedding table is supplied at load time)
    visual      array (per word) of arrays of visual frames
    acoustic    array (per word) of arrays of acoustic frames
    label       number, or array of 0/1 ints for multilabel tasks

All floats are decimal text; scientific notation is accepted. NaN and
infinities are rejected. Word spans that arrive empty are imputed with a
single all-zero frame so downstream encoders always see at least one
frame.

Embedding tables are plain text, one ``token f1 ... fE`` per line.
Unknown tokens resolve to the zero vector (which also disables the
shift for that word, since the scale cap collapses to zero).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "AlignedUtterance",
    "EmbeddingTable",
    "LoadStats",
    "load_dataset",
    "write_dataset",
    "validate_and_impute",
    "load_embedding_table",
    "write_embedding_table",
]

log = logging.getLogger("raven.data")


@dataclass
class AlignedUtterance:
    """One word sequence with per-word frame matrices and a task label."""

    utterance_id: str
    words: list[str]
    embeddings: list[np.ndarray]  # each (E,)
    visual: list[np.ndarray]      # each (T_v_i, visual_dim), T_v_i >= 1
    acoustic: list[np.ndarray]    # each (T_a_i, acoustic_dim), T_a_i >= 1
    label: float | np.ndarray

    def __len__(self) -> int:
        return len(self.words)


@dataclass
class LoadStats:
    """Counters accumulated while loading/validating a dataset."""

    utterances: int = 0
    imputed_spans: int = 0
    oov_tokens: int = 0


class EmbeddingTable:
    """Token -> vector map with a zero-vector out-of-vocabulary policy."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int):
        self.vectors = vectors
        self.dim = dim
        self.oov_count = 0

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def lookup(self, token: str) -> np.ndarray:
        vec = self.vectors.get(token)
        if vec is None:
            self.oov_count += 1
            return np.zeros(self.dim)
        return vec


def _reject_constant(name):
    raise DataError(f"non-finite literal {name!r} is not allowed")


def _as_float_matrix(raw, *, line: int, fieldname: str) -> np.ndarray:
    """Parse a list of equal-length float rows into a (T, d) array."""
    if not isinstance(raw, list) or any(not isinstance(r, list) for r in raw):
        raise DataError("expected an array of float arrays", line=line, field=fieldname)
    if not raw:
        return np.zeros((0, 0))
    widths = {len(r) for r in raw}
    if len(widths) != 1:
        raise DataError(f"rows have inconsistent lengths {sorted(widths)}", line=line, field=fieldname)
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"non-numeric entry: {exc}", line=line, field=fieldname) from exc
    if not np.all(np.isfinite(arr)):
        raise DataError("NaN or infinite value", line=line, field=fieldname)
    return arr


def _parse_label(raw, *, line: int):
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        value = float(raw)
        if not np.isfinite(value):
            raise DataError("label is not finite", line=line, field="label")
        return value
    if isinstance(raw, list):
        if not raw or any(v not in (0, 1) for v in raw):
            raise DataError("multilabel labels must be nonempty arrays of 0/1", line=line, field="label")
        return np.asarray(raw, dtype=np.float64)
    raise DataError(f"label must be a number or 0/1 array, got {type(raw).__name__}", line=line, field="label")


def validate_and_impute(
    utt: AlignedUtterance,
    visual_dim: int,
    acoustic_dim: int,
    stats: LoadStats | None = None,
) -> AlignedUtterance:
    """Enforce length invariants and replace empty spans with a zero frame.

    Imputation (rather than dropping the word) keeps the word, embedding
    and span lists aligned, which the encoders require.
    """
    n = len(utt.words)
    if n < 1:
        raise DataError("utterance has no words", field=f"{utt.utterance_id}.words")
    for fieldname, seq in (("embeddings", utt.embeddings), ("visual", utt.visual), ("acoustic", utt.acoustic)):
        if len(seq) != n:
            raise DataError(
                f"{fieldname} has {len(seq)} entries but there are {n} words",
                field=f"{utt.utterance_id}.{fieldname}",
            )
    for i in range(n):
        if utt.visual[i].size == 0:
            utt.visual[i] = np.zeros((1, visual_dim))
            if stats is not None:
                stats.imputed_spans += 1
            log.warning("utterance %s word %d: empty visual span imputed", utt.utterance_id, i)
        if utt.acoustic[i].size == 0:
            utt.acoustic[i] = np.zeros((1, acoustic_dim))
            if stats is not None:
                stats.imputed_spans += 1
            log.warning("utterance %s word %d: empty acoustic span imputed", utt.utterance_id, i)
        if utt.visual[i].shape[1] != visual_dim:
            raise DataError(
                f"visual frames are {utt.visual[i].shape[1]}-dimensional, expected {visual_dim}",
                field=f"{utt.utterance_id}.visual[{i}]",
            )
        if utt.acoustic[i].shape[1] != acoustic_dim:
            raise DataError(
                f"acoustic frames are {utt.acoustic[i].shape[1]}-dimensional, expected {acoustic_dim}",
                field=f"{utt.utterance_id}.acoustic[{i}]",
            )
    return utt


_REQUIRED_FIELDS = ("id", "words", "visual", "acoustic", "label")
_ALLOWED_FIELDS = frozenset(_REQUIRED_FIELDS) | {"embeddings"}


def load_dataset(
    path,
    embedding_table: EmbeddingTable | None = None,
    visual_dim: int | None = None,
    acoustic_dim: int | None = None,
    stats: LoadStats | None = None,
) -> list[AlignedUtterance]:
    """Parse and validate a JSON-lines dataset file (file order preserved).

    Modality dimensions are inferred from the first nonempty span when
    not given. Inline embeddings win over the table; an utterance with
    neither is an error.
    """
    if stats is None:
        stats = LoadStats()
    utterances: list[AlignedUtterance] = []
    parsed: list[tuple[int, dict]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line, parse_constant=_reject_constant)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            if not isinstance(obj, dict):
                raise DataError("each line must be a JSON object", line=line_no)
            unknown = set(obj) - _ALLOWED_FIELDS
            if unknown:
                raise DataError(f"unknown fields {sorted(unknown)}", line=line_no)
            for fieldname in _REQUIRED_FIELDS:
                if fieldname not in obj:
                    raise DataError("missing required field", line=line_no, field=fieldname)
            parsed.append((line_no, obj))

    def infer_dim(key: str) -> int | None:
        for _, obj in parsed:
            for span in obj.get(key, []):
                if isinstance(span, list) and span and isinstance(span[0], list) and span[0]:
                    return len(span[0])
        return None

    if visual_dim is None:
        visual_dim = infer_dim("visual")
    if acoustic_dim is None:
        acoustic_dim = infer_dim("acoustic")
    if parsed and (visual_dim is None or acoustic_dim is None):
        raise DataError(
            "could not infer modality dimensions (all spans empty); pass visual_dim/acoustic_dim"
        )

    for line_no, obj in parsed:
        if not isinstance(obj["id"], str) or not obj["id"]:
            raise DataError("id must be a nonempty string", line=line_no, field="id")
        words = obj["words"]
        if not isinstance(words, list) or not words or any(not isinstance(w, str) for w in words):
            raise DataError("words must be a nonempty array of strings", line=line_no, field="words")
        if "embeddings" in obj:
            emat = _as_float_matrix(obj["embeddings"], line=line_no, fieldname="embeddings")
            if emat.shape[0] != len(words):
                raise DataError(
                    f"{emat.shape[0]} embeddings for {len(words)} words", line=line_no, field="embeddings"
                )
            embeddings = [emat[i].copy() for i in range(emat.shape[0])]
        elif embedding_table is not None:
            before = embedding_table.oov_count
            embeddings = [embedding_table.lookup(w) for w in words]
            stats.oov_tokens += embedding_table.oov_count - before
        else:
            raise DataError(
                "no inline embeddings and no embedding table supplied", line=line_no, field="embeddings"
            )
        edims = {e.shape[0] for e in embeddings}
        if len(edims) != 1:
            raise DataError(f"embedding lengths differ: {sorted(edims)}", line=line_no, field="embeddings")

        def parse_spans(key: str) -> list[np.ndarray]:
            raw = obj[key]
            if not isinstance(raw, list):
                raise DataError("expected an array of spans", line=line_no, field=key)
            return [
                _as_float_matrix(span, line=line_no, fieldname=f"{key}[{i}]") for i, span in enumerate(raw)
            ]

        utt = AlignedUtterance(
            utterance_id=obj["id"],
            words=list(words),
            embeddings=embeddings,
            visual=parse_spans("visual"),
            acoustic=parse_spans("acoustic"),
            label=_parse_label(obj["label"], line=line_no),
        )
        try:
            utterances.append(validate_and_impute(utt, visual_dim, acoustic_dim, stats))
        except DataError as exc:
            raise DataError(str(exc), line=line_no) from exc
        stats.utterances += 1
    if stats.oov_tokens:
        log.info("%s: %d out-of-vocabulary tokens resolved to zero vectors", path, stats.oov_tokens)
    return utterances


def write_dataset(utterances: list[AlignedUtterance], path, include_embeddings: bool = True) -> None:
    """Write utterances in the canonical form: sorted keys, compact
    separators, shortest-roundtrip floats, one object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            obj = {
                "id": utt.utterance_id,
                "words": list(utt.words),
                "visual": [span.tolist() for span in utt.visual],
                "acoustic": [span.tolist() for span in utt.acoustic],
                "label": utt.label.tolist() if isinstance(utt.label, np.ndarray) else utt.label,
            }
            if include_embeddings:
                obj["embeddings"] = [e.tolist() for e in utt.embeddings]
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_embedding_table(path, dim: int) -> EmbeddingTable:
    """Parse a ``token f1 ... fE`` text table; duplicate tokens keep the
    last occurrence (with a warning)."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            token = parts[0]
            if len(parts) - 1 != dim:
                raise DataError(
                    f"expected {dim} floats for token {token!r}, found {len(parts) - 1}", line=line_no
                )
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise DataError(f"non-numeric value: {exc}", line=line_no) from exc
            if not np.all(np.isfinite(vec)):
                raise DataError(f"non-finite value for token {token!r}", line=line_no)
            if token in vectors:
                log.warning("embedding table %s: duplicate token %r (last occurrence wins)", path, token)
            vectors[token] = vec
    return EmbeddingTable(vectors, dim)


def write_embedding_table(vectors: dict[str, np.ndarray], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in vectors.items():
            fh.write(token)
            for v in vec:
                fh.write(f" {float(v)!r}")
            fh.write("\n")
