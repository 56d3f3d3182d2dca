import json

import numpy as np
import numpy.testing as npt
import pytest

from raven.data import (
    AlignedUtterance,
    EmbeddingTable,
    LoadStats,
    load_dataset,
    load_embedding_table,
    validate_and_impute,
    write_dataset,
    write_embedding_table,
)
from raven.errors import DataError


def _utt(uid="u1", words=("hi", "there")):
    rng = np.random.default_rng(hash(uid) % 2**32)
    n = len(words)
    return AlignedUtterance(
        utterance_id=uid,
        words=list(words),
        embeddings=[rng.normal(size=4) for _ in range(n)],
        visual=[rng.normal(size=(2, 3)) for _ in range(n)],
        acoustic=[rng.normal(size=(3, 2)) for _ in range(n)],
        label=0.75,
    )


def test_roundtrip_single_utterance(tmp_path):
    path = tmp_path / "data.jsonl"
    write_dataset([_utt()], path)
    loaded = load_dataset(path)
    assert len(loaded) == 1
    utt = loaded[0]
    assert utt.utterance_id == "u1"
    assert utt.words == ["hi", "there"]
    assert utt.visual[0].shape == (2, 3)
    assert utt.acoustic[1].shape == (3, 2)
    assert utt.label == 0.75


def test_empty_file_gives_empty_list(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_writer_output_is_canonical_fixed_point(tmp_path):
    """write(load(x)) reproduces the writer's own bytes exactly."""
    first = tmp_path / "first.jsonl"
    write_dataset([_utt("a"), _utt("b", words=("one", "two", "three"))], first)
    second = tmp_path / "second.jsonl"
    write_dataset(load_dataset(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_loader_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    write_dataset([_utt("ok")], path)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("{not json}\n")
    with pytest.raises(DataError) as err:
        load_dataset(path)
    assert "line 2" in str(err.value)


def test_loader_rejects_nan(tmp_path):
    path = tmp_path / "nan.jsonl"
    obj = {
        "id": "x", "words": ["w"], "embeddings": [[1.0]],
        "visual": [[[float("nan")]]], "acoustic": [[[1.0]]], "label": 0.5,
    }
    path.write_text(json.dumps(obj) + "\n")
    with pytest.raises(DataError) as err:
        load_dataset(path)
    assert "NaN" in str(err.value) or "non-finite" in str(err.value)


def test_loader_rejects_infinity_literal(tmp_path):
    path = tmp_path / "inf.jsonl"
    path.write_text(
        '{"id":"x","words":["w"],"embeddings":[[Infinity]],"visual":[[[1.0]]],"acoustic":[[[1.0]]],"label":0}\n'
    )
    with pytest.raises(DataError):
        load_dataset(path)


def test_loader_rejects_unknown_and_missing_fields(tmp_path):
    path = tmp_path / "fields.jsonl"
    path.write_text('{"id":"x","words":["w"],"visual":[[[1.0]]],"acoustic":[[[1.0]]]}\n')
    with pytest.raises(DataError) as err:
        load_dataset(path)
    assert "label" in str(err.value)
    path.write_text(
        '{"id":"x","words":["w"],"visual":[[[1.0]]],"acoustic":[[[1.0]]],"label":0,"extra":1}\n'
    )
    with pytest.raises(DataError) as err:
        load_dataset(path)
    assert "extra" in str(err.value)


def test_loader_accepts_scientific_notation(tmp_path):
    path = tmp_path / "sci.jsonl"
    path.write_text(
        '{"id":"x","words":["w"],"embeddings":[[1e-3]],"visual":[[[2.5E2]]],"acoustic":[[[-1e+0]]],"label":1e0}\n'
    )
    utt = load_dataset(path)[0]
    assert utt.embeddings[0][0] == 1e-3
    assert utt.visual[0][0, 0] == 250.0


def test_validate_and_impute_empty_span():
    utt = _utt()
    utt.acoustic[1] = np.zeros((0, 0))
    stats = LoadStats()
    fixed = validate_and_impute(utt, visual_dim=3, acoustic_dim=2, stats=stats)
    npt.assert_array_equal(fixed.acoustic[1], np.zeros((1, 2)))
    assert stats.imputed_spans == 1


def test_validate_and_impute_identity_on_valid_input():
    utt = _utt()
    before = [span.copy() for span in utt.visual]
    fixed = validate_and_impute(utt, visual_dim=3, acoustic_dim=2)
    for got, expect in zip(fixed.visual, before):
        npt.assert_array_equal(got, expect)


def test_validate_and_impute_length_mismatch_names_field():
    utt = _utt(words=("a", "b", "c"))
    utt.visual = utt.visual[:2]
    with pytest.raises(DataError) as err:
        validate_and_impute(utt, visual_dim=3, acoustic_dim=2)
    assert "visual" in str(err.value)


def test_embedding_table_roundtrip_and_size(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("hello 1.0 2.0 3.0\nworld -1.5 0.25 1e-2\n")
    table = load_embedding_table(path, dim=3)
    assert len(table) == 2
    npt.assert_array_equal(table.lookup("world"), [-1.5, 0.25, 0.01])


def test_embedding_table_oov_policy():
    table = EmbeddingTable({"a": np.ones(3)}, dim=3)
    npt.assert_array_equal(table.lookup("missing"), np.zeros(3))
    assert table.oov_count == 1


def test_embedding_table_wrong_dim_reports_line(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("good 1.0 2.0\nbad 1.0\n")
    with pytest.raises(DataError) as err:
        load_embedding_table(path, dim=2)
    assert "line 2" in str(err.value)


def test_embedding_table_duplicate_last_wins(tmp_path, caplog):
    path = tmp_path / "emb.txt"
    path.write_text("tok 1.0\ntok 2.0\n")
    with caplog.at_level("WARNING", logger="raven.data"):
        table = load_embedding_table(path, dim=1)
    assert table.lookup("tok")[0] == 2.0
    assert any("duplicate" in r.message for r in caplog.records)


def test_embedding_table_write_read_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    vectors = {"alpha": rng.normal(size=4), "beta": rng.normal(size=4)}
    path = tmp_path / "emb.txt"
    write_embedding_table(vectors, path)
    table = load_embedding_table(path, dim=4)
    for token, vec in vectors.items():
        npt.assert_array_equal(table.lookup(token), vec)


def test_load_with_table_instead_of_inline(tmp_path):
    utt = _utt()
    path = tmp_path / "data.jsonl"
    write_dataset([utt], path, include_embeddings=False)
    table = EmbeddingTable({"hi": np.ones(4), "there": np.full(4, 2.0)}, dim=4)
    loaded = load_dataset(path, embedding_table=table)
    npt.assert_array_equal(loaded[0].embeddings[0], np.ones(4))
    with pytest.raises(DataError):
        load_dataset(path)  # neither inline nor table


def test_multilabel_labels(tmp_path):
    utt = _utt()
    utt.label = np.array([1.0, 0.0, 1.0])
    path = tmp_path / "ml.jsonl"
    write_dataset([utt], path)
    loaded = load_dataset(path)[0]
    npt.assert_array_equal(loaded.label, [1.0, 0.0, 1.0])
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id":"x","words":["w"],"embeddings":[[1.0]],"visual":[[[1.0]]],"acoustic":[[[1.0]]],"label":[0,2]}\n')
    with pytest.raises(DataError):
        load_dataset(bad)
