from pathlib import Path

import pandas as pd
import pytest

from ffad.config import ParseTreeConfig
from ffad.ingest import RawLogLine, read_logs
from ffad.templates import (
    WILDCARD,
    TemplateMiner,
    TemplateTable,
    mask,
    parse_corpus,
    similarity,
)

DATA = Path(__file__).parent / "data"

FIXTURE_IDS = [0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 5, 5, 5, 0, 1, 2, 4]


def _lines(*texts: str):
    return [RawLogLine(timestamp=ii, text=text) for ii, text in enumerate(texts)]


@pytest.mark.parametrize(
    "text,expected",
    [
        ("Connection failed to 10.0.0.1:8080", ["Connection", "failed", "to", WILDCARD]),
        ("Session 0xBEEF expired", ["Session", WILDCARD, "expired"]),
        (
            "user 123e4567-e89b-12d3-a456-426614174000 login",
            ["user", WILDCARD, "login"],
        ),
        ("took -3.5 ms", ["took", WILDCARD, "ms"]),
        ("disk sda1 full", ["disk", WILDCARD, "full"]),
        ("plain words only", ["plain", "words", "only"]),
    ],
)
def test_mask(text, expected):
    assert mask(text) == expected


def test_similarity():
    assert similarity(["a", "b", "c"], ["a", "x", "c"]) == pytest.approx(2 / 3)
    assert similarity(["a", "b"], ["a", "b", "c"]) == 0.0
    assert similarity([], []) == 0.0


def test_fixture_corpus():
    lines = read_logs(DATA / "drain_fixture.log").items
    table, ids = parse_corpus(lines)

    oracle = pd.read_json(DATA / "drain_fixture_templates.jsonl", lines=True)
    assert len(table) == len(oracle)
    for tpl, (_, row) in zip(table.templates, oracle.iterrows()):
        assert tpl.id == row["id"]
        assert tpl.tokens == list(row["tokens"])
        assert tpl.count == row["count"]
    assert ids == FIXTURE_IDS


def test_frozen_table_round_trip(tmp_path: Path):
    lines = read_logs(DATA / "drain_fixture.log").items
    table, ids = parse_corpus(lines)

    path = tmp_path / "templates.jsonl"
    table.to_jsonl(path)
    loaded = TemplateTable.from_jsonl(path)
    assert [t.tokens for t in loaded.templates] == [t.tokens for t in table.templates]
    assert loaded.assign(lines) == ids


def test_frozen_matching_is_read_only():
    table, _ = parse_corpus(_lines("job done", "Worker 3 started job sync"))
    assert table.unknown_id == 2

    unseen = _lines(
        "job done",
        "Worker 44 started job reindex",
        "completely different message here",
        "job failed",
    )
    assert table.assign(unseen) == [0, 1, 2, 2]
    # matching never generalizes a frozen template
    assert table.templates[1].tokens == ["Worker", WILDCARD, "started", "job", "sync"]
    assert len(table) == 2


def test_empty_corpus(tmp_path: Path):
    table, ids = parse_corpus([])
    assert len(table) == 0
    assert ids == []
    assert table.assign(_lines("anything")) == [0]

    path = tmp_path / "templates.jsonl"
    table.to_jsonl(path)
    assert len(TemplateTable.from_jsonl(path)) == 0


def test_similarity_threshold():
    strict = ParseTreeConfig(sim_threshold=1.0)
    miner = TemplateMiner(strict)
    assert miner.add("alpha beta gamma") == 0
    assert miner.add("alpha beta delta") == 1

    loose = TemplateMiner(ParseTreeConfig(sim_threshold=0.5))
    assert loose.add("alpha beta gamma") == 0
    assert loose.add("alpha beta delta") == 0
    assert loose.templates[0].tokens == ["alpha", "beta", WILDCARD]


def test_max_children():
    miner = TemplateMiner(ParseTreeConfig(max_children=2))
    ids = [miner.add(f"{word} event happened") for word in ("red", "green", "blue", "cyan")]
    # the third and fourth first tokens overflow into the wildcard child
    assert ids[:2] == [0, 1]
    assert len(miner.templates) <= 4
    assert miner.templates[ids[2]].route[1] == WILDCARD


def test_empty_tokens_rejected():
    with pytest.raises(ValueError):
        TemplateMiner().match_or_create([])


if __name__ == "__main__":
    pytest.main([__file__])
