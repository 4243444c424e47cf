import json
import random

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evida.bank import EvidenceBank, GroupEvidence, GroupKey, ItemEvidence, OptionEvidence, SurveyItem
from evida.retrieval import (
    DEFAULT_K,
    DEFAULT_N_MIN,
    CachedEncoder,
    EvidenceIndex,
    HashingEncoder,
    HTTPEncoder,
    RetrievalQuery,
    SimilarityError,
    TransportError,
    UnknownGroupError,
    cosine,
    item_text,
    question_text,
    retrieve,
)
from evida.values import LMHSignature

G = GroupKey("X")
SIG = LMHSignature(("medium",) * 8)


def make_bank(supports: dict[str, int], texts: dict[str, str] | None = None) -> EvidenceBank:
    items = {}
    for iid, n in supports.items():
        item = SurveyItem(iid, (texts or {}).get(iid, f"question about topic {iid}"), (("1", "yes"), ("2", "no")))
        items[iid] = ItemEvidence(
            item, n, {"1": 0.5, "2": 0.5}, {"1": OptionEvidence(n // 2, None, SIG), "2": OptionEvidence(n - n // 2, None, SIG)}
        )
    return EvidenceBank(groups={G: GroupEvidence(SIG, 100, items)})


class TableEncoder:
    """Looks vectors up by exact text."""

    identity = "table"

    def __init__(self, table):
        self.table = table

    def embed(self, texts):
        return [list(self.table[t]) for t in texts]


def brute_force(bank, encoder, query):
    qv = np.array(encoder.embed([question_text(query.question_text, query.instruction)])[0])
    rows = []
    for iid, ev in bank.groups[query.group].items.items():
        if iid in query.exclude_item_ids:
            continue
        v = np.array(encoder.embed([item_text(ev.item)])[0])
        rows.append((float(v @ qv / np.linalg.norm(v) / np.linalg.norm(qv)), iid))
    full = sorted(rows, key=lambda r: (-r[0], r[1]))
    return [iid for s, iid in full[: query.k] if bank.groups[query.group].items[iid].support >= query.n_min]


def test_defaults():
    assert DEFAULT_K == 10 and DEFAULT_N_MIN == 30
    q = RetrievalQuery("q", G)
    assert q.k == 10 and q.n_min == 30


def test_cosine_basic():
    assert cosine([1, 0], [1, 0]) == 1.0
    assert cosine([1, 0], [-1, 0]) == -1.0
    assert abs(cosine([1, 0], [0, 1])) < 1e-15
    with pytest.raises(SimilarityError):
        cosine([0, 0], [1, 0])
    with pytest.raises(SimilarityError):
        cosine([1, 0], [1, 0, 0])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_cosine_symmetric_and_bounded(u, v):
    if not np.any(u) or not np.any(v):
        return
    assert cosine(u, v) == cosine(v, u)
    assert -1.0 <= cosine(u, v) <= 1.0


def test_retrieve_equals_brute_force_oracle():
    rng = random.Random(0)
    supports = {f"I{i:02d}": rng.choice([5, 20, 30, 31, 200]) for i in range(20)}
    bank = make_bank(supports)
    enc = HashingEncoder(dim=64, seed=3)
    idx = EvidenceIndex(bank, enc).build()
    for qtext in ["question about topic I03", "topic", "something unrelated entirely", "question I1"]:
        for k in (1, 5, 10, 20):
            q = RetrievalQuery(qtext, G, k=k)
            assert idx.retrieve(q).item_ids == brute_force(bank, enc, q)


def test_filter_after_truncate_never_backfills():
    supports = {f"I{i:02d}": 100 for i in range(20)}
    supports["I00"] = supports["I01"] = 3
    table = {f"question about topic I{i:02d}": [1.0, i * 0.05] for i in range(20)}
    table["probe"] = [1.0, 0.0]
    bank = make_bank(supports)
    got = EvidenceIndex(bank, TableEncoder(table)).retrieve(RetrievalQuery("probe", G, k=5))
    # I00..I04 are the top five; the two starved ones are dropped and nothing replaces them
    assert got.item_ids == ["I02", "I03", "I04"]
    assert "I05" not in got.item_ids


def test_ties_break_by_item_id():
    supports = {"B": 50, "A": 50, "C": 50}
    texts = {"A": "same", "B": "same", "C": "other"}
    table = {"same": [1.0, 0.0], "other": [0.0, 1.0], "probe": [1.0, 0.0]}
    bank = make_bank(supports, texts)
    got = EvidenceIndex(bank, TableEncoder(table)).retrieve(RetrievalQuery("probe", G, k=2))
    assert got.item_ids == ["A", "B"]


def test_instruction_is_joined_with_newline():
    assert question_text("Q", "Pick one") == "Q\nPick one"
    assert question_text("Q") == "Q"
    assert item_text(SurveyItem("x", "Q", (("1", "a"), ("2", "b")), "Pick one")) == "Q\nPick one"


def test_exclusion_and_unknown_group(caplog):
    bank = make_bank({"I1": 50, "I2": 50})
    idx = EvidenceIndex(bank, HashingEncoder(32))
    got = idx.retrieve(RetrievalQuery("topic", G, exclude_item_ids={"I1"}))
    assert got.item_ids == ["I2"]
    assert len(idx.retrieve(RetrievalQuery("topic", G, exclude_item_ids={"I1", "I2"}))) == 0
    assert "no candidate" in caplog.text
    with pytest.raises(UnknownGroupError):
        idx.retrieve(RetrievalQuery("topic", GroupKey("Y")))


def test_free_function_matches_index():
    bank = make_bank({f"I{i}": 40 for i in range(6)})
    enc = HashingEncoder(32)
    q = RetrievalQuery("question about topic I4", G, k=3)
    assert retrieve(q, bank, enc).item_ids == EvidenceIndex(bank, enc).retrieve(q).item_ids


def test_hashing_encoder_deterministic_and_seeded():
    a, b = HashingEncoder(64, 1), HashingEncoder(64, 2)
    assert a.embed(["hello world"]) == HashingEncoder(64, 1).embed(["hello world"])
    assert a.embed(["hello world"]) != b.embed(["hello world"])
    assert any(a.embed([""])[0])


def test_cached_encoder_hits_and_misses(tmp_path):
    inner = HashingEncoder(16)
    enc = CachedEncoder(inner, tmp_path)
    first = enc.embed(["a", "b"])
    again = enc.embed(["b", "a", "c"])
    assert (enc.misses, enc.hits) == (3, 2)
    assert again[:2] == [first[1], first[0]]
    assert CachedEncoder(inner, tmp_path).embed(["c"]) == inner.embed(["c"])


def test_index_embeds_each_item_once():
    calls = []

    class Counting(HashingEncoder):
        def embed(self, texts):
            calls.extend(texts)
            return super().embed(texts)

    bank = make_bank({f"I{i}": 40 for i in range(40)})
    idx = EvidenceIndex(bank, Counting(32), max_workers=4, batch_size=7).build()
    idx.build()
    assert sorted(calls) == sorted(item_text(ev.item) for ev in bank.groups[G].items.values())


def test_http_encoder_retries_then_succeeds(monkeypatch):
    monkeypatch.setenv("EVIDA_ENCODER_TOKEN", "tok")
    seen = []

    def handler(request):
        seen.append(request.headers.get("authorization"))
        if len(seen) < 2:
            return httpx.Response(503)
        texts = json.loads(request.content)["texts"]
        return httpx.Response(200, json={"embeddings": [[1.0, float(len(t))] for t in texts]})

    enc = HTTPEncoder("http://enc/embed", backoff=0, transport=httpx.MockTransport(handler))
    assert enc.embed(["ab", "c"]) == [[1.0, 2.0], [1.0, 1.0]]
    assert seen == ["Bearer tok", "Bearer tok"]


def test_http_encoder_gives_up():
    enc = HTTPEncoder("http://enc/embed", backoff=0, retries=2, transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    with pytest.raises(TransportError):
        enc.embed(["x"])
