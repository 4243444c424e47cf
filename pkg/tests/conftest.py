import json

import pytest

from evida.bank import GroupKey, RespondentRecord, SurveyItem, build_bank
from evida.retrieval import EvidenceIndex, HashingEncoder
from evida.synthetic import make_benchmark, make_items, make_respondents, write_items, write_microdata
from evida.values import SUBINDEX_ORDER, WelzelProfile

COUNTRIES = ("Germany", "Japan")


def records_from_rows(rows, items):
    out = []
    for r in rows:
        answers = {}
        for iid, item in items.items():
            v = str(r.get(iid, "")).strip()
            if v and v in item.option_ids:
                answers[iid] = v
        out.append(
            RespondentRecord(
                r["respondent_id"],
                GroupKey(r["country"]),
                WelzelProfile([r[c] for c in SUBINDEX_ORDER]),
                answers,
            )
        )
    return out


@pytest.fixture(scope="session")
def items20():
    return make_items(20, seed=3)


@pytest.fixture(scope="session")
def rows400(items20):
    return make_respondents(items20, COUNTRIES, 400, seed=5)


@pytest.fixture(scope="session")
def bank20(items20, rows400):
    return build_bank(records_from_rows(rows400, items20), items20)


@pytest.fixture(scope="session")
def index20(bank20):
    return EvidenceIndex(bank20, HashingEncoder(dim=128, seed=0)).build()


@pytest.fixture()
def workspace(tmp_path, items20, rows400):
    """Microdata, item catalogue, benchmark and a question file on disk."""
    write_microdata(rows400, items20, tmp_path / "micro.tsv")
    write_items(items20, tmp_path / "items.json")
    bench = make_benchmark(list(COUNTRIES), 12, seed=2)
    (tmp_path / "bench.jsonl").write_text("".join(json.dumps(c) + "\n" for c in bench))
    q = {
        "item_id": "NEW1",
        "question": "How often do you pray outside of religious services?",
        "options": [
            {"id": "1", "text": "Several times a day"},
            {"id": "2", "text": "Once a week"},
            {"id": "3", "text": "Never"},
        ],
    }
    (tmp_path / "question.json").write_text(json.dumps(q))
    return tmp_path


@pytest.fixture()
def yesno_item():
    return SurveyItem("Q900", "Do you vote?", (("1", "Yes"), ("2", "No")))


# --- acceptance reporting --------------------------------------------------

_CRITERIA: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA.setdefault(f"{label}\t{title}", []).append(status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key, statuses in _CRITERIA.items():
        label, title = key.split("\t")
        status = "FAIL" if "FAIL" in statuses else "SKIP" if "SKIP" in statuses else "PASS"
        terminalreporter.write_line(f"[{status}] criterion {label}: {title}")
