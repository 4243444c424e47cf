"""Seeded synthetic survey data: item catalogues, respondent microdata, benchmarks."""

from __future__ import annotations

import csv
import json
import random
from pathlib import Path
from typing import Sequence

from .bank import SurveyItem
from .values import N_DIMS, SUBINDEX_ORDER

TOPICS = [
    ("religion", "How important is religion in your life?"),
    ("family", "How important is family in your life?"),
    ("work", "How important is work in your life?"),
    ("politics", "How interested would you say you are in politics?"),
    ("trust", "Generally speaking, would you say that most people can be trusted?"),
    ("divorce", "How justifiable do you think divorce is?"),
    ("abortion", "How justifiable do you think abortion is?"),
    ("homosexuality", "How justifiable do you think homosexuality is?"),
    ("women", "Do you agree that men make better political leaders than women do?"),
    ("children", "Is obedience an important quality for children to learn at home?"),
    ("imagination", "Is imagination an important quality for children to learn at home?"),
    ("army", "How much confidence do you have in the armed forces?"),
    ("police", "How much confidence do you have in the police?"),
    ("courts", "How much confidence do you have in the courts?"),
    ("speech", "How important is protecting freedom of speech?"),
    ("say", "How important is giving people more say in important government decisions?"),
    ("god", "How important is God in your life?"),
    ("authority", "Would greater respect for authority in the future be a good thing?"),
    ("environment", "Should protecting the environment be given priority over economic growth?"),
    ("immigration", "Should employers give priority to nationals over immigrants when jobs are scarce?"),
]

SCALE_4 = ["Very important", "Rather important", "Not very important", "Not at all important"]
SCALE_3 = ["Agree", "Neither agree nor disagree", "Disagree"]


def make_items(n_items: int, seed: int = 0) -> dict[str, SurveyItem]:
    rng = random.Random(seed)
    items = {}
    for i in range(n_items):
        topic, text = TOPICS[i % len(TOPICS)]
        if i >= len(TOPICS):
            text = f"{text} (wave {i // len(TOPICS) + 1})"
        scale = SCALE_4 if rng.random() < 0.6 else SCALE_3
        options = tuple((str(j + 1), label) for j, label in enumerate(scale))
        instruction = "Choose one answer." if i % 3 == 0 else None
        item_id = f"Q{i + 1:03d}"
        items[item_id] = SurveyItem(item_id, text, options, instruction)
    return items


def make_respondents(
    items: dict[str, SurveyItem],
    countries: Sequence[str],
    n_respondents: int,
    seed: int = 0,
    missing_rate: float = 0.1,
) -> list[dict]:
    """Rows keyed by microdata column names; answers lean on each respondent's profile."""
    rng = random.Random(seed)
    centers = {c: [rng.uniform(0.15, 0.85) for _ in range(N_DIMS)] for c in countries}
    loadings = {iid: [rng.uniform(-1, 1) for _ in range(N_DIMS)] for iid in items}
    rows = []
    for r in range(n_respondents):
        country = countries[r % len(countries)]
        profile = [min(1.0, max(0.0, rng.gauss(mu, 0.2))) for mu in centers[country]]
        row: dict = {"respondent_id": f"R{r:06d}", "country": country}
        row.update(zip(SUBINDEX_ORDER, profile))
        for iid, item in items.items():
            if rng.random() < missing_rate:
                row[iid] = "-1" if rng.random() < 0.5 else ""
                continue
            lean = sum(w * (z - 0.5) for w, z in zip(loadings[iid], profile))
            n_opt = len(item.options)
            pos = (lean / 2.0 + 0.5) * (n_opt - 1) + rng.gauss(0, 0.8)
            row[iid] = item.option_ids[min(n_opt - 1, max(0, int(round(pos))))]
        rows.append(row)
    return rows


def write_microdata(rows: list[dict], items: dict[str, SurveyItem], path: str | Path, delimiter: str = "\t") -> Path:
    path = Path(path)
    header = ["respondent_id", "country", *SUBINDEX_ORDER, *items]
    if path.suffix == ".jsonl":
        path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        return path
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, delimiter=delimiter, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def write_items(items: dict[str, SurveyItem], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([it.to_dict() for it in items.values()], indent=2) + "\n", encoding="utf-8")
    return path


def make_benchmark(countries: Sequence[str], n_cases: int, seed: int = 0) -> list[dict]:
    """Benchmark cases on unseen-style questions with random Dirichlet-like gold distributions."""
    rng = random.Random(seed)
    prompts = [
        "How often do you use artificial intelligence tools at work?",
        "How much do you enjoy listening to traditional music?",
        "Should older people keep working after retirement age?",
        "How often do you attend religious services?",
        "Are men and women treated equally in your workplace?",
        "How comfortable are you eating food from other countries?",
        "Do you think social media does more good than harm?",
        "How important is it to live near your parents?",
    ]
    cases = []
    for i in range(n_cases):
        n_opt = rng.choice([2, 3, 4, 5])
        options = [{"id": chr(ord("A") + j), "text": f"Option {j + 1}"} for j in range(n_opt)]
        weights = [rng.gammavariate(1.0, 1.0) for _ in range(n_opt)]
        total = sum(weights)
        gold = {o["id"]: w / total for o, w in zip(options, weights)}
        cases.append(
            {
                "case_id": f"C{i:04d}",
                "question": prompts[i % len(prompts)],
                "options": options,
                "country": countries[i % len(countries)],
                "gold": gold,
            }
        )
    return cases
