"""Benchmark loading, method evaluation by JSD, baselines and report writers."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import string
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .bank import SurveyItem
from .inference import STAGE_B, check_completion, normalize_distribution, stage_b_distribution
from .llm import DecodingParams, LLMClient, MethodUnavailableError
from .prompts import render_single_choice_prompt, render_verbalized_prompt
from .rewards import ScoringError, jsd, r_lmh
from .values import LMHSignature

logger = logging.getLogger(__name__)

GOLD_TOL = 1e-6
INVALID_JSD = 1.0
LETTERS = string.ascii_uppercase


class BenchmarkError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkCase:
    case_id: str
    question: SurveyItem
    country: str
    gold_distribution: Mapping[str, float]

    @property
    def options(self) -> tuple[tuple[str, str], ...]:
        return self.question.options


@dataclass
class BenchmarkLoad:
    cases: list[BenchmarkCase]
    rejections: list[tuple[int, str]]


def parse_case(d: Mapping) -> BenchmarkCase:
    case_id = str(d["case_id"])
    options = tuple((str(o["id"]), str(o["text"])) for o in d["options"])
    question = SurveyItem(case_id, str(d["question"]), options, d.get("instruction"))
    country = str(d["country"]).strip()
    if not country:
        raise ValueError("empty country")
    gold = {str(k): float(v) for k, v in d["gold"].items()}
    unknown = set(gold) - set(question.option_ids)
    if unknown:
        raise ValueError(f"gold keys not among options: {sorted(unknown)}")
    if any(v < 0 or not math.isfinite(v) for v in gold.values()):
        raise ValueError("gold has negative or non-finite mass")
    total = math.fsum(gold.values())
    if abs(total - 1.0) > GOLD_TOL:
        raise ValueError(f"gold sums to {total:.6g}")
    gold = {oid: gold.get(oid, 0.0) / total for oid in question.option_ids}
    return BenchmarkCase(case_id, question, country, gold)


def load_benchmark(path: str | Path) -> BenchmarkLoad:
    """Read JSON lines ``{case_id, question, options:[{id,text}], country, gold:{id: p}}``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise BenchmarkError(f"cannot read benchmark {path}: {e}") from e
    cases, rejections = [], []
    seen = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            case = parse_case(json.loads(line))
            if case.case_id in seen:
                raise ValueError(f"duplicate case_id {case.case_id!r}")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            rejections.append((line_no, f"{type(e).__name__}: {e}"))
            continue
        seen.add(case.case_id)
        cases.append(case)
    return BenchmarkLoad(cases, rejections)


# --- evaluation ------------------------------------------------------------

Predictor = Callable[[BenchmarkCase], "Mapping[str, float] | None"]


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    country: str
    jsd: float
    valid: bool


@dataclass
class MethodResult:
    method: str
    per_case: list[CaseScore]
    mean_jsd: float
    validity_rate: float
    per_country: dict[str, float]
    country_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mean_jsd": self.mean_jsd,
            "validity_rate": self.validity_rate,
            "n_cases": len(self.per_case),
            "aggregation": "macro over cases",
            "per_country": self.per_country,
            "country_counts": self.country_counts,
        }


def _score_case(case: BenchmarkCase, pred: Mapping[str, float] | None) -> CaseScore:
    if pred is None:
        return CaseScore(case.case_id, case.country, INVALID_JSD, False)
    try:
        value = jsd(pred, case.gold_distribution)
    except ValueError as e:
        logger.info("case %s: unusable prediction (%s)", case.case_id, e)
        return CaseScore(case.case_id, case.country, INVALID_JSD, False)
    return CaseScore(case.case_id, case.country, value, True)


def evaluate(
    predictor: Predictor,
    cases: Sequence[BenchmarkCase],
    method: str = "method",
    max_in_flight: int = 1,
) -> MethodResult:
    """Score every case by JSD; absent or invalid predictions count as JSD 1.0."""
    if not cases:
        raise BenchmarkError("no benchmark cases to evaluate")

    def run(case: BenchmarkCase) -> CaseScore:
        return _score_case(case, predictor(case))

    if max_in_flight > 1:
        with ThreadPoolExecutor(max_in_flight) as pool:
            scores = list(pool.map(run, cases))
    else:
        scores = [run(c) for c in cases]

    by_country: dict[str, list[float]] = defaultdict(list)
    for s in scores:
        by_country[s.country].append(s.jsd)
    return MethodResult(
        method=method,
        per_case=scores,
        mean_jsd=math.fsum(s.jsd for s in scores) / len(scores),
        validity_rate=sum(s.valid for s in scores) / len(scores),
        per_country={c: math.fsum(v) / len(v) for c, v in sorted(by_country.items())},
        country_counts={c: len(v) for c, v in sorted(by_country.items())},
    )


@dataclass(frozen=True)
class LMHCase:
    case_id: str
    country: str
    predicted: Mapping[str, LMHSignature] | None
    gold: Mapping[str, LMHSignature | None]


@dataclass
class LMHAccuracy:
    overall: float | None
    per_country: dict[str, float]
    skipped: list[tuple[str, str]]


def lmh_accuracy(cases: Sequence[LMHCase]) -> LMHAccuracy:
    """Per-case exact-match rate over options and dimensions, macro-averaged by country.

    A case with a missing prediction scores 0; a case without gold coverage is
    skipped and reported.
    """
    per_case: dict[str, list[float]] = defaultdict(list)
    skipped = []
    for c in cases:
        if not any(sig is not None for sig in c.gold.values()):
            skipped.append((c.case_id, "no gold signature coverage"))
            continue
        if c.predicted is None:
            per_case[c.country].append(0.0)
            continue
        try:
            per_case[c.country].append(r_lmh(c.predicted, c.gold))
        except ScoringError as e:
            skipped.append((c.case_id, str(e)))
    all_scores = [v for vs in per_case.values() for v in vs]
    return LMHAccuracy(
        overall=math.fsum(all_scores) / len(all_scores) if all_scores else None,
        per_country={k: math.fsum(v) / len(v) for k, v in sorted(per_case.items())},
        skipped=skipped,
    )


# --- baselines -------------------------------------------------------------


def uniform_predictor(case: BenchmarkCase) -> dict[str, float]:
    n = len(case.options)
    return {oid: 1.0 / n for oid, _ in case.options}


def baseline_verbalized(
    llm: LLMClient,
    case: BenchmarkCase,
    decoding: DecodingParams = DecodingParams(),
    retries: int = 2,
    tol: float = 0.01,
) -> dict[str, float] | None:
    prompt = render_verbalized_prompt(case.question, case.country)
    for attempt in range(retries + 1):
        seed = None if decoding.seed is None else decoding.seed + attempt
        text = llm.complete(prompt, decoding.with_seed(seed)).text
        out, report = check_completion(text, STAGE_B, case.options, tol)
        if report.valid:
            return normalize_distribution(stage_b_distribution(out, case.options))  # type: ignore[arg-type]
    return None


def _letters_for(case: BenchmarkCase) -> list[str]:
    if len(case.options) > len(LETTERS):
        raise MethodUnavailableError("more than 26 options cannot be lettered")
    return list(LETTERS[: len(case.options)])


def baseline_logprob(
    llm: LLMClient,
    case: BenchmarkCase,
    decoding: DecodingParams = DecodingParams(temperature=0.0, max_tokens=1),
) -> dict[str, float] | None:
    """Renormalized first-token probabilities of the option letters A, B, ..."""
    if not getattr(llm, "supports_logprobs", False):
        raise MethodUnavailableError("backend does not provide first-token logprobs")
    letters = _letters_for(case)
    prompt = render_single_choice_prompt(case.question, case.country, letters)
    completion = llm.complete(prompt, decoding, logprobs=True)
    if completion.first_token_logprobs is None:
        raise MethodUnavailableError("backend returned no logprobs")
    mass = {letter: 0.0 for letter in letters}
    for token, lp in completion.first_token_logprobs.items():
        t = token.strip()
        if t in mass:
            mass[t] += math.exp(lp)
    total = math.fsum(mass.values())
    if total <= 0:
        return None
    return {oid: mass[letter] / total for letter, (oid, _) in zip(letters, case.options)}


_CHOICE_RE = re.compile(r"^\W*([A-Z])\b")


def parse_choice(text: str, letters: Sequence[str]) -> str | None:
    m = _CHOICE_RE.match(text.strip())
    if m and m.group(1) in letters:
        return m.group(1)
    return None


@dataclass
class SamplingOutcome:
    distribution: dict[str, float] | None
    n_parsed: int
    n_dropped: int


def baseline_sampling(
    llm: LLMClient,
    case: BenchmarkCase,
    n: int = 10_000,
    decoding: DecodingParams = DecodingParams(temperature=1.0, max_tokens=4),
    base_seed: int = 0,
    max_in_flight: int = 1,
) -> SamplingOutcome:
    """Empirical distribution over ``n`` sampled single-choice answers."""
    if n < 1:
        raise ValueError("n must be >= 1")
    letters = _letters_for(case)
    prompt = render_single_choice_prompt(case.question, case.country, letters)

    def one(i: int) -> str | None:
        return parse_choice(llm.complete(prompt, decoding.with_seed(base_seed + i)).text, letters)

    if max_in_flight > 1:
        with ThreadPoolExecutor(max_in_flight) as pool:
            answers = list(pool.map(one, range(n)))
    else:
        answers = [one(i) for i in range(n)]
    parsed = [a for a in answers if a is not None]
    if not parsed:
        return SamplingOutcome(None, 0, n)
    counts = {letter: 0 for letter in letters}
    for a in parsed:
        counts[a] += 1
    dist = {oid: counts[letter] / len(parsed) for letter, (oid, _) in zip(letters, case.options)}
    return SamplingOutcome(dist, len(parsed), n - len(parsed))


# --- reports ---------------------------------------------------------------


def write_case_table(results: Sequence[MethodResult], path: str | Path, delimiter: str = "\t") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["method", "case_id", "country", "jsd", "valid"])
        for r in results:
            for s in r.per_case:
                w.writerow([r.method, s.case_id, s.country, f"{s.jsd:.6f}", int(s.valid)])


def methods_table(results: Sequence[MethodResult], backbone: str) -> str:
    """Markdown table with methods as rows and backbones as columns plus an Average column."""
    lines = [f"| Method | {backbone} | Average |", "|---|---|---|"]
    for r in results:
        lines.append(f"| {r.method} | {r.mean_jsd:.2f} | {r.mean_jsd:.2f} |")
    return "\n".join(lines)


def country_table(results: Sequence[MethodResult]) -> str:
    countries = sorted({c for r in results for c in r.per_country})
    lines = ["| Method | " + " | ".join(countries) + " |", "|---|" + "---|" * len(countries)]
    for r in results:
        cells = [f"{r.per_country[c]:.2f}" if c in r.per_country else "-" for c in countries]
        lines.append(f"| {r.method} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def k_sweep_table(sweep: Mapping[int, MethodResult]) -> str:
    lines = ["| K | mean JSD | validity |", "|---|---|---|"]
    for k in sorted(sweep):
        r = sweep[k]
        lines.append(f"| {k} | {r.mean_jsd:.4f} | {r.validity_rate:.3f} |")
    return "\n".join(lines)


def write_reports(
    results: Sequence[MethodResult],
    out_dir: str | Path,
    backbone: str = "model",
    extra: Mapping | None = None,
    k_sweep: Mapping[int, MethodResult] | None = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"backbone": backbone, "methods": [r.to_dict() for r in results]}
    if k_sweep:
        summary["k_sweep"] = {str(k): r.to_dict() for k, r in sorted(k_sweep.items())}
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_case_table(results, out / "cases.tsv")
    md = [
        "## Mean JSD by method (lower is better; macro over cases)",
        "",
        methods_table(results, backbone),
        "",
        "## Mean JSD by country",
        "",
        country_table(results),
        "",
    ]
    if k_sweep:
        md += ["## Retrieval depth sweep", "", k_sweep_table(k_sweep), ""]
    (out / "report.md").write_text("\n".join(md), encoding="utf-8")
    return out


def evida_predictor(bank, index, llm: LLMClient, config) -> Predictor:
    """Predictor running the two-stage pipeline for the case's country group."""
    from .inference import run_two_stage

    def predict(case: BenchmarkCase) -> dict[str, float] | None:
        group = bank.find_country(case.country)
        if group is None:
            logger.info("case %s: country %s not in bank", case.case_id, case.country)
            return None
        return run_two_stage(case.question, group, bank, index, llm, config).normalized_distribution

    return predict
