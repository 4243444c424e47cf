"""Two-stage structured inference: parse, validate, normalize, orchestrate."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .bank import EvidenceBank, GroupKey, SurveyItem
from .llm import DecodingParams, LLMClient
from .prompts import render_stage_a_prompt, render_stage_b_prompt
from .retrieval import (
    DEFAULT_K,
    DEFAULT_N_MIN,
    EvidenceIndex,
    RetrievalQuery,
    RetrievedEvidence,
    UnknownGroupError,
)
from .values import LMH_LABELS, SUBINDEX_ORDER, LMHSignature

logger = logging.getLogger(__name__)

STAGE_A = "A"
STAGE_B = "B"
DEFAULT_TOL = 0.01
DEFAULT_RETRIES = 2

ABLATIONS = ("none", "no-evidence", "no-welzel")


class ParseError(ValueError):
    """A completion could not be decoded into the stage schema.

    ``kind`` is one of ``no_json``, ``malformed_json``, ``wrong_keys``, ``bad_shape``.
    """

    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail


class DegenerateDistributionError(ValueError):
    pass


@dataclass(frozen=True)
class StageAOutput:
    subindex_order: list
    option_profiles: list[tuple[str, list]]
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "subindex_order": list(self.subindex_order),
            "option_profiles": [{"option": o, "subindex_LMH": list(s)} for o, s in self.option_profiles],
            "notes": self.notes,
        }


@dataclass(frozen=True)
class StageBOutput:
    predicted_distribution: dict[str, object]
    rationale: str = ""

    def to_dict(self) -> dict:
        return {"predicted_distribution": dict(self.predicted_distribution), "rationale": self.rationale}


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...]

    @property
    def valid(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
        }

    @classmethod
    def from_parse_error(cls, err: ParseError) -> "ValidationReport":
        return cls((Check(f"parse_{err.kind}", False, err.detail),))


# --- JSON extraction and decoding -----------------------------------------

_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*\n?(.*?)```", re.DOTALL)


def extract_json_object(text: str) -> str:
    """Return the first balanced top-level ``{...}`` in ``text``, looking inside code fences first."""
    fenced = _FENCE_RE.findall(text)
    for candidate in [*fenced, text]:
        start = candidate.find("{")
        while start >= 0:
            depth, in_str, esc = 0, False, False
            for i in range(start, len(candidate)):
                ch = candidate[i]
                if in_str:
                    if esc:
                        esc = False
                    elif ch == "\\":
                        esc = True
                    elif ch == '"':
                        in_str = False
                elif ch == '"':
                    in_str = True
                elif ch == "{":
                    depth += 1
                elif ch == "}":
                    depth -= 1
                    if depth == 0:
                        return candidate[start:i + 1]
            # unbalanced from this brace; nothing later can close it either
            break
    if "{" not in text:
        raise ParseError("no_json", "no JSON object in completion")
    raise ParseError("malformed_json", "unbalanced braces")


def _load(text: str) -> dict:
    blob = extract_json_object(text)
    try:
        obj = json.loads(blob)
    except json.JSONDecodeError as e:
        raise ParseError("malformed_json", f"{e.msg} at char {e.pos}") from e
    if not isinstance(obj, dict):
        raise ParseError("bad_shape", "top level is not an object")
    return obj


def parse_stage_a(text: str) -> StageAOutput:
    obj = _load(text)
    missing = [k for k in ("subindex_order", "option_profiles") if k not in obj]
    if missing:
        raise ParseError("wrong_keys", f"missing keys: {', '.join(missing)}")
    order, profiles = obj["subindex_order"], obj["option_profiles"]
    if not isinstance(order, list) or not isinstance(profiles, list):
        raise ParseError("bad_shape", "subindex_order and option_profiles must be lists")
    decoded = []
    for p in profiles:
        if not isinstance(p, dict) or "option" not in p or "subindex_LMH" not in p:
            raise ParseError("bad_shape", "each option profile needs 'option' and 'subindex_LMH'")
        labels = p["subindex_LMH"]
        if not isinstance(labels, list):
            raise ParseError("bad_shape", f"subindex_LMH for {p['option']!r} is not a list")
        decoded.append((str(p["option"]), list(labels)))
    notes = obj.get("notes", "")
    return StageAOutput(list(order), decoded, notes if isinstance(notes, str) else json.dumps(notes))


def parse_stage_b(text: str) -> StageBOutput:
    obj = _load(text)
    if "predicted_distribution" not in obj:
        raise ParseError("wrong_keys", "missing key: predicted_distribution")
    dist = obj["predicted_distribution"]
    if not isinstance(dist, dict):
        raise ParseError("bad_shape", "predicted_distribution is not an object")
    rationale = obj.get("rationale", "")
    return StageBOutput(dict(dist), rationale if isinstance(rationale, str) else json.dumps(rationale))


def parse_structured(text: str, stage: str) -> StageAOutput | StageBOutput:
    if stage == STAGE_A:
        return parse_stage_a(text)
    if stage == STAGE_B:
        return parse_stage_b(text)
    raise ValueError(f"unknown stage {stage!r}")


# --- validation ------------------------------------------------------------


def canonicalize_options(
    keys: Iterable[str], options: Sequence[tuple[str, str]]
) -> tuple[dict[str, str], list[str]]:
    """Map model-emitted option keys (ids or full texts) to option ids.

    Returns the mapping and a list of problems (unknown, ambiguous or
    duplicate keys); the mapping only holds keys that resolved cleanly.
    """
    ids = {oid for oid, _ in options}
    by_text: dict[str, list[str]] = {}
    for oid, text in options:
        by_text.setdefault(text, []).append(oid)
    mapping: dict[str, str] = {}
    problems = []
    claimed: dict[str, str] = {}
    for key in keys:
        targets = set()
        if key in ids:
            targets.add(key)
        targets.update(by_text.get(key, []))
        if not targets:
            problems.append(f"unknown option {key!r}")
            continue
        if len(targets) > 1:
            problems.append(f"ambiguous option {key!r}")
            continue
        oid = targets.pop()
        if oid in claimed:
            problems.append(f"option {oid!r} given twice ({claimed[oid]!r}, {key!r})")
            continue
        claimed[oid] = key
        mapping[key] = oid
    return mapping, problems


def validate_stage_a(out: StageAOutput, options: Sequence[tuple[str, str]]) -> ValidationReport:
    checks = [
        Check(
            "subindex_order",
            list(out.subindex_order) == list(SUBINDEX_ORDER),
            "" if list(out.subindex_order) == list(SUBINDEX_ORDER) else f"got {out.subindex_order!r}",
        )
    ]
    mapping, problems = canonicalize_options([o for o, _ in out.option_profiles], options)
    checks.append(Check("option_keys", not problems, "; ".join(problems)))
    covered = set(mapping.values())
    missing = [oid for oid, _ in options if oid not in covered]
    coverage_ok = not missing and len(out.option_profiles) == len(options)
    checks.append(
        Check("option_coverage", coverage_ok, f"missing profiles for {missing}" if missing else "")
    )
    bad_len = [o for o, labels in out.option_profiles if len(labels) != len(SUBINDEX_ORDER)]
    checks.append(
        Check("lmh_length", not bad_len, f"wrong vector length for {bad_len}" if bad_len else "")
    )
    bad_labels = sorted(
        {repr(x) for _, labels in out.option_profiles for x in labels if not (isinstance(x, str) and x in LMH_LABELS)}
    )
    checks.append(
        Check("lmh_labels", not bad_labels, f"labels outside low/medium/high: {', '.join(bad_labels)}" if bad_labels else "")
    )
    return ValidationReport(tuple(checks))


def stage_a_signatures(out: StageAOutput, options: Sequence[tuple[str, str]]) -> dict[str, LMHSignature]:
    """Signatures keyed by option id; only meaningful for outputs that validated."""
    mapping, _ = canonicalize_options([o for o, _ in out.option_profiles], options)
    sigs = {mapping[o]: LMHSignature(tuple(labels)) for o, labels in out.option_profiles if o in mapping}
    return {oid: sigs[oid] for oid, _ in options if oid in sigs}


def _is_number(v: object) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate_stage_b(
    out: StageBOutput, options: Sequence[tuple[str, str]], tol: float = DEFAULT_TOL
) -> ValidationReport:
    dist = out.predicted_distribution
    mapping, problems = canonicalize_options(list(dist), options)
    checks = [Check("option_keys", not problems, "; ".join(problems))]
    covered = set(mapping.values())
    missing = [oid for oid, _ in options if oid not in covered]
    checks.append(
        Check("option_coverage", not missing and not problems, f"missing options {missing}" if missing else "")
    )
    non_numeric = [k for k, v in dist.items() if not _is_number(v)]
    checks.append(Check("numeric", not non_numeric, f"non-numeric values for {non_numeric}" if non_numeric else ""))
    negative = [k for k, v in dist.items() if _is_number(v) and v < 0]
    checks.append(Check("non_negative", not negative, f"negative values for {negative}" if negative else ""))
    total = math.fsum(v for v in dist.values() if _is_number(v))
    checks.append(
        Check("normalized", abs(total - 1.0) <= tol, f"sum={total:.6g}, tol={tol}")
    )
    return ValidationReport(tuple(checks))


def stage_b_distribution(out: StageBOutput, options: Sequence[tuple[str, str]]) -> dict[str, float]:
    mapping, _ = canonicalize_options(list(out.predicted_distribution), options)
    by_id = {mapping[k]: float(v) for k, v in out.predicted_distribution.items() if k in mapping}
    return {oid: by_id.get(oid, 0.0) for oid, _ in options}


def normalize_distribution(d: Mapping[str, float]) -> dict[str, float]:
    if any(v < 0 for v in d.values()):
        raise DegenerateDistributionError("negative probability")
    total = math.fsum(d.values())
    if total <= 0:
        raise DegenerateDistributionError("distribution has zero mass")
    return {k: v / total for k, v in d.items()}


def check_completion(
    text: str, stage: str, options: Sequence[tuple[str, str]], tol: float = DEFAULT_TOL
) -> tuple[StageAOutput | StageBOutput | None, ValidationReport]:
    """Parse then validate one raw completion; parse failures become a failed report."""
    try:
        out = parse_structured(text, stage)
    except ParseError as e:
        return None, ValidationReport.from_parse_error(e)
    if stage == STAGE_A:
        return out, validate_stage_a(out, options)  # type: ignore[arg-type]
    return out, validate_stage_b(out, options, tol)  # type: ignore[arg-type]


# --- orchestration ---------------------------------------------------------


@dataclass(frozen=True)
class InferenceConfig:
    k: int = DEFAULT_K
    n_min: int = DEFAULT_N_MIN
    tol: float = DEFAULT_TOL
    retries: int = DEFAULT_RETRIES
    decoding: DecodingParams = field(default_factory=DecodingParams)
    ablation: str = "none"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


@dataclass
class StageRun:
    prompt: str
    raw_text: str
    attempts: int
    output: StageAOutput | StageBOutput | None
    report: ValidationReport

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "raw_text": self.raw_text,
            "attempts": self.attempts,
            "output": self.output.to_dict() if self.output is not None else None,
            "report": self.report.to_dict(),
        }


@dataclass
class PredictionResult:
    question: SurveyItem
    group: GroupKey
    ablation: str
    stage_a: StageRun | None
    stage_b: StageRun | None
    signatures: dict[str, LMHSignature] | None
    normalized_distribution: dict[str, float] | None
    retrieval: RetrievedEvidence

    @property
    def stage_a_report(self) -> ValidationReport:
        if self.stage_a is None:
            return ValidationReport((Check("stage_a_run", False, "stage A not run"),))
        return self.stage_a.report

    @property
    def stage_b_report(self) -> ValidationReport:
        if self.stage_b is None:
            return ValidationReport((Check("stage_b_run", False, "stage B not run"),))
        return self.stage_b.report

    @property
    def valid(self) -> bool:
        return self.normalized_distribution is not None

    def to_dict(self) -> dict:
        return {
            "question": self.question.to_dict(),
            "group": self.group.to_dict(),
            "ablation": self.ablation,
            "stage_a": self.stage_a.to_dict() if self.stage_a else None,
            "stage_b": self.stage_b.to_dict() if self.stage_b else None,
            "signatures": {k: v.to_list() for k, v in self.signatures.items()} if self.signatures else None,
            "normalized_distribution": self.normalized_distribution,
            "retrieval_trace": self.retrieval.summary(),
        }


def _run_stage(
    llm: LLMClient,
    prompt: str,
    stage: str,
    options: Sequence[tuple[str, str]],
    config: InferenceConfig,
) -> StageRun:
    decoding = config.decoding
    text, out, report = "", None, None
    attempts = 0
    for attempt in range(config.retries + 1):
        attempts += 1
        seed = None if decoding.seed is None else decoding.seed + attempt
        text = llm.complete(prompt, decoding.with_seed(seed)).text
        out, report = check_completion(text, stage, options, config.tol)
        if report.valid:
            break
        logger.info("stage %s output invalid (attempt %d): %s", stage, attempts, report.failures())
    return StageRun(prompt, text, attempts, out, report)  # type: ignore[arg-type]


def run_two_stage(
    question: SurveyItem,
    group: GroupKey,
    bank: EvidenceBank,
    retriever: EvidenceIndex,
    llm: LLMClient,
    config: InferenceConfig = InferenceConfig(),
    *,
    evidence: RetrievedEvidence | None = None,
    exclude_item_ids: Iterable[str] = (),
) -> PredictionResult:
    """Retrieve evidence, profile options (stage A), then predict the distribution (stage B).

    Passing ``evidence`` skips retrieval (episodes carry their own). Invalid
    stage output is retried ``config.retries`` times with the same prompt;
    a stage A that never validates leaves stage B unrun.
    """
    ge = bank.group(group)
    if ge is None:
        raise UnknownGroupError(group.label())
    options = question.options

    if config.ablation == "no-evidence":
        evidence = RetrievedEvidence()
        group_profile = None
    else:
        group_profile = ge.group_profile
        if evidence is None:
            query = RetrievalQuery(
                question.question_text,
                group,
                instruction=question.instruction,
                k=config.k,
                n_min=config.n_min,
                exclude_item_ids=frozenset(exclude_item_ids),
            )
            evidence = retriever.retrieve(query)

    stage_a = None
    signatures = None
    if config.ablation != "no-welzel":
        prompt_a = render_stage_a_prompt(question, group_profile, evidence)
        stage_a = _run_stage(llm, prompt_a, STAGE_A, options, config)
        if not stage_a.report.valid:
            return PredictionResult(question, group, config.ablation, stage_a, None, None, None, evidence)
        signatures = stage_a_signatures(stage_a.output, options)  # type: ignore[arg-type]

    prompt_b = render_stage_b_prompt(question, signatures, group_profile, evidence)
    stage_b = _run_stage(llm, prompt_b, STAGE_B, options, config)
    normalized = None
    if stage_b.report.valid:
        normalized = normalize_distribution(stage_b_distribution(stage_b.output, options))  # type: ignore[arg-type]
    return PredictionResult(question, group, config.ablation, stage_a, stage_b, signatures, normalized, evidence)
