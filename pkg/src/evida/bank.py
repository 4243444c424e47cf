"""Evidence bank: respondent ingestion, per-group item evidence, persistence."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .values import (
    DEFAULT_THRESHOLDS,
    SUBINDEX_ORDER,
    LMHSignature,
    Thresholds,
    WelzelProfile,
    discretize_profile,
    mean_profile,
)

logger = logging.getLogger(__name__)

BANK_SCHEMA_VERSION = 1
TOOL_VERSION = "0.1.0"
CLAMP_TOL = 1e-9
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


class BankError(Exception):
    code = "bank-error"


class BankVersionError(BankError):
    code = "version-mismatch"


class BankChecksumError(BankError):
    code = "checksum-failure"


class BankFormatError(BankError):
    code = "malformed-file"


class IngestError(Exception):
    """Fatal ingestion failure (unreadable source, missing header columns)."""


@dataclass(frozen=True, order=True)
class GroupKey:
    country: str
    extra_attributes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.country:
            raise ValueError("group country must be nonempty")
        attrs = self.extra_attributes
        if isinstance(attrs, Mapping):
            attrs = attrs.items()
        object.__setattr__(
            self, "extra_attributes", tuple(sorted((str(k), str(v)) for k, v in attrs))
        )

    @classmethod
    def of(cls, country: str, **attrs: str) -> "GroupKey":
        return cls(country, tuple(attrs.items()))

    def label(self) -> str:
        if not self.extra_attributes:
            return self.country
        extra = ",".join(f"{k}={v}" for k, v in self.extra_attributes)
        return f"{self.country}[{extra}]"

    def to_dict(self) -> dict:
        return {"country": self.country, "extra_attributes": dict(self.extra_attributes)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroupKey":
        return cls(d["country"], tuple(dict(d.get("extra_attributes") or {}).items()))


@dataclass(frozen=True)
class SurveyItem:
    item_id: str
    question_text: str
    options: tuple[tuple[str, str], ...]
    instruction: str | None = None

    def __post_init__(self):
        opts = tuple((str(oid), str(text)) for oid, text in self.options)
        if len(opts) < 2:
            raise ValueError(f"item {self.item_id!r} needs at least 2 options")
        ids = [oid for oid, _ in opts]
        if len(set(ids)) != len(ids):
            raise ValueError(f"item {self.item_id!r} has duplicate option ids")
        object.__setattr__(self, "options", opts)

    @property
    def option_ids(self) -> tuple[str, ...]:
        return tuple(oid for oid, _ in self.options)

    def to_dict(self) -> dict:
        d = {
            "item_id": self.item_id,
            "question_text": self.question_text,
            "options": [{"id": oid, "text": text} for oid, text in self.options],
        }
        if self.instruction is not None:
            d["instruction"] = self.instruction
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SurveyItem":
        opts = d["options"]
        if isinstance(opts, Mapping):
            options = tuple((str(k), str(v)) for k, v in opts.items())
        else:
            options = tuple((str(o["id"]), str(o["text"])) for o in opts)
        return cls(
            item_id=str(d["item_id"]),
            question_text=str(d["question_text"]),
            options=options,
            instruction=d.get("instruction"),
        )


@dataclass(frozen=True)
class RespondentRecord:
    respondent_id: str
    group: GroupKey
    profile: WelzelProfile
    answers: Mapping[str, str]


@dataclass(frozen=True)
class OptionEvidence:
    count: int
    mean_profile: WelzelProfile | None = None
    signature: LMHSignature | None = None


@dataclass(frozen=True)
class ItemEvidence:
    item: SurveyItem
    support: int
    distribution: Mapping[str, float]
    option_evidence: Mapping[str, OptionEvidence]

    def signatures(self) -> dict[str, LMHSignature | None]:
        """Per-option gold signature, ``None`` where no respondent chose the option."""
        out = {}
        for oid in self.item.option_ids:
            ev = self.option_evidence.get(oid)
            out[oid] = ev.signature if ev is not None else None
        return out

    def to_dict(self) -> dict:
        return {
            "item": self.item.to_dict(),
            "support": self.support,
            "distribution": dict(self.distribution),
            "option_evidence": {
                oid: {
                    "count": ev.count,
                    "mean_profile": ev.mean_profile.to_list() if ev.mean_profile else None,
                    "signature": ev.signature.to_list() if ev.signature else None,
                }
                for oid, ev in self.option_evidence.items()
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ItemEvidence":
        option_evidence = {}
        for oid, ev in d["option_evidence"].items():
            option_evidence[oid] = OptionEvidence(
                count=int(ev["count"]),
                mean_profile=WelzelProfile(tuple(ev["mean_profile"])) if ev["mean_profile"] else None,
                signature=LMHSignature(tuple(ev["signature"])) if ev["signature"] else None,
            )
        return cls(
            item=SurveyItem.from_dict(d["item"]),
            support=int(d["support"]),
            distribution={k: float(v) for k, v in d["distribution"].items()},
            option_evidence=option_evidence,
        )


@dataclass(frozen=True)
class GroupEvidence:
    group_profile: LMHSignature
    n_respondents: int
    items: Mapping[str, ItemEvidence]


@dataclass
class EvidenceBank:
    thresholds: Thresholds = DEFAULT_THRESHOLDS
    groups: dict[GroupKey, GroupEvidence] = field(default_factory=dict)

    def group(self, g: GroupKey) -> GroupEvidence | None:
        return self.groups.get(g)

    def find_country(self, country: str) -> GroupKey | None:
        """Group key for a bare country (no extra attributes), matched case-insensitively."""
        for key in self.groups:
            if not key.extra_attributes and key.country.lower() == country.lower():
                return key
        return None

    def evidence(self, g: GroupKey, item_id: str) -> ItemEvidence | None:
        ge = self.groups.get(g)
        return ge.items.get(item_id) if ge else None

    def item_ids(self) -> list[str]:
        return sorted({iid for ge in self.groups.values() for iid in ge.items})


def support(bank: EvidenceBank, g: GroupKey, item_id: str) -> int:
    ev = bank.evidence(g, item_id)
    return ev.support if ev is not None else 0


# --- ingestion -------------------------------------------------------------


@dataclass(frozen=True)
class Rejection:
    line: int
    respondent_id: str | None
    reason: str


@dataclass
class IngestReport:
    records: list[RespondentRecord]
    rejections: list[Rejection]

    @property
    def n_rejected(self) -> int:
        return len(self.rejections)


def _is_missing_answer(raw: object) -> bool:
    if raw is None:
        return True
    s = str(raw).strip()
    if s.lower() in MISSING_TOKENS:
        return True
    # WVS codes don't-know / refused / not-asked as negative integers
    try:
        return int(s) < 0
    except ValueError:
        return False


def _parse_subindex(raw: object) -> float:
    if raw is None or str(raw).strip().lower() in MISSING_TOKENS:
        raise ValueError("missing")
    v = float(raw)
    if math.isnan(v):
        raise ValueError("missing")
    if -CLAMP_TOL <= v < 0.0:
        return 0.0
    if 1.0 < v <= 1.0 + CLAMP_TOL:
        return 1.0
    if not (0.0 <= v <= 1.0):
        raise ValueError(f"out of range: {v!r}")
    return v


def _rows_from_source(source, fmt: str, delimiter: str) -> Iterator[Mapping[str, object]]:
    if fmt == "jsonl":
        for line in source:
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                yield {"__error__": f"invalid JSON: {e.msg}"}
                continue
            if not isinstance(row, dict):
                yield {"__error__": "row is not an object"}
                continue
            yield row
    else:
        reader = csv.DictReader(source, delimiter=delimiter)
        if reader.fieldnames is None:
            raise IngestError("microdata has no header row")
        missing = [c for c in ("respondent_id", "country", *SUBINDEX_ORDER) if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"microdata header lacks columns: {', '.join(missing)}")
        yield from reader


def ingest_respondents(
    source: str | Path | io.TextIOBase | Iterable[str],
    items: Mapping[str, SurveyItem],
    attributes: Sequence[str] = (),
    *,
    fmt: str | None = None,
    delimiter: str = "\t",
) -> IngestReport:
    """Read respondent rows into records.

    ``source`` is a path or an open text stream. Rows with missing or invalid
    sub-index values, or answers that are not option ids of the item, are
    rejected and reported; ingestion continues past them.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if fmt is None:
            fmt = "jsonl" if path.suffix.lower() in {".jsonl", ".ndjson"} else "delimited"
        try:
            fh = open(path, newline="", encoding="utf-8")
        except OSError as e:
            raise IngestError(f"cannot read microdata {path}: {e}") from e
        with fh:
            return ingest_respondents(fh, items, attributes, fmt=fmt, delimiter=delimiter)
    fmt = fmt or "delimited"

    records: list[RespondentRecord] = []
    rejections: list[Rejection] = []
    seen_ids: set[str] = set()
    first_line = 1 if fmt == "jsonl" else 2
    for line_no, row in enumerate(_rows_from_source(source, fmt, delimiter), start=first_line):
        if "__error__" in row:
            rejections.append(Rejection(line_no, None, str(row["__error__"])))
            continue
        rid = row.get("respondent_id")
        rid = None if rid is None else str(rid).strip()
        if not rid:
            rejections.append(Rejection(line_no, None, "missing respondent_id"))
            continue
        if rid in seen_ids:
            rejections.append(Rejection(line_no, rid, "duplicate respondent_id"))
            continue
        country = str(row.get("country") or "").strip()
        if not country:
            rejections.append(Rejection(line_no, rid, "missing country"))
            continue
        attrs = []
        for a in attributes:
            val = row.get(a)
            if val is None or str(val).strip() == "":
                break
            attrs.append((a, str(val).strip()))
        if len(attrs) != len(attributes):
            rejections.append(Rejection(line_no, rid, f"missing group attribute {attributes[len(attrs)]}"))
            continue

        values = []
        bad = None
        for name in SUBINDEX_ORDER:
            try:
                values.append(_parse_subindex(row.get(name)))
            except (TypeError, ValueError) as e:
                bad = f"sub-index {name}: {e}"
                break
        if bad:
            rejections.append(Rejection(line_no, rid, bad))
            continue

        answers = {}
        for item_id, item in items.items():
            raw = row.get(item_id)
            if _is_missing_answer(raw):
                continue
            answer = str(raw).strip()
            if answer not in item.option_ids:
                bad = f"item {item_id}: {answer!r} is not an option id"
                break
            answers[item_id] = answer
        if bad:
            rejections.append(Rejection(line_no, rid, bad))
            continue

        seen_ids.add(rid)
        records.append(
            RespondentRecord(rid, GroupKey(country, tuple(attrs)), WelzelProfile(tuple(values)), answers)
        )
    return IngestReport(records, rejections)


def load_items(path: str | Path) -> dict[str, SurveyItem]:
    """Item catalogue: a JSON list of items, or JSON lines with one item per line."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        raw = json.loads(text)
    else:
        raw = [json.loads(line) for line in text.splitlines() if line.strip()]
    items = {}
    for d in raw:
        item = SurveyItem.from_dict(d)
        if item.item_id in items:
            raise ValueError(f"duplicate item_id {item.item_id!r}")
        items[item.item_id] = item
    return items


# --- construction ----------------------------------------------------------


def build_item_evidence(
    records: Iterable[RespondentRecord],
    g: GroupKey,
    item: SurveyItem,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> ItemEvidence:
    by_option: dict[str, list[WelzelProfile]] = {oid: [] for oid in item.option_ids}
    for rec in records:
        if rec.group != g:
            continue
        answer = rec.answers.get(item.item_id)
        if answer is None:
            continue
        by_option[answer].append(rec.profile)

    n = sum(len(v) for v in by_option.values())
    if n == 0:
        return ItemEvidence(item=item, support=0, distribution={}, option_evidence={})

    distribution = {oid: len(by_option[oid]) / n for oid in item.option_ids}
    option_evidence = {}
    for oid in item.option_ids:
        profiles = by_option[oid]
        if profiles:
            mu = mean_profile(profiles)
            option_evidence[oid] = OptionEvidence(len(profiles), mu, discretize_profile(mu, thresholds))
        else:
            option_evidence[oid] = OptionEvidence(0)
    return ItemEvidence(item, n, distribution, option_evidence)


def build_bank(
    records: Sequence[RespondentRecord],
    items: Mapping[str, SurveyItem],
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> EvidenceBank:
    bank = EvidenceBank(thresholds=thresholds)
    if not records:
        logger.warning("no respondents: evidence bank is empty")
        return bank

    by_group: dict[GroupKey, list[RespondentRecord]] = defaultdict(list)
    for rec in records:
        by_group[rec.group].append(rec)

    for g in sorted(by_group):
        members = by_group[g]
        group_sig = discretize_profile(mean_profile([r.profile for r in members]), thresholds)
        entries = {}
        for item_id in sorted(items):
            ev = build_item_evidence(members, g, items[item_id], thresholds)
            if ev.support > 0:
                entries[item_id] = ev
        bank.groups[g] = GroupEvidence(group_sig, len(members), entries)
    return bank


# --- persistence -----------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _group_lines(g: GroupKey, ge: GroupEvidence) -> list[str]:
    lines = [
        _dumps(
            {
                "kind": "group",
                "group": g.to_dict(),
                "group_profile": ge.group_profile.to_list(),
                "n_respondents": ge.n_respondents,
            }
        )
    ]
    for item_id in sorted(ge.items):
        lines.append(_dumps({"kind": "item", **ge.items[item_id].to_dict()}))
    return lines


def save_bank(bank: EvidenceBank, path: str | Path) -> Path:
    """Write ``manifest.json`` plus one JSON-lines file per group into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    groups_meta = []
    for idx, g in enumerate(sorted(bank.groups)):
        fname = f"group-{idx:04d}.jsonl"
        payload = ("\n".join(_group_lines(g, bank.groups[g])) + "\n").encode("utf-8")
        (out / fname).write_bytes(payload)
        groups_meta.append(
            {
                "group": g.to_dict(),
                "file": fname,
                "sha256": hashlib.sha256(payload).hexdigest(),
                "n_items": len(bank.groups[g].items),
            }
        )
    manifest = {
        "schema_version": BANK_SCHEMA_VERSION,
        "tool_version": TOOL_VERSION,
        "thresholds": bank.thresholds.to_dict(),
        "item_count": len(bank.item_ids()),
        "groups": groups_meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return out


def load_bank(path: str | Path) -> EvidenceBank:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise BankFormatError(f"no manifest.json in {root}") from e
    except json.JSONDecodeError as e:
        raise BankFormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("schema_version") != BANK_SCHEMA_VERSION:
        raise BankVersionError(
            f"bank schema version {manifest.get('schema_version')!r}, expected {BANK_SCHEMA_VERSION}"
        )
    try:
        thresholds = Thresholds(**manifest["thresholds"])
        groups_meta = manifest["groups"]
    except (KeyError, TypeError, ValueError) as e:
        raise BankFormatError(f"malformed manifest: {e}") from e

    bank = EvidenceBank(thresholds=thresholds)
    for meta in groups_meta:
        fpath = root / meta["file"]
        try:
            payload = fpath.read_bytes()
        except OSError as e:
            raise BankFormatError(f"cannot read {fpath}: {e}") from e
        if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
            raise BankChecksumError(f"checksum mismatch for {meta['file']}")
        try:
            rows = [json.loads(line) for line in payload.decode("utf-8").splitlines() if line]
            head, body = rows[0], rows[1:]
            g = GroupKey.from_dict(head["group"])
            items = {}
            for row in body:
                ev = ItemEvidence.from_dict(row)
                items[ev.item.item_id] = ev
            bank.groups[g] = GroupEvidence(
                LMHSignature(tuple(head["group_profile"])), int(head["n_respondents"]), items
            )
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise BankFormatError(f"malformed group file {meta['file']}: {e}") from e
    return bank
