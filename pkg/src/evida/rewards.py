"""Survey-derived GRPO rewards, episode construction and group-relative advantages.

Nothing here updates model weights; scored rollouts and advantages are
exported as JSON lines for an external trainer.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .bank import EvidenceBank, GroupKey, SurveyItem, support
from .inference import InferenceConfig, PredictionResult, ValidationReport, run_two_stage
from .llm import LLMClient
from .retrieval import DEFAULT_K, DEFAULT_N_MIN, EvidenceIndex, RetrievalQuery, RetrievedEvidence
from .values import N_DIMS, LMHSignature, Thresholds

NORMALIZATION_TOL = 1e-9
STD_FLOOR = 1e-12
DEFAULT_GROUP_SIZE = 16

# optimizer settings for the external trainer; recorded, never used here
GRPO_PASSTHROUGH = {
    "clip_epsilon": 0.2,
    "epochs": 1,
    "kl_beta": 0.04,
    "learning_rate": 1e-6,
    "batch_size": 32,
}


class ScoringError(ValueError):
    pass


class InsufficientSupportError(ValueError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    lmh: float = 0.25
    dist: float = 0.45
    sch_a: float = 0.15
    sch_b: float = 0.15

    def __post_init__(self):
        ws = self.as_tuple()
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError("reward weights must be >= 0 with at least one > 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lmh, self.dist, self.sch_a, self.sch_b)

    def to_dict(self) -> dict:
        return {"lambda1": self.lmh, "lambda2": self.dist, "lambda3": self.sch_a, "lambda4": self.sch_b}


DEFAULT_WEIGHTS = RewardWeights()


# --- reward components -----------------------------------------------------


def r_lmh(
    pred: Mapping[str, LMHSignature],
    gold: Mapping[str, LMHSignature | None],
) -> float:
    """Per-dimension exact-match rate over options that have a gold signature."""
    if set(pred) != set(gold):
        raise ScoringError(f"option keys differ: pred={sorted(pred)} gold={sorted(gold)}")
    scored = [o for o in gold if gold[o] is not None]
    if not scored:
        raise ScoringError("no option carries a gold signature")
    hits = 0
    for o in scored:
        hits += sum(1 for a, b in zip(pred[o].labels, gold[o].labels) if a == b)  # type: ignore[union-attr]
    return hits / (len(scored) * N_DIMS)


def _check_distribution(p: Mapping[str, float], name: str) -> None:
    if any(v < 0 or not math.isfinite(v) for v in p.values()):
        raise ValueError(f"{name} has negative or non-finite mass")
    total = math.fsum(p.values())
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"{name} is not normalized (sum={total!r})")


def jsd(p: Mapping[str, float], q: Mapping[str, float]) -> float:
    """Base-2 Jensen-Shannon divergence over the union of keys (absent keys are 0)."""
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    total = 0.0
    for key in sorted(set(p) | set(q)):
        a = p.get(key, 0.0)
        b = q.get(key, 0.0)
        m = 0.5 * (a + b)
        if a > 0:
            total += 0.5 * a * math.log2(a / m)
        if b > 0:
            total += 0.5 * b * math.log2(b / m)
    return min(1.0, max(0.0, total))


def r_dist(pred: Mapping[str, float] | None, gold: Mapping[str, float]) -> float:
    if pred is None:
        return 0.0
    return 1.0 - jsd(pred, gold)


def r_schema(report: ValidationReport | None) -> int:
    return 1 if report is not None and report.valid else 0


def combine(w: RewardWeights, r_lmh_: float, r_dist_: float, r_sch_a: float, r_sch_b: float) -> float:
    return w.lmh * r_lmh_ + w.dist * r_dist_ + w.sch_a * r_sch_a + w.sch_b * r_sch_b


@dataclass(frozen=True)
class RewardBreakdown:
    r_lmh: float
    r_dist: float
    r_sch_a: int
    r_sch_b: int
    total: float
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "r_lmh": self.r_lmh,
            "r_dist": self.r_dist,
            "r_sch_a": self.r_sch_a,
            "r_sch_b": self.r_sch_b,
            "total": self.total,
            "notes": list(self.notes),
        }


def breakdown(w: RewardWeights, r_lmh_: float, r_dist_: float, r_sch_a: int, r_sch_b: int, notes=()) -> RewardBreakdown:
    return RewardBreakdown(r_lmh_, r_dist_, r_sch_a, r_sch_b, combine(w, r_lmh_, r_dist_, r_sch_a, r_sch_b), tuple(notes))


# --- episodes --------------------------------------------------------------


@dataclass(frozen=True)
class Episode:
    target_item: SurveyItem
    group: GroupKey
    evidence: RetrievedEvidence
    gold_distribution: Mapping[str, float]
    gold_signatures: Mapping[str, LMHSignature | None]

    @property
    def episode_id(self) -> str:
        return f"{self.group.label()}::{self.target_item.item_id}"

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "target_item_id": self.target_item.item_id,
            "group": self.group.to_dict(),
            "evidence_item_ids": self.evidence.item_ids,
            "gold_distribution": dict(self.gold_distribution),
            "gold_signatures": {k: (v.to_list() if v else None) for k, v in self.gold_signatures.items()},
        }


def build_episode(
    bank: EvidenceBank,
    group: GroupKey,
    item_id: str,
    index: EvidenceIndex,
    k: int = DEFAULT_K,
    n_min: int = DEFAULT_N_MIN,
) -> Episode:
    """Hold out ``item_id`` as the pseudo-unseen question and gather its gold targets."""
    ev = bank.evidence(group, item_id)
    n = support(bank, group, item_id)
    if ev is None or n < n_min:
        raise InsufficientSupportError(f"{group.label()}/{item_id}: support {n} < n_min {n_min}")
    item = ev.item
    query = RetrievalQuery(
        item.question_text, group, instruction=item.instruction, k=k, n_min=n_min,
        exclude_item_ids=frozenset({item_id}),
    )
    evidence = index.retrieve(query)
    return Episode(
        target_item=item,
        group=group,
        evidence=evidence,
        gold_distribution={oid: ev.distribution[oid] for oid in item.option_ids},
        gold_signatures=ev.signatures(),
    )


@dataclass
class EpisodePlan:
    episodes: list[Episode]
    skipped: list[tuple[str, str]]
    seed: int


def sample_episodes(
    bank: EvidenceBank,
    groups: Sequence[GroupKey],
    count: int,
    index: EvidenceIndex,
    seed: int = 0,
    k: int = DEFAULT_K,
    n_min: int = DEFAULT_N_MIN,
) -> EpisodePlan:
    """Draw up to ``count`` episodes via a seeded shuffle of (group, item) pairs."""
    pairs = [(g, iid) for g in sorted(groups) for iid in sorted(bank.groups[g].items)]
    random.Random(seed).shuffle(pairs)
    episodes, skipped = [], []
    for g, iid in pairs:
        if len(episodes) >= count:
            break
        try:
            episodes.append(build_episode(bank, g, iid, index, k, n_min))
        except InsufficientSupportError as e:
            skipped.append((f"{g.label()}::{iid}", str(e)))
    return EpisodePlan(episodes, skipped, seed)


# --- scoring ---------------------------------------------------------------


@dataclass(frozen=True)
class ScoredRollout:
    episode: Episode
    rollout: PredictionResult
    breakdown: RewardBreakdown


def score_rollout(episode: Episode, rollout: PredictionResult, w: RewardWeights = DEFAULT_WEIGHTS) -> RewardBreakdown:
    notes = []
    sch_a = r_schema(rollout.stage_a_report)
    sch_b = r_schema(rollout.stage_b_report)

    lmh = 0.0
    if sch_a and rollout.signatures is not None:
        try:
            lmh = r_lmh(rollout.signatures, episode.gold_signatures)
        except ScoringError as e:
            notes.append(f"r_lmh: {e}")
    else:
        notes.append("r_lmh: stage A invalid")

    dist = 0.0
    if rollout.normalized_distribution is not None:
        dist = r_dist(rollout.normalized_distribution, episode.gold_distribution)
    else:
        notes.append("r_dist: stage B invalid")
    return breakdown(w, lmh, dist, sch_a, sch_b, notes)


def rollout_seed(episode: Episode, base_seed: int, i: int) -> int:
    h = hashlib.sha256(f"{base_seed}:{episode.episode_id}".encode("utf-8")).digest()
    return int.from_bytes(h[:4], "big") + i


def collect_rollouts(
    episode: Episode,
    bank: EvidenceBank,
    index: EvidenceIndex,
    llm: LLMClient,
    config: InferenceConfig,
    group_size: int = DEFAULT_GROUP_SIZE,
    base_seed: int = 0,
    max_in_flight: int = 1,
) -> list[PredictionResult]:
    """Sample ``group_size`` two-stage rollouts for one episode, one decoding seed each.

    Retries are disabled: each rollout is a single policy sample.
    """

    def one(i: int) -> PredictionResult:
        cfg = dataclasses.replace(
            config, retries=0, decoding=config.decoding.with_seed(rollout_seed(episode, base_seed, i))
        )
        return run_two_stage(
            episode.target_item, episode.group, bank, index, llm, cfg, evidence=episode.evidence
        )

    if max_in_flight > 1:
        with ThreadPoolExecutor(max_in_flight) as pool:
            return list(pool.map(one, range(group_size)))
    return [one(i) for i in range(group_size)]


@dataclass(frozen=True)
class GroupAdvantages:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]


def group_advantages(rewards: Sequence[float]) -> GroupAdvantages:
    """Standardize rewards within a group (population std); constant groups get zeros."""
    g = len(rewards)
    if g < 2:
        raise ValueError("group size must be >= 2")
    mean = math.fsum(rewards) / g
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in rewards) / g)
    if std < STD_FLOOR:
        adv = tuple(0.0 for _ in rewards)
    else:
        adv = tuple((r - mean) / std for r in rewards)
    return GroupAdvantages(tuple(float(r) for r in rewards), adv)


# --- export ----------------------------------------------------------------


@dataclass
class BatchHeader:
    weights: RewardWeights = DEFAULT_WEIGHTS
    group_size: int = DEFAULT_GROUP_SIZE
    thresholds: Thresholds = field(default_factory=Thresholds)
    seed: int = 0
    optimizer: dict = field(default_factory=lambda: dict(GRPO_PASSTHROUGH))
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "header",
            "weights": self.weights.to_dict(),
            "group_size": self.group_size,
            "thresholds": self.thresholds.to_dict(),
            "seed": self.seed,
            "optimizer": dict(self.optimizer),
            **self.extra,
        }


class IncompleteGroupError(ValueError):
    pass


def export_training_batch(
    groups: Sequence[Sequence[ScoredRollout]],
    advantages: Sequence[GroupAdvantages],
    path: str | Path,
    header: BatchHeader = BatchHeader(),
) -> Path:
    if len(groups) != len(advantages):
        raise ValueError("one GroupAdvantages per rollout group is required")
    for i, (grp, adv) in enumerate(zip(groups, advantages)):
        if len(grp) != header.group_size or len(adv.advantages) != header.group_size:
            raise IncompleteGroupError(f"group {i} has {len(grp)} rollouts, expected {header.group_size}")
        if len({r.episode.episode_id for r in grp}) != 1:
            raise IncompleteGroupError(f"group {i} mixes episodes")

    lines = [json.dumps(header.to_dict(), ensure_ascii=False)]
    for gi, (grp, adv) in enumerate(zip(groups, advantages)):
        for ri, (sr, a) in enumerate(zip(grp, adv.advantages)):
            ro = sr.rollout
            record = {
                "kind": "rollout",
                "group_index": gi,
                "rollout_index": ri,
                "episode": sr.episode.to_dict(),
                "prompt_a": ro.stage_a.prompt if ro.stage_a else None,
                "completion_a": ro.stage_a.raw_text if ro.stage_a else None,
                "prompt_b": ro.stage_b.prompt if ro.stage_b else None,
                "completion_b": ro.stage_b.raw_text if ro.stage_b else None,
                "report_a": ro.stage_a_report.to_dict(),
                "report_b": ro.stage_b_report.to_dict(),
                "reward": sr.breakdown.to_dict(),
                "advantage": a,
            }
            lines.append(json.dumps(record, ensure_ascii=False))
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_training_batch(path: str | Path) -> tuple[dict, list[dict]]:
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    if not rows or rows[0].get("kind") != "header":
        raise ValueError("training batch lacks a header record")
    return rows[0], rows[1:]
