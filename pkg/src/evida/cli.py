"""``evida`` command-line entry point.

Exit codes: 0 success, 2 input error, 3 domain error, 4 transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .bank import (
    BankError,
    EvidenceBank,
    GroupKey,
    IngestError,
    SurveyItem,
    build_bank,
    ingest_respondents,
    load_bank,
    load_items,
    save_bank,
)
from .config import ConfigError, PipelineConfig, load_config
from .evaluation import (
    BenchmarkError,
    LMHCase,
    MethodResult,
    baseline_logprob,
    baseline_sampling,
    baseline_verbalized,
    evaluate,
    evida_predictor,
    lmh_accuracy,
    load_benchmark,
    uniform_predictor,
    write_reports,
)
from .inference import (
    STAGE_A,
    STAGE_B,
    DegenerateDistributionError,
    InferenceConfig,
    check_completion,
    normalize_distribution,
    run_two_stage,
    stage_a_signatures,
    stage_b_distribution,
)
from .llm import ChatCompletionsClient, HeuristicMockLLM, LLMClient, MethodUnavailableError, ScriptedLLM
from .retrieval import (
    CachedEncoder,
    EvidenceIndex,
    HashingEncoder,
    HTTPEncoder,
    RetrievalQuery,
    TransportError,
    UnknownGroupError,
)
from .rewards import (
    BatchHeader,
    InsufficientSupportError,
    ScoredRollout,
    breakdown,
    collect_rollouts,
    export_training_batch,
    group_advantages,
    r_dist,
    r_lmh,
    sample_episodes,
    score_rollout,
    ScoringError,
)
from .values import ValueDomainError

logger = logging.getLogger("evida")

EXIT_OK, EXIT_INPUT, EXIT_DOMAIN, EXIT_TRANSPORT = 0, 2, 3, 4
METHODS = ("evida", "verbalized", "logprob", "sampling", "uniform")


class InputError(ValueError):
    pass


# --- wiring ----------------------------------------------------------------


def _config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        name: getattr(args, name, None)
        for name in (
            "bank", "k", "n_min", "tau1", "tau2", "tol", "retries", "seed", "group_size",
            "max_in_flight", "llm_base_url", "llm_model", "temperature", "llm_seed",
            "encoder_url", "cache_dir", "delimiter",
        )
    }
    if getattr(args, "ablation", None):
        overrides["ablation"] = args.ablation
    return load_config(args.config, overrides)


def _encoder(cfg: PipelineConfig, mock: bool):
    if mock or not cfg.encoder_url:
        enc = HashingEncoder(cfg.encoder_dim, cfg.encoder_seed)
        if not mock:
            logger.warning("no encoder_url configured; using the offline hashing encoder")
    else:
        enc = HTTPEncoder(cfg.encoder_url, cfg.encoder_model)
    if cfg.cache_dir:
        return CachedEncoder(enc, cfg.cache_dir)
    return enc


def _llm(cfg: PipelineConfig, mock: str | None) -> LLMClient:
    if mock is not None:
        return ScriptedLLM.from_file(mock) if mock else HeuristicMockLLM()
    if not cfg.llm_base_url or not cfg.llm_model:
        raise InputError("llm_base_url and llm_model must be configured (or pass --mock)")
    return ChatCompletionsClient(cfg.llm_base_url, cfg.llm_model)


def _bank(cfg: PipelineConfig) -> EvidenceBank:
    if not cfg.bank:
        raise InputError("no evidence bank given (--bank or config 'bank')")
    return load_bank(cfg.bank)


def _group(bank: EvidenceBank, country: str) -> GroupKey:
    g = bank.find_country(country)
    if g is None:
        raise UnknownGroupError(country)
    return g


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def _question(args: argparse.Namespace) -> SurveyItem:
    if args.question_file:
        try:
            d = json.loads(Path(args.question_file).read_text(encoding="utf-8"))
        except OSError as e:
            raise InputError(f"cannot read question file: {e}") from e
        d.setdefault("item_id", d.pop("case_id", "input"))
        d.setdefault("question_text", d.pop("question", ""))
        return SurveyItem.from_dict(d)
    if not args.question or not args.option:
        raise InputError("give --question-file, or --question with two or more --option ID=TEXT")
    opts = []
    for raw in args.option:
        oid, sep, text = raw.partition("=")
        if not sep:
            raise InputError(f"--option must look like ID=TEXT, got {raw!r}")
        opts.append((oid.strip(), text.strip()))
    return SurveyItem(args.item_id, args.question, tuple(opts), args.instruction)


# --- subcommands -----------------------------------------------------------


def cmd_build_bank(args: argparse.Namespace) -> int:
    cfg = _config(args)
    microdata = args.microdata or cfg.microdata
    items_path = args.items or cfg.items
    out = args.out or cfg.bank
    if not microdata or not items_path or not out:
        raise InputError("build-bank needs --microdata, --items and --out")
    if not Path(microdata).is_file():
        raise InputError(f"microdata file not found: {microdata}")
    try:
        items = load_items(items_path)
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise InputError(f"cannot read items {items_path}: {e}") from e
    attributes = [a for a in (args.attributes or "").split(",") if a]
    report = ingest_respondents(microdata, items, attributes, delimiter=cfg.delimiter)
    for rej in report.rejections:
        print(f"rejected line {rej.line} ({rej.respondent_id or '?'}): {rej.reason}", file=sys.stderr)
    bank = build_bank(report.records, items, cfg.thresholds())
    save_bank(bank, out)
    print(f"bank written to {out}: {len(report.records)} respondents, {report.n_rejected} rejected")
    for g, ge in sorted(bank.groups.items()):
        supports = [ev.support for ev in ge.items.values()]
        stats = f"min {min(supports)} / median {statistics.median(supports):g} / max {max(supports)}" if supports else "-"
        print(f"  {g.label()}: {ge.n_respondents} respondents, {len(ge.items)} items, support {stats}")
    return EXIT_OK


def cmd_inspect_bank(args: argparse.Namespace) -> int:
    cfg = _config(args)
    bank = _bank(cfg)
    groups = [_group(bank, args.country)] if args.country else sorted(bank.groups)
    info = {
        "thresholds": bank.thresholds.to_dict(),
        "groups": [
            {
                "group": g.to_dict(),
                "group_profile": bank.groups[g].group_profile.to_list(),
                "n_respondents": bank.groups[g].n_respondents,
                "supports": {iid: ev.support for iid, ev in sorted(bank.groups[g].items.items())},
            }
            for g in groups
        ],
    }
    _write(_dumps(info), args.out)
    return EXIT_OK


def cmd_retrieve(args: argparse.Namespace) -> int:
    cfg = _config(args)
    bank = _bank(cfg)
    g = _group(bank, args.country)
    index = EvidenceIndex(bank, _encoder(cfg, args.mock is not None), max_workers=cfg.max_in_flight)
    query = RetrievalQuery(args.question, g, instruction=args.instruction, k=cfg.k, n_min=cfg.n_min)
    _write(_dumps({"group": g.to_dict(), "k": cfg.k, "n_min": cfg.n_min, "entries": index.retrieve(query).summary()}), args.out)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _config(args)
    bank = _bank(cfg)
    g = _group(bank, args.country)
    question = _question(args)
    index = EvidenceIndex(bank, _encoder(cfg, args.mock is not None), max_workers=cfg.max_in_flight)
    result = run_two_stage(question, g, bank, index, _llm(cfg, args.mock), cfg.inference())
    _write(_dumps(result.to_dict()), args.out)
    return EXIT_OK if result.valid else EXIT_DOMAIN if args.strict else EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    loaded = load_benchmark(args.benchmark)
    for line, reason in loaded.rejections:
        print(f"benchmark line {line} rejected: {reason}", file=sys.stderr)
    cases = loaded.cases
    if not cases:
        raise InputError(f"benchmark {args.benchmark} has no valid cases")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise InputError(f"unknown methods: {sorted(unknown)}")
    llm = _llm(cfg, args.mock) if set(methods) - {"uniform"} else None
    decoding = cfg.decoding()
    backbone = "mock" if args.mock is not None else (cfg.llm_model or "model")
    bank = index = None
    if "evida" in methods or args.k_sweep:
        bank = _bank(cfg)
        index = EvidenceIndex(bank, _encoder(cfg, args.mock is not None), max_workers=cfg.max_in_flight).build()

    results: list[MethodResult] = []
    timings = {}
    for method in methods:
        t0 = time.perf_counter()
        if method == "evida":
            predictor = evida_predictor(bank, index, llm, cfg.inference())
        elif method == "verbalized":
            predictor = lambda c: baseline_verbalized(llm, c, decoding, cfg.retries, cfg.tol)  # noqa: E731
        elif method == "logprob":
            predictor = lambda c: baseline_logprob(llm, c)  # noqa: E731
        elif method == "sampling":
            predictor = lambda c: baseline_sampling(llm, c, args.samples, base_seed=cfg.seed).distribution  # noqa: E731
        else:
            predictor = uniform_predictor
        name = method if method != "evida" or cfg.ablation == "none" else f"evida[{cfg.ablation}]"
        results.append(evaluate(predictor, cases, name, cfg.max_in_flight))
        timings[name] = (time.perf_counter() - t0) / len(cases)

    sweep = {}
    for k in [int(x) for x in (args.k_sweep or "").split(",") if x.strip()]:
        kcfg = InferenceConfig(k=k, n_min=cfg.n_min, tol=cfg.tol, retries=cfg.retries, decoding=decoding, ablation=cfg.ablation)
        sweep[k] = evaluate(evida_predictor(bank, index, llm, kcfg), cases, f"evida@k={k}", cfg.max_in_flight)

    out = write_reports(results, args.out_dir, backbone, {"seconds_per_case": timings}, sweep or None)
    for r in results:
        print(f"{r.method}: mean JSD {r.mean_jsd:.4f}, validity {r.validity_rate:.3f} over {len(r.per_case)} cases")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_episodes(args: argparse.Namespace) -> int:
    cfg = _config(args)
    bank = _bank(cfg)
    groups = [_group(bank, c) for c in args.groups.split(",")] if args.groups else sorted(bank.groups)
    index = EvidenceIndex(bank, _encoder(cfg, args.mock is not None), max_workers=cfg.max_in_flight).build()
    llm = _llm(cfg, args.mock)
    plan = sample_episodes(bank, groups, args.count, index, cfg.seed, cfg.k, cfg.n_min)
    for key, reason in plan.skipped:
        print(f"skipped episode {key}: {reason}", file=sys.stderr)
    if not plan.episodes:
        raise InsufficientSupportError("no episode has enough support")
    if len(plan.episodes) < args.count:
        print(f"only {len(plan.episodes)} of {args.count} episodes could be built", file=sys.stderr)

    weights = cfg.weights()
    scored_groups, advs, lmh_cases = [], [], []
    for ep in plan.episodes:
        rollouts = collect_rollouts(ep, bank, index, llm, cfg.inference(), cfg.group_size, cfg.seed, cfg.max_in_flight)
        scored = [ScoredRollout(ep, ro, score_rollout(ep, ro, weights)) for ro in rollouts]
        scored_groups.append(scored)
        advs.append(group_advantages([s.breakdown.total for s in scored]))
        for i, ro in enumerate(rollouts):
            lmh_cases.append(LMHCase(f"{ep.episode_id}#{i}", ep.group.country, ro.signatures, ep.gold_signatures))

    header = BatchHeader(
        weights=weights, group_size=cfg.group_size, thresholds=bank.thresholds, seed=cfg.seed,
        extra={"skipped": [{"episode": k, "reason": r} for k, r in plan.skipped]},
    )
    export_training_batch(scored_groups, advs, args.out, header)
    acc = lmh_accuracy(lmh_cases)
    totals = [s.breakdown.total for grp in scored_groups for s in grp]
    print(f"{len(totals)} rollouts over {len(scored_groups)} episodes written to {args.out}")
    print(f"mean reward {statistics.fmean(totals):.4f}; LMH accuracy by country: "
          + ", ".join(f"{c}={v:.3f}" for c, v in acc.per_country.items()))
    return EXIT_OK


def _score_record(record: dict, bank: EvidenceBank, cfg: PipelineConfig) -> dict:
    question = SurveyItem.from_dict(record["question"])
    group = GroupKey.from_dict(record["group"])
    ev = bank.evidence(group, question.item_id)
    if ev is None:
        raise UnknownGroupError(f"{group.label()}/{question.item_id} has no gold evidence in the bank")
    if set(question.option_ids) != set(ev.item.option_ids):
        raise InputError(f"{question.item_id}: options {question.option_ids} differ from the bank item's {ev.item.option_ids}")
    options = question.options
    notes = []
    sch_a = sch_b = 0
    lmh = dist = 0.0
    stage_a = record.get("stage_a")
    if stage_a:
        out_a, rep_a = check_completion(stage_a["raw_text"], STAGE_A, options, cfg.tol)
        sch_a = int(rep_a.valid)
        if rep_a.valid:
            try:
                lmh = r_lmh(stage_a_signatures(out_a, options), ev.signatures())
            except ScoringError as e:
                notes.append(f"r_lmh: {e}")
    stage_b = record.get("stage_b")
    if stage_b:
        out_b, rep_b = check_completion(stage_b["raw_text"], STAGE_B, options, cfg.tol)
        sch_b = int(rep_b.valid)
        if rep_b.valid:
            pred = normalize_distribution(stage_b_distribution(out_b, options))
            dist = r_dist(pred, {oid: ev.distribution[oid] for oid in question.option_ids})
    b = breakdown(cfg.weights(), lmh, dist, sch_a, sch_b, notes)
    return {"item_id": question.item_id, "group": group.to_dict(), **b.to_dict()}


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _config(args)
    bank = _bank(cfg)
    try:
        text = Path(args.predictions).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read predictions: {e}") from e
    try:
        whole = json.loads(text)
        records = whole if isinstance(whole, list) else [whole]
    except json.JSONDecodeError:
        try:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
        except json.JSONDecodeError as e:
            raise InputError(f"predictions are neither JSON nor JSON lines: {e}") from e
    lines = [json.dumps(_score_record(r, bank, cfg), ensure_ascii=False) for r in records]
    _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evida", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"evida {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--bank", help="evidence bank directory")
    common.add_argument("--cache-dir", dest="cache_dir")
    common.add_argument("--tau1", type=float)
    common.add_argument("--tau2", type=float)
    common.add_argument("--k", type=int, help="retrieved items before support filtering (default 10)")
    common.add_argument("--n-min", dest="n_min", type=int, help="minimum item support (default 30)")
    common.add_argument("--tol", type=float, help="stage B normalization tolerance (default 0.01)")
    common.add_argument("--retries", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--group-size", dest="group_size", type=int)
    common.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    common.add_argument("--llm-base-url", dest="llm_base_url")
    common.add_argument("--llm-model", dest="llm_model")
    common.add_argument("--temperature", type=float)
    common.add_argument("--llm-seed", dest="llm_seed", type=int)
    common.add_argument("--encoder-url", dest="encoder_url")
    common.add_argument(
        "--mock", nargs="?", const="", default=None, metavar="FIXTURE",
        help="offline backends: hashing encoder plus a mock LLM (scripted from FIXTURE when given)",
    )
    common.add_argument("--ablation", choices=("none", "no-evidence", "no-welzel"))

    b = sub.add_parser("build-bank", parents=[common], help="ingest microdata and write an evidence bank")
    b.add_argument("--microdata")
    b.add_argument("--items", help="item catalogue (JSON list or JSON lines)")
    b.add_argument("--out")
    b.add_argument("--attributes", help="comma-separated extra group columns")
    b.add_argument("--delimiter")
    b.set_defaults(func=cmd_build_bank)

    i = sub.add_parser("inspect-bank", parents=[common], help="print bank groups and supports")
    i.add_argument("--country")
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect_bank)

    r = sub.add_parser("retrieve", parents=[common], help="show retrieved evidence for a question")
    r.add_argument("--country", required=True)
    r.add_argument("--question", required=True)
    r.add_argument("--instruction")
    r.add_argument("--out")
    r.set_defaults(func=cmd_retrieve)

    pr = sub.add_parser("predict", parents=[common], help="two-stage prediction for one question")
    pr.add_argument("--country", required=True)
    pr.add_argument("--question-file")
    pr.add_argument("--question")
    pr.add_argument("--instruction")
    pr.add_argument("--option", action="append", help="ID=TEXT, repeatable")
    pr.add_argument("--item-id", default="input")
    pr.add_argument("--strict", action="store_true", help="exit 3 when no valid distribution results")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", parents=[common], help="score methods on a benchmark")
    e.add_argument("--benchmark", required=True)
    e.add_argument("--methods", default="evida")
    e.add_argument("--samples", type=int, default=10_000, help="draws per case for the sampling baseline")
    e.add_argument("--k-sweep", help="comma-separated K values for a retrieval-depth sweep")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_evaluate)

    ep = sub.add_parser("episodes", parents=[common], help="build episodes, roll out, score, export")
    ep.add_argument("--groups", help="comma-separated countries (default: all)")
    ep.add_argument("--count", type=int, default=1)
    ep.add_argument("--out", required=True)
    ep.set_defaults(func=cmd_episodes)

    s = sub.add_parser("score", parents=[common], help="reward breakdown for saved predictions")
    s.add_argument("--predictions", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (InputError, ConfigError, IngestError, BankError, BenchmarkError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except UnknownGroupError as e:
        print(f"error: unknown group {e.args[0] if e.args else ''}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ValueDomainError, InsufficientSupportError, DegenerateDistributionError, MethodUnavailableError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except TransportError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    raise SystemExit(main())
