"""Prompt templates and their rendering.

Templates are filled by plain placeholder replacement because their bodies
contain literal JSON braces.
"""

from __future__ import annotations

import json
from typing import Mapping, Sequence

from .bank import SurveyItem
from .retrieval import RetrievedEvidence, question_text
from .values import LMHSignature

_CONTEXT_HEADER = """\
You are given similar WVS questions from the SAME demographic group.
Each provides:
- observed_distribution_over_labels
- label_to_subindex_LMH (typical L/M/H pattern among respondents choosing that label)

Reference questions:
{reference_questions_with_lmh}
"""

_SUBINDEX_BLOCK = """\
Welzel sub-indexes are 8 dimensions, with discretized values including "low", "medium", and "high". Sub-index meanings:
sub_meanings = {
    "DEFIANCE": "Less deference to authority/tradition (higher = more defiant).",
    "DISBELIEF": "Lower religiosity (higher = more disbelief).",
    "RELATIVISM": "Less moral absolutism (higher = more relativist).",
    "SCEPTICISM": "More skepticism toward traditional state institutions.",
    "AUTONOMY": "Preference for independence/imagination over obedience in child-raising.",
    "EQUALITY": "Support for gender equality.",
    "CHOICE": "Acceptance of private-life choices (e.g., divorce/abortion/homosexuality).",
    "VOICE": "Support for free speech and people having a say.",
}

Sub-index order:
WELZEL_SUBINDEX_COLS = [
    "DEFIANCE", "DISBELIEF", "RELATIVISM", "SCEPTICISM",
    "AUTONOMY", "EQUALITY", "CHOICE", "VOICE",
]
"""

STAGE_A_TEMPLATE = (
    _CONTEXT_HEADER
    + """
Task:
For the input survey question, assign Welzel sub-index categories (low/medium/high) to each answer option.

"""
    + _SUBINDEX_BLOCK
    + """
Rules:
- Return ONLY JSON (no markdown).
- Use exactly the schema:
{
    "subindex_order": [
        "DEFIANCE", "DISBELIEF", "RELATIVISM", "SCEPTICISM",
        "AUTONOMY", "EQUALITY", "CHOICE", "VOICE",
    ],
    "option_profiles": [
        {"option": "<string>", "subindex_LMH": "low|medium|high"
    ],
    "notes": "<short string>",
}
- subindex_LMH entries must be one of: "low", "medium", "high"

Input survey question:
{new_question}

Answer options:
{answer_options}

Return JSON now.
"""
)

STAGE_B_TEMPLATE = (
    "Context:\n"
    + _CONTEXT_HEADER
    + "\n"
    + _SUBINDEX_BLOCK
    + """
Input survey question with Welzel's values:
{input_question_with_welzel}

Task:
For the input survey question, return a plausible probability distribution over the answer options that:
- Uses all options as keys
- Values are floats >= 0
- Sums to 1 (within rounding)
- Leans toward options whose LMH profiles better match the group target LMH profile
- Is consistent with patterns in retrieved examples (e.g., if similar LMH profiles got high probability there, mirror that)

Rules:
- Return ONLY JSON (no markdown).
- Use exactly schema:
{
    "predicted_distribution": {"A": 0.25, "B": 0.15, "C": 0.15, "D": 0.45},
    "rationale": "<brief>",
}

Return JSON now.
"""
)

VERBALIZED_TEMPLATE = """\
Consider how people in {country} would answer the following survey question.

Survey question:
{question}

Answer options:
{answer_options}

Estimate the share of respondents in {country} choosing each answer option.

Rules:
- Return ONLY JSON (no markdown).
- Use all options as keys; values are floats >= 0 summing to 1.
- Use exactly schema:
{
    "predicted_distribution": {"A": 0.25, "B": 0.20, "C": 0.45, "D": 0.10}
}

Return JSON now.
"""

SINGLE_CHOICE_TEMPLATE = """\
Imagine you are a survey respondent living in {country}.

Survey question:
{question}

Answer options:
{answer_options}

Answer with the letter of the option you choose and nothing else.
"""

PROB_DECIMALS = 4


def _fill(template: str, **values: str) -> str:
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False)


def format_options(options: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"- {oid}: {text}" for oid, text in options)


def format_reference_block(
    evidence: RetrievedEvidence, group_profile: LMHSignature | None = None
) -> str:
    """Serialize the group profile and retrieved items, one JSON object per item in retrieval order.

    Options nobody chose carry no signature and are left out of
    ``label_to_subindex_LMH``.
    """
    lines = []
    if group_profile is not None:
        lines.append(f"Group target LMH profile: {_dumps(group_profile.to_list())}")
    for n, entry in enumerate(evidence.entries, start=1):
        ev = entry.evidence
        item = ev.item
        ref = {
            "question": question_text(item.question_text, item.instruction),
            "options": {oid: text for oid, text in item.options},
            "observed_distribution_over_labels": {
                oid: round(ev.distribution.get(oid, 0.0), PROB_DECIMALS) for oid in item.option_ids
            },
            "label_to_subindex_LMH": {
                oid: sig.to_list() for oid, sig in ev.signatures().items() if sig is not None
            },
        }
        lines.append(f"[{n}] {_dumps(ref)}")
    return "\n".join(lines)


def render_stage_a_prompt(
    question: SurveyItem,
    group_profile: LMHSignature | None,
    evidence: RetrievedEvidence,
) -> str:
    return _fill(
        STAGE_A_TEMPLATE,
        reference_questions_with_lmh=format_reference_block(evidence, group_profile),
        new_question=question_text(question.question_text, question.instruction),
        answer_options=format_options(question.options),
    )


def format_question_with_welzel(
    question: SurveyItem, signatures: Mapping[str, LMHSignature] | None
) -> str:
    parts = [
        question_text(question.question_text, question.instruction),
        "",
        "Answer options:",
        format_options(question.options),
    ]
    if signatures is not None:
        parts += ["", "Predicted option LMH profiles (in sub-index order):"]
        parts += [f"- {oid}: {_dumps(signatures[oid].to_list())}" for oid in question.option_ids]
    return "\n".join(parts)


def render_stage_b_prompt(
    question: SurveyItem,
    signatures: Mapping[str, LMHSignature] | None,
    group_profile: LMHSignature | None,
    evidence: RetrievedEvidence,
) -> str:
    """Distribution prompt; ``signatures=None`` renders the no-value-mapping variant."""
    return _fill(
        STAGE_B_TEMPLATE,
        reference_questions_with_lmh=format_reference_block(evidence, group_profile),
        input_question_with_welzel=format_question_with_welzel(question, signatures),
    )


def render_verbalized_prompt(question: SurveyItem, country: str) -> str:
    return _fill(
        VERBALIZED_TEMPLATE,
        country=country,
        question=question_text(question.question_text, question.instruction),
        answer_options=format_options(question.options),
    )


def render_single_choice_prompt(question: SurveyItem, country: str, letters: Sequence[str]) -> str:
    lettered = [(letter, text) for letter, (_, text) in zip(letters, question.options)]
    return _fill(
        SINGLE_CHOICE_TEMPLATE,
        country=country,
        question=question_text(question.question_text, question.instruction),
        answer_options=format_options(lettered),
    )
