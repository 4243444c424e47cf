import json
from pathlib import Path

import pytest

from evida.bank import GroupKey, SurveyItem
from evida.inference import (
    STAGE_A,
    STAGE_B,
    DegenerateDistributionError,
    InferenceConfig,
    ParseError,
    canonicalize_options,
    check_completion,
    extract_json_object,
    normalize_distribution,
    parse_stage_a,
    parse_stage_b,
    run_two_stage,
)
from evida.llm import DecodingParams, HeuristicMockLLM, ScriptedLLM, ScriptedRule
from evida.prompts import render_stage_a_prompt, render_stage_b_prompt
from evida.retrieval import RetrievedEvidence, UnknownGroupError
from evida.rewards import r_schema
from evida.values import SUBINDEX_ORDER

CORPUS = json.loads((Path(__file__).parent / "fixtures" / "schema_corpus.json").read_text())
OPTIONS = [tuple(o) for o in CORPUS["options"]]
QUESTION = SurveyItem("NEW", "Should people obey the law?", tuple(OPTIONS))
SIG = ["low", "medium", "high", "medium", "low", "high", "medium", "low"]


def stage_a_json(options=("1", "2", "3")):
    return json.dumps(
        {
            "subindex_order": list(SUBINDEX_ORDER),
            "option_profiles": [{"option": o, "subindex_LMH": SIG} for o in options],
            "notes": "",
        }
    )


@pytest.mark.parametrize("case", CORPUS["cases"], ids=[c["why"] for c in CORPUS["cases"]])
def test_schema_corpus(case):
    _, report = check_completion(case["text"], case["stage"], OPTIONS)
    assert report.valid is case["valid"], report.to_dict()
    assert r_schema(report) == int(case["valid"])


def test_extract_prefers_fence_and_handles_braces_in_strings():
    text = 'noise {"a": 1} ```json\n{"b": "}{"}\n```'
    assert extract_json_object(text) == '{"b": "}{"}'
    assert extract_json_object('x {"a": {"b": 2}} y {"c": 3}') == '{"a": {"b": 2}}'
    with pytest.raises(ParseError) as e:
        extract_json_object("no object here")
    assert e.value.kind == "no_json"
    with pytest.raises(ParseError) as e:
        extract_json_object('{"a": [1, 2')
    assert e.value.kind == "malformed_json"


def test_parse_errors_have_kinds():
    with pytest.raises(ParseError) as e:
        parse_stage_b('{"rationale": "x"}')
    assert e.value.kind == "wrong_keys"
    with pytest.raises(ParseError) as e:
        parse_stage_b('{"predicted_distribution": [0.5, 0.5]}')
    assert e.value.kind == "bad_shape"
    with pytest.raises(ParseError) as e:
        parse_stage_a('{"subindex_order": [], "option_profiles": [1]}')
    assert e.value.kind == "bad_shape"


def test_parse_is_separate_from_validation():
    out = parse_stage_b('{"predicted_distribution": {"9": 3}}')
    assert out.predicted_distribution == {"9": 3}
    _, report = check_completion('{"predicted_distribution": {"9": 3}}', STAGE_B, OPTIONS)
    assert {c.name for c in report.failures()} == {"option_keys", "option_coverage", "normalized"}


def test_canonicalize_ambiguous_text():
    opts = [("1", "Yes"), ("2", "Yes")]
    mapping, problems = canonicalize_options(["Yes", "1"], opts)
    assert mapping == {"1": "1"} and problems == ["ambiguous option 'Yes'"]


def test_tolerance_is_configurable():
    text = '{"predicted_distribution": {"1": 0.2, "2": 0.3, "3": 0.53}}'
    assert not check_completion(text, STAGE_B, OPTIONS)[1].valid
    assert check_completion(text, STAGE_B, OPTIONS, tol=0.05)[1].valid


def test_normalize_distribution():
    assert normalize_distribution({"a": 1.0, "b": 3.0}) == {"a": 0.25, "b": 0.75}
    with pytest.raises(DegenerateDistributionError):
        normalize_distribution({"a": 0.0, "b": 0.0})
    with pytest.raises(DegenerateDistributionError):
        normalize_distribution({"a": -1.0, "b": 2.0})


def test_two_stage_with_mock_is_valid_and_deterministic(bank20, index20):
    g = GroupKey("Germany")
    cfg = InferenceConfig(decoding=DecodingParams(seed=3))
    r1 = run_two_stage(QUESTION, g, bank20, index20, HeuristicMockLLM(), cfg)
    r2 = run_two_stage(QUESTION, g, bank20, index20, HeuristicMockLLM(), cfg)
    assert r1.valid and r1.stage_a_report.valid and r1.stage_b_report.valid
    assert r1.to_dict() == r2.to_dict()
    assert abs(sum(r1.normalized_distribution.values()) - 1.0) < 1e-12
    assert set(r1.signatures) == {"1", "2", "3"}
    assert r1.retrieval.item_ids and len(r1.retrieval) <= 10


def test_stage_a_failure_stops_before_stage_b(bank20, index20):
    llm = ScriptedLLM.always("not json")
    r = run_two_stage(QUESTION, GroupKey("Japan"), bank20, index20, llm, InferenceConfig(retries=2))
    assert r.stage_a.attempts == 3
    assert r.stage_b is None and not r.valid
    assert not r.stage_b_report.valid
    assert len(llm.calls) == 3 and len(set(llm.calls)) == 1


def test_retry_recovers_and_varies_seed(bank20, index20):
    seen = []

    class Recorder(ScriptedLLM):
        def complete(self, prompt, decoding, *, logprobs=False):
            seen.append(decoding.seed)
            return super().complete(prompt, decoding, logprobs=logprobs)

    llm = Recorder(
        [
            ScriptedRule("assign Welzel", ["garbage", stage_a_json()]),
            ScriptedRule("predicted_distribution", ['{"predicted_distribution": {"1": 0.5, "2": 0.5, "3": 0.5}}', '{"predicted_distribution": {"Agree": 0.5, "2": 0.25, "3": 0.25}}']),
        ],
        fallback=None,
    )
    r = run_two_stage(QUESTION, GroupKey("Japan"), bank20, index20, llm, InferenceConfig(decoding=DecodingParams(seed=10)))
    assert r.stage_a.attempts == 2 and r.stage_b.attempts == 2
    assert seen == [10, 11, 10, 11]
    assert r.normalized_distribution == {"1": 0.5, "2": 0.25, "3": 0.25}


def test_ablations(bank20, index20):
    g = GroupKey("Germany")
    llm = HeuristicMockLLM()
    no_ev = run_two_stage(QUESTION, g, bank20, index20, llm, InferenceConfig(ablation="no-evidence"))
    assert len(no_ev.retrieval) == 0
    assert "Group target LMH profile" not in no_ev.stage_a.prompt
    no_w = run_two_stage(QUESTION, g, bank20, index20, llm, InferenceConfig(ablation="no-welzel"))
    assert no_w.stage_a is None and no_w.signatures is None and no_w.valid
    assert "Predicted option LMH profiles" not in no_w.stage_b.prompt
    assert not no_w.stage_a_report.valid
    with pytest.raises(ValueError):
        InferenceConfig(ablation="bogus")


def test_unknown_group(bank20, index20):
    with pytest.raises(UnknownGroupError):
        run_two_stage(QUESTION, GroupKey("Atlantis"), bank20, index20, HeuristicMockLLM())


def test_prompts_contain_templates_and_evidence(bank20, index20):
    from evida.retrieval import RetrievalQuery

    g = GroupKey("Germany")
    ev = index20.retrieve(RetrievalQuery(QUESTION.question_text, g, k=3))
    pa = render_stage_a_prompt(QUESTION, bank20.groups[g].group_profile, ev)
    assert pa.startswith("You are given similar WVS questions from the SAME demographic group.")
    assert pa.index("Group target LMH profile") < pa.index("[1] ")
    assert "{new_question}" not in pa and "{answer_options}" not in pa
    assert "- 1: Agree\n- 2: Neutral\n- 3: Disagree" in pa
    refs = [json.loads(line.split(" ", 1)[1]) for line in pa.splitlines() if line.startswith("[")]
    assert len(refs) == len(ev)
    for ref, entry in zip(refs, ev):
        assert set(ref) == {"question", "options", "observed_distribution_over_labels", "label_to_subindex_LMH"}
        assert ref["question"].startswith(entry.evidence.item.question_text)
    pb = render_stage_b_prompt(QUESTION, None, None, RetrievedEvidence())
    assert pb.startswith("Context:\n") and "Reference questions:\n\n" in pb
