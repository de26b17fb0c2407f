import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from trustarb.core import AgentPrediction, LabelSet, ManualClock, Stage, UnknownLabel
from trustarb.gateway import (
    AgentRequest,
    AgentSpec,
    ConfidenceOutOfRange,
    EmptyVotes,
    FormatExhausted,
    MissingFixtureEntry,
    MissingKey,
    NoJsonFound,
    ScriptedAgent,
    invoke_with_retries,
    parse_agent_reply,
    render_agent_prompt,
    render_reeval_prompt,
)
from trustarb.vectorstore import ClassVote, RetrievalHit, parse_ranked_votes

LABELS = LabelSet(("healthy", "black-rot", "rust", "scab"))


# -- prompt rendering -----------------------------------------------------------


def test_agent_prompt_enumerates_labels():
    prompt = render_agent_prompt(LabelSet(("alpha", "beta")))
    assert "alpha" in prompt and "beta" in prompt
    for key in ("category", "justification", "confidence"):
        assert key in prompt
    assert "[0, 1]" in prompt


def test_agent_prompt_default_labels():
    assert "black-rot" in render_agent_prompt(LABELS)


def test_agent_prompt_satisfies_parse_contract():
    prompt = render_agent_prompt(LABELS)
    for token in ('"category"', '"justification"', '"confidence"'):
        assert token in prompt


def _prior(category="scab", confidence=0.9, justification="dark lesions"):
    return AgentPrediction("gpt", "img1", Stage.INITIAL, category, confidence, justification)


def test_reeval_prompt_embeds_prior_and_votes():
    votes = [ClassVote("rust", 0.7), ClassVote("scab", 0.3)]
    prompt = render_reeval_prompt(_prior(), votes, [], LABELS)
    assert '"scab"' in prompt and "0.9" in prompt and "dark lesions" in prompt
    assert '"rust"' in prompt and "0.7" in prompt


def test_reeval_prompt_embeds_reference_vote_block():
    votes = parse_ranked_votes(
        '[{"category": "scab", "confidence": 0.5005},'
        ' {"category": "healthy", "confidence": 0.3996},'
        ' {"category": "rust", "confidence": 0.0999}]'
    )
    prompt = render_reeval_prompt(_prior(), votes, [], LABELS)
    assert "0.5005" in prompt


def test_reeval_prompt_rejects_empty_votes():
    with pytest.raises(EmptyVotes):
        render_reeval_prompt(_prior(), [], [], LABELS)


@given(
    st.sampled_from(LABELS.labels),
    st.floats(min_value=0, max_value=1, allow_nan=False),
    st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), max_size=30),
)
def test_reeval_prompt_containment(category, confidence, justification):
    prior = AgentPrediction("a1", "img9", Stage.INITIAL, category, confidence, justification)
    hits = [RetrievalHit("r1", category, 0.8)]
    prompt = render_reeval_prompt(prior, [ClassVote(category, 1.0)], hits, LABELS)
    assert json.dumps(category) in prompt
    assert json.dumps(confidence) in prompt
    assert json.dumps(justification, ensure_ascii=False) in prompt
    assert prior.image_id in prompt


# -- reply parsing ----------------------------------------------------------------


def test_parse_direct():
    parsed = parse_agent_reply(
        '{"category":"scab","justification":"lesions","confidence":0.92}', LABELS
    )
    assert (parsed.category, parsed.justification, parsed.confidence) == ("scab", "lesions", 0.92)


def test_parse_extracts_first_json_object():
    text = (
        'Sure! Here is my answer: {"category":"Rust", "justification":"orange spots", '
        '"confidence":0.8} hope that helps'
    )
    parsed = parse_agent_reply(text, LABELS)
    assert parsed.category == "rust"
    assert parsed.confidence == 0.8


def test_parse_skips_invalid_braces():
    text = '{not json} then {"category":"scab","justification":"x","confidence":0.5}'
    assert parse_agent_reply(text, LABELS).category == "scab"


def test_parse_confidence_out_of_range():
    with pytest.raises(ConfidenceOutOfRange):
        parse_agent_reply('{"category":"scab","confidence":1.4}', LABELS)
    with pytest.raises(ConfidenceOutOfRange):
        parse_agent_reply('{"category":"scab","confidence":"high","justification":"x"}', LABELS)


def test_parse_error_taxonomy():
    with pytest.raises(NoJsonFound):
        parse_agent_reply("no objects here", LABELS)
    with pytest.raises(MissingKey):
        parse_agent_reply('{"justification":"x","confidence":0.5}', LABELS)
    with pytest.raises(UnknownLabel):
        parse_agent_reply('{"category":"mildew","justification":"x","confidence":0.5}', LABELS)
    with pytest.raises(MissingKey):
        parse_agent_reply('{"category":"scab","confidence":0.5}', LABELS)


@given(
    st.sampled_from(LABELS.labels),
    st.floats(min_value=0, max_value=1, allow_nan=False),
    st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), max_size=60),
)
def test_parse_round_trip_on_compliant_replies(category, confidence, justification):
    reply = json.dumps(
        {"category": category, "justification": justification, "confidence": confidence},
        ensure_ascii=False,
    )
    parsed = parse_agent_reply(reply, LABELS)
    assert parsed.category == category
    assert parsed.confidence == confidence
    assert parsed.justification == justification


# -- scripted transport and the retry loop ------------------------------------------


def write_fixture(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


VALID = '{"category":"scab","justification":"ok","confidence":0.75}'


def spec_for(path, cap=3):
    return AgentSpec(agent_id="fix", kind="scripted", script_path=str(path), retry_cap=cap)


def parser(text):
    return parse_agent_reply(text, LABELS)


def request_for(image_id="img1", stage=Stage.INITIAL):
    return AgentRequest(image_id=image_id, prompt_text="classify", stage=stage)


def test_scripted_happy_path(tmp_path):
    path = tmp_path / "agent.jsonl"
    write_fixture(path, [{"image_id": "img1", "stage": "initial", "reply": VALID, "latency_ms": 120.0}])
    clock = ManualClock(0.0)
    pred = invoke_with_retries(spec_for(path), request_for(), parser, clock)
    assert pred.attempts == 1
    assert pred.category == "scab"
    assert pred.latency_ms == 120.0  # fixture latency advanced the clock
    assert pred.cost_usd == 0.0


def test_retry_sequence_consumes_replies(tmp_path):
    path = tmp_path / "agent.jsonl"
    write_fixture(
        path,
        [{"image_id": "img1", "stage": "initial", "replies": ["garbage", "also bad", VALID]}],
    )
    pred = invoke_with_retries(spec_for(path, cap=3), request_for(), parser, ManualClock())
    assert pred.attempts == 3


def test_format_exhausted_at_cap(tmp_path):
    path = tmp_path / "agent.jsonl"
    write_fixture(path, [{"image_id": "img1", "stage": "initial", "replies": ["bad"]}])
    with pytest.raises(FormatExhausted) as exc_info:
        invoke_with_retries(spec_for(path, cap=2), request_for(), parser, ManualClock())
    assert exc_info.value.attempts == 3  # cap + 1 total tries


def test_missing_fixture_entry(tmp_path):
    path = tmp_path / "agent.jsonl"
    write_fixture(path, [{"image_id": "img1", "stage": "initial", "reply": VALID}])
    with pytest.raises(MissingFixtureEntry):
        invoke_with_retries(spec_for(path), request_for("img2"), parser, ManualClock())


def test_scripted_replay_is_deterministic(tmp_path):
    path = tmp_path / "agent.jsonl"
    write_fixture(
        path,
        [
            {"image_id": f"img{i}", "stage": "initial", "reply": VALID, "latency_ms": 10.5 * i}
            for i in range(4)
        ],
    )

    def one_pass():
        clock = ManualClock(0.0)
        transport = ScriptedAgent(str(path))
        spec = spec_for(path)
        return [
            invoke_with_retries(spec, request_for(f"img{i}"), parser, clock, transport)
            for i in range(4)
        ]

    assert one_pass() == one_pass()


def test_attempts_never_exceed_cap_plus_one(tmp_path):
    path = tmp_path / "agent.jsonl"
    write_fixture(
        path, [{"image_id": "img1", "stage": "initial", "replies": ["bad", "bad", VALID]}]
    )
    pred = invoke_with_retries(spec_for(path, cap=5), request_for(), parser, ManualClock())
    assert pred.attempts <= 5 + 1


# -- remote wire format ------------------------------------------------------------


class FakeResponse:
    def __init__(self, text):
        self._payload = {"choices": [{"message": {"content": text}}]}

    def raise_for_status(self):
        pass

    def json(self):
        return self._payload


class FakeSession:
    """Stands in for requests.Session; records every POST body."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers})
        return FakeResponse(self.replies.pop(0))


def remote_spec(cap=3):
    return AgentSpec(
        agent_id="remote1",
        kind="remote",
        endpoint_url="https://example.test/v1/chat/completions",
        api_key_env="REMOTE1_KEY",
        model_name="vlm-large",
        retry_cap=cap,
    )


def test_remote_request_body_shape(monkeypatch):
    from trustarb.gateway import RemoteAgent

    monkeypatch.setenv("REMOTE1_KEY", "sk-test")
    session = FakeSession([VALID])
    transport = RemoteAgent(remote_spec(), session=session)
    request = AgentRequest(
        image_id="img1",
        prompt_text="classify this",
        stage=Stage.INITIAL,
        image_payload=b"\xff\xd8fakejpeg",
        image_media_type="image/jpeg",
    )
    pred = invoke_with_retries(remote_spec(), request, parser, ManualClock(), transport)
    assert pred.category == "scab"
    call = session.calls[0]
    assert call["url"] == "https://example.test/v1/chat/completions"
    assert call["headers"]["Authorization"] == "Bearer sk-test"
    body = call["json"]
    assert body["model"] == "vlm-large"
    content = body["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "classify this"}
    assert content[1]["type"] == "image_url"
    assert content[1]["image_url"]["url"].startswith("data:image/jpeg;base64,")
    # orchestrator-style text-only request carries no image part
    session2 = FakeSession([VALID])
    transport2 = RemoteAgent(remote_spec(), session=session2)
    invoke_with_retries(
        remote_spec(),
        AgentRequest(image_id="img1", prompt_text="arbitrate", stage=Stage.INITIAL),
        parser,
        ManualClock(),
        transport2,
    )
    assert len(session2.calls[0]["json"]["messages"][0]["content"]) == 1


def test_remote_retry_appends_correction_turns(monkeypatch):
    from trustarb.gateway import FORMAT_CORRECTION, RemoteAgent

    monkeypatch.delenv("REMOTE1_KEY", raising=False)
    session = FakeSession(["not json at all", VALID])
    transport = RemoteAgent(remote_spec(), session=session)
    pred = invoke_with_retries(remote_spec(), request_for(), parser, ManualClock(), transport)
    assert pred.attempts == 2
    second = session.calls[1]["json"]["messages"]
    assert [m["role"] for m in second] == ["user", "assistant", "user"]
    assert second[1]["content"] == "not json at all"
    assert second[2]["content"] == FORMAT_CORRECTION


def test_remote_transport_error_is_unreachable():
    from trustarb.gateway import AgentUnreachable, RemoteAgent

    class ExplodingSession:
        def post(self, *a, **k):
            import requests

            raise requests.ConnectionError("boom")

    transport = RemoteAgent(remote_spec(), session=ExplodingSession())
    with pytest.raises(AgentUnreachable):
        invoke_with_retries(remote_spec(), request_for(), parser, ManualClock(), transport)
