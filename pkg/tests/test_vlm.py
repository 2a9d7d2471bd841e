import json
from pathlib import Path

import httpx
import pytest

from autolora.metrics.vlm import (
    CPS_TEMPLATE,
    PC_SA_TEMPLATE,
    FixtureSender,
    SchemaError,
    Template,
    VLMTransportError,
    http_sender,
    parse_reply,
    render_prompt,
    vlm_score,
)

FIXTURES = Path(__file__).parent / "fixtures" / "vlm_replies.json"


@pytest.fixture
def sender():
    return FixtureSender.from_file(FIXTURES)


def test_templates_keep_reply_contract():
    for t in (CPS_TEMPLATE, PC_SA_TEMPLATE):
        assert t.startswith("<IMAGE DATA>\n")
        assert t.endswith("Reply only with a JSON with no extra text")
    assert "<PROMPT USED FOR THE IMAGE GENERATION>" in PC_SA_TEMPLATE
    assert '"style_adherence": [the style adherence score from 0 to 5],' in PC_SA_TEMPLATE


def test_render_substitutes_slots():
    text = render_prompt(Template.PC_SA, "img-1", "a red fox, pixel art style")
    assert text.startswith("img-1\n")
    assert "for the prompt a red fox, pixel art style and the pixel art style" in text
    with pytest.raises(ValueError):
        render_prompt(Template.PC_SA, "img-1")


def test_clean_cps_reply(sender):
    (r,) = vlm_score(["img-clean"], "CPS", send=sender)
    assert r.valid and r.scores == {"score": 4, "reason": ["dress", "hairstyle"]}
    assert r.attempts == 1
    assert sender.requests[0]["prompt"].startswith("img-clean\nEvaluate the presence")
    assert sender.requests[0]["payload"] == "img-clean"


def test_prose_wrapped_reply_consumes_one_retry(sender):
    (r,) = vlm_score(["img-prose"], Template.CPS, send=sender, retries=3)
    assert r.valid and r.scores["score"] == 3 and r.attempts == 2
    assert len(r.errors) == 1


@pytest.mark.parametrize("payload", ["img-out-of-range", "img-malformed"])
def test_invalid_after_retries(sender, payload):
    (r,) = vlm_score([payload], Template.CPS, send=sender, retries=3)
    assert not r.valid and r.attempts == 4 and len(r.errors) == 4
    assert r.raw == json.loads(FIXTURES.read_text())[payload][-1]


def test_pc_sa_schema(sender):
    good, bad = vlm_score(["img-pcsa", "img-pcsa-bad"], "PC_SA", prompts=["p1", "p2"],
                          send=sender, retries=1, max_concurrency=2)
    assert good.valid and good.scores == {"prompt_correspondence": 4, "style_adherence": 3.5}
    assert bad.valid and bad.attempts == 2 and bad.scores["prompt_correspondence"] == 5


def test_retries_zero_marks_invalid_immediately(sender):
    (r,) = vlm_score(["img-prose"], "CPS", send=sender, retries=0)
    assert not r.valid and r.attempts == 1


def test_order_preserved_under_concurrency():
    replies = {f"p{i}": [json.dumps({"score": i % 6, "reason": []})] for i in range(20)}
    out = vlm_score(list(replies), "CPS", send=FixtureSender(replies), max_concurrency=8)
    assert [r.scores["score"] for r in out] == [i % 6 for i in range(20)]


@pytest.mark.parametrize("reply", ['{"score": true, "reason": []}', '{"score": -1, "reason": []}',
                                   '{"score": 3}', '{"score": 3, "reason": "dress"}'])
def test_cps_schema_violations(reply):
    with pytest.raises(SchemaError):
        parse_reply(Template.CPS, reply)


def test_http_path_offline(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, text='{"score": 5, "reason": ["anna"]}')

    send = http_sender("http://judge.invalid/score", "tok", transport=httpx.MockTransport(handler))
    (r,) = vlm_score(["img"], "CPS", send=send)
    assert r.valid and r.scores["score"] == 5
    assert seen["auth"] == "Bearer tok" and set(seen["body"]) == {"prompt", "payload"}


def test_transport_failure_propagates():
    def handler(request):
        return httpx.Response(503)

    send = http_sender("http://judge.invalid/score", transport=httpx.MockTransport(handler))
    with pytest.raises(VLMTransportError):
        vlm_score(["img"], "CPS", send=send)


def test_missing_endpoint(monkeypatch):
    monkeypatch.delenv("AUTOLORA_VLM_ENDPOINT", raising=False)
    with pytest.raises(VLMTransportError, match="AUTOLORA_VLM_ENDPOINT"):
        vlm_score(["img"], "CPS")
