"""Client for a remote VLM judge.

The request body is ``{"prompt": <template with substitutions>, "payload": ...}``
and the response body is the judge's raw text reply, which must be a bare
JSON object. Malformed or out-of-range replies are retried; once retries are
exhausted the item is returned as invalid with its last raw reply kept.
"""

from __future__ import annotations

import enum
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

ENDPOINT_ENV = "AUTOLORA_VLM_ENDPOINT"
TOKEN_ENV = "AUTOLORA_VLM_TOKEN"
DEFAULT_RETRIES = 3

IMAGE_SLOT = "<IMAGE DATA>"
PROMPT_SLOT = "<PROMPT USED FOR THE IMAGE GENERATION>"

CPS_TEMPLATE = (
    '<IMAGE DATA>\n'
    "Evaluate the presence of Princess Anna from Disney's Frozen movie in the image. Output a score between 0 and 5, where:\n"
    '* 0: Princess Anna is not present in the image.\n'
    "* 1: The image contains a character with a vague resemblance to Princess Anna, but it's not clear if it's her. (e.g., a character with a similar hairstyle or dress color)\n"
    "* 2: The image contains a character that shares some similarities with Princess Anna, but it's not a clear match. (e.g., a character with a similar face shape or clothing style)\n"
    '* 3: The image contains a character that is similar to Princess Anna, but with some noticeable differences. (e.g., a character with a similar dress and hairstyle, but different facial features)\n'
    '* 4: The image contains a character that is very likely to be Princess Anna, but with some minor differences. (e.g., a character with a similar face, dress, and hairstyle, but with a slightly different expression or pose)\n'
    '* 5: The image contains a character that is unmistakably Princess Anna from Frozen.\n'
    '\n'
    'Output the score in following JSON format:\n'
    '{\n'
    '    "score": [score between 0 and 5],\n'
    '    "reason": [use keywords to describe the reason of the score, e.g., ["dress", "hairstyle", "no Anna character"] ]\n'
    '}\n'
    'Reply only with a JSON with no extra text'
)

PC_SA_TEMPLATE = (
    '<IMAGE DATA>\n'
    'Evaluate the given image for the prompt <PROMPT USED FOR THE IMAGE GENERATION> and the pixel art style\n'
    'Access the following metrics:\n'
    'Prompt correspondence: How well does the image capture the essence, objects, and scenes described in the prompt? Scale: 0-5, where:\n'
    '0: Not at all (the image does not relate to the prompt in any way)\n'
    '1: Very poorly (the image vaguely relates to the prompt, but most key elements are missing or incorrect)\n'
    '2: Somewhat (the image captures some key elements of the prompt, but others are missing or incorrect)\n'
    '3: Fairly well (the image captures most key elements of the prompt, but some details may be off)\n'
    '4: Very well (the image accurately captures the essence and most key elements of the prompt)\n'
    '5: Exactly (the image perfectly captures the essence, objects, and scenes described in the prompt)\n'
    'Style adherence: How well does the image adhere to the specified style? If the style is pixel art, does the image truly resemble pixel art, or is it just a low-quality image? Scale: 0-5, where: \n'
    '1: Very poorly (the image attempts to mimic pixel art, but lacks clear pixelation, has excessive aliasing, or uses too many colors)\n'
    '2: Somewhat (the image shows some pixel art characteristics, such as pixelation, but lacks consistency in pixel size, color palette, or has noticeable artifacts)\n'
    '3: Fairly well (the image generally adheres to pixel art principles, with clear pixelation, a limited color palette, and minimal aliasing, but may have some minor flaws)\n'
    '4: Very well (the image strongly adheres to pixel art principles, with crisp pixelation, a well-chosen color palette, and minimal to no aliasing or artifacts)\n'
    '5: Perfectly (the image perfectly captures the pixel art style, with precise pixelation, a masterfully chosen color palette, and no noticeable flaws or artifacts)\n'
    'Provide the evaluation scores in the following JSON format:\n'
    '{\n'
    '  "prompt_correspondence": [the prompt correspondence score from 0 to 5],\n'
    '  "style_adherence": [the style adherence score from 0 to 5],\n'
    '}\n'
    'Reply only with a JSON with no extra text'
)


class Template(str, enum.Enum):
    CPS = "CPS"
    PC_SA = "PC_SA"

    @property
    def text(self) -> str:
        return CPS_TEMPLATE if self is Template.CPS else PC_SA_TEMPLATE


class VLMTransportError(RuntimeError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class VLMResult:
    valid: bool
    scores: dict[str, Any] = field(default_factory=dict)
    raw: str | None = None
    attempts: int = 0
    errors: list[str] = field(default_factory=list)


def render_prompt(template: Template, payload: Any, prompt: str | None = None) -> str:
    """Substitute the payload (and, for PC_SA, the generation prompt)."""
    template = Template(template)
    text = template.text.replace(IMAGE_SLOT, payload if isinstance(payload, str)
                                 else json.dumps(payload))
    if template is Template.PC_SA:
        if prompt is None:
            raise ValueError("PC_SA template needs the generation prompt")
        text = text.replace(PROMPT_SLOT, prompt)
    return text


def _check_score(obj: dict, key: str, integer: bool) -> None:
    if key not in obj:
        raise SchemaError(f"missing key {key!r}")
    v = obj[key]
    ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok_type:
        raise SchemaError(f"{key!r} must be {'an integer' if integer else 'a number'}, got {v!r}")
    if not 0 <= v <= 5:
        raise SchemaError(f"{key!r}={v} outside 0..5")


def parse_reply(template: Template, reply: str) -> dict[str, Any]:
    """Parse a judge reply; anything besides a bare JSON object is rejected."""
    try:
        obj = json.loads(reply)
    except (json.JSONDecodeError, TypeError) as exc:
        raise SchemaError(f"reply is not bare JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise SchemaError("reply is not a JSON object")
    if Template(template) is Template.CPS:
        _check_score(obj, "score", integer=True)
        if not isinstance(obj.get("reason"), list):
            raise SchemaError("'reason' must be a list")
        return {"score": obj["score"], "reason": obj["reason"]}
    _check_score(obj, "prompt_correspondence", integer=False)
    _check_score(obj, "style_adherence", integer=False)
    return {k: obj[k] for k in ("prompt_correspondence", "style_adherence")}


Sender = Callable[[dict], str]


def http_sender(endpoint: str, token: str | None = None, timeout: float = 60.0,
                transport=None) -> Sender:
    """POST the request as JSON; the response text is the reply."""
    import httpx

    headers = {"Authorization": f"Bearer {token}"} if token else {}
    client = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def send(request: dict) -> str:
        try:
            resp = client.post(endpoint, json=request)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise VLMTransportError(f"request to {endpoint} failed: {exc}") from exc
        return resp.text

    return send


def score_one(send: Sender, template: Template, payload: Any, prompt: str | None,
              retries: int) -> VLMResult:
    request = {"prompt": render_prompt(template, payload, prompt), "payload": payload}
    result = VLMResult(valid=False)
    for _ in range(retries + 1):
        result.attempts += 1
        result.raw = send(request)
        try:
            result.scores = parse_reply(template, result.raw)
        except SchemaError as exc:
            result.errors.append(str(exc))
            continue
        result.valid = True
        break
    return result


def vlm_score(payloads: Sequence[Any], template: Template | str, endpoint: str | None = None,
              retries: int = DEFAULT_RETRIES, prompts: Sequence[str] | None = None,
              send: Sender | None = None, max_concurrency: int = 4) -> list[VLMResult]:
    """Score each payload; output order follows input order.

    ``send`` overrides the HTTP transport (recorded fixtures, tests). Without
    it, endpoint and token default to the environment variables.
    """
    template = Template(template)
    if retries < 0:
        raise ValueError("retries must be >= 0")
    if prompts is not None and len(prompts) != len(payloads):
        raise ValueError("prompts and payloads differ in length")
    if send is None:
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise VLMTransportError(f"no endpoint: set {ENDPOINT_ENV} or pass one")
        send = http_sender(endpoint, os.environ.get(TOKEN_ENV))
    prompts = list(prompts) if prompts is not None else [None] * len(payloads)
    jobs = list(zip(payloads, prompts))
    if max_concurrency <= 1 or len(jobs) <= 1:
        return [score_one(send, template, p, q, retries) for p, q in jobs]
    with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
        return list(pool.map(lambda job: score_one(send, template, job[0], job[1], retries),
                             jobs))


class FixtureSender:
    """Replays recorded replies keyed by payload, one per attempt, in order."""

    def __init__(self, replies: dict[str, Sequence[str]]):
        self._replies = {k: list(v) for k, v in replies.items()}
        self.requests: list[dict] = []

    @classmethod
    def from_file(cls, path) -> "FixtureSender":
        with open(path) as fh:
            return cls(json.load(fh))

    def __call__(self, request: dict) -> str:
        self.requests.append(request)
        key = request["payload"] if isinstance(request["payload"], str) \
            else json.dumps(request["payload"])
        queue = self._replies.get(key)
        if not queue:
            raise VLMTransportError(f"no recorded reply left for payload {key!r}")
        return queue.pop(0)
