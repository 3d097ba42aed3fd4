"""Three-stage multimodal-LLM dialogue that plans a composition.

Given an object cutout and a scene with a person, the protocol asks a
multimodal chat model three questions in sequence: (1) a one-sentence
interaction prompt, (2) the box where the object should land, (3) the wider
region covering the object plus every involved body part. A fourth query
asks which word of the prompt names the object, so downstream attention code
can find the object's text tokens.

Replies are free text. Box extraction takes the first bracketed group of
exactly four numbers, auto-divides pixel-valued replies (any value > 1.5) by
the scene dimensions, clamps to [0, 1], and rejects boxes that collapse to
zero area. Each stage gets a fixed attempt budget; retried instructions get
a format reminder appended. Failures surface as ProtocolError naming the
stage, never as raw parsing exceptions.

Clients are pluggable: a deterministic fixture-backed mock for tests and
offline runs, and a JSON-over-HTTP backend configured via environment
variables for real models.
"""

import base64
import dataclasses
import hashlib
import io
import json
import os
import re
import threading

import numpy as np
import requests

from .errors import DegenerateBoxError, GeometryError, ProtocolError, ValidationError
from .geometry import Box
from .records import to_uint8

STAGE_PROMPT = "stage1"
STAGE_OBJECT_BOX = "stage2"
STAGE_REGION = "stage3"
STAGE_SPAN = "span"

# Words skipped by the span fallback heuristic.
_STOPWORDS = frozenset(
    """a an the is are was were be being been am has have had do does did and or
    but with without of in on at to from for by as it its his her their this
    that he she they person man woman boy girl figure someone""".split()
)


@dataclasses.dataclass(frozen=True)
class PromptTemplates:
    """Instruction wording for each stage. Placeholders are str.format fields."""

    prompt_instruction: str = (
        "You see two images: first an object cutout, then a scene with a person. "
        "Write one short sentence describing the person interacting with the object. "
        "Mention the object by name. Reply with the sentence only."
    )
    object_box_instruction: str = (
        "You see two images: first an object cutout, then a scene with a person "
        "({width}x{height} pixels). Target caption: \"{prompt}\". "
        "Where should the object be placed in the scene so the caption holds? "
        "Reply with exactly four numbers in brackets, normalized to [0, 1]: "
        "[x0, y0, x1, y1]."
    )
    region_instruction: str = (
        "You see two images: first an object cutout, then a scene with a person "
        "({width}x{height} pixels). Caption: \"{prompt}\". The object will occupy "
        "[{x0:.4f}, {y0:.4f}, {x1:.4f}, {y1:.4f}]. Give the larger region covering "
        "the object and every body part involved in the interaction. "
        "Reply with exactly four numbers in brackets, normalized to [0, 1]: "
        "[x0, y0, x1, y1]."
    )
    span_instruction: str = (
        "Caption: \"{prompt}\". Which word or short phrase in the caption names "
        "the object shown in the first image? Reply with that exact text only."
    )
    retry_suffix: str = (
        " Your previous reply could not be used. Respond only with the requested "
        "format, e.g. [0.10, 0.20, 0.55, 0.70] for boxes."
    )


@dataclasses.dataclass
class InteractionSpec:
    """Planned composition: prompt, object placement, interaction region, span."""

    prompt: str
    object_box: Box
    interaction_region: Box
    foreground_span: tuple

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValidationError("interaction prompt must be non-empty")
        start, end = self.foreground_span
        if not (0 <= start < end <= len(self.prompt)):
            raise ValidationError(
                f"foreground span {self.foreground_span} out of bounds for prompt"
            )
        self.foreground_span = (int(start), int(end))

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "object_box": self.object_box.as_list(),
            "interaction_region": self.interaction_region.as_list(),
            "foreground_span": list(self.foreground_span),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InteractionSpec":
        return cls(
            prompt=data["prompt"],
            object_box=Box.from_list(data["object_box"]),
            interaction_region=Box.from_list(data["interaction_region"]),
            foreground_span=tuple(data["foreground_span"]),
        )


@dataclasses.dataclass
class TraceEvent:
    """One client exchange, kept for debugging only."""

    stage: str
    attempt: int
    retry_count: int
    instruction_digest: str
    reply: str
    ok: bool
    error: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def instruction_digest(instruction: str) -> str:
    return hashlib.sha256(instruction.encode("utf-8")).hexdigest()


class MockMllmClient:
    """Deterministic client answering from a fixture mapping.

    Fixture keys are tried in order: the sha256 hex digest of the exact
    instruction, the stage keyword the instruction was built for (detected
    by marker substrings), then ``"default"``. Missing everything raises,
    which the protocol converts into a stage-level failure.
    """

    def __init__(self, fixtures: dict):
        self.fixtures = dict(fixtures)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str) -> "MockMllmClient":
        with open(path, encoding="utf-8") as fh:
            if path.endswith((".yml", ".yaml")):
                import yaml

                data = yaml.safe_load(fh)
            else:
                data = json.load(fh)
        if not isinstance(data, dict):
            raise ValidationError(f"fixture file {path} must hold a mapping")
        return cls(data)

    @staticmethod
    def _stage_of(instruction: str) -> str:
        if "names the object" in instruction:
            return STAGE_SPAN
        if "larger region" in instruction:
            return STAGE_REGION
        if "Where should the object" in instruction:
            return STAGE_OBJECT_BOX
        return STAGE_PROMPT

    def query(self, images, instruction: str) -> str:
        with self._lock:
            digest = instruction_digest(instruction)
            for key in (digest, self._stage_of(instruction), "default"):
                if key in self.fixtures:
                    return str(self.fixtures[key])
        raise KeyError(f"no fixture for instruction digest {digest[:12]}")


class CannedSequenceClient:
    """Replies from a fixed list, in order. Handy for fault-injection tests."""

    def __init__(self, replies):
        self._replies = list(replies)
        self._lock = threading.Lock()
        self.calls = []

    def query(self, images, instruction: str) -> str:
        with self._lock:
            self.calls.append(instruction)
            if not self._replies:
                raise KeyError("canned replies exhausted")
            return self._replies.pop(0)


class HttpMllmClient:
    """JSON-over-HTTP chat-completions backend with an on-disk reply cache.

    Endpoint, key, and model come from arguments or the environment
    (INTERCOMP_MLLM_ENDPOINT / INTERCOMP_MLLM_API_KEY / INTERCOMP_MLLM_MODEL).
    Images travel as base64 PNG data URIs. Replies are cached by the hash of
    (image bytes, instruction) so reruns are free and deterministic.
    """

    def __init__(
        self,
        endpoint: str = None,
        api_key: str = None,
        model: str = None,
        temperature: float = 0.0,
        cache_dir: str = None,
        timeout: float = 60.0,
        post_fn=None,
    ):
        self.endpoint = endpoint or os.environ.get("INTERCOMP_MLLM_ENDPOINT", "")
        self.api_key = api_key or os.environ.get("INTERCOMP_MLLM_API_KEY", "")
        self.model = model or os.environ.get("INTERCOMP_MLLM_MODEL", "")
        self.temperature = temperature
        self.cache_dir = cache_dir
        self.timeout = timeout
        self._post = post_fn or requests.post
        self._lock = threading.Lock()
        if not self.endpoint:
            raise ValidationError(
                "no MLLM endpoint configured (set INTERCOMP_MLLM_ENDPOINT)"
            )

    @staticmethod
    def _encode_image(image: np.ndarray) -> bytes:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def build_payload(self, images, instruction: str) -> dict:
        content = []
        for image in images:
            data = base64.b64encode(self._encode_image(image)).decode("ascii")
            content.append(
                {
                    "type": "image_url",
                    "image_url": {"url": f"data:image/png;base64,{data}"},
                }
            )
        content.append({"type": "text", "text": instruction})
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": content}],
        }

    def _cache_key(self, images, instruction: str) -> str:
        h = hashlib.sha256()
        for image in images:
            h.update(self._encode_image(image))
        h.update(instruction.encode("utf-8"))
        return h.hexdigest()

    def query(self, images, instruction: str) -> str:
        key = self._cache_key(images, instruction)
        if self.cache_dir:
            path = os.path.join(self.cache_dir, key + ".txt")
            if os.path.exists(path):
                with open(path, encoding="utf-8") as fh:
                    return fh.read()
        payload = self.build_payload(images, instruction)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = self._post(
            self.endpoint, json=payload, headers=headers, timeout=self.timeout
        )
        resp.raise_for_status()
        body = resp.json()
        try:
            reply = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(
                "unexpected response shape from MLLM endpoint", raw=str(body)[:500]
            ) from exc
        if self.cache_dir:
            os.makedirs(self.cache_dir, exist_ok=True)
            with self._lock:
                with open(
                    os.path.join(self.cache_dir, key + ".txt"), "w", encoding="utf-8"
                ) as fh:
                    fh.write(reply)
        return reply


def strip_reply(text: str) -> str:
    """Trim whitespace and one layer of matching straight quotes."""
    out = str(text).strip()
    for quote in ('"', "'"):
        if len(out) >= 2 and out.startswith(quote) and out.endswith(quote):
            out = out[1:-1].strip()
            break
    return out


_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_BRACKET_GROUP = re.compile(r"\[([^\[\]]*)\]")
_NUMBER_RE = re.compile(_NUMBER)


def extract_box(text: str, image_size: tuple = None) -> Box:
    """Pull the first bracketed 4-number group out of free text as a Box.

    ``image_size`` is (height, width) of the scene; when any parsed value
    exceeds 1.5 the reply is treated as pixel coordinates and divided
    through by those dimensions. Values are clamped to [0, 1] afterwards.
    """
    raw = str(text)
    for group in _BRACKET_GROUP.finditer(raw):
        numbers = _NUMBER_RE.findall(group.group(1))
        if len(numbers) != 4:
            continue
        try:
            vals = [float(n) for n in numbers]
        except (ValueError, OverflowError):
            continue
        if not all(np.isfinite(v) for v in vals):
            continue
        if max(vals) > 1.5:
            if image_size is None:
                raise ProtocolError(
                    "pixel-valued box reply but no image size to normalize by",
                    raw=raw[:200],
                )
            h, w = image_size
            vals = [vals[0] / w, vals[1] / h, vals[2] / w, vals[3] / h]
        vals = [min(max(v, 0.0), 1.0) for v in vals]
        x0, y0, x1, y1 = vals
        if x0 >= x1 or y0 >= y1:
            raise DegenerateBoxError(
                f"box collapsed after clamping: {vals}", raw=raw[:200]
            )
        try:
            return Box(x0, y0, x1, y1)
        except GeometryError as exc:
            raise DegenerateBoxError(str(exc), raw=raw[:200]) from exc
    raise ProtocolError("no bracketed 4-number group in reply", raw=raw[:200])


def _image_size(background: np.ndarray) -> tuple:
    arr = np.asarray(background)
    if arr.ndim < 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"background image is empty: shape {arr.shape}")
    return arr.shape[0], arr.shape[1]


def query_prompt(client, foreground, background, templates: PromptTemplates) -> str:
    """Stage one: ask for the interaction sentence."""
    _image_size(foreground)
    _image_size(background)
    reply = client.query([foreground, background], templates.prompt_instruction)
    prompt = strip_reply(reply)
    if not prompt:
        raise ProtocolError("empty prompt reply", stage=STAGE_PROMPT, raw=str(reply)[:200])
    return prompt


def query_object_box(
    client, foreground, background, prompt: str, templates: PromptTemplates
) -> Box:
    """Stage two: ask where the object should land."""
    h, w = _image_size(background)
    instruction = templates.object_box_instruction.format(
        prompt=prompt, width=w, height=h
    )
    reply = client.query([foreground, background], instruction)
    try:
        return extract_box(reply, image_size=(h, w))
    except ProtocolError as exc:
        exc.stage = exc.stage or STAGE_OBJECT_BOX
        raise


def query_interaction_region(
    client, foreground, background, prompt: str, object_box: Box, templates: PromptTemplates
) -> Box:
    """Stage three: ask for the wider region including involved body parts."""
    h, w = _image_size(background)
    instruction = templates.region_instruction.format(
        prompt=prompt,
        width=w,
        height=h,
        x0=object_box.x0,
        y0=object_box.y0,
        x1=object_box.x1,
        y1=object_box.y1,
    )
    reply = client.query([foreground, background], instruction)
    try:
        return extract_box(reply, image_size=(h, w))
    except ProtocolError as exc:
        exc.stage = exc.stage or STAGE_REGION
        raise


def fallback_span(prompt: str) -> tuple:
    """Longest non-stopword token; last occurrence wins ties (objects tend to
    sit at the end of \"person does X with OBJECT\" sentences)."""
    best = None
    for match in re.finditer(r"[A-Za-z][A-Za-z'-]*", prompt):
        word = match.group(0)
        if word.lower() in _STOPWORDS:
            continue
        if best is None or len(word) >= len(best.group(0)):
            best = match
    if best is None:
        return (0, len(prompt))
    return (best.start(), best.end())


def query_foreground_span(
    client, foreground, background, prompt: str, templates: PromptTemplates
) -> tuple:
    """Fourth query: which word(s) of the prompt name the object.

    The reply is located as a case-insensitive substring of the prompt.
    Any failure falls back to the longest non-stopword token.
    """
    instruction = templates.span_instruction.format(prompt=prompt)
    try:
        reply = strip_reply(client.query([foreground, background], instruction))
    except Exception:
        return fallback_span(prompt)
    if reply:
        idx = prompt.lower().find(reply.lower())
        if idx >= 0:
            return (idx, idx + len(reply))
    return fallback_span(prompt)


def propose_interaction(
    client,
    foreground,
    background,
    templates: PromptTemplates = None,
    retries: int = 2,
    trace: list = None,
) -> InteractionSpec:
    """Run the full dialogue and return the plan.

    ``retries`` is the attempt budget per stage (>= 1); retried instructions
    carry the template's reinforcement suffix. ``trace`` (a list, if given)
    collects one TraceEvent per client exchange.
    """
    if retries < 1:
        raise ValidationError("retries (attempt budget) must be >= 1")
    templates = templates or PromptTemplates()

    def attempt_stage(stage: str, fn):
        last_exc = None
        for attempt in range(retries):
            try:
                value, instruction, reply = fn(attempt)
            except ProtocolError as exc:
                last_exc = exc
                _trace(stage, attempt, exc.raw or "", False, str(exc))
                continue
            except Exception as exc:  # client transport failures
                last_exc = exc
                _trace(stage, attempt, "", False, f"{type(exc).__name__}: {exc}")
                continue
            _trace(stage, attempt, reply, True, "", instruction)
            return value
        raise ProtocolError(
            f"{stage} failed after {retries} attempt(s): {last_exc}",
            stage=stage,
            raw=getattr(last_exc, "raw", None),
        )

    def _trace(stage, attempt, reply, ok, error, instruction=""):
        if trace is not None:
            trace.append(
                TraceEvent(
                    stage=stage,
                    attempt=attempt,
                    retry_count=attempt,
                    instruction_digest=instruction_digest(instruction) if instruction else "",
                    reply=str(reply)[:500],
                    ok=ok,
                    error=error,
                )
            )

    def with_retry_suffix(base_templates, attempt):
        if attempt == 0:
            return base_templates
        return dataclasses.replace(
            base_templates,
            prompt_instruction=base_templates.prompt_instruction + base_templates.retry_suffix,
            object_box_instruction=base_templates.object_box_instruction + base_templates.retry_suffix,
            region_instruction=base_templates.region_instruction + base_templates.retry_suffix,
        )

    def stage1(attempt):
        tpl = with_retry_suffix(templates, attempt)
        value = query_prompt(client, foreground, background, tpl)
        return value, tpl.prompt_instruction, value

    prompt = attempt_stage(STAGE_PROMPT, stage1)

    def stage2(attempt):
        tpl = with_retry_suffix(templates, attempt)
        value = query_object_box(client, foreground, background, prompt, tpl)
        return value, tpl.object_box_instruction, str(value.as_list())

    object_box = attempt_stage(STAGE_OBJECT_BOX, stage2)

    def stage3(attempt):
        tpl = with_retry_suffix(templates, attempt)
        value = query_interaction_region(
            client, foreground, background, prompt, object_box, tpl
        )
        return value, tpl.region_instruction, str(value.as_list())

    region = attempt_stage(STAGE_REGION, stage3)

    span = query_foreground_span(client, foreground, background, prompt, templates)
    if trace is not None:
        trace.append(
            TraceEvent(
                stage=STAGE_SPAN,
                attempt=0,
                retry_count=0,
                instruction_digest="",
                reply=prompt[span[0] : span[1]],
                ok=True,
            )
        )
    return InteractionSpec(
        prompt=prompt,
        object_box=object_box,
        interaction_region=region,
        foreground_span=span,
    )


def write_trace(trace: list, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for event in trace:
            fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
