"""Text triplet production: a deterministic edit grammar and a remote-LLM client.

The grammar path needs no network and is a pure function of (caption, rules,
seed); it powers tests and desk-scale runs. The LLM path treats the endpoint
as an opaque completion service behind an injectable transport, so everything
above the socket is testable offline.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from .errors import (
    BadRangeError,
    ConfigError,
    InvariantViolationError,
    MalformedResponseError,
    NoRuleAppliesError,
    TransportError,
)
from .store import TextTriplet
from .tensor import Pcg32

API_KEY_ENV = "SCOT_LLM_API_KEY"
MAX_TEXT_LEN = 512

REPLACE = "replace"
INSERT_BEFORE = "insert_before"
DELETE = "delete"
_MODES = (REPLACE, INSERT_BEFORE, DELETE)

# which template slots each rewrite mode must fill
_REQUIRED_SLOTS = {
    REPLACE: ("{old}", "{new}"),
    INSERT_BEFORE: ("{new}",),
    DELETE: ("{old}",),
}


@dataclass(frozen=True)
class GrammarRule:
    """One edit family: where it applies, what it swaps in, how it rewrites."""

    name: str
    matches: Callable[[str], bool]
    pool: tuple[str, ...]
    mod_template: str
    mode: str = REPLACE

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise ConfigError(f"rule {self.name!r}: unknown mode {self.mode!r}")
        if not self.pool:
            raise ConfigError(f"rule {self.name!r}: empty substitution pool")
        for slot in _REQUIRED_SLOTS[self.mode]:
            if slot not in self.mod_template:
                raise ConfigError(f"rule {self.name!r}: template missing {slot}")


COLORS = (
    "red", "blue", "green", "black", "white", "yellow",
    "purple", "orange", "pink", "brown", "gray",
)
OBJECTS = (
    "dress", "shirt", "skirt", "jacket", "coat",
    "sweater", "hat", "bag", "scarf", "sofa",
)
ATTRIBUTES = (
    "sleeveless", "striped", "floral", "long",
    "short", "shiny", "plain", "fitted",
)

DEFAULT_RULES = (
    GrammarRule(
        name="color_swap",
        matches=lambda tok: tok in COLORS,
        pool=COLORS,
        mod_template="change the color from {old} to {new}",
        mode=REPLACE,
    ),
    GrammarRule(
        name="object_swap",
        matches=lambda tok: tok in OBJECTS,
        pool=OBJECTS,
        mod_template="replace the {old} with a {new}",
        mode=REPLACE,
    ),
    GrammarRule(
        name="attribute_add",
        matches=lambda tok: tok in OBJECTS,
        pool=ATTRIBUTES,
        mod_template="make it {new}",
        mode=INSERT_BEFORE,
    ),
    GrammarRule(
        name="attribute_remove",
        matches=lambda tok: tok in COLORS or tok in ATTRIBUTES,
        pool=("unused",),
        mod_template="remove the {old}",
        mode=DELETE,
    ),
)


@dataclass(frozen=True)
class AppliedEdit:
    """A concrete edit decision; materializing it is pure string work."""

    rule: GrammarRule
    position: int  # token index the rule fires on
    old: str
    new: str | None  # None for deletions


def apply_rule(edit: AppliedEdit, caption: str) -> str:
    """Rewrite the caption per the edit; the single source of u."""
    tokens = caption.split()
    if edit.rule.mode == REPLACE:
        tokens[edit.position] = edit.new
    elif edit.rule.mode == INSERT_BEFORE:
        tokens.insert(edit.position, edit.new)
    else:
        del tokens[edit.position]
    return " ".join(tokens)


def _candidate_edits(caption: str, rule: GrammarRule) -> list[tuple[int, str]]:
    tokens = caption.split()
    hits = [(i, tok) for i, tok in enumerate(tokens) if rule.matches(tok)]
    if rule.mode == DELETE and len(tokens) <= 1:
        return []  # deleting the only token leaves an empty caption
    return hits


def plan_edit(caption: str, rules, rng: Pcg32) -> AppliedEdit:
    """Pick one applicable rule and its substitution, seeded by `rng`.

    The first matching token of the chosen rule is edited; replacements
    never re-use the matched token, and rules whose pool offers nothing
    fresh are treated as non-matching.
    """
    if not caption.strip():
        raise NoRuleAppliesError("empty caption")
    options: list[tuple[GrammarRule, int, str, tuple[str, ...] | None]] = []
    for rule in rules:
        hits = _candidate_edits(caption, rule)
        if not hits:
            continue
        position, old = hits[0]
        if rule.mode == DELETE:
            options.append((rule, position, old, None))
            continue
        fresh = tuple(p for p in rule.pool if p != old)
        if not fresh:
            continue
        options.append((rule, position, old, fresh))
    if not options:
        raise NoRuleAppliesError(f"no rule applies to caption {caption!r}")
    rule, position, old, fresh = options[int(rng.uniform(0, len(options)))]
    new = None if fresh is None else fresh[int(rng.uniform(0, len(fresh)))]
    return AppliedEdit(rule=rule, position=position, old=old, new=new)


def _triplet_id(prefix: str, caption: str) -> str:
    digest = hashlib.sha256(caption.encode("utf-8")).hexdigest()[:12]
    return f"{prefix}-{digest}"


def gen_template_triplet(caption: str, rules, rng: Pcg32) -> TextTriplet:
    """Apply exactly one grammar rule to the caption.

    Pure in (caption, rules, rng state): reseeding reproduces the triplet.
    """
    edit = plan_edit(caption, rules, rng)
    modification = edit.rule.mod_template.format(old=edit.old, new=edit.new)
    return TextTriplet(
        id=_triplet_id("tpl", caption),
        caption=caption,
        modification=modification,
        modified_caption=apply_rule(edit, caption),
    )


def validate_triplet(caption: str, modification: str, modified_caption: str) -> str | None:
    """Rejection reason, or None when the texts form a usable triplet."""
    for name, text in (
        ("caption", caption),
        ("modification", modification),
        ("modified caption", modified_caption),
    ):
        if not text:
            return f"empty {name}"
        if len(text) > MAX_TEXT_LEN:
            return f"{name} exceeds {MAX_TEXT_LEN} characters"
    if modified_caption == caption:
        return "modified caption equals the original"
    return None


@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str
    model_name: str
    prompt_template: str
    timeout: float = 30.0
    max_retries: int = 3
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if "{caption}" not in self.prompt_template:
            raise ConfigError("prompt_template missing {caption} slot")
        if self.timeout <= 0:
            raise BadRangeError(f"timeout={self.timeout} must be > 0")
        if self.max_retries < 0:
            raise BadRangeError(f"max_retries={self.max_retries} must be >= 0")


def http_transport(url: str, body: dict, headers: dict[str, str], timeout: float):
    """POST JSON, return the decoded JSON response body."""
    req = urllib.request.Request(
        url,
        data=json.dumps(body).encode("utf-8"),
        headers={"Content-Type": "application/json", **headers},
        method="POST",
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(f"request to {url} failed: {exc}") from exc
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedResponseError(f"response is not JSON: {exc}") from exc


def llm_generate(
    caption: str,
    cfg: LlmEndpointConfig,
    transport=http_transport,
    sleep=time.sleep,
) -> TextTriplet:
    """Ask the endpoint for one edit of `caption` and validate the reply.

    Transport failures retry with exponential backoff (1s, 2s, ...) up to
    max_retries; malformed or invalid responses fail immediately.
    """
    if not caption:
        raise InvariantViolationError("empty caption")
    body = {
        "model": cfg.model_name,
        "prompt": cfg.prompt_template.format(caption=caption),
        "temperature": cfg.temperature,
    }
    headers: dict[str, str] = {}
    api_key = os.environ.get(API_KEY_ENV)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    attempt = 0
    while True:
        try:
            payload = transport(cfg.base_url, body, headers, cfg.timeout)
            break
        except TransportError:
            if attempt >= cfg.max_retries:
                raise
            sleep(float(2**attempt))
            attempt += 1

    if not isinstance(payload, dict):
        raise MalformedResponseError(f"expected a JSON object, got {type(payload).__name__}")
    fields = {}
    for key in ("modification", "modified_caption"):
        value = payload.get(key)
        if not isinstance(value, str):
            raise MalformedResponseError(f"response field {key!r} missing or not a string")
        fields[key] = value
    reason = validate_triplet(caption, fields["modification"], fields["modified_caption"])
    if reason is not None:
        raise InvariantViolationError(f"endpoint produced an invalid triplet: {reason}")
    return TextTriplet(
        id=_triplet_id("llm", caption),
        caption=caption,
        modification=fields["modification"],
        modified_caption=fields["modified_caption"],
    )


def llm_generate_bulk(
    captions,
    cfg: LlmEndpointConfig,
    transport=http_transport,
    sleep=time.sleep,
    max_in_flight: int = 4,
) -> list[TextTriplet]:
    """Generate triplets for many captions, results in input order."""
    captions = list(captions)
    if max_in_flight < 1:
        raise BadRangeError(f"max_in_flight={max_in_flight} must be >= 1")
    if not captions:
        return []
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(
            pool.map(lambda c: llm_generate(c, cfg, transport=transport, sleep=sleep), captions)
        )
