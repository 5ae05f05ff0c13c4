"""Class prompt grammar, LLM instruction building, parsing and fallback generation.

Prompts follow the shape::

    a photo of a|an [adjective] TOKEN [preposition [article] [weather] [location]] [time of day]

where every bracketed part is optional. A prepositional group must carry a
weather word, a location, or both.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
import re
from dataclasses import asdict, dataclass
from typing import Iterable, Literal, Protocol, Sequence

import numpy as np

from diagen.core import TransportError, atomic_write_text

log = logging.getLogger(__name__)

SLOTS = ("adjective", "preposition", "weather", "location", "time_of_day")
Mode = Literal["strict", "lenient"]

INSTRUCTION_TEMPLATE = (
    "Create prompts for me that have the following structure:\n"
    '"a photo of a [adjective] <classname> [location and/or weather preposition] [weather] [location] '
    '[time of day with preposition]"\n'
    "The <classname> is replaced with the actual classname, e.g. 'car'\n"
    "All the attributes in [..] are optionals. This means example prompts for car could be:\n"
    "'a photo of a red car' (adjective optional)\n"
    "'a photo of a car on a road' (location optional)\n"
    "'a photo of a car in snow' (weather optional)\n"
    "'a photo of a car at night' (time of day optional)\n"
    "'a photo of a huge car in a tunnel' (adjective and location optionals)\n"
    "'a photo of a green car on a foggy bridge at daytime' (all optionals)\n"
    "'a photo of a car' (no optional)\n"
    "If you use adjectives, they should be visual. So don't use something like 'interesting'.\n"
    "Also vary the number of optionals that you use.\n"
    "Can you give me {num_prompts} prompts of this structure for class {name} please."
)


class PromptError(ValueError):
    pass


class LexiconTooSmall(PromptError):
    pass


@dataclass(frozen=True)
class PromptGrammar:
    adjectives: tuple[str, ...]
    prepositions: tuple[str, ...]
    weathers: tuple[str, ...]
    locations: tuple[str, ...]
    times_of_day: tuple[str, ...]

    def __post_init__(self) -> None:
        for name in ("adjectives", "prepositions", "weathers", "locations", "times_of_day"):
            entries = tuple(e.strip().lower() for e in getattr(self, name))
            if any(not e or "<" in e or ">" in e for e in entries):
                raise PromptError(f"{name}: entries must be nonempty and free of placeholder tokens")
            object.__setattr__(self, name, entries)


DEFAULT_GRAMMAR = PromptGrammar(
    adjectives=(
        "red", "green", "blue", "yellow", "black", "white", "silver", "orange",
        "huge", "tiny", "rusty", "shiny", "striped", "colorful", "antique",
        "fluffy", "wooden", "dusty", "glossy", "pale",
    ),
    prepositions=(
        "on", "in", "near", "under", "beside", "behind", "next to", "in front of",
        "inside", "across", "along", "above", "below", "by", "over",
    ),
    weathers=(
        "foggy", "snowy", "rainy", "sunny", "misty", "stormy", "cloudy", "frosty",
        "hazy", "icy", "wet", "windy", "overcast", "muddy", "dry",
    ),
    locations=(
        "road", "bridge", "tunnel", "street", "beach", "forest", "field", "parking lot",
        "city", "mountain", "lake", "desert", "garden", "table", "river", "market",
    ),
    times_of_day=(
        "at night", "at daytime", "at dawn", "at dusk", "at sunset", "at sunrise", "at noon",
        "at midnight", "in the morning", "in the afternoon", "in the evening",
        "during the day", "during twilight", "at golden hour", "at first light",
    ),
)


@dataclass(frozen=True)
class ClassPrompt:
    id: str
    class_label: str
    text: str
    slots_used: tuple[str, ...] = ()
    origin: Literal["llm", "fallback"] = "fallback"


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    slots_used: frozenset[str] = frozenset()
    reasons: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


# ---------------------------------------------------------------------------
# validation


def _alternation(entries: Iterable[str]) -> str:
    # Longest first so "in front of" is tried before "in".
    return "|".join(re.escape(e) for e in sorted(set(entries), key=len, reverse=True))


def _strict_tail_pattern(grammar: PromptGrammar) -> str:
    return (
        rf"(?: (?P<preposition>{_alternation(grammar.prepositions)})"
        r"(?: (?:a|an|the))?"
        rf"(?: (?P<weather>{_alternation(grammar.weathers)}))?"
        rf"(?: (?P<location>{_alternation(grammar.locations)}))?)?"
        rf"(?: (?P<time_of_day>{_alternation(grammar.times_of_day)}))?"
    )


_PREFIX = re.compile(r"^a photo of (?:a|an) ", re.IGNORECASE)
_WORDS = r"[a-z0-9'\-]+(?: [a-z0-9'\-]+)*"
_LENIENT_TOD = re.compile(
    r"(?:^| )(?P<tod>(?:at|during|by) (?:the )?[a-z\-]+(?: hour| light)?|in the (?:morning|afternoon|evening))$"
)


def _match_strict(body: str, token: str, grammar: PromptGrammar) -> re.Match[str] | None:
    pattern = (
        rf"^a photo of (?:a|an) (?:(?P<adjective>{_alternation(grammar.adjectives)}) )?"
        + re.escape(token)
        + _strict_tail_pattern(grammar)
        + "$"
    )
    return re.match(pattern, body, re.IGNORECASE)


def validate_prompt(
    text: str,
    token: str,
    grammar: PromptGrammar = DEFAULT_GRAMMAR,
    mode: Mode = "lenient",
) -> ValidationResult:
    """Check a prompt against the template.

    Strict mode requires every slot word to come from ``grammar``; lenient
    mode checks the skeleton and token placement and accepts any words in
    the optional slots.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"unknown validation mode {mode!r}")
    reasons: list[str] = []
    body = " ".join(text.strip().split())
    if not _PREFIX.match(body):
        reasons.append("missing article prefix 'a photo of a|an'")
    count = body.count(token) if token else 0
    if count == 0:
        reasons.append("class token missing")
    elif count > 1:
        reasons.append("duplicate token")
    if reasons:
        return ValidationResult(False, reasons=tuple(reasons))

    m = _match_strict(body, token, grammar)
    if m is not None:
        used = frozenset(s for s in SLOTS if m.group(s))
        # a bare preposition is not a complete slot group
        if not ("preposition" in used and not used & {"weather", "location"}):
            return ValidationResult(True, used)
    if mode == "strict":
        return ValidationResult(False, reasons=("slot words or order do not match the lexicon grammar",))

    head, _, tail = body.partition(token)
    adjective = _PREFIX.sub("", head).strip()
    tail = tail.strip()
    if adjective and not re.fullmatch(_WORDS, adjective, re.IGNORECASE):
        return ValidationResult(False, reasons=("adjective slot contains non-word characters",))
    if tail and not re.fullmatch(_WORDS, tail.replace(",", ""), re.IGNORECASE):
        return ValidationResult(False, reasons=("trailing slots contain non-word characters",))
    used = set()
    if adjective:
        used.add("adjective")
    if tail:
        tod = _LENIENT_TOD.search(tail.lower())
        if tod:
            used.add("time_of_day")
            tail = tail[: tod.start("tod")].strip()
        if tail:
            used.update(("preposition", "location"))
    return ValidationResult(True, frozenset(used))


def _ordered_slots(slots: Iterable[str]) -> tuple[str, ...]:
    s = set(slots)
    return tuple(x for x in SLOTS if x in s)


# ---------------------------------------------------------------------------
# LLM instruction and parsing


def build_llm_instruction(class_label: str, num_prompts: int) -> str:
    if not class_label or not class_label.strip():
        raise PromptError("class_label must be nonempty")
    if num_prompts < 1:
        raise PromptError(f"num_prompts must be positive, got {num_prompts}")
    return INSTRUCTION_TEMPLATE.format(num_prompts=num_prompts, name=class_label)


_LIST_MARKER = re.compile(r"^\s*(?:\(?\d+[.):]|[-*•])\s*")
_QUOTES = "\"'`‘’“”"


def _clean_line(line: str) -> str:
    line = _LIST_MARKER.sub("", line.strip())
    line = line.strip().strip(_QUOTES).strip()
    # Trailing annotations such as "(all optionals)" and sentence punctuation.
    line = re.sub(r"\s*\([^)]*\)\s*$", "", line)
    line = line.rstrip(".!;").strip().strip(_QUOTES).strip()
    return line


def prompt_id(class_label: str, index: int) -> str:
    return f"{class_label}/p{index}"


def parse_llm_response(
    raw: str,
    class_label: str,
    token: str,
    grammar: PromptGrammar = DEFAULT_GRAMMAR,
    mode: Mode = "lenient",
) -> list[ClassPrompt]:
    """Extract the valid prompts from a free-text LLM answer, in answer order."""
    name = re.compile(r"(?<![\w<])" + re.escape(class_label) + r"(?![\w>])", re.IGNORECASE)
    prompts: list[ClassPrompt] = []
    seen: set[str] = set()
    for line in raw.splitlines():
        candidate = _clean_line(line)
        if not candidate.lower().startswith("a photo of"):
            continue
        candidate = candidate[0].lower() + candidate[1:]
        if token not in candidate:
            candidate = name.sub(token, candidate)
        result = validate_prompt(candidate, token, grammar, mode)
        if not result.ok or candidate in seen:
            continue
        seen.add(candidate)
        prompts.append(
            ClassPrompt(
                id=prompt_id(class_label, len(prompts)),
                class_label=class_label,
                text=candidate,
                slots_used=_ordered_slots(result.slots_used),
                origin="llm",
            )
        )
    return prompts


# ---------------------------------------------------------------------------
# fallback grammar generator

# Slot sets the generator realises, keyed by size. A prepositional group always
# carries a location; weather words in the lexicon are adjectival.
_SLOT_SETS: dict[int, list[tuple[str, ...]]] = {}
for _adj in (False, True):
    for _tod in (False, True):
        for _group in ((), ("preposition", "location"), ("preposition", "weather", "location")):
            _s = _ordered_slots((("adjective",) if _adj else ()) + (("time_of_day",) if _tod else ()) + _group)
            _SLOT_SETS.setdefault(len(_s), []).append(_s)
del _adj, _tod, _group, _s


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def realize(token: str, words: dict[str, str]) -> str:
    """Render a prompt from chosen slot words."""
    lead = words.get("adjective", token)
    parts = [f"a photo of {_article(lead)}"]
    if "adjective" in words:
        parts.append(words["adjective"])
    parts.append(token)
    if "preposition" in words:
        parts.append(words["preposition"])
        nxt = words.get("weather") or words["location"]
        parts.append(_article(nxt))
        if "weather" in words:
            parts.append(words["weather"])
        parts.append(words["location"])
    if "time_of_day" in words:
        parts.append(words["time_of_day"])
    return " ".join(parts)


def _capacity(grammar: PromptGrammar) -> int:
    a, p, w, l, t = (
        len(grammar.adjectives),
        len(grammar.prepositions),
        len(grammar.weathers),
        len(grammar.locations),
        len(grammar.times_of_day),
    )
    return (1 + a) * (1 + t) * (1 + p * l * (1 + w))


def _size_schedule(n: int, rng: np.random.Generator) -> list[int]:
    # The skeleton (size 0, unique by construction) and a one-optional prompt
    # come first, then shuffled rounds over sizes 1..5.
    sizes = [0, 1]
    pool = sorted(_SLOT_SETS)[1:]
    while len(sizes) < n:
        round_ = list(pool)
        rng.shuffle(round_)
        sizes.extend(round_)
    return sizes[:n]


def _all_realizations(token: str, lexicon: dict[str, tuple[str, ...]]):
    for size in sorted(_SLOT_SETS):
        for slot_set in _SLOT_SETS[size]:
            for combo in itertools.product(*(lexicon[s] for s in slot_set)):
                words = dict(zip(slot_set, combo))
                yield slot_set, realize(token, words)


def generate_prompts_fallback(
    class_label: str,
    token: str,
    num_prompts: int,
    seed: int,
    grammar: PromptGrammar = DEFAULT_GRAMMAR,
    exclude: Iterable[str] = (),
) -> list[ClassPrompt]:
    """Sample ``num_prompts`` distinct prompts from the grammar, deterministically in ``seed``.

    The first prompt is always the bare skeleton and the second uses exactly
    one optional; the rest cycle through optional counts one to five in
    seeded order. Texts listed in
    ``exclude`` are never produced (used when topping up LLM output).
    """
    if num_prompts < 1:
        raise PromptError(f"num_prompts must be positive, got {num_prompts}")
    excluded = set(exclude)
    if num_prompts + len(excluded) > _capacity(grammar):
        raise LexiconTooSmall(
            f"lexicon yields at most {_capacity(grammar)} distinct prompts, {num_prompts} requested"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    sizes = _size_schedule(num_prompts, rng)
    lexicon = {
        "adjective": grammar.adjectives,
        "preposition": grammar.prepositions,
        "weather": grammar.weathers,
        "location": grammar.locations,
        "time_of_day": grammar.times_of_day,
    }
    texts: set[str] = set(excluded)
    prompts: list[ClassPrompt] = []
    max_attempts = 200
    for size in sizes:
        if size == 0 and realize(token, {}) in texts:
            size = 1
        for _ in range(max_attempts):
            slot_set = _SLOT_SETS[size][int(rng.integers(len(_SLOT_SETS[size])))]
            words = {s: lexicon[s][int(rng.integers(len(lexicon[s])))] for s in slot_set}
            text = realize(token, words)
            if text not in texts:
                break
        else:
            # Sampling stalled on a small lexicon: take the unused realisation
            # whose optional count is closest to the target.
            fresh = [(ss, t) for ss, t in _all_realizations(token, lexicon) if t not in texts]
            if not fresh:
                raise LexiconTooSmall(f"lexicon exhausted after {len(prompts)} prompts for {class_label!r}")
            best = min(abs(len(ss) - size) for ss, _ in fresh)
            fresh = [(ss, t) for ss, t in fresh if abs(len(ss) - size) == best]
            slot_set, text = fresh[int(rng.integers(len(fresh)))]
        texts.add(text)
        prompts.append(
            ClassPrompt(
                id=prompt_id(class_label, len(prompts)),
                class_label=class_label,
                text=text,
                slots_used=slot_set,
                origin="fallback",
            )
        )
    return prompts


# ---------------------------------------------------------------------------
# text-to-text client and the combined request path


class TextClient(Protocol):
    def complete(self, instruction: str, seed: int) -> str: ...


@dataclass
class HttpTextClient:
    """Client for ``POST {endpoint}/v1/complete``."""

    endpoint: str
    timeout: float = 120.0
    session: object | None = None

    def complete(self, instruction: str, seed: int) -> str:
        import requests

        http = self.session or requests
        url = self.endpoint.rstrip("/") + "/v1/complete"
        try:
            resp = http.post(url, json={"instruction": instruction, "seed": int(seed)}, timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise TransportError(f"{url}: {exc}") from exc
        text = payload.get("text") if isinstance(payload, dict) else None
        if not isinstance(text, str):
            raise TransportError(f"{url}: response lacks a 'text' string")
        return text


def llm_client_from_env(timeout: float = 120.0) -> HttpTextClient | None:
    endpoint = os.environ.get("DIAGEN_LLM_ENDPOINT")
    return HttpTextClient(endpoint, timeout=timeout) if endpoint else None


def request_prompts(
    client: TextClient | None,
    class_label: str,
    token: str,
    num_prompts: int,
    seed: int,
    *,
    retries: int = 3,
    fallback: bool = True,
    grammar: PromptGrammar = DEFAULT_GRAMMAR,
    mode: Mode = "lenient",
) -> list[ClassPrompt]:
    """Ask the LLM for prompts, topping up from the grammar generator when short.

    Always returns exactly ``num_prompts`` prompts when ``fallback`` is on.
    Raises TransportError if every attempt failed and fallback is off.
    """
    if num_prompts < 1:
        raise PromptError(f"num_prompts must be positive, got {num_prompts}")
    instruction = build_llm_instruction(class_label, num_prompts)
    collected: list[ClassPrompt] = []
    last_error: Exception | None = None
    if client is not None:
        for attempt in range(max(1, retries)):
            try:
                raw = client.complete(instruction, seed + attempt)
            except TransportError as exc:
                last_error = exc
                log.warning("LLM request for %s failed (attempt %d/%d): %s", class_label, attempt + 1, retries, exc)
                continue
            known = {p.text for p in collected}
            for p in parse_llm_response(raw, class_label, token, grammar, mode):
                if p.text not in known:
                    collected.append(p)
                    known.add(p.text)
            if len(collected) >= num_prompts:
                break
    collected = collected[:num_prompts]
    if len(collected) < num_prompts:
        if not fallback:
            if last_error is not None and not collected:
                raise TransportError(f"no prompts for {class_label!r}: {last_error}") from last_error
            raise PromptError(f"only {len(collected)} of {num_prompts} valid prompts for {class_label!r}")
        missing = num_prompts - len(collected)
        if client is not None:
            log.warning("topping up %d fallback prompts for %s", missing, class_label)
        collected += generate_prompts_fallback(
            class_label, token, missing, seed, grammar, exclude=[p.text for p in collected]
        )
    return [
        ClassPrompt(prompt_id(class_label, i), p.class_label, p.text, p.slots_used, p.origin)
        for i, p in enumerate(collected)
    ]


# ---------------------------------------------------------------------------
# prompt files


def save_prompts(prompts: Sequence[ClassPrompt], path: str | os.PathLike[str]) -> None:
    payload = [{**asdict(p), "slots_used": list(p.slots_used)} for p in prompts]
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def load_prompts(path: str | os.PathLike[str]) -> list[ClassPrompt]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        prompts = [
            ClassPrompt(d["id"], d["class_label"], d["text"], tuple(d.get("slots_used", ())), d["origin"])
            for d in data
        ]
    except (KeyError, TypeError) as exc:
        raise PromptError(f"{path}: malformed prompt file ({exc})") from None
    ids = [p.id for p in prompts]
    if len(set(ids)) != len(ids):
        raise PromptError(f"{path}: duplicate prompt ids")
    return prompts


def prompts_by_class(prompts: Iterable[ClassPrompt]) -> dict[str, list[ClassPrompt]]:
    out: dict[str, list[ClassPrompt]] = {}
    for p in prompts:
        out.setdefault(p.class_label, []).append(p)
    return out
