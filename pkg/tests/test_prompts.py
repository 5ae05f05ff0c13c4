from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diagen.core import TransportError
from diagen.prompts import (
    DEFAULT_GRAMMAR,
    ClassPrompt,
    LexiconTooSmall,
    PromptError,
    PromptGrammar,
    build_llm_instruction,
    generate_prompts_fallback,
    load_prompts,
    parse_llm_response,
    realize,
    request_prompts,
    save_prompts,
    validate_prompt,
)

T = "<T>"


def test_instruction_contents():
    text = build_llm_instruction("car", 10)
    assert "a photo of a red car" in text
    assert "a photo of a green car on a foggy bridge at daytime" in text
    assert "10 prompts of this structure for class car" in text
    assert "they should be visual" in text
    assert "Also vary the number of optionals that you use." in text
    examples = [line for line in text.splitlines() if line.startswith("'a photo of")]
    assert len(examples) == 7


def test_instruction_substitution_and_errors():
    assert "1 prompts of this structure for class spoon" in build_llm_instruction("spoon", 1)
    with pytest.raises(PromptError):
        build_llm_instruction("", 10)
    with pytest.raises(PromptError):
        build_llm_instruction("car", 0)


# --- validation ---------------------------------------------------------------


def test_skeleton_validates():
    r = validate_prompt("a photo of a <T>", T, mode="strict")
    assert r.ok and r.slots_used == frozenset()


def test_all_optionals():
    r = validate_prompt("a photo of a green <T> on a foggy bridge at daytime", T, mode="strict")
    assert r.ok
    assert r.slots_used == {"adjective", "preposition", "weather", "location", "time_of_day"}


def test_structural_failures():
    r = validate_prompt("photo of <T> <T>", T)
    assert not r.ok
    assert any("article prefix" in x for x in r.reasons)
    assert any("duplicate token" in x for x in r.reasons)


def test_article_an_and_lenient_vs_strict():
    assert validate_prompt("a photo of an antique <T> on a wooden table", T, mode="lenient").ok
    assert validate_prompt("a photo of an interesting <T>", T, mode="lenient").ok
    assert not validate_prompt("a photo of an interesting <T>", T, mode="strict").ok


def test_dangling_preposition_fails_strict():
    assert not validate_prompt("a photo of a <T> on", T, mode="strict").ok


def test_exhaustive_grammar_productions_validate():
    # Enumerate every slot combination over a reduced lexicon and check the
    # strict parser recovers exactly the slots that were realised.
    small = {
        "adjective": ["red", "antique"],
        "preposition": ["on", "in front of", "in"],
        "weather": ["foggy", "icy"],
        "location": ["bridge", "parking lot"],
        "time_of_day": ["at night", "in the morning"],
    }
    count = 0
    for adj, tod in itertools.product([None, *small["adjective"]], [None, *small["time_of_day"]]):
        groups = [None] + [
            (p, w, loc)
            for p in small["preposition"]
            for w in [None, *small["weather"]]
            for loc in small["location"]
        ]
        for g in groups:
            words = {}
            if adj:
                words["adjective"] = adj
            if tod:
                words["time_of_day"] = tod
            if g:
                words["preposition"], w, words["location"] = g
                if w:
                    words["weather"] = w
            text = realize(T, words)
            r = validate_prompt(text, T, DEFAULT_GRAMMAR, "strict")
            assert r.ok, text
            assert r.slots_used == set(words), text
            count += 1
    assert count == 3 * 3 * (1 + 3 * 3 * 2)


# --- fallback generator ---------------------------------------------------------


def test_single_prompt_is_skeleton():
    prompts = generate_prompts_fallback("car", "<cls_car>", 1, seed=0)
    assert [p.text for p in prompts] == ["a photo of a <cls_car>"]
    assert prompts[0].origin == "fallback"


def test_fallback_deterministic():
    a = generate_prompts_fallback("dog", "<cls_dog>", 10, 42)
    b = generate_prompts_fallback("dog", "<cls_dog>", 10, 42)
    assert a == b
    assert a != generate_prompts_fallback("dog", "<cls_dog>", 10, 43)


def test_fallback_plane_seed7():
    prompts = generate_prompts_fallback("plane", "<cls_plane>", 10, 7)
    assert len({p.text for p in prompts}) == 10
    for p in prompts:
        r = validate_prompt(p.text, "<cls_plane>", mode="strict")
        assert r.ok, p.text
        assert r.slots_used == set(p.slots_used)
    counts = {len(p.slots_used) for p in prompts}
    assert len(counts) >= 3
    assert {0, 1} <= counts


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 2**32))
def test_fallback_properties(n, seed):
    prompts = generate_prompts_fallback("cup", "<cls_cup>", n, seed)
    assert len(prompts) == n
    assert len({p.text for p in prompts}) == n
    assert len({p.id for p in prompts}) == n
    sizes = [len(p.slots_used) for p in prompts]
    assert {0, 1} <= set(sizes)
    if n >= 7:
        assert len(set(sizes)) >= 3
        assert np.var([len(p.text.split()) for p in prompts]) > 0
    for p in prompts:
        assert p.text.count("<cls_cup>") == 1
        assert validate_prompt(p.text, "<cls_cup>", mode="strict").ok


def test_lexicon_too_small():
    tiny = PromptGrammar(("red",), ("on",), ("icy",), ("road",), ("at night",))
    # (1+1)*(1+1)*(1+1*1*2) = 12 distinct prompts at most
    assert len(generate_prompts_fallback("c", "<c>", 12, 0, tiny)) == 12
    with pytest.raises(LexiconTooSmall):
        generate_prompts_fallback("c", "<c>", 13, 0, tiny)


def test_default_lexicon_size():
    for name in ("adjectives", "prepositions", "weathers", "locations", "times_of_day"):
        assert len(getattr(DEFAULT_GRAMMAR, name)) >= 15


# --- parsing ------------------------------------------------------------------------


def test_parse_numbered_lines():
    raw = "1. a photo of a red car\n2. a photo of a car at night"
    prompts = parse_llm_response(raw, "car", "<cls_car>")
    assert [p.text for p in prompts] == ["a photo of a red <cls_car>", "a photo of a <cls_car> at night"]
    assert all(p.origin == "llm" for p in prompts)
    assert prompts[1].slots_used == ("time_of_day",)


def test_parse_nothing_conforming():
    assert parse_llm_response("Sure! Here are prompts: …\nEnjoy!", "car", "<cls_car>") == []


def test_parse_mode_dependent():
    raw = "a photo of an interesting car"
    assert len(parse_llm_response(raw, "car", "<cls_car>", mode="lenient")) == 1
    assert parse_llm_response(raw, "car", "<cls_car>", mode="strict") == []


def test_parse_quotes_bullets_and_annotations():
    raw = (
        "Here you go:\n"
        '- "A photo of a huge car in a tunnel."\n'
        "* 'a photo of a car on a road' (location optional)\n"
        "3) a photo of a car with a car trailer\n"  # class name twice: duplicate token
    )
    prompts = parse_llm_response(raw, "car", "<cls_car>")
    assert [p.text for p in prompts] == [
        "a photo of a huge <cls_car> in a tunnel",
        "a photo of a <cls_car> on a road",
    ]


def test_multiword_class_name():
    prompts = parse_llm_response("1. a photo of a traffic light at dusk", "traffic light", "<cls_tl>")
    assert prompts[0].text == "a photo of a <cls_tl> at dusk"


# --- request path ---------------------------------------------------------------------


class FakeLLM:
    def __init__(self, lines=None, fail=False):
        self.lines = lines or []
        self.fail = fail
        self.calls = []

    def complete(self, instruction, seed):
        self.calls.append((instruction, seed))
        if self.fail:
            raise TransportError("connection refused")
        return "\n".join(f"{i + 1}. {line}" for i, line in enumerate(self.lines))


CAR_LINES = [
    "a photo of a red car",
    "a photo of a car on a road",
    "a photo of a car in snow",
    "a photo of a car at night",
    "a photo of a huge car in a tunnel",
    "a photo of a green car on a foggy bridge at daytime",
    "a photo of a car",
    "a photo of a blue car near a lake",
    "a photo of a rusty car at dawn",
    "a photo of a tiny car on a beach",
]


def test_request_pass_through():
    client = FakeLLM(CAR_LINES)
    prompts = request_prompts(client, "car", "<cls_car>", 10, seed=0)
    assert len(prompts) == 10
    assert all(p.origin == "llm" for p in prompts)
    assert [p.id for p in prompts] == [f"car/p{i}" for i in range(10)]
    assert len(client.calls) == 1


def test_request_top_up():
    client = FakeLLM(CAR_LINES[:6])
    prompts = request_prompts(client, "car", "<cls_car>", 10, seed=0, retries=3)
    assert [p.origin for p in prompts] == ["llm"] * 6 + ["fallback"] * 4
    assert len({p.text for p in prompts}) == 10
    assert len(client.calls) == 3  # retried before topping up


def test_request_unreachable_with_fallback():
    prompts = request_prompts(FakeLLM(fail=True), "car", "<cls_car>", 10, seed=0)
    assert len(prompts) == 10
    assert all(p.origin == "fallback" for p in prompts)


def test_request_unreachable_without_fallback():
    with pytest.raises(TransportError):
        request_prompts(FakeLLM(fail=True), "car", "<cls_car>", 10, seed=0, fallback=False)


def test_every_path_validates_lenient():
    prompts = request_prompts(FakeLLM(CAR_LINES[:6]), "car", "<cls_car>", 10, seed=5)
    for p in prompts:
        assert validate_prompt(p.text, "<cls_car>", mode="lenient").ok


def test_prompt_file_round_trip(tmp_path):
    prompts = generate_prompts_fallback("dog", "<cls_dog>", 5, 1) + [
        ClassPrompt("car/p0", "car", "a photo of a <cls_car>", (), "llm")
    ]
    save_prompts(prompts, tmp_path / "p.json")
    assert load_prompts(tmp_path / "p.json") == prompts


# --- HTTP wire protocol ---------------------------------------------------------------


def test_http_complete_wire_format(http_service):
    from diagen.prompts import HttpTextClient

    http_service.responder = lambda path, body: (200, {"text": "\n".join(CAR_LINES)})
    client = HttpTextClient(http_service.url, timeout=5)
    prompts = request_prompts(client, "car", "<cls_car>", 10, seed=21)
    assert len(prompts) == 10 and all(p.origin == "llm" for p in prompts)
    path, body = http_service.requests[0]
    assert path == "/v1/complete"
    assert body == {"instruction": build_llm_instruction("car", 10), "seed": 21}


@pytest.mark.parametrize(
    "status,payload",
    [(500, {"text": "a photo of a car"}), (200, {"completion": "x"}), (200, b"not json")],
)
def test_http_complete_bad_replies(http_service, status, payload):
    from diagen.prompts import HttpTextClient

    http_service.responder = lambda path, body: (status, payload)
    with pytest.raises(TransportError):
        HttpTextClient(http_service.url, timeout=5).complete("hi", 0)
