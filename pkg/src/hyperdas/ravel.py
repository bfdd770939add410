"""Synthetic entity/attribute dataset with the structure of RAVEL.

A domain is a set of entities (1-3 sub-word tokens each) and attributes whose
values are single answer tokens. Query prompts look like::

    <bos> prefix... ENTITY middle... ATTR :        -> value token

and the base mask starts at the attribute word, so everything from the
attribute mention onward is hidden from the hypernetwork. Records serialise
to JSON lines with exactly the fields in ``RECORD_FIELDS``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from hyperdas.autodiff import ContractError

DATASET_FORMAT_VERSION = 1
RECORD_FIELDS = ("base", "counterfactual", "instruction", "label", "kind", "queried_attribute",
                 "target_attribute", "base_mask_start", "split")

PAD, BOS = "<pad>", "<bos>"
SYNTAX = (",", ".", ":", ";", "(", ")", '"', "-")
FILLERS = ("the", "a", "is", "known", "for", "people", "say", "visit", "near", "its", "old",
           "new", "many", "in", "this", "we", "love", "i", "about", "often", "there", "some",
           "very", "place")
INSTRUCTION_WORDS = ("localize", "find", "isolate", "of", "feature", "concept")
SYLLABLES = ("ka", "lo", "mi", "ren", "do", "sa", "vi", "en", "na", "pa", "ris", "to", "ky",
             "ber", "lin", "ma", "dri", "ro", "ve", "ni", "ce", "os", "lu", "ta", "mo", "be",
             "gu", "zi", "fa", "qu", "ho", "wen")


class Vocab:
    """Token table; ids are assigned in insertion order."""

    def __init__(self, max_size: int = 256):
        self.max_size = max_size
        self.tokens: list[str] = []
        self.index: dict[str, int] = {}
        self.categories: dict[str, str] = {}
        for tok in (PAD, BOS):
            self.add(tok, "bos" if tok == BOS else "other")
        for tok in SYNTAX:
            self.add(tok, "syntax")
        for tok in FILLERS + INSTRUCTION_WORDS:
            self.add(tok, "other")
        for tok in SYLLABLES:
            self.add(tok, "entity")

    def add(self, token: str, category: str = "other") -> int:
        if token in self.index:
            return self.index[token]
        if len(self.tokens) >= self.max_size:
            raise ContractError(f"vocabulary overflow: more than {self.max_size} tokens")
        self.index[token] = len(self.tokens)
        self.tokens.append(token)
        self.categories[token] = category
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, toks) -> list[int]:
        try:
            return [self.index[t] for t in toks]
        except KeyError as exc:
            raise ContractError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def to_json(self) -> str:
        return json.dumps({"version": DATASET_FORMAT_VERSION, "tokens": self.tokens,
                           "categories": [self.categories[t] for t in self.tokens]})

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        raw = json.loads(text)
        v = cls.__new__(cls)
        v.max_size = max(256, len(raw["tokens"]))
        v.tokens, v.index, v.categories = [], {}, {}
        for tok, cat in zip(raw["tokens"], raw["categories"]):
            v.index[tok] = len(v.tokens)
            v.tokens.append(tok)
            v.categories[tok] = cat
        return v


@dataclass
class DomainSpec:
    name: str
    n_entities: int = 16
    attributes: dict[str, int] = field(default_factory=lambda: {"country": 4, "climate": 4})
    max_entity_tokens: int = 3


@dataclass
class Domain:
    name: str
    entities: list[tuple[str, ...]]
    attributes: list[str]
    attribute_words: dict[str, str]
    values: dict[str, list[str]]

    def value(self, entity: int, attribute: str) -> str:
        return self.values[attribute][entity]


def _qualified(domain: str, attr: str) -> str:
    return f"{domain}.{attr}"


def domain_of(attribute: str) -> str:
    return attribute.split(".", 1)[0]


def _functionally_dependent(a: np.ndarray, b: np.ndarray) -> bool:
    """True if the value of ``a`` determines the value of ``b``."""
    seen: dict[int, int] = {}
    for x, y in zip(a, b):
        if seen.setdefault(int(x), int(y)) != int(y):
            return False
    return True


def build_domain(seed: int, spec: DomainSpec, vocab: Vocab) -> Domain:
    """Deterministic domain for ``(seed, spec)``; registers its tokens in ``vocab``."""
    if spec.n_entities < 8 or len(spec.attributes) < 2:
        raise ContractError("a domain needs >= 8 entities and >= 2 attributes")
    if any(n < 2 for n in spec.attributes.values()):
        raise ContractError("every attribute needs >= 2 values")
    rng = np.random.default_rng([seed, int.from_bytes(spec.name.encode()[:8], "little")])

    entities: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    lengths = [1 + (i % spec.max_entity_tokens) for i in range(spec.n_entities)]
    for n_tok in lengths:
        for _ in range(1000):
            cand = tuple(SYLLABLES[j] for j in rng.choice(len(SYLLABLES), n_tok, replace=False))
            if cand not in seen:
                break
        else:
            raise ContractError("cannot draw enough distinct entity names")
        seen.add(cand)
        entities.append(cand)

    vocab.add(spec.name, "other")
    attrs, words, values = [], {}, {}
    for attr, n_values in spec.attributes.items():
        q = _qualified(spec.name, attr)
        attrs.append(q)
        vocab.add(attr, "other")
        words[q] = attr
        for k in range(n_values):
            vocab.add(f"{spec.name}.{attr}={k}", "other")

    n = spec.n_entities
    for _ in range(1000):
        table = {}
        for q, n_values in zip(attrs, spec.attributes.values()):
            table[q] = rng.permutation(np.arange(n) % n_values)
        ok = all(not _functionally_dependent(table[a], table[b])
                 for a, b in itertools.permutations(attrs, 2))
        if ok:
            break
    else:
        raise ContractError("could not draw independent attribute values")
    for q in attrs:
        attr = q.split(".", 1)[1]
        values[q] = [f"{spec.name}.{attr}={int(k)}" for k in table[q]]
    return Domain(spec.name, entities, attrs, words, values)


@dataclass(frozen=True)
class Template:
    id: int
    prefix: tuple[str, ...]
    middle: tuple[str, ...]


@dataclass
class TemplateSet:
    train: list[Template]
    test: list[Template]

    def split(self, name: str) -> list[Template]:
        return self.train if name == "train" else self.test


def build_templates(seed: int, n_train: int = 24, n_test: int = 8) -> TemplateSet:
    rng = np.random.default_rng([seed, 7])
    prefix_pool = FILLERS + SYNTAX[:3]
    pool: list[Template] = []
    seen = set()
    while len(pool) < n_train + n_test:
        p_len = int(rng.integers(1, 4))
        m_len = int(rng.integers(1, 3))
        prefix = tuple(prefix_pool[i] for i in rng.choice(len(prefix_pool), p_len, replace=False))
        middle = tuple(FILLERS[i] for i in rng.choice(len(FILLERS), m_len, replace=False))
        if (prefix, middle) in seen:
            continue
        seen.add((prefix, middle))
        pool.append(Template(len(pool), prefix, middle))
    return TemplateSet(pool[:n_train], pool[n_train:])


INSTRUCTION_FORMS = (
    ("localize", "{attr}", "of", "{domain}"),
    ("find", "{attr}", "feature"),
    ("isolate", "{domain}", "{attr}", "concept"),
)


def query_prompt(template: Template, entity: tuple[str, ...], attr_word: str) -> tuple[list[str], int]:
    """Prompt tokens and the index where the attribute mention starts."""
    toks = [BOS, *template.prefix, *entity, *template.middle]
    start = len(toks)
    return toks + [attr_word, ":"], start


def instruction(domain: Domain, attribute: str, form: int) -> list[str]:
    words = {"attr": domain.attribute_words[attribute], "domain": domain.name}
    return [w.format(**words) if "{" in w else w for w in INSTRUCTION_FORMS[form]]


@dataclass
class RavelExample:
    base: list[str]
    counterfactual: list[str]
    instruction: list[str]
    label: str
    kind: str
    queried_attribute: str
    target_attribute: str
    base_mask_start: int
    split: str

    def to_record(self) -> dict:
        return {f: getattr(self, f) for f in RECORD_FIELDS}

    @property
    def domain(self) -> str:
        return domain_of(self.target_attribute)


@dataclass
class SplitManifest:
    counts: dict[str, dict[str, int]]
    templates: dict[str, list[int]]

    def to_json(self) -> str:
        return json.dumps({"counts": self.counts, "templates": self.templates}, sort_keys=True)


def _pair_ok(domain: Domain, kind: str, attr_checked: str, b: int, c: int) -> bool:
    if b == c:
        return False
    return domain.value(b, attr_checked) != domain.value(c, attr_checked)


def _capacity(domain: Domain, templates: list[Template], target: str, kind: str) -> int:
    n = len(domain.entities)
    others = [a for a in domain.attributes if a != target]
    queried = [target] if kind == "cause" else others
    pairs = sum(1 for q in queried for b in range(n) for c in range(n) if _pair_ok(domain, kind, q, b, c))
    return pairs * len(templates) ** 2 * len(domain.attributes) * len(INSTRUCTION_FORMS)


def generate_examples(domains: list[Domain], templates: TemplateSet,
                      counts: dict[str, int], seed: int) -> tuple[list[RavelExample], SplitManifest]:
    """Sample cause/iso examples for every (domain, target attribute, split).

    ``counts`` maps split name -> examples per (attribute, kind). A cause example
    queries the target attribute and is labelled with the counterfactual
    entity's value; an iso example queries another attribute and keeps the base
    entity's value. Base and counterfactual entities always differ in the
    attribute that determines the label, so neither kind is satisfied by
    accident.
    """
    rng = np.random.default_rng([seed, 11])
    examples: list[RavelExample] = []
    manifest_counts: dict[str, dict[str, int]] = {}
    for split, per_cell in counts.items():
        tmpl = templates.split(split)
        tally: Counter = Counter()
        for dom in domains:
            n = len(dom.entities)
            for target in dom.attributes:
                others = [a for a in dom.attributes if a != target]
                for kind in ("cause", "iso"):
                    cap = _capacity(dom, tmpl, target, kind)
                    if per_cell > cap:
                        raise ContractError(f"{per_cell} {kind} examples requested for {target}/{split}, "
                                            f"only {cap} distinct combinations exist")
                    chosen: set[tuple] = set()
                    while len(chosen) < per_cell:
                        queried = target if kind == "cause" else others[int(rng.integers(len(others)))]
                        b, c = (int(x) for x in rng.integers(n, size=2))
                        if not _pair_ok(dom, kind, queried, b, c):
                            continue
                        key = (queried, b, c, int(rng.integers(len(tmpl))), int(rng.integers(len(tmpl))),
                               int(rng.integers(len(dom.attributes))), int(rng.integers(len(INSTRUCTION_FORMS))))
                        if key in chosen:
                            continue
                        chosen.add(key)
                        queried, b, c, tb, tc, cf_attr, form = key
                        base, mask_start = query_prompt(tmpl[tb], dom.entities[b], dom.attribute_words[queried])
                        cf, _ = query_prompt(tmpl[tc], dom.entities[c],
                                             dom.attribute_words[dom.attributes[cf_attr]])
                        label_entity = c if kind == "cause" else b
                        examples.append(RavelExample(
                            base=base, counterfactual=cf, instruction=instruction(dom, target, form),
                            label=dom.value(label_entity, queried), kind=kind, queried_attribute=queried,
                            target_attribute=target, base_mask_start=mask_start, split=split))
                        tally[f"{target}/{kind}"] += 1
        manifest_counts[split] = dict(sorted(tally.items()))
    manifest = SplitManifest(manifest_counts, {"train": [t.id for t in templates.train],
                                               "test": [t.id for t in templates.test]})
    return examples, manifest


def apply_base_mask(example: RavelExample) -> np.ndarray:
    """Visibility of each base position to the hypernetwork (True = visible)."""
    vis = np.zeros(len(example.base), dtype=bool)
    vis[:example.base_mask_start] = True
    return vis


def target_corpus(domains: list[Domain], templates: list[Template], vocab: Vocab) -> tuple[list, list]:
    """Every (entity, attribute, template) query with its answer id, for pretraining."""
    prompts, labels = [], []
    for dom in domains:
        for e, ent in enumerate(dom.entities):
            for attr in dom.attributes:
                for t in templates:
                    toks, _ = query_prompt(t, ent, dom.attribute_words[attr])
                    prompts.append(vocab.encode(toks))
                    labels.append(vocab.index[dom.value(e, attr)])
    return prompts, labels


def fact_corpus(domains: list[Domain], templates: list[Template], vocab: Vocab) -> tuple[list, list]:
    """Statement prefixes ``<bos> prefix ENTITY`` labelled with each of the entity's values.

    The same prompt appears once per attribute, so the best a model can do is
    spread probability over the entity's values; what matters is that they
    must be readable at the last entity token.
    """
    prompts, labels = [], []
    for dom in domains:
        for e, ent in enumerate(dom.entities):
            for t in templates:
                ids = vocab.encode([BOS, *t.prefix, *ent])
                for attr in dom.attributes:
                    prompts.append(ids)
                    labels.append(vocab.index[dom.value(e, attr)])
    return prompts, labels


def to_jsonl(examples: list[RavelExample]) -> str:
    return "".join(json.dumps(ex.to_record(), separators=(",", ":")) + "\n" for ex in examples)


def from_jsonl(text: str) -> list[RavelExample]:
    out = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            if set(rec) != set(RECORD_FIELDS):
                raise ContractError(f"record fields {sorted(rec)} differ from {RECORD_FIELDS}")
            out.append(RavelExample(**rec))
    return out


def dataset_hash(examples: list[RavelExample]) -> str:
    return hashlib.sha256(to_jsonl(examples).encode()).hexdigest()


def token_category(vocab: Vocab, token: str) -> str:
    return vocab.categories.get(token, "other")
