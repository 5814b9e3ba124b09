"""Balanced combinatorial prompt generation via cyclic attribute iterators.

Template i picks, for each attribute, the value at index
(offset + i * stride) mod len(values). Strides are chosen coprime to the
list lengths so every value cycles through fairly: over any run of n
templates, per-value counts differ by at most one, and with unit strides
and pairwise-coprime lengths the full combination only repeats after
lcm(lengths) templates.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError

_DATA_FILE = Path(__file__).parent / "data" / "attributes.json"

SENTENCE_ATTRIBUTES = ("age group", "ethnicity", "body type", "hair length",
                       "hair color", "hair type", "clothing color",
                       "clothing pattern")


@dataclass
class AttributeSpace:
    """Ordered attribute_name -> ordered value list."""
    attributes: dict

    def __post_init__(self):
        for name, values in self.attributes.items():
            if not values:
                raise ValueError(f"attribute {name!r} has no values")
            if len(set(values)) != len(values):
                raise ValueError(f"attribute {name!r} has duplicate values")

    def __len__(self):
        return len(self.attributes)

    @classmethod
    def default(cls):
        return load_attribute_space(_DATA_FILE)


def load_attribute_space(path):
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict) or not data:
        raise SchemaError(f"{path}: expected a nonempty attribute->values map")
    for name, values in data.items():
        if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
            raise SchemaError(f"{path}: attribute {name!r} must map to a list "
                              "of strings")
    return AttributeSpace(data)


@dataclass
class PromptTemplate:
    assignment: dict            # attribute_name -> chosen value
    scenario: str
    sentence: str
    index: int


def render_sentence(assignment, scenario):
    """Fixed grammar over the canonical eight attributes; errors name any
    missing one."""
    for name in SENTENCE_ATTRIBUTES:
        if name not in assignment:
            raise KeyError(f"assignment is missing attribute {name!r}")
    a = assignment
    return (f"{a['age group']} {a['ethnicity']} {a['body type']} person "
            f"with {a['hair length']} {a['hair color']} {a['hair type']} hair, "
            f"wearing a {a['clothing color']} {a['clothing pattern']} "
            f"{scenario} uniform")


def _default_stride(length):
    """Smallest integer > 1 coprime to the length, falling back to 1."""
    for s in range(2, length + 2):
        if math.gcd(s, length) == 1:
            return s
    return 1


def generate_prompts(space, n, scenario, strides=None, seed=0):
    """Produce `n` PromptTemplates by cyclic iteration over the space."""
    if n < 1:
        raise ValueError("need at least one prompt")
    names = list(space.attributes.keys())
    lengths = {a: len(space.attributes[a]) for a in names}

    strides = dict(strides or {})
    for a in names:
        s = strides.get(a, _default_stride(lengths[a]))
        if math.gcd(s, lengths[a]) != 1:
            raise ValueError(f"stride {s} for attribute {a!r} is not coprime "
                             f"with its {lengths[a]} values")
        strides[a] = s

    rng = np.random.default_rng(seed)
    offsets = {a: int(rng.integers(0, lengths[a])) for a in names}

    canonical = all(a in space.attributes for a in SENTENCE_ATTRIBUTES)
    out = []
    for i in range(n):
        assignment = {
            a: space.attributes[a][(offsets[a] + i * strides[a]) % lengths[a]]
            for a in names}
        if canonical:
            sentence = render_sentence(assignment, scenario)
        else:
            parts = ", ".join(f"{k}: {v}" for k, v in assignment.items())
            sentence = f"person ({parts}), {scenario}"
        out.append(PromptTemplate(assignment, scenario, sentence, i))
    return out


def save_prompts(path, prompts):
    """One JSON object per line: {index, scenario, sentence, assignment}."""
    with open(path, "w") as f:
        for p in prompts:
            f.write(json.dumps({"index": p.index, "scenario": p.scenario,
                                "sentence": p.sentence,
                                "assignment": p.assignment},
                               sort_keys=True))
            f.write("\n")


def load_prompts(path):
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                out.append(PromptTemplate(d["assignment"], d["scenario"],
                                          d["sentence"], d["index"]))
            except (json.JSONDecodeError, KeyError) as e:
                raise SchemaError(f"{path}:{ln}: bad prompt record ({e})") from e
    return out
