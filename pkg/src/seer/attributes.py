"""Attribute prediction for test instances: modality and answer type.

Predictors share one calling convention (instance in, prediction out) and
come in gold, ICL, stub, and injection-file flavors.  Fine-tuned
classifiers are not part of this artifact; their outputs can be injected
through the file predictor.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .corpus import Dataset, Instance, context_text

MODALITY_INSTRUCTION = (
    "Do you need data from the table, the text paragraphs, or both (hybrid) "
    "to answer this question? Answer by one of the following: table, text, hybrid."
)
ANSWER_TYPE_INSTRUCTION = (
    "Does this question require to extract spans from the document, to count, "
    "or to perform an arithmetic reasoning? Answer by one of the following: "
    "span, multi-span, count, arithmetic."
)

ICL_MAX_TOKENS = 5

DEFAULT_VALUES = {"modality": "hybrid", "answer_type": "arithmetic"}


class AttributePredictionError(ValueError):
    pass


class UnparseableResponse(AttributePredictionError):
    pass


@dataclass(frozen=True)
class AttributeKind:
    name: str
    values: Tuple[str, ...]

    def __post_init__(self):
        if not self.values or len(set(self.values)) != len(self.values):
            raise AttributePredictionError(f"kind {self.name!r} needs unique, non-empty values")


MODALITY = AttributeKind("modality", ("table", "text", "hybrid"))
ANSWER_TYPE = AttributeKind("answer_type", ("span", "multi_span", "count", "arithmetic"))
KINDS = {"modality": MODALITY, "answer_type": ANSWER_TYPE}


@dataclass(frozen=True)
class AttributePrediction:
    kind: str
    value: str
    source: str  # gold | icl | stub | file

    def __post_init__(self):
        if self.value not in KINDS[self.kind].values:
            raise AttributePredictionError(f"{self.value!r} is not a {self.kind} value")


Predictor = Callable[[Instance], AttributePrediction]


def gold_label(inst: Instance, kind: AttributeKind) -> Optional[str]:
    return inst.gold_modality if kind.name == "modality" else inst.gold_answer_type


def predict_gold(inst: Instance, kind: AttributeKind) -> AttributePrediction:
    label = gold_label(inst, kind)
    if label is None:
        raise AttributePredictionError(f"instance {inst.id!r} has no gold {kind.name} label")
    return AttributePrediction(kind=kind.name, value=label, source="gold")


# --- ICL prediction ----------------------------------------------------------


def _instruction(kind: AttributeKind) -> str:
    return MODALITY_INSTRUCTION if kind.name == "modality" else ANSWER_TYPE_INSTRUCTION


def _attribute_block(inst: Instance, kind: AttributeKind, answer: Optional[str]) -> str:
    lines = [
        f"# id: {inst.id}",
        context_text(inst),
        f"Question: {inst.question}",
        _instruction(kind),
    ]
    if answer is not None:
        lines.append(answer.replace("_", "-"))
    return "\n".join(lines)


def build_icl_prompt(
    inst: Instance, kind: AttributeKind, exemplars: Mapping[str, Instance]
) -> str:
    """One exemplar block per attribute value (in the kind's value order),
    each ending with its value, then the test block ending with the
    instruction."""
    missing = [v for v in kind.values if v not in exemplars]
    if missing or set(exemplars) != set(kind.values):
        raise AttributePredictionError(
            f"need exactly one exemplar per {kind.name} value; missing {missing}, "
            f"got {sorted(exemplars)}"
        )
    blocks = [_attribute_block(exemplars[v], kind, v) for v in kind.values]
    blocks.append(_attribute_block(inst, kind, None))
    return "\n\n".join(blocks)


def parse_attribute_response(response: str, kind: AttributeKind) -> str:
    """Normalize a model response (trim, lowercase, strip trailing
    punctuation, fold "-"/"_") and match it to a value of the kind; the
    first matching value wins."""
    cleaned = response.strip().lower().rstrip(string.punctuation + " \n\t")
    cleaned = cleaned.replace("-", "_")
    first_token = cleaned.split()[0] if cleaned.split() else ""
    for value in kind.values:
        folded = value.replace("-", "_")
        if cleaned == folded or first_token == folded:
            return value
    raise UnparseableResponse(f"cannot map response {response!r} to a {kind.name} value")


def predict_icl(
    inst: Instance,
    kind: AttributeKind,
    exemplars: Mapping[str, Instance],
    client,
    params=None,
) -> AttributePrediction:
    """Predict by prompting the completion client with one exemplar per
    value; the completion is capped at 5 output tokens."""
    from .llm import CompletionParams

    if params is None:
        params = CompletionParams(max_tokens=ICL_MAX_TOKENS)
    else:
        params = CompletionParams(
            model=params.model,
            temperature=params.temperature,
            top_p=params.top_p,
            max_tokens=ICL_MAX_TOKENS,
        )
    prompt = build_icl_prompt(inst, kind, exemplars)
    response = client.complete(prompt, params)
    value = parse_attribute_response(response, kind)
    return AttributePrediction(kind=kind.name, value=value, source="icl")


def choose_icl_exemplars(train: Dataset, kind: AttributeKind) -> Dict[str, Instance]:
    """The first training instance (by id order) carrying each gold value."""
    chosen: Dict[str, Instance] = {}
    for inst in sorted(train.instances, key=lambda i: i.id):
        label = gold_label(inst, kind)
        if label in kind.values and label not in chosen:
            chosen[label] = inst
    missing = [v for v in kind.values if v not in chosen]
    if missing:
        raise AttributePredictionError(f"training set lacks gold {kind.name} values {missing}")
    return chosen


# --- predictor factories -----------------------------------------------------


def make_gold_predictor(kind: AttributeKind) -> Predictor:
    return lambda inst: predict_gold(inst, kind)


def make_stub_predictor(kind: AttributeKind, value: Optional[str] = None) -> Predictor:
    fixed = value or DEFAULT_VALUES[kind.name]
    if fixed not in kind.values:
        raise AttributePredictionError(f"{fixed!r} is not a {kind.name} value")
    return lambda inst: AttributePrediction(kind=kind.name, value=fixed, source="stub")


def make_file_predictor(kind: AttributeKind, path) -> Predictor:
    """Inject predictions from a JSON-lines file of {id, kind, value}."""
    table: Dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record["kind"] == kind.name:
                table[record["id"]] = record["value"]

    def predict(inst: Instance) -> AttributePrediction:
        if inst.id not in table:
            raise AttributePredictionError(f"prediction file has no {kind.name} entry for {inst.id!r}")
        return AttributePrediction(kind=kind.name, value=table[inst.id], source="file")

    return predict


def make_icl_predictor(
    kind: AttributeKind, train: Dataset, client, params=None
) -> Predictor:
    exemplars = choose_icl_exemplars(train, kind)
    return lambda inst: predict_icl(inst, kind, exemplars, client, params)


def with_default(predictor: Predictor, kind: AttributeKind) -> Predictor:
    """Fall back to the kind's configured default on predictor failure
    (modality -> hybrid, the uncertain value; answer type -> arithmetic,
    the majority class)."""

    def predict(inst: Instance) -> AttributePrediction:
        try:
            return predictor(inst)
        except Exception:
            return AttributePrediction(
                kind=kind.name, value=DEFAULT_VALUES[kind.name], source="stub"
            )

    return predict


# --- predictor evaluation ----------------------------------------------------


def evaluate_predictor(
    preds: Sequence[AttributePrediction], golds: Sequence[str]
) -> Tuple[float, Dict[str, Dict[str, int]]]:
    """Exact-match accuracy and a gold-by-predicted confusion matrix."""
    if len(preds) != len(golds):
        raise AttributePredictionError(f"length mismatch: {len(preds)} predictions, {len(golds)} golds")
    if not preds:
        return 0.0, {}
    kind = KINDS[preds[0].kind]
    confusion = {g: {p: 0 for p in kind.values} for g in kind.values}
    correct = 0
    for pred, gold in zip(preds, golds):
        confusion[gold][pred.value] += 1
        if pred.value == gold:
            correct += 1
    return correct / len(preds), confusion
