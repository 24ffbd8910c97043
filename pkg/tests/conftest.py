from __future__ import annotations

import random
from typing import List, Optional

import numpy as np
import pytest

from seer.corpus import Dataset, Instance, Table
from seer.textprep import EmbeddingStore, paragraph_key, question_key

WORDS = [
    "revenue", "income", "cost", "growth", "shares", "margin",
    "assets", "debt", "cash", "profit", "sales", "tax",
]

MODALITIES = ("table", "text", "hybrid")
ANSWER_TYPES = ("span", "multi_span", "count", "arithmetic")


def make_instance(
    inst_id: str,
    rng: Optional[random.Random] = None,
    modality: str = "table",
    answer_type: str = "arithmetic",
    question: Optional[str] = None,
    paragraphs: Optional[List[str]] = None,
) -> Instance:
    rng = rng or random.Random(hash(inst_id) & 0xFFFF)
    a = rng.randint(2, 99)
    b = rng.randint(2, 99)
    if question is None:
        question = (
            f"what was the {rng.choice(WORDS)} {rng.choice(WORDS)} "
            f"of {rng.choice(WORDS)} {inst_id}?"
        )
    if paragraphs is None:
        paragraphs = [
            f"the {rng.choice(WORDS)} was {a} .",
            f"the {rng.choice(WORDS)} was {b} .",
        ]
    table = Table(
        header_rows=[["year", "value"]],
        body_rows=[["2019", str(a)], ["2020", str(b)]],
    )
    if answer_type == "arithmetic":
        program = f"x0 = {a} + {b}"
        answer: object = float(a + b)
    elif answer_type == "count":
        program = ""
        answer = [str(a % 7 + 1)]
    elif answer_type == "span":
        program = ""
        answer = [f"{rng.choice(WORDS)} {rng.choice(WORDS)}"]
    else:
        program = ""
        answer = [rng.choice(WORDS), rng.choice(WORDS) + "s"]
    return Instance(
        id=inst_id,
        question=question,
        paragraphs=paragraphs,
        table=table,
        gold_answer=answer,
        gold_program=program,
        gold_modality=modality,
        gold_answer_type=answer_type,
    )


def make_dataset(
    n: int,
    seed: int = 0,
    split: str = "train",
    prefix: str = "t",
    modalities=MODALITIES,
    answer_types=("arithmetic",),
) -> Dataset:
    rng = random.Random(seed)
    instances = []
    for i in range(n):
        instances.append(
            make_instance(
                f"{prefix}{i:04d}",
                rng=rng,
                modality=modalities[i % len(modalities)],
                answer_type=answer_types[i % len(answer_types)],
            )
        )
    return Dataset(split=split, instances=instances)


def make_embedding_store(
    datasets: List[Dataset],
    seed: int = 0,
    dim: int = 16,
    positive: bool = True,
    include_paragraphs: bool = False,
) -> EmbeddingStore:
    """Random vectors per question key; positive entries keep all cosine
    similarities strictly positive."""
    rng = np.random.default_rng(seed)
    store = EmbeddingStore(dim)
    for dataset in datasets:
        for inst in dataset:
            low = 0.1 if positive else -1.0
            store.add(question_key(inst.id), rng.uniform(low, 1.0, size=dim))
            if include_paragraphs:
                for idx in range(len(inst.paragraphs)):
                    store.add(paragraph_key(inst.id, idx), rng.uniform(low, 1.0, size=dim))
    return store


@pytest.fixture
def tiny_table() -> Table:
    return Table(header_rows=[["y", "v"]], body_rows=[["2019", "5"]])
