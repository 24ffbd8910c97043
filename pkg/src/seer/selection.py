"""Strategy layer mapping a test instance and training pool to exemplars.

Strategies: "seer" (knapsack program solved exactly), "csp" (random
feasible point of the same program), "kate" (top-M by similarity),
"diverse_kate" (equal split across modality subsets), "random", and
"fixed" (one dev-selected group for every test instance).  One token
counter instance must be used for candidate lengths, budgets, and
coverage checks.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .attributes import AttributePrediction, DEFAULT_VALUES, Predictor
from .corpus import Dataset, Instance, answer_lines
from .knapsack import (
    ItemProfile,
    STATUS_OPTIMAL,
    build_program,
    relax_and_solve,
    solve_random_feasible,
)
from .llm import PROMPT_SEPARATOR, render_block
from .textprep import EmbeddingStore, nearest_neighbors, paragraph_key, question_key, retrieve_paragraphs
from .tokens import TokenCounter

STRATEGIES = ("seer", "kate", "diverse_kate", "fixed", "random", "csp")

FIXED_SET_GROUPS = 20


class SelectionError(ValueError):
    pass


class BudgetExhaustedError(SelectionError):
    """The test context alone exceeds the model capacity."""


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 200
    max_exemplars: int = 4
    alpha: float = 0.75
    beta: float = 0.0
    model_max_tokens: int = 4096
    solver_timeout: float = 5.0
    strategy: str = "seer"
    seed: int = 0
    text_retrieval_k: int = 10  # 0 keeps every paragraph
    separator: str = PROMPT_SEPARATOR

    def __post_init__(self):
        if self.alpha + self.beta > 1.0 + 1e-9:
            raise SelectionError("alpha + beta must not exceed 1")
        if self.k < self.max_exemplars:
            raise SelectionError("candidate pool size k must be >= max_exemplars")
        if self.strategy not in STRATEGIES:
            raise SelectionError(f"unknown strategy {self.strategy!r}")


@dataclass
class SelectionResult:
    test_id: str
    exemplar_ids: List[str]
    predicted_attributes: Dict[str, str]
    solver_status: str
    prompt_tokens: int

    def to_dict(self) -> dict:
        return {
            "test_id": self.test_id,
            "exemplar_ids": list(self.exemplar_ids),
            "predicted_attributes": dict(self.predicted_attributes),
            "solver_status": self.solver_status,
            "prompt_tokens": self.prompt_tokens,
        }


@dataclass(frozen=True)
class CandidateProfile:
    id: str
    normalized_question: str
    token_len: int
    flags: Dict[str, int]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "normalized_question": self.normalized_question,
            "token_len": self.token_len,
            "flags": dict(self.flags),
        }


def instance_flags(inst: Instance) -> Dict[str, int]:
    flags: Dict[str, int] = {}
    if inst.gold_modality:
        for name in ("table", "text", "hybrid"):
            flags[name] = 1 if inst.gold_modality == name else 0
    if inst.gold_answer_type:
        for name in ("span", "multi_span", "count", "arithmetic"):
            flags[name] = 1 if inst.gold_answer_type == name else 0
    return flags


def paragraph_selection(
    inst: Instance, store: Optional[EmbeddingStore], k: int
) -> Optional[List[int]]:
    """Paragraph indices to keep in prompt blocks, or None for all.

    Retrieval applies only when k is positive and the store covers the
    question and every paragraph of the instance.
    """
    if not k or store is None or len(inst.paragraphs) <= k:
        return None
    keys = [question_key(inst.id)] + [
        paragraph_key(inst.id, i) for i in range(len(inst.paragraphs))
    ]
    if any(key not in store for key in keys):
        return None
    return retrieve_paragraphs(inst, store, k)


def exemplar_token_length(
    inst: Instance,
    counter: TokenCounter,
    cfg: SelectionConfig,
    store: Optional[EmbeddingStore] = None,
) -> int:
    """Token cost of one exemplar: its rendered block plus the trailing
    separator, so selected lengths and the test skeleton add up to the
    whole prompt."""
    selected = paragraph_selection(inst, store, cfg.text_retrieval_k)
    block = render_block(inst, selected, include_answer=True)
    return max(1, counter.count(block + cfg.separator))


def build_candidate_profiles(
    train: Dataset,
    counter: TokenCounter,
    cfg: SelectionConfig,
    store: Optional[EmbeddingStore] = None,
    normalized: Optional[Mapping[str, str]] = None,
) -> Dict[str, CandidateProfile]:
    profiles = {}
    for inst in train:
        profiles[inst.id] = CandidateProfile(
            id=inst.id,
            normalized_question=(normalized or {}).get(inst.id, ""),
            token_len=exemplar_token_length(inst, counter, cfg, store),
            flags=instance_flags(inst),
        )
    return profiles


def max_answer_tokens(train: Dataset, counter: TokenCounter) -> int:
    """Token length of the longest gold answer in the training set."""
    longest = 0
    for inst in train:
        longest = max(longest, counter.count("\n".join(answer_lines(inst))))
    return longest


def compute_budget(
    inst: Instance,
    cfg: SelectionConfig,
    train: Dataset,
    counter: TokenCounter,
    store: Optional[EmbeddingStore] = None,
    longest_answer: Optional[int] = None,
) -> int:
    """Exemplar token budget: model capacity minus the test prompt skeleton
    minus the longest training answer."""
    skeleton = _skeleton_tokens(inst, cfg, counter, store)
    if longest_answer is None:
        longest_answer = max_answer_tokens(train, counter)
    budget = cfg.model_max_tokens - skeleton - longest_answer
    if budget <= 0:
        raise BudgetExhaustedError(
            f"instance {inst.id!r}: context ({skeleton} tokens) plus longest answer "
            f"({longest_answer}) exceeds capacity {cfg.model_max_tokens}"
        )
    return budget


def _skeleton_tokens(
    inst: Instance,
    cfg: SelectionConfig,
    counter: TokenCounter,
    store: Optional[EmbeddingStore],
) -> int:
    selected = paragraph_selection(inst, store, cfg.text_retrieval_k)
    return counter.count(render_block(inst, selected, include_answer=False))


def _instance_seed(seed: int, inst_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{inst_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _predict_attributes(
    inst: Instance, predictors: Mapping[str, Predictor]
) -> Dict[str, str]:
    predicted: Dict[str, str] = {}
    for kind_name in sorted(predictors):
        try:
            prediction = predictors[kind_name](inst)
            predicted[kind_name] = prediction.value
        except Exception:
            predicted[kind_name] = DEFAULT_VALUES[kind_name]
    return predicted


def _neighbors(
    inst: Instance, train: Dataset, cfg: SelectionConfig, store: EmbeddingStore
) -> List[Tuple[str, float]]:
    pool = [question_key(t.id) for t in train if t.id != inst.id]
    if not pool:
        return []
    return nearest_neighbors(question_key(inst.id), pool, store, cfg.k)


def _result_tokens(
    inst: Instance,
    exemplar_ids: Sequence[str],
    profiles: Mapping[str, CandidateProfile],
    cfg: SelectionConfig,
    counter: TokenCounter,
    store: Optional[EmbeddingStore],
) -> int:
    skeleton = _skeleton_tokens(inst, cfg, counter, store)
    return skeleton + sum(profiles[eid].token_len for eid in exemplar_ids)


def _knapsack_select(
    inst: Instance,
    train: Dataset,
    cfg: SelectionConfig,
    predictors: Mapping[str, Predictor],
    store: EmbeddingStore,
    counter: TokenCounter,
    profiles: Optional[Mapping[str, CandidateProfile]],
    longest_answer: Optional[int],
    randomized_seed: Optional[int],
) -> SelectionResult:
    if profiles is None:
        profiles = build_candidate_profiles(train, counter, cfg, store)
    predicted = _predict_attributes(inst, predictors)
    neighbors = _neighbors(inst, train, cfg, store)
    budget = compute_budget(inst, cfg, train, counter, store, longest_answer)
    if not neighbors:
        return SelectionResult(
            test_id=inst.id,
            exemplar_ids=[],
            predicted_attributes=predicted,
            solver_status=STATUS_OPTIMAL,
            prompt_tokens=_skeleton_tokens(inst, cfg, counter, store),
        )
    items = [
        ItemProfile(
            index=i,
            weight=similarity,
            token_len=profiles[key].token_len,
            flags=profiles[key].flags,
        )
        for i, (key, similarity) in enumerate(neighbors)
    ]
    usable_kinds = {
        kind: value
        for kind, value in predicted.items()
        if all(_has_kind_flags(item, kind) for item in items)
    }
    program = build_program(
        items, usable_kinds, cfg.max_exemplars, budget, cfg.alpha, cfg.beta
    )
    if randomized_seed is None:
        solution = relax_and_solve(program, cfg.solver_timeout)
    else:
        solution = solve_random_feasible(program, randomized_seed, cfg.solver_timeout)
    ordered = sorted(solution.selected, reverse=True)  # ascending similarity
    exemplar_ids = [neighbors[i][0] for i in ordered]
    return SelectionResult(
        test_id=inst.id,
        exemplar_ids=exemplar_ids,
        predicted_attributes=predicted,
        solver_status=solution.status,
        prompt_tokens=_result_tokens(inst, exemplar_ids, profiles, cfg, counter, store),
    )


def _has_kind_flags(item: ItemProfile, kind: str) -> bool:
    names = ("table", "text", "hybrid") if kind == "modality" else (
        "span", "multi_span", "count", "arithmetic"
    )
    return all(name in item.flags for name in names)


def seer_select(
    inst: Instance,
    train: Dataset,
    cfg: SelectionConfig,
    predictors: Mapping[str, Predictor],
    store: EmbeddingStore,
    counter: TokenCounter,
    profiles: Optional[Mapping[str, CandidateProfile]] = None,
    longest_answer: Optional[int] = None,
) -> SelectionResult:
    """Knapsack selection: nearest-neighbor filter, attribute prediction,
    program construction, exact solve with the relaxation ladder."""
    return _knapsack_select(
        inst, train, cfg, predictors, store, counter, profiles, longest_answer, None
    )


def csp_select(
    inst: Instance,
    train: Dataset,
    cfg: SelectionConfig,
    predictors: Mapping[str, Predictor],
    store: EmbeddingStore,
    counter: TokenCounter,
    profiles: Optional[Mapping[str, CandidateProfile]] = None,
    longest_answer: Optional[int] = None,
) -> SelectionResult:
    """Same pipeline as seer_select, but the solve optimizes a seeded
    random objective: a random point satisfying all constraints."""
    return _knapsack_select(
        inst,
        train,
        cfg,
        predictors,
        store,
        counter,
        profiles,
        longest_answer,
        _instance_seed(cfg.seed, inst.id),
    )


def kate_select(
    inst: Instance,
    train: Dataset,
    cfg: SelectionConfig,
    store: EmbeddingStore,
    counter: TokenCounter,
    profiles: Optional[Mapping[str, CandidateProfile]] = None,
) -> SelectionResult:
    """Top-M most similar exemplars, ignoring token and diversity
    constraints.  Prompt tokens are still reported for coverage checks."""
    if profiles is None:
        profiles = build_candidate_profiles(train, counter, cfg, store)
    neighbors = _neighbors(inst, train, cfg, store)[: cfg.max_exemplars]
    exemplar_ids = [key for key, _ in reversed(neighbors)]
    return SelectionResult(
        test_id=inst.id,
        exemplar_ids=exemplar_ids,
        predicted_attributes={},
        solver_status=STATUS_OPTIMAL,
        prompt_tokens=_result_tokens(inst, exemplar_ids, profiles, cfg, counter, store),
    )


def diverse_kate_select(
    inst: Instance,
    train: Dataset,
    cfg: SelectionConfig,
    store: EmbeddingStore,
    counter: TokenCounter,
    profiles: Optional[Mapping[str, CandidateProfile]] = None,
) -> SelectionResult:
    """Nearest neighbors split evenly between the text-modality and
    table-modality training subsets (hybrid counts as table).  An odd M
    gives the extra slot to the side holding the globally most similar
    candidate; an empty side cedes all slots to the other."""
    if profiles is None:
        profiles = build_candidate_profiles(train, counter, cfg, store)
    unlabeled = [t.id for t in train if not t.gold_modality]
    if unlabeled:
        raise SelectionError(
            f"diverse_kate needs gold modality labels; missing for {unlabeled[:5]}"
        )
    text_pool = [t for t in train if t.gold_modality == "text"]
    table_pool = [t for t in train if t.gold_modality in ("table", "hybrid")]
    m = cfg.max_exemplars

    def side_neighbors(pool: List[Instance]) -> List[Tuple[str, float]]:
        keys = [question_key(t.id) for t in pool if t.id != inst.id]
        if not keys:
            return []
        return nearest_neighbors(question_key(inst.id), keys, store, cfg.k)

    text_neighbors = side_neighbors(text_pool)
    table_neighbors = side_neighbors(table_pool)
    if not text_neighbors or not table_neighbors:
        merged = (text_neighbors or table_neighbors)[:m]
    else:
        text_quota = table_quota = m // 2
        if m % 2 == 1:
            if text_neighbors[0][1] >= table_neighbors[0][1]:
                text_quota += 1
            else:
                table_quota += 1
        merged = text_neighbors[:text_quota] + table_neighbors[:table_quota]
    merged.sort(key=lambda pair: (pair[1], pair[0]))  # ascending similarity
    exemplar_ids = [key for key, _ in merged]
    return SelectionResult(
        test_id=inst.id,
        exemplar_ids=exemplar_ids,
        predicted_attributes={},
        solver_status=STATUS_OPTIMAL,
        prompt_tokens=_result_tokens(inst, exemplar_ids, profiles, cfg, counter, store),
    )


def random_select(
    inst: Instance,
    train: Dataset,
    cfg: SelectionConfig,
    counter: Optional[TokenCounter] = None,
    profiles: Optional[Mapping[str, CandidateProfile]] = None,
    store: Optional[EmbeddingStore] = None,
) -> SelectionResult:
    """Uniform sample of M distinct training ids in randomized order,
    seeded per instance for reproducibility."""
    rng = random.Random(_instance_seed(cfg.seed, inst.id))
    ids = sorted(t.id for t in train if t.id != inst.id)
    chosen = rng.sample(ids, min(cfg.max_exemplars, len(ids)))
    tokens = 0
    if counter is not None:
        if profiles is None:
            profiles = build_candidate_profiles(train, counter, cfg, store)
        tokens = _result_tokens(inst, chosen, profiles, cfg, counter, store)
    return SelectionResult(
        test_id=inst.id,
        exemplar_ids=chosen,
        predicted_attributes={},
        solver_status=STATUS_OPTIMAL,
        prompt_tokens=tokens,
    )


GroupHarness = Callable[[List[str], Dataset], float]


def fixed_set_select(
    dev: Dataset,
    train: Dataset,
    cfg: SelectionConfig,
    harness: GroupHarness,
    groups: int = FIXED_SET_GROUPS,
) -> List[str]:
    """Sample seeded random exemplar groups, score each on the dev set with
    the harness, and return the best group (ties keep the first)."""
    if len(dev) == 0:
        raise SelectionError("fixed_set_select needs a non-empty dev set")
    ids = sorted(t.id for t in train)
    if len(ids) < cfg.max_exemplars:
        raise SelectionError("training set smaller than max_exemplars")
    rng = random.Random(cfg.seed)
    candidates = [rng.sample(ids, cfg.max_exemplars) for _ in range(groups)]
    best_group = candidates[0]
    best_score = None
    for group in candidates:
        score = harness(group, dev)
        if best_score is None or score > best_score:
            best_score = score
            best_group = group
    return best_group


def fixed_result(
    inst: Instance,
    group: Sequence[str],
    cfg: SelectionConfig,
    counter: TokenCounter,
    profiles: Mapping[str, CandidateProfile],
    store: Optional[EmbeddingStore] = None,
) -> SelectionResult:
    """Wrap the fixed exemplar group as a per-instance selection result."""
    exemplar_ids = list(group)
    return SelectionResult(
        test_id=inst.id,
        exemplar_ids=exemplar_ids,
        predicted_attributes={},
        solver_status=STATUS_OPTIMAL,
        prompt_tokens=_result_tokens(inst, exemplar_ids, profiles, cfg, counter, store),
    )
