"""Per-instance knapsack integer programs and an exact branch-and-bound solver.

A program selects a subset of candidate exemplars maximizing total
similarity weight under a double capacity constraint (count and token
length) plus diversity constraints derived from predicted attributes.
The solver is depth-first branch-and-bound over binary inclusion
variables with a wall-clock timeout and deterministic tie-breaking:
among equal-objective optima the lexicographically smallest index list
wins.
"""

from __future__ import annotations

import heapq
import random
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

FEASIBILITY_SLACK = 1e-9
_BOUND_GUARD = 1e-9
_TIMEOUT_CHECK_INTERVAL = 1024

MODALITY_FLAGS = ("table", "text", "hybrid")
ANSWER_TYPE_FLAGS = ("span", "multi_span", "count", "arithmetic")
_KIND_FLAGS = {"modality": MODALITY_FLAGS, "answer_type": ANSWER_TYPE_FLAGS}

STATUS_OPTIMAL = "optimal"
STATUS_INCUMBENT_TIMEOUT = "incumbent_timeout"
STATUS_RELAXED_BETA = "relaxed_beta"
STATUS_RELAXED_ALL = "relaxed_all"
STATUS_INFEASIBLE = "infeasible"


class KnapsackError(ValueError):
    pass


@dataclass(frozen=True)
class ItemProfile:
    """One candidate exemplar: similarity weight, token length, and binary
    attribute flags (one-hot within each attribute kind)."""

    index: int
    weight: float
    token_len: int
    flags: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.token_len < 1:
            raise KnapsackError(f"item {self.index}: token_len must be >= 1")
        for kind_flags in _KIND_FLAGS.values():
            present = [name for name in kind_flags if name in self.flags]
            if present and sum(self.flags[name] for name in present) != 1:
                raise KnapsackError(
                    f"item {self.index}: flags {present} must have exactly one set"
                )


@dataclass(frozen=True)
class LinearConstraint:
    coeffs: Mapping[int, float]
    sense: str  # "LE" or "GE"
    rhs: float
    label: str

    def __post_init__(self):
        if not self.coeffs:
            raise KnapsackError(f"constraint {self.label!r} has no coefficients")
        if self.sense not in ("LE", "GE"):
            raise KnapsackError(f"constraint {self.label!r}: bad sense {self.sense!r}")

    def value(self, selected: Sequence[int]) -> float:
        chosen = set(selected)
        return sum(coeff for idx, coeff in self.coeffs.items() if idx in chosen)

    def satisfied(self, selected: Sequence[int], slack: float = FEASIBILITY_SLACK) -> bool:
        value = self.value(selected)
        if self.sense == "LE":
            return value <= self.rhs + slack
        return value >= self.rhs - slack


@dataclass(frozen=True)
class KnapsackProgram:
    items: List[ItemProfile]
    max_count: int
    token_budget: int
    diversity: List[LinearConstraint]
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha + self.beta > 1.0 + 1e-9:
            raise KnapsackError(f"alpha + beta must not exceed 1 (got {self.alpha} + {self.beta})")
        if self.max_count < 0 or self.token_budget < 0:
            raise KnapsackError("capacities must be non-negative")
        valid = {item.index for item in self.items}
        if valid != set(range(len(self.items))):
            raise KnapsackError("item indices must be 0..n-1 in order")
        for constraint in self.diversity:
            bad = [idx for idx in constraint.coeffs if idx not in valid]
            if bad:
                raise KnapsackError(
                    f"constraint {constraint.label!r} references unknown items {bad}"
                )


@dataclass(frozen=True)
class Solution:
    selected: Tuple[int, ...]
    objective: float
    status: str


def selection_objective(items: Sequence[ItemProfile], selected: Sequence[int]) -> float:
    """Canonical objective of a subset: weights accumulated in ascending
    index order (so equal subsets always produce identical floats)."""
    total = 0.0
    for idx in sorted(selected):
        total += items[idx].weight
    return total


def constraint_violations(program: KnapsackProgram, selected: Sequence[int]) -> List[str]:
    """Constraints violated by a selection (empty list means feasible)."""
    violations = []
    if len(selected) != len(set(selected)):
        violations.append("duplicate indices")
    if len(selected) > program.max_count:
        violations.append(f"count {len(selected)} > {program.max_count}")
    tokens = sum(program.items[idx].token_len for idx in selected)
    if tokens > program.token_budget:
        violations.append(f"tokens {tokens} > {program.token_budget}")
    for constraint in program.diversity:
        if not constraint.satisfied(selected):
            violations.append(
                f"{constraint.label}: {constraint.value(selected)} vs rhs {constraint.rhs}"
            )
    return violations


# --- program construction ----------------------------------------------------


def _flag_coeffs(candidates: Sequence[ItemProfile], names: Sequence[str]) -> Dict[int, float]:
    coeffs = {}
    for item in candidates:
        coeffs[item.index] = float(sum(item.flags[name] for name in names))
    return coeffs


def build_program(
    candidates: Sequence[ItemProfile],
    predicted: Mapping[str, str],
    max_count: int,
    token_budget: int,
    alpha: float,
    beta: float,
) -> KnapsackProgram:
    """Assemble the knapsack program for a test instance.

    For a definite predicted value v of an attribute kind, two diversity
    constraints are emitted: candidates flagged v must reach alpha*M and the
    remaining values of the kind must reach beta*M.  A "hybrid" modality is
    treated as uncertain: all three modalities get a beta*M floor instead.
    Multiple predicted kinds contribute their constraint sets conjointly.
    """
    if not candidates:
        raise KnapsackError("at least one candidate is required")
    if not 0.0 <= alpha <= 1.0 or not 0.0 <= beta <= 1.0:
        raise KnapsackError("alpha and beta must lie in [0, 1]")
    constraints: List[LinearConstraint] = []
    for kind in ("modality", "answer_type"):
        if kind not in predicted:
            continue
        value = predicted[kind]
        kind_values = _KIND_FLAGS[kind]
        if value not in kind_values:
            raise KnapsackError(f"unknown {kind} value {value!r}")
        for item in candidates:
            missing = [name for name in kind_values if name not in item.flags]
            if missing:
                raise KnapsackError(f"item {item.index} lacks flags {missing}")
        if kind == "modality" and value == "hybrid":
            for name in kind_values:
                constraints.append(
                    LinearConstraint(
                        coeffs=_flag_coeffs(candidates, [name]),
                        sense="GE",
                        rhs=beta * max_count,
                        label=f"beta:modality={name}",
                    )
                )
            continue
        others = [name for name in kind_values if name != value]
        constraints.append(
            LinearConstraint(
                coeffs=_flag_coeffs(candidates, [value]),
                sense="GE",
                rhs=alpha * max_count,
                label=f"alpha:{kind}={value}",
            )
        )
        constraints.append(
            LinearConstraint(
                coeffs=_flag_coeffs(candidates, others),
                sense="GE",
                rhs=beta * max_count,
                label=f"beta:{kind}!={value}",
            )
        )
    return KnapsackProgram(
        items=list(candidates),
        max_count=max_count,
        token_budget=token_budget,
        diversity=constraints,
        alpha=alpha,
        beta=beta,
    )


# --- branch and bound --------------------------------------------------------


class _Timeout(Exception):
    pass


class _BranchAndBound:
    """DFS over inclusion decisions in descending weight/length ratio order.

    The node bound is the tighter of two relaxations that both drop the GE
    diversity constraints: the fractional knapsack bound on the token
    constraint and the top-(remaining count) weight bound on the count
    constraint.  GE constraints prune via reachability: a branch dies when
    the undecided items can no longer lift a GE sum to its rhs.
    """

    def __init__(
        self,
        program: KnapsackProgram,
        deadline: float,
        objective_weights: Optional[Sequence[float]] = None,
    ):
        self.program = program
        self.items = program.items
        self.n = len(self.items)
        self.deadline = deadline
        self.weights = (
            list(objective_weights)
            if objective_weights is not None
            else [item.weight for item in self.items]
        )
        self.lengths = [item.token_len for item in self.items]
        self.order = sorted(
            range(self.n), key=lambda i: (-self.weights[i] / self.lengths[i], i)
        )
        self.ge = [c for c in program.diversity if c.sense == "GE"]
        self.le = [c for c in program.diversity if c.sense == "LE"]
        # Suffix sums of positive GE coefficients along the branching order.
        self.ge_coeffs = [
            [float(c.coeffs.get(i, 0.0)) for i in range(self.n)] for c in self.ge
        ]
        self.ge_suffix = []
        self.ge_max_coeff = []
        for coeffs in self.ge_coeffs:
            suffix = [0.0] * (self.n + 1)
            for depth in range(self.n - 1, -1, -1):
                suffix[depth] = suffix[depth + 1] + max(0.0, coeffs[self.order[depth]])
            self.ge_suffix.append(suffix)
            self.ge_max_coeff.append(max([0.0] + [c for c in coeffs if c > 0.0]))
        self.best_selected: Optional[List[int]] = None
        self.best_objective = float("-inf")
        self.nodes = 0
        self.timed_out = False

    def _check_time(self) -> None:
        self.nodes += 1
        if self.nodes % _TIMEOUT_CHECK_INTERVAL == 0 and time.monotonic() > self.deadline:
            raise _Timeout

    def _bound(self, depth: int, value: float, tokens: int, count: int) -> float:
        cap_tokens = self.program.token_budget - tokens
        cap_count = self.program.max_count - count
        if cap_count <= 0:
            return value
        token_bound = value
        remaining = cap_tokens
        for pos in range(depth, self.n):
            idx = self.order[pos]
            weight = self.weights[idx]
            if weight <= 0.0:
                continue
            length = self.lengths[idx]
            if length <= remaining:
                remaining -= length
                token_bound += weight
            else:
                if remaining > 0:
                    token_bound += weight * (remaining / length)
                break
        top: List[float] = []
        for pos in range(depth, self.n):
            weight = self.weights[self.order[pos]]
            if weight <= 0.0:
                continue
            if len(top) < cap_count:
                heapq.heappush(top, weight)
            elif weight > top[0]:
                heapq.heapreplace(top, weight)
        count_bound = value + sum(top)
        return min(token_bound, count_bound)

    def _ge_reachable(self, depth: int, achieved: List[float], cap_count: int) -> bool:
        for ci in range(len(self.ge)):
            needed = self.ge[ci].rhs - achieved[ci]
            if needed <= FEASIBILITY_SLACK:
                continue
            if achieved[ci] + self.ge_suffix[ci][depth] < self.ge[ci].rhs - FEASIBILITY_SLACK:
                return False
            if needed > cap_count * self.ge_max_coeff[ci] + FEASIBILITY_SLACK:
                return False
        return True

    def _offer(self, included: List[int]) -> None:
        selected = sorted(included)
        for constraint in self.le:
            if not constraint.satisfied(selected):
                return
        objective = 0.0
        for idx in selected:
            objective += self.weights[idx]
        if objective > self.best_objective or (
            objective == self.best_objective
            and (self.best_selected is None or selected < self.best_selected)
        ):
            self.best_objective = objective
            self.best_selected = selected

    def _dfs(self, depth: int, value: float, tokens: int, count: int,
             achieved: List[float], included: List[int]) -> None:
        self._check_time()
        if depth == self.n:
            feasible = all(
                achieved[ci] >= self.ge[ci].rhs - FEASIBILITY_SLACK
                for ci in range(len(self.ge))
            )
            if feasible:
                self._offer(included)
            return
        if not self._ge_reachable(depth, achieved, self.program.max_count - count):
            return
        if self.best_selected is not None:
            if self._bound(depth, value, tokens, count) + _BOUND_GUARD < self.best_objective:
                return
        idx = self.order[depth]
        if (
            count + 1 <= self.program.max_count
            and tokens + self.lengths[idx] <= self.program.token_budget
        ):
            included.append(idx)
            for ci in range(len(self.ge)):
                achieved[ci] += self.ge_coeffs[ci][idx]
            self._dfs(
                depth + 1,
                value + self.weights[idx],
                tokens + self.lengths[idx],
                count + 1,
                achieved,
                included,
            )
            for ci in range(len(self.ge)):
                achieved[ci] -= self.ge_coeffs[ci][idx]
            included.pop()
        self._dfs(depth + 1, value, tokens, count, achieved, included)

    def run(self) -> Tuple[Optional[List[int]], bool]:
        try:
            self._dfs(0, 0.0, 0, 0, [0.0] * len(self.ge), [])
        except _Timeout:
            self.timed_out = True
        return self.best_selected, self.timed_out


def solve(
    program: KnapsackProgram,
    timeout: float = 5.0,
    _objective_weights: Optional[Sequence[float]] = None,
) -> Solution:
    """Exact solve within a wall-clock timeout.

    Returns status "optimal" with the maximum-weight feasible subset
    (lexicographically smallest index list among ties), "incumbent_timeout"
    with the best feasible incumbent when time runs out, or "infeasible"
    when no feasible subset was found (this includes the pathological case
    of a timeout before any incumbent).  No relaxation is attempted here;
    see relax_and_solve.
    """
    solver = _BranchAndBound(program, time.monotonic() + timeout, _objective_weights)
    selected, timed_out = solver.run()
    if selected is None:
        return Solution(selected=(), objective=0.0, status=STATUS_INFEASIBLE)
    objective = selection_objective(program.items, selected)
    status = STATUS_INCUMBENT_TIMEOUT if timed_out else STATUS_OPTIMAL
    return Solution(selected=tuple(selected), objective=objective, status=status)


def _without_beta(program: KnapsackProgram) -> KnapsackProgram:
    kept = [c for c in program.diversity if not c.label.startswith("beta:")]
    return KnapsackProgram(
        items=program.items,
        max_count=program.max_count,
        token_budget=program.token_budget,
        diversity=kept,
        alpha=program.alpha,
        beta=program.beta,
    )


def _without_diversity(program: KnapsackProgram) -> KnapsackProgram:
    return KnapsackProgram(
        items=program.items,
        max_count=program.max_count,
        token_budget=program.token_budget,
        diversity=[],
        alpha=program.alpha,
        beta=program.beta,
    )


def relax_and_solve(
    program: KnapsackProgram,
    timeout: float = 5.0,
    _objective_weights: Optional[Sequence[float]] = None,
) -> Solution:
    """Solve, degrading gracefully on infeasibility: retry without the
    beta ("other attributes") constraints, then without any diversity
    constraint; the capacity-only program always admits at least the empty
    selection.  Later stages reuse the remaining timeout budget."""
    deadline = time.monotonic() + timeout

    def remaining() -> float:
        return max(0.05, deadline - time.monotonic())

    solution = solve(program, remaining(), _objective_weights)
    if solution.status != STATUS_INFEASIBLE:
        return solution
    relaxed_beta = _without_beta(program)
    if len(relaxed_beta.diversity) != len(program.diversity):
        solution = solve(relaxed_beta, remaining(), _objective_weights)
        if solution.status != STATUS_INFEASIBLE:
            return Solution(solution.selected, solution.objective, STATUS_RELAXED_BETA)
    if relaxed_beta.diversity or program.diversity:
        solution = solve(_without_diversity(program), remaining(), _objective_weights)
        if solution.status != STATUS_INFEASIBLE:
            return Solution(solution.selected, solution.objective, STATUS_RELAXED_ALL)
    return Solution(selected=(), objective=0.0, status=STATUS_RELAXED_ALL)


def solve_random_feasible(
    program: KnapsackProgram, seed: int, timeout: float = 5.0
) -> Solution:
    """A "random feasible" selection: optimize a seeded uniform(0,1)
    objective instead of the similarity weights, keeping all constraints.
    The reported objective is the original-weight total of the selection;
    relaxation semantics follow relax_and_solve."""
    rng = random.Random(seed)
    random_weights = [rng.uniform(0.0, 1.0) for _ in program.items]
    return relax_and_solve(program, timeout, random_weights)


# --- debug export ------------------------------------------------------------


def to_lp_string(program: KnapsackProgram) -> str:
    """Serialize a program in LP text format for external cross-checking."""

    def term(coeff: float, idx: int) -> str:
        return f"{coeff:+g} x{idx}"

    lines = ["Maximize"]
    objective = " ".join(term(item.weight, item.index) for item in program.items)
    lines.append(f" obj: {objective}")
    lines.append("Subject To")
    count_expr = " ".join(f"+1 x{item.index}" for item in program.items)
    lines.append(f" count: {count_expr} <= {program.max_count}")
    token_expr = " ".join(term(item.token_len, item.index) for item in program.items)
    lines.append(f" tokens: {token_expr} <= {program.token_budget}")
    for ci, constraint in enumerate(program.diversity):
        sense = "<=" if constraint.sense == "LE" else ">="
        expr = " ".join(
            term(coeff, idx) for idx, coeff in sorted(constraint.coeffs.items())
        )
        lines.append(f" d{ci}_{constraint.label}: {expr} {sense} {constraint.rhs:g}")
    lines.append("Binary")
    lines.append(" " + " ".join(f"x{item.index}" for item in program.items))
    lines.append("End")
    return "\n".join(lines) + "\n"
