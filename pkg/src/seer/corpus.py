"""Canonical data model for hybrid QA instances and dataset adapters.

The canonical on-disk format is UTF-8 JSON-lines, one instance per line with
keys: id, question, paragraphs, table{header_rows, body_rows}, gold_answer,
gold_program, gold_modality, gold_answer_type.  Adapters map the public
FinQA and TAT-QA release layouts into this model.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

AnswerValue = Union[float, int, str, List[str]]

MODALITIES = ("table", "text", "hybrid")
ANSWER_TYPES = ("span", "multi_span", "count", "arithmetic")

ROW_SEP = " \n "
COL_SEP = " | "


class CorpusError(ValueError):
    """Malformed source file or record."""


@dataclass(frozen=True)
class Table:
    """A rectangular table; header rows precede body rows when linearized."""

    header_rows: List[List[str]] = field(default_factory=list)
    body_rows: List[List[str]] = field(default_factory=list)

    def __post_init__(self):
        rows = self.header_rows + self.body_rows
        if not self.body_rows:
            raise CorpusError("table needs at least one body row")
        widths = {len(r) for r in rows}
        if len(widths) != 1 or min(widths) < 1:
            raise CorpusError(f"table rows have unequal column counts: {sorted(widths)}")

    @property
    def rows(self) -> List[List[str]]:
        return self.header_rows + self.body_rows

    @property
    def n_columns(self) -> int:
        return len(self.body_rows[0])


@dataclass(frozen=True)
class Instance:
    """One hybrid QA problem: question, paragraphs + table context, gold answer."""

    id: str
    question: str
    paragraphs: List[str]
    table: Table
    gold_answer: AnswerValue
    gold_program: str = ""
    gold_modality: Optional[str] = None
    gold_answer_type: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise CorpusError("instance id must be non-empty")
        if not self.question:
            raise CorpusError(f"instance {self.id!r}: question must be non-empty")
        if self.gold_modality is not None and self.gold_modality not in MODALITIES:
            raise CorpusError(f"instance {self.id!r}: bad modality {self.gold_modality!r}")
        if self.gold_answer_type is not None and self.gold_answer_type not in ANSWER_TYPES:
            raise CorpusError(f"instance {self.id!r}: bad answer type {self.gold_answer_type!r}")
        if self.gold_answer_type == "arithmetic" and not self.gold_program:
            raise CorpusError(f"instance {self.id!r}: arithmetic answers require a gold program")


@dataclass(frozen=True)
class Dataset:
    split: str
    instances: List[Instance]

    def __post_init__(self):
        seen = set()
        for inst in self.instances:
            if inst.id in seen:
                raise CorpusError(f"duplicate instance id {inst.id!r}")
            seen.add(inst.id)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def by_id(self, inst_id: str) -> Instance:
        for inst in self.instances:
            if inst.id == inst_id:
                return inst
        raise KeyError(inst_id)


def linearize_table(table: Table) -> str:
    """Render a table as one string: cells joined by " | ", rows by " \\n ".

    Cells containing "|" are sanitized to "/" so the column delimiter stays
    unambiguous.
    """
    rows = []
    for row in table.rows:
        cells = [cell.replace("|", "/") for cell in row]
        rows.append(COL_SEP.join(cells))
    return ROW_SEP.join(rows)


def context_text(inst: Instance, selected_paragraphs: Optional[Sequence[int]] = None) -> str:
    """Paragraphs (all, or the selected subset in original order) then the table."""
    if selected_paragraphs is None:
        chosen = list(inst.paragraphs)
    else:
        for idx in selected_paragraphs:
            if not 0 <= idx < len(inst.paragraphs):
                raise IndexError(f"paragraph index {idx} out of range for instance {inst.id!r}")
        chosen = [inst.paragraphs[i] for i in sorted(set(selected_paragraphs))]
    parts = chosen + [linearize_table(inst.table)]
    return "\n".join(parts)


# --- FinQA operator-sequence translation -----------------------------------

_FINQA_OPS = {
    "add": "+",
    "subtract": "-",
    "multiply": "*",
    "divide": "/",
    "exp": "**",
    "greater": ">",
}

_FINQA_CONSTS = {
    "const_m1": "-1",
    "const_100": "100",
    "const_1000": "1000",
    "const_1000000": "1000000",
}

_STEP_RE = re.compile(r"([a-zA-Z_]+)\(([^()]*)\)")
_NUMBER_RE = re.compile(r"^-?[\d,]*\.?\d+%?$")


def _format_number(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _finqa_atom(arg: str, step: int, table: Optional[Table]) -> str:
    arg = arg.strip()
    if not arg:
        raise CorpusError(f"empty argument in step {step}")
    if arg.startswith("#"):
        try:
            ref = int(arg[1:])
        except ValueError:
            raise CorpusError(f"malformed back-reference {arg!r}") from None
        if ref < 0 or ref >= step:
            raise CorpusError(f"dangling back-reference {arg!r} in step {step}")
        return f"x{ref}"
    if arg in _FINQA_CONSTS:
        return _FINQA_CONSTS[arg]
    if arg.startswith("const_"):
        raise CorpusError(f"unrecognized constant {arg!r}")
    if _NUMBER_RE.match(arg):
        text = arg.replace(",", "")
        if text.endswith("%"):
            return repr(float(text[:-1]) / 100.0)
        return text
    # Fall back to a table cell reference: the argument must equal the text
    # of some cell holding a numeric value.
    if table is not None:
        for row in table.rows:
            for cell in row:
                if cell.strip() == arg:
                    text = cell.strip().replace(",", "").replace("$", "")
                    if _NUMBER_RE.match(text):
                        if text.endswith("%"):
                            return repr(float(text[:-1]) / 100.0)
                        return text
                    raise CorpusError(f"table cell {arg!r} is not numeric")
    raise CorpusError(f"unresolvable argument {arg!r} in step {step}")


def finqa_program_to_code(program: str, table: Optional[Table] = None) -> str:
    """Translate an operator sequence like "subtract(4.1,3.9), divide(#0,3.9)"
    into one assignment line per operation ("x0 = 4.1 - 3.9" ...).

    Supported operators: add, subtract, multiply, divide, exp, greater (the
    last yields a "yes"/"no" comparison).  "#k" references resolve to "xk";
    const_m1/const_100/const_1000/const_1000000 resolve to their values; any
    other argument is looked up as a table cell and inlined when numeric.
    """
    program = program.strip()
    if not program:
        raise CorpusError("empty program")
    steps = _STEP_RE.findall(program)
    residue = _STEP_RE.sub("", program).replace(",", "").strip()
    if not steps or residue:
        raise CorpusError(f"cannot parse operator sequence: {program!r}")
    lines = []
    for k, (op, arg_text) in enumerate(steps):
        if op not in _FINQA_OPS:
            raise CorpusError(f"unknown operator {op!r} in step {k}")
        args = [a for a in (p.strip() for p in arg_text.split(",")) if a != ""]
        if len(args) != 2:
            raise CorpusError(f"operator {op!r} in step {k} takes 2 arguments, got {len(args)}")
        lhs = _finqa_atom(args[0], k, table)
        rhs = _finqa_atom(args[1], k, table)
        lines.append(f"x{k} = {lhs} {_FINQA_OPS[op]} {rhs}")
    return "\n".join(lines)


# --- loading and serialization ----------------------------------------------


def _abort_with_ids(kind: str, offenders: List[str]) -> None:
    shown = offenders[:10]
    raise CorpusError(f"{kind} in {len(offenders)} record(s); first ids: {shown}")


def instance_to_dict(inst: Instance) -> dict:
    return {
        "id": inst.id,
        "question": inst.question,
        "paragraphs": list(inst.paragraphs),
        "table": {
            "header_rows": [list(r) for r in inst.table.header_rows],
            "body_rows": [list(r) for r in inst.table.body_rows],
        },
        "gold_answer": inst.gold_answer,
        "gold_program": inst.gold_program,
        "gold_modality": inst.gold_modality,
        "gold_answer_type": inst.gold_answer_type,
    }


def instance_from_dict(record: dict) -> Instance:
    table = record.get("table") or {}
    return Instance(
        id=str(record.get("id", "")),
        question=record.get("question", ""),
        paragraphs=[str(p) for p in record.get("paragraphs", [])],
        table=Table(
            header_rows=[[str(c) for c in row] for row in table.get("header_rows", [])],
            body_rows=[[str(c) for c in row] for row in table.get("body_rows", [])],
        ),
        gold_answer=record.get("gold_answer", ""),
        gold_program=record.get("gold_program", "") or "",
        gold_modality=record.get("gold_modality"),
        gold_answer_type=record.get("gold_answer_type"),
    )


def write_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for inst in dataset.instances:
            fh.write(json.dumps(instance_to_dict(inst), sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def _load_canonical(path: Path, split: str) -> Dataset:
    instances = []
    bad: List[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: not valid JSON ({exc})") from None
            try:
                instances.append(instance_from_dict(record))
            except CorpusError:
                bad.append(str(record.get("id", f"line {lineno}")))
    if bad:
        _abort_with_ids("schema violation", bad)
    return Dataset(split=split, instances=instances)


def _table_from_rows(raw_table: list) -> Table:
    rows = [[str(c) for c in row] for row in raw_table]
    if len(rows) >= 2:
        return Table(header_rows=[rows[0]], body_rows=rows[1:])
    return Table(header_rows=[], body_rows=rows)


def _finqa_modality(qa: dict) -> Optional[str]:
    if "modality" in qa:
        return qa["modality"]
    table_rows = qa.get("ann_table_rows")
    text_rows = qa.get("ann_text_rows")
    if table_rows is None and text_rows is None:
        return None
    has_table = bool(table_rows)
    has_text = bool(text_rows)
    if has_table and has_text:
        return "hybrid"
    return "table" if has_table else "text"


def _load_finqa(path: Path, split: str) -> Dataset:
    with path.open("r", encoding="utf-8") as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise CorpusError(f"{path}: expected a JSON array of records")
    instances = []
    bad: List[str] = []
    for i, rec in enumerate(records):
        rec_id = str(rec.get("id", f"record {i}"))
        qa = rec.get("qa") or {}
        question = qa.get("question", "")
        raw_table = rec.get("table") or []
        if not question or not raw_table:
            bad.append(rec_id)
            continue
        try:
            table = _table_from_rows(raw_table)
            program = qa.get("program", "")
            code = finqa_program_to_code(program, table) if program else ""
            answer = qa.get("exe_ans", qa.get("answer", ""))
            instances.append(
                Instance(
                    id=rec_id,
                    question=question,
                    paragraphs=[str(p) for p in rec.get("pre_text", [])]
                    + [str(p) for p in rec.get("post_text", [])],
                    table=table,
                    gold_answer=answer,
                    gold_program=code,
                    gold_modality=_finqa_modality(qa),
                    gold_answer_type="arithmetic" if code else None,
                )
            )
        except CorpusError:
            bad.append(rec_id)
    if bad:
        _abort_with_ids("unmappable FinQA record", bad)
    return Dataset(split=split, instances=instances)


_TATQA_TYPES = {
    "span": "span",
    "multi-span": "multi_span",
    "multi_span": "multi_span",
    "count": "count",
    "arithmetic": "arithmetic",
}
_TATQA_MODALITIES = {
    "table": "table",
    "text": "text",
    "table-text": "hybrid",
    "hybrid": "hybrid",
}


def _sanitize_derivation(derivation: str) -> str:
    # Thousands separators and percent glyphs appear inside source
    # derivations; neither survives the arithmetic mini-grammar.
    text = re.sub(r"(?<=\d),(?=\d)", "", derivation)
    return text.replace("%", "").strip()


def _load_tatqa(path: Path, split: str) -> Dataset:
    with path.open("r", encoding="utf-8") as fh:
        blocks = json.load(fh)
    if not isinstance(blocks, list):
        raise CorpusError(f"{path}: expected a JSON array of context blocks")
    instances = []
    bad: List[str] = []
    for bi, block in enumerate(blocks):
        raw_table = (block.get("table") or {}).get("table") or []
        paragraphs = sorted(block.get("paragraphs", []), key=lambda p: p.get("order", 0))
        para_texts = [str(p.get("text", "")) for p in paragraphs]
        for qi, q in enumerate(block.get("questions", [])):
            q_id = str(q.get("uid", f"block{bi}-q{qi}"))
            question = q.get("question", "")
            if not question or not raw_table:
                bad.append(q_id)
                continue
            answer_type = _TATQA_TYPES.get(str(q.get("answer_type", "")).lower())
            answer = q.get("answer", "")
            if isinstance(answer, (int, float)) and answer_type != "arithmetic":
                answer = [str(answer)]
            if isinstance(answer, str) and answer_type in ("span", "multi_span", "count"):
                answer = [answer]
            if isinstance(answer, list):
                answer = [str(a) for a in answer]
            program = ""
            if answer_type == "arithmetic":
                derivation = _sanitize_derivation(str(q.get("derivation", "")))
                if not derivation:
                    bad.append(q_id)
                    continue
                program = f"ans = {derivation}"
            try:
                instances.append(
                    Instance(
                        id=q_id,
                        question=question,
                        paragraphs=para_texts,
                        table=_table_from_rows(raw_table),
                        gold_answer=answer,
                        gold_program=program,
                        gold_modality=_TATQA_MODALITIES.get(str(q.get("answer_from", "")).lower()),
                        gold_answer_type=answer_type,
                    )
                )
            except CorpusError:
                bad.append(q_id)
    if bad:
        _abort_with_ids("unmappable TAT-QA record", bad)
    return Dataset(split=split, instances=instances)


def load_dataset(path, format: str = "canonical", split: str = "train") -> Dataset:
    """Load a dataset file in canonical JSON-lines, FinQA, or TAT-QA layout.

    Records with no table or no question abort the load with a diagnostic
    naming the first 10 offending ids.  TAT-QA scale prediction is dropped.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"dataset file not found: {path}")
    if format == "canonical":
        return _load_canonical(path, split)
    if format == "finqa":
        return _load_finqa(path, split)
    if format == "tatqa":
        return _load_tatqa(path, split)
    raise CorpusError(f"unknown dataset format {format!r}")


def answer_lines(inst: Instance) -> List[str]:
    """The answer block of an instance as program lines.

    Arithmetic answers are the gold program's assignment lines; textual
    answers become one comment line per span.
    """
    if inst.gold_program:
        return inst.gold_program.splitlines()
    answer = inst.gold_answer
    if isinstance(answer, list):
        return [f"# {span}" for span in answer]
    if isinstance(answer, (int, float)):
        return [f"ans = {_format_number(float(answer))}"]
    return [f"# {answer}"]
