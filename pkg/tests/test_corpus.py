from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from seer.corpus import (
    CorpusError,
    Dataset,
    Instance,
    Table,
    answer_lines,
    context_text,
    finqa_program_to_code,
    instance_from_dict,
    instance_to_dict,
    linearize_table,
    load_dataset,
    write_dataset,
)
from seer.evalx import execute_program, parse_program

from conftest import make_dataset, make_instance


# --- Table / Instance invariants ---------------------------------------------


def test_table_rejects_ragged_rows():
    with pytest.raises(CorpusError):
        Table(header_rows=[["a", "b"]], body_rows=[["c"]])


def test_table_requires_body_row():
    with pytest.raises(CorpusError):
        Table(header_rows=[["a"]], body_rows=[])


def test_instance_requires_question():
    table = Table(body_rows=[["a"]])
    with pytest.raises(CorpusError):
        Instance(id="x", question="", paragraphs=[], table=table, gold_answer="1")


def test_arithmetic_requires_program():
    table = Table(body_rows=[["a"]])
    with pytest.raises(CorpusError):
        Instance(
            id="x", question="q", paragraphs=[], table=table,
            gold_answer=1.0, gold_answer_type="arithmetic",
        )


def test_dataset_rejects_duplicate_ids():
    inst = make_instance("dup")
    with pytest.raises(CorpusError):
        Dataset(split="train", instances=[inst, inst])


# --- linearize_table ----------------------------------------------------------


def test_linearize_single_cell():
    assert linearize_table(Table(body_rows=[["a"]])) == "a"


def test_linearize_header_and_body(tiny_table):
    assert linearize_table(tiny_table) == "y | v \n 2019 | 5"


def test_linearize_delimiter_counts():
    # rows-1 row separators, rows*(cols-1) column separators
    table = Table(header_rows=[["a", "b"]], body_rows=[["c", "d"], ["e", "f"]])
    text = linearize_table(table)
    assert text.count(" \n ") == 2
    assert text.count(" | ") == 3


def test_linearize_sanitizes_pipe_cells():
    table = Table(body_rows=[["a|b", "c"]])
    assert linearize_table(table) == "a/b | c"


@given(
    st.lists(
        st.lists(st.text(alphabet="abc 0", min_size=1, max_size=6), min_size=2, max_size=4),
        min_size=1,
        max_size=5,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
def test_linearize_round_trips_delimiter_free_cells(rows):
    table = Table(body_rows=rows)
    text = linearize_table(table)
    rebuilt = [line.split(" | ") for line in text.split(" \n ")]
    assert rebuilt == rows


# --- context_text --------------------------------------------------------------


def test_context_no_paragraphs():
    inst = make_instance("c1", paragraphs=[])
    assert context_text(inst) == linearize_table(inst.table)


def test_context_selected_subset_in_original_order():
    inst = make_instance("c2", paragraphs=["p0", "p1", "p2"])
    out = context_text(inst, [2, 0])
    assert out == "p0\np2\n" + linearize_table(inst.table)


def test_context_single_selection():
    inst = make_instance("c3", paragraphs=["p0", "p1"])
    assert context_text(inst, [1]) == "p1\n" + linearize_table(inst.table)


def test_context_index_out_of_range():
    inst = make_instance("c4", paragraphs=["p0"])
    with pytest.raises(IndexError):
        context_text(inst, [3])


# --- finqa_program_to_code ------------------------------------------------------


def test_translate_single_add():
    assert finqa_program_to_code("add(1,2)") == "x0 = 1 + 2"


def test_translate_chain_with_backref():
    code = finqa_program_to_code("subtract(4.1,3.9), divide(#0,3.9)")
    assert code == "x0 = 4.1 - 3.9\nx1 = x0 / 3.9"
    value = execute_program(parse_program(code))
    assert value == pytest.approx(0.05128, abs=1e-4)


def test_translate_dangling_backref():
    with pytest.raises(CorpusError, match="back-reference"):
        finqa_program_to_code("add(1,#5)")


def test_translate_unknown_operator():
    with pytest.raises(CorpusError, match="operator"):
        finqa_program_to_code("table_sum(rows,1)")


def test_translate_bad_arity():
    with pytest.raises(CorpusError, match="2 arguments"):
        finqa_program_to_code("add(1,2,3)")


def test_translate_constants():
    assert finqa_program_to_code("multiply(3,const_m1)") == "x0 = 3 * -1"
    assert finqa_program_to_code("divide(5,const_100)") == "x0 = 5 / 100"


def test_translate_unknown_constant_rejected():
    with pytest.raises(CorpusError, match="constant"):
        finqa_program_to_code("add(1,const_7)")


def test_translate_percent_literal():
    assert finqa_program_to_code("add(4.1%,1)") == "x0 = 0.041 + 1"


def test_translate_greater_yields_comparison():
    code = finqa_program_to_code("greater(5,3)")
    assert code == "x0 = 5 > 3"
    assert execute_program(parse_program(code)) == "yes"


def test_translate_table_cell_reference(tiny_table):
    code = finqa_program_to_code("add(2019,1)", tiny_table)
    assert code == "x0 = 2019 + 1"
    with pytest.raises(CorpusError, match="unresolvable"):
        finqa_program_to_code("add(net sales,1)", tiny_table)


def test_translated_programs_always_execute():
    # well-formed operator sequences yield runnable programs
    programs = [
        "add(1,2), multiply(#0,3), subtract(#1,#0)",
        "divide(10,4), exp(#0,2)",
        "greater(1,2)",
    ]
    for program in programs:
        execute_program(parse_program(finqa_program_to_code(program)))


# --- canonical round trip -------------------------------------------------------


def test_canonical_round_trip(tmp_path):
    dataset = make_dataset(5, seed=3, answer_types=("arithmetic", "span", "count"))
    path = tmp_path / "data.jsonl"
    write_dataset(dataset, path)
    loaded = load_dataset(path, "canonical", split="train")
    assert len(loaded) == 2 + 3
    assert [instance_to_dict(i) for i in loaded] == [instance_to_dict(i) for i in dataset]
    # serialize again: byte-stable
    path2 = tmp_path / "data2.jsonl"
    write_dataset(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_canonical_identity_two_records(tmp_path):
    records = [make_instance("a1"), make_instance("a2", modality="text")]
    path = tmp_path / "two.jsonl"
    write_dataset(Dataset(split="train", instances=records), path)
    loaded = load_dataset(path, "canonical")
    assert len(loaded) == 2
    assert loaded.instances[0] == records[0]


def test_canonical_missing_question_names_id(tmp_path):
    record = instance_to_dict(make_instance("bad1"))
    record["question"] = ""
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(record) + "\n", encoding="utf-8")
    with pytest.raises(CorpusError, match="bad1"):
        load_dataset(path, "canonical")


def test_canonical_malformed_json(tmp_path):
    path = tmp_path / "broken.jsonl"
    path.write_text("{not json}\n", encoding="utf-8")
    with pytest.raises(CorpusError, match="JSON"):
        load_dataset(path, "canonical")


# --- FinQA adapter ---------------------------------------------------------------


def _finqa_record(rec_id="fq1", question="what was the change?", program="subtract(4.1,3.9)"):
    return {
        "id": rec_id,
        "pre_text": ["before text ."],
        "post_text": ["after text ."],
        "table": [["year", "value"], ["2019", "4.1"], ["2020", "3.9"]],
        "qa": {
            "question": question,
            "program": program,
            "exe_ans": 0.2,
            "ann_table_rows": [1],
            "ann_text_rows": [],
        },
    }


def test_finqa_adapter_maps_fields(tmp_path):
    path = tmp_path / "finqa.json"
    path.write_text(json.dumps([_finqa_record()]), encoding="utf-8")
    dataset = load_dataset(path, "finqa", split="train")
    inst = dataset.instances[0]
    assert inst.paragraphs == ["before text .", "after text ."]
    assert inst.gold_program == "x0 = 4.1 - 3.9"
    assert inst.gold_modality == "table"
    assert inst.gold_answer_type == "arithmetic"
    assert inst.table.header_rows == [["year", "value"]]


def test_finqa_adapter_rejects_missing_question(tmp_path):
    record = _finqa_record(rec_id="fq-broken", question="")
    path = tmp_path / "finqa.json"
    path.write_text(json.dumps([record]), encoding="utf-8")
    with pytest.raises(CorpusError, match="fq-broken"):
        load_dataset(path, "finqa")


# --- TAT-QA adapter --------------------------------------------------------------


def _tatqa_block():
    return {
        "table": {"uid": "tbl1", "table": [["metric", "2019", "2018"], ["sales", "100", "90"]]},
        "paragraphs": [
            {"uid": "p1", "order": 2, "text": "second paragraph ."},
            {"uid": "p2", "order": 1, "text": "first paragraph ."},
        ],
        "questions": [
            {
                "uid": "q-arith",
                "question": "what was the change in sales?",
                "answer": 10,
                "answer_type": "arithmetic",
                "answer_from": "table",
                "derivation": "100 - 90",
                "scale": "thousand",
            },
            {
                "uid": "q-mspan",
                "question": "which years are shown?",
                "answer": ["2019", "2018"],
                "answer_type": "multi-span",
                "answer_from": "table-text",
                "derivation": "",
                "scale": "",
            },
        ],
    }


def test_tatqa_adapter_maps_questions(tmp_path):
    path = tmp_path / "tatqa.json"
    path.write_text(json.dumps([_tatqa_block()]), encoding="utf-8")
    dataset = load_dataset(path, "tatqa", split="dev")
    assert len(dataset) == 2
    arith = dataset.by_id("q-arith")
    assert arith.gold_program == "ans = 100 - 90"
    assert arith.paragraphs == ["first paragraph .", "second paragraph ."]
    assert arith.gold_modality == "table"
    mspan = dataset.by_id("q-mspan")
    assert mspan.gold_answer == ["2019", "2018"]
    assert mspan.gold_answer_type == "multi_span"
    assert mspan.gold_modality == "hybrid"
    assert mspan.gold_program == ""
    # scale is dropped entirely
    assert "thousand" not in json.dumps(instance_to_dict(arith))


def test_tatqa_derivation_sanitized(tmp_path):
    block = _tatqa_block()
    block["questions"][0]["derivation"] = "(11,386-10,353)/10,353"
    path = tmp_path / "tatqa.json"
    path.write_text(json.dumps([block]), encoding="utf-8")
    inst = load_dataset(path, "tatqa").by_id("q-arith")
    assert inst.gold_program == "ans = (11386-10353)/10353"
    execute_program(parse_program(inst.gold_program))


# --- answer_lines ----------------------------------------------------------------


def test_answer_lines_arithmetic():
    inst = make_instance("al1", answer_type="arithmetic")
    assert answer_lines(inst) == inst.gold_program.splitlines()


def test_answer_lines_spans_are_comments():
    inst = make_instance("al2", answer_type="multi_span")
    lines = answer_lines(inst)
    assert all(line.startswith("# ") for line in lines)
    assert len(lines) == len(inst.gold_answer)


def test_instance_dict_round_trip():
    inst = make_instance("rt1", answer_type="span")
    assert instance_from_dict(instance_to_dict(inst)) == inst
