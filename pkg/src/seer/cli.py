"""Experiment orchestration: prepare, select, predict, evaluate, sweep, report.

Stages communicate only through files in the output directory
(profiles -> selections -> completions -> metrics), so any stage can be
rerun or swapped.  Every stage writes a manifest with a config snapshot,
timings, and output digests.  Outputs are keyed and sorted by instance id,
so runs are byte-reproducible for a fixed config, seed, and warm cache.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .attributes import (
    KINDS,
    make_file_predictor,
    make_gold_predictor,
    make_icl_predictor,
    make_stub_predictor,
)
from .corpus import Dataset, Instance, load_dataset
from .evalx import (
    EvalSyntaxError,
    ExecutionError,
    InstanceMetrics,
    MetricsReport,
    aggregate_metrics,
    answers_match,
    coverage_report,
    exact_match,
    execute_program,
    numeracy_f1,
    parse_program,
    program_accuracy,
    subset_report,
)
from .llm import (
    CompletionParams,
    HttpCompletionClient,
    MockCompletionClient,
    PromptSpec,
    ResponseCache,
    complete_cached,
    render_block,
)
from .selection import (
    SelectionConfig,
    SelectionResult,
    build_candidate_profiles,
    csp_select,
    diverse_kate_select,
    fixed_result,
    fixed_set_select,
    kate_select,
    max_answer_tokens,
    paragraph_selection,
    random_select,
    seer_select,
    CandidateProfile,
)
from .textprep import EmbeddingStore, build_hashing_store, normalize_question, question_key
from .tokens import make_counter


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train_path: str = ""
    dev_path: str = ""
    test_path: str = ""
    data_format: str = "canonical"
    embeddings: dict = field(default_factory=lambda: {"source": "hashing", "dim": 256})
    selection: dict = field(default_factory=dict)
    predictors: dict = field(default_factory=dict)
    llm: dict = field(default_factory=lambda: {"mode": "mock"})
    token_counter: dict = field(default_factory=lambda: {"type": "heuristic"})
    metrics_style: str = "finqa"
    output_dir: str = "out"
    seed: int = 0
    workers: int = 1
    offline: bool = False
    sweep: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: Optional[str], overrides: Optional[dict] = None) -> "RunConfig":
        data: dict = {}
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        config = cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in (overrides or {}).items():
            if value is not None:
                setattr(config, key, value)
        return config

    def validate_paths(self, require_dev: bool = False) -> None:
        for name, value in (("train_path", self.train_path), ("test_path", self.test_path)):
            if not value:
                raise ConfigError(f"{name} is required")
            if not Path(value).exists():
                raise ConfigError(f"{name} does not exist: {value}")
        if require_dev:
            if not self.dev_path or not Path(self.dev_path).exists():
                raise ConfigError(f"dev_path does not exist: {self.dev_path}")

    def selection_config(self, **extra) -> SelectionConfig:
        values = dict(self.selection)
        values.update(extra)
        values.setdefault("seed", self.seed)
        return SelectionConfig(**values)

    def snapshot(self) -> dict:
        return {
            key: getattr(self, key)
            for key in sorted(self.__dataclass_fields__)
        }


# --- shared run context ------------------------------------------------------


@dataclass
class RunContext:
    config: RunConfig
    cfg: SelectionConfig
    train: Dataset
    dev: Optional[Dataset]
    test: Dataset
    store: EmbeddingStore
    counter: object
    profiles: Dict[str, CandidateProfile]
    longest_answer: int
    client: object
    params: CompletionParams
    cache: ResponseCache


def _load_split(config: RunConfig, which: str) -> Optional[Dataset]:
    path = getattr(config, f"{which}_path")
    if not path:
        return None
    return load_dataset(path, config.data_format, split=which)


def _build_store(config: RunConfig, datasets: List[Dataset]) -> EmbeddingStore:
    spec = config.embeddings
    source = spec.get("source", "hashing")
    if source == "hashing":
        return build_hashing_store(datasets, dim=int(spec.get("dim", 256)))
    if source == "file":
        return EmbeddingStore.from_jsonl(spec["path"])
    if source == "remote":
        raise ConfigError(
            "remote embedding ingestion requires fetching vectors into a file "
            "first; point embeddings.path at the result"
        )
    raise ConfigError(f"unknown embeddings source {source!r}")


def _build_client(config: RunConfig, instances: Dict[str, Instance]):
    mode = config.llm.get("mode", "mock")
    if mode == "mock":
        return MockCompletionClient(instances)
    if mode == "http":
        return HttpCompletionClient(
            endpoint=config.llm["endpoint"],
            api_key_env=config.llm.get("api_key_env", "SEER_API_KEY"),
            max_retries=int(config.llm.get("max_retries", 5)),
            backoff_base=float(config.llm.get("backoff_base", 0.5)),
            max_concurrency=int(config.llm.get("max_concurrency", 4)),
            requests_per_minute=config.llm.get("requests_per_minute"),
        )
    raise ConfigError(f"unknown llm mode {mode!r}")


def _completion_params(config: RunConfig) -> CompletionParams:
    return CompletionParams(
        model=config.llm.get("model", "code-davinci-002"),
        temperature=float(config.llm.get("temperature", 0.0)),
        top_p=float(config.llm.get("top_p", 1.0)),
        max_tokens=int(config.llm.get("max_tokens", 256)),
    )


def _build_predictors(config: RunConfig, train: Dataset, client):
    predictors = {}
    for kind_name, spec in sorted(config.predictors.items()):
        kind = KINDS[kind_name]
        ptype = spec.get("type", "gold")
        if ptype == "gold":
            predictors[kind_name] = make_gold_predictor(kind)
        elif ptype == "stub":
            predictors[kind_name] = make_stub_predictor(kind, spec.get("value"))
        elif ptype == "file":
            predictors[kind_name] = make_file_predictor(kind, spec["path"])
        elif ptype == "icl":
            predictors[kind_name] = make_icl_predictor(kind, train, client)
        else:
            raise ConfigError(f"unknown predictor type {ptype!r} for {kind_name}")
    return predictors


def build_context(config: RunConfig, require_dev: bool = False) -> RunContext:
    config.validate_paths(require_dev)
    cfg = config.selection_config()
    train = _load_split(config, "train")
    dev = _load_split(config, "dev")
    test = _load_split(config, "test")
    datasets = [d for d in (train, dev, test) if d is not None]
    store = _build_store(config, datasets)
    counter = make_counter(config.token_counter)
    normalized = {
        inst.id: normalize_question(inst.question).text for inst in train
    }
    profiles = build_candidate_profiles(train, counter, cfg, store, normalized)
    instances = {inst.id: inst for d in datasets for inst in d}
    client = _build_client(config, instances)
    cache_path = config.llm.get("cache_path") or str(Path(config.output_dir) / "cache.jsonl")
    return RunContext(
        config=config,
        cfg=cfg,
        train=train,
        dev=dev,
        test=test,
        store=store,
        counter=counter,
        profiles=profiles,
        longest_answer=max_answer_tokens(train, counter),
        client=client,
        params=_completion_params(config),
        cache=ResponseCache(cache_path),
    )


# --- file helpers ------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_jsonl(path: Path, rows: List[dict]) -> None:
    _atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _read_jsonl(path: Path) -> List[dict]:
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(config: RunConfig, stage: str, timings: Dict[str, float],
                    outputs: List[Path], extra: Optional[dict] = None) -> None:
    manifest = {
        "stage": stage,
        "config": config.snapshot(),
        "code_version": __version__,
        "timings": timings,
        "outputs": {p.name: _sha256_file(p) for p in outputs if p.exists()},
        "written_at": time.time(),
    }
    if extra:
        manifest["extra"] = extra
    _atomic_write(
        Path(config.output_dir) / f"manifest-{stage}.json",
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )


def _parallel_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- stages ------------------------------------------------------------------


def cmd_prepare(config: RunConfig) -> int:
    started = time.monotonic()
    ctx = build_context(config)
    out_dir = Path(config.output_dir)
    missing = [
        inst.id
        for dataset in (ctx.train, ctx.dev, ctx.test)
        if dataset is not None
        for inst in dataset
        if question_key(inst.id) not in ctx.store
    ]
    if missing:
        print(f"error: embedding store misses {len(missing)} ids: {missing[:10]}", file=sys.stderr)
        return 1
    profile_rows = [ctx.profiles[key].to_dict() for key in sorted(ctx.profiles)]
    profiles_path = out_dir / "profiles.jsonl"
    _write_jsonl(profiles_path, profile_rows)
    outputs = [profiles_path]
    if config.embeddings.get("source", "hashing") == "hashing" and config.embeddings.get("export"):
        embeddings_path = out_dir / "embeddings.jsonl"
        ctx.store.to_jsonl(embeddings_path)
        outputs.append(embeddings_path)
    _write_manifest(config, "prepare", {"prepare": time.monotonic() - started}, outputs)
    print(f"prepare: wrote {len(profile_rows)} candidate profiles to {profiles_path}")
    return 0


def _select_one(ctx: RunContext, predictors, fixed_group, inst: Instance) -> SelectionResult:
    cfg = ctx.cfg
    if cfg.strategy == "seer":
        return seer_select(
            inst, ctx.train, cfg, predictors, ctx.store, ctx.counter,
            ctx.profiles, ctx.longest_answer,
        )
    if cfg.strategy == "csp":
        return csp_select(
            inst, ctx.train, cfg, predictors, ctx.store, ctx.counter,
            ctx.profiles, ctx.longest_answer,
        )
    if cfg.strategy == "kate":
        return kate_select(inst, ctx.train, cfg, ctx.store, ctx.counter, ctx.profiles)
    if cfg.strategy == "diverse_kate":
        return diverse_kate_select(inst, ctx.train, cfg, ctx.store, ctx.counter, ctx.profiles)
    if cfg.strategy == "random":
        return random_select(inst, ctx.train, cfg, ctx.counter, ctx.profiles, ctx.store)
    if cfg.strategy == "fixed":
        return fixed_result(inst, fixed_group, cfg, ctx.counter, ctx.profiles, ctx.store)
    raise ConfigError(f"unknown strategy {cfg.strategy!r}")


def _build_prompt(ctx: RunContext, result_row: dict, test_inst: Instance) -> str:
    train_by_id = {inst.id: inst for inst in ctx.train}
    blocks = []
    for exemplar_id in result_row["exemplar_ids"]:
        exemplar = train_by_id[exemplar_id]
        selected = paragraph_selection(exemplar, ctx.store, ctx.cfg.text_retrieval_k)
        blocks.append(render_block(exemplar, selected, include_answer=True))
    selected = paragraph_selection(test_inst, ctx.store, ctx.cfg.text_retrieval_k)
    test_block = render_block(test_inst, selected, include_answer=False)
    return PromptSpec(blocks, test_block, ctx.cfg.separator).render()


def _dev_harness(ctx: RunContext):
    """Scores an exemplar group by mean execution accuracy on the dev set."""

    def harness(group: List[str], dev: Dataset) -> float:
        correct = 0
        for inst in dev:
            row = {"exemplar_ids": list(group)}
            prompt = _build_prompt(ctx, row, inst)
            try:
                text = complete_cached(
                    prompt, ctx.params, ctx.cache, ctx.client, ctx.config.offline
                )
                value = execute_program(parse_program(text))
                correct += bool(answers_match(value, inst.gold_answer))
            except Exception:
                continue
        return correct / len(dev)

    return harness


def cmd_select(config: RunConfig) -> int:
    started = time.monotonic()
    ctx = build_context(config, require_dev=(config.selection.get("strategy") == "fixed"))
    out_dir = Path(config.output_dir)
    predictors = _build_predictors(config, ctx.train, ctx.client)
    fixed_group = None
    if ctx.cfg.strategy == "fixed":
        fixed_group = fixed_set_select(ctx.dev, ctx.train, ctx.cfg, _dev_harness(ctx))

    failures: List[dict] = []

    def run(inst: Instance):
        try:
            return _select_one(ctx, predictors, fixed_group, inst)
        except Exception as exc:
            failures.append({"id": inst.id, "error": f"{type(exc).__name__}: {exc}"})
            return None

    results = [r for r in _parallel_map(run, list(ctx.test), config.workers) if r is not None]
    results.sort(key=lambda r: r.test_id)
    selections_path = out_dir / "selections.jsonl"
    _write_jsonl(selections_path, [r.to_dict() for r in results])
    histogram: Dict[str, int] = {}
    for result in results:
        histogram[result.solver_status] = histogram.get(result.solver_status, 0) + 1
    extra = {"solver_status_histogram": histogram, "failures": sorted(failures, key=lambda f: f["id"])}
    if fixed_group is not None:
        extra["fixed_group"] = fixed_group
    _write_manifest(config, "select", {"select": time.monotonic() - started}, [selections_path], extra)
    print(
        f"select[{ctx.cfg.strategy}]: {len(results)} results, {len(failures)} failures, "
        f"statuses {histogram}"
    )
    return 1 if failures else 0


def cmd_predict(config: RunConfig) -> int:
    started = time.monotonic()
    ctx = build_context(config)
    out_dir = Path(config.output_dir)
    selections = _read_jsonl(out_dir / "selections.jsonl")
    test_by_id = {inst.id: inst for inst in ctx.test}
    failures: List[dict] = []

    def run(row: dict) -> Optional[dict]:
        test_id = row["test_id"]
        try:
            prompt = _build_prompt(ctx, row, test_by_id[test_id])
            text = complete_cached(prompt, ctx.params, ctx.cache, ctx.client, config.offline)
            return {"id": test_id, "text": text}
        except Exception as exc:
            failures.append({"id": test_id, "error": f"{type(exc).__name__}: {exc}"})
            return None

    completions = [c for c in _parallel_map(run, selections, config.workers) if c is not None]
    completions.sort(key=lambda c: c["id"])
    completions_path = out_dir / "completions.jsonl"
    _write_jsonl(completions_path, completions)
    _write_manifest(
        config,
        "predict",
        {"predict": time.monotonic() - started},
        [completions_path],
        {"failures": sorted(failures, key=lambda f: f["id"])},
    )
    print(f"predict: {len(completions)} completions, {len(failures)} failures")
    return 1 if failures else 0


def _score_instance(inst: Instance, text: Optional[str]) -> InstanceMetrics:
    ea = em = pa = False
    f1 = 0.0
    if text:
        try:
            value = execute_program(parse_program(text))
        except (EvalSyntaxError, ExecutionError):
            value = None
        if value is not None:
            ea = answers_match(value, inst.gold_answer)
            em = exact_match(value, inst.gold_answer)
            pred_spans = value if isinstance(value, list) else [value]
            gold_spans = (
                inst.gold_answer if isinstance(inst.gold_answer, list) else [inst.gold_answer]
            )
            f1 = numeracy_f1(pred_spans, gold_spans)
        if inst.gold_program:
            pa = program_accuracy(text, inst.gold_program)
    return InstanceMetrics(id=inst.id, ea=ea, pa=pa, em=em, f1=f1)


def build_metrics(ctx: RunContext, selections: List[dict], completions: Dict[str, str]) -> MetricsReport:
    per_instance = []
    selected_attrs: Dict[str, List[Dict[str, str]]] = {}
    predicted_attrs: Dict[str, Dict[str, str]] = {}
    gold_attrs: Dict[str, Dict[str, str]] = {}
    train_by_id = {inst.id: inst for inst in ctx.train}
    test_by_id = {inst.id: inst for inst in ctx.test}
    kinds = sorted(ctx.config.predictors)
    for row in selections:
        inst = test_by_id[row["test_id"]]
        per_instance.append(_score_instance(inst, completions.get(inst.id)))
        predicted_attrs[inst.id] = row.get("predicted_attributes", {})
        gold = {}
        for kind in kinds:
            label = inst.gold_modality if kind == "modality" else inst.gold_answer_type
            if label:
                gold[kind] = label
        gold_attrs[inst.id] = gold
        exemplar_attr_rows = []
        for exemplar_id in row["exemplar_ids"]:
            exemplar = train_by_id[exemplar_id]
            attrs = {}
            if exemplar.gold_modality:
                attrs["modality"] = exemplar.gold_modality
            if exemplar.gold_answer_type:
                attrs["answer_type"] = exemplar.gold_answer_type
            exemplar_attr_rows.append(attrs)
        selected_attrs[inst.id] = exemplar_attr_rows
    subsets = {}
    if kinds:
        subsets = subset_report(per_instance, predicted_attrs, gold_attrs, selected_attrs)
    coverage = coverage_report(
        [row["prompt_tokens"] for row in selections], ctx.cfg.model_max_tokens
    )
    return MetricsReport(
        per_instance=per_instance,
        aggregates=aggregate_metrics(per_instance),
        coverage=coverage,
        subsets=subsets,
    )


def _summary_text(config: RunConfig, report: MetricsReport) -> str:
    agg = report.aggregates
    headline = "EA" if config.metrics_style == "finqa" else "EM"
    lines = [
        f"strategy: {config.selection.get('strategy', 'seer')}",
        f"instances: {agg.get('count', 0)}",
        f"EA {agg.get('ea', 0.0):.4f} | PA {agg.get('pa', 0.0):.4f} | "
        f"EM {agg.get('em', 0.0):.4f} | F1 {agg.get('f1', 0.0):.4f}",
        f"coverage: {report.coverage:.4f}",
        f"headline ({headline}): "
        f"{agg.get('ea' if headline == 'EA' else 'em', 0.0):.4f}",
    ]
    if report.subsets:
        lines.append("subsets:")
        for name in ("CAP", "IAP", "CAS", "IAS"):
            sub = report.subsets.get(name, {})
            lines.append(
                f"  {name}: n={sub.get('count', 0)} ea={sub.get('ea', 0.0):.4f} "
                f"em={sub.get('em', 0.0):.4f}"
            )
    return "\n".join(lines) + "\n"


def cmd_evaluate(config: RunConfig) -> int:
    started = time.monotonic()
    ctx = build_context(config)
    out_dir = Path(config.output_dir)
    selections = _read_jsonl(out_dir / "selections.jsonl")
    completions = {
        row["id"]: row.get("text", "") for row in _read_jsonl(out_dir / "completions.jsonl")
    }
    report = build_metrics(ctx, selections, completions)
    metrics_path = out_dir / "metrics.json"
    _atomic_write(metrics_path, json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    summary_path = out_dir / "summary.txt"
    _atomic_write(summary_path, _summary_text(config, report))
    _write_manifest(
        config, "evaluate", {"evaluate": time.monotonic() - started},
        [metrics_path, summary_path],
    )
    print(_summary_text(config, report), end="")
    return 0


def _sweep_grid(config: RunConfig) -> List[dict]:
    sweep = config.sweep
    grid: List[dict] = []
    if "alpha_beta" in sweep:
        for alpha, beta in sweep["alpha_beta"]:
            if alpha + beta > 1.0 + 1e-9:
                raise ConfigError(f"invalid grid point alpha={alpha} beta={beta}")
            grid.append({"alpha": alpha, "beta": beta})
    elif "budgets" in sweep:
        for budget in sweep["budgets"]:
            if budget <= 0:
                raise ConfigError(f"invalid budget {budget}")
            grid.append({"model_max_tokens": int(budget)})
    elif "max_exemplars" in sweep:
        for m in sweep["max_exemplars"]:
            if m <= 0:
                raise ConfigError(f"invalid max_exemplars {m}")
            grid.append({"max_exemplars": int(m)})
    else:
        raise ConfigError("sweep config needs alpha_beta, budgets, or max_exemplars")
    return grid


def cmd_sweep(config: RunConfig) -> int:
    started = time.monotonic()
    grid = _sweep_grid(config)
    base_out = Path(config.output_dir)
    cache_path = config.llm.get("cache_path") or str(base_out / "cache.jsonl")
    rows = []
    failures = 0
    for point in grid:
        label = ",".join(f"{k}={v}" for k, v in sorted(point.items()))
        sub_config = RunConfig.load(None)
        for key in config.__dataclass_fields__:
            setattr(sub_config, key, getattr(config, key))
        sub_config.selection = dict(config.selection, **point)
        sub_config.llm = dict(config.llm, cache_path=cache_path)
        sub_config.output_dir = str(base_out / "sweep" / label.replace("=", "_"))
        failures += cmd_select(sub_config)
        failures += cmd_predict(sub_config)
        cmd_evaluate(sub_config)
        metrics = json.loads((Path(sub_config.output_dir) / "metrics.json").read_text())
        score_key = "ea" if config.metrics_style == "finqa" else "em"
        rows.append(
            {
                "point": point,
                "score": metrics["aggregates"][score_key],
                "coverage": metrics["coverage"],
                "aggregates": metrics["aggregates"],
            }
        )
    sweep_path = base_out / "sweep.json"
    _atomic_write(sweep_path, json.dumps(rows, sort_keys=True, indent=2) + "\n")
    table = ["point\tscore\tcoverage"]
    for row in rows:
        label = ",".join(f"{k}={v}" for k, v in sorted(row["point"].items()))
        table.append(f"{label}\t{row['score']:.4f}\t{row['coverage']:.4f}")
    table_path = base_out / "sweep.txt"
    _atomic_write(table_path, "\n".join(table) + "\n")
    _write_manifest(config, "sweep", {"sweep": time.monotonic() - started}, [sweep_path, table_path])
    print("\n".join(table))
    return 1 if failures else 0


def cmd_report(config: RunConfig) -> int:
    summary_path = Path(config.output_dir) / "summary.txt"
    if not summary_path.exists():
        print(f"error: {summary_path} not found; run evaluate first", file=sys.stderr)
        return 1
    print(summary_path.read_text(), end="")
    return 0


# --- entry point -------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seer", description="Exemplar-selection experiment pipeline"
    )
    parser.add_argument("--config", help="path to a JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--workers", type=int, default=None, help="parallel workers per stage")
    parser.add_argument("--offline", action="store_true", help="serve completions from cache only")
    parser.add_argument("--output-dir", default=None, help="override the output directory")
    parser.add_argument("--strategy", default=None, help="override the selection strategy")
    parser.add_argument(
        "command",
        choices=["prepare", "select", "predict", "evaluate", "sweep", "report"],
    )
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "output_dir": args.output_dir,
    }
    if args.offline:
        overrides["offline"] = True
    config = RunConfig.load(args.config, overrides)
    if args.strategy:
        config.selection = dict(config.selection, strategy=args.strategy)
    commands = {
        "prepare": cmd_prepare,
        "select": cmd_select,
        "predict": cmd_predict,
        "evaluate": cmd_evaluate,
        "sweep": cmd_sweep,
        "report": cmd_report,
    }
    return commands[args.command](config)


if __name__ == "__main__":
    sys.exit(main())
