"""Experiment orchestration: config, manifests, bounded-concurrency runs, resume, reports.

Each experiment is one (dataset, backend, chain) cell and lives in
``<output_dir>/<experiment_id>/`` with ``manifest.json``, ``traces.jsonl``,
``predictions.jsonl`` and ``report.{txt,csv,json}``. The experiment id
defaults to ``<dataset>-<backend>-<chain>``, so re-running a finished
experiment resumes it (and does nothing).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import yaml

from .backend import Backend, BackendConfig, CachedBackend, ConfigError, ResponseCache, make_backend
from .chains import (
    REQUIRED_TEMPLATES,
    ChainKind,
    ChainTrace,
    GenerationParams,
    TemplateSet,
    default_templates,
    load_template_set,
    run_chain,
)
from .corpus import (
    PUBLISHED_SUMMARIES,
    DatasetName,
    DatasetSummary,
    SentimentInstance,
    load_dataset,
    summarize,
    validate_expected,
)
from .evaluation import (
    EvalReport,
    PredictionRecord,
    evaluate,
    load_baselines,
    render_delta_block,
    render_report,
    render_split_view,
)
from .extraction import ExtractionPolicy, extract_polarity, resolve_unparseable

logger = logging.getLogger(__name__)

PENDING, DONE, FAILED = "pending", "done", "failed"
FAILURE_THRESHOLD = 0.10


class RunnerError(Exception):
    exit_code = 1


class DataValidationError(RunnerError):
    exit_code = 2


class ConfigDrift(RunnerError):
    pass


class ReportError(RunnerError):
    pass


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class DatasetSpec:
    name: DatasetName
    path: Path
    flags: Path | None = None
    expected: DatasetSummary | None = None

    def load(self) -> list[SentimentInstance]:
        return load_dataset(self.path, self.name, self.flags)


@dataclass
class RunConfig:
    datasets: dict[str, DatasetSpec]
    backends: dict[str, BackendConfig]
    chains: list[ChainKind]
    output_dir: Path
    cache_dir: Path | None = None
    concurrency: int = 1
    extraction: ExtractionPolicy = field(default_factory=ExtractionPolicy)
    templates_dir: Path | None = None
    independent_reflect: bool = False
    max_tokens: int = 256
    temperature: float = 0.0
    reference_baseline: str = "BERT_Asp+SCAPT"
    source: dict = field(default_factory=dict)

    def templates(self) -> TemplateSet:
        return load_template_set(self.templates_dir) if self.templates_dir else default_templates()

    def generation(self, backend: str) -> GenerationParams:
        return GenerationParams(
            model=self.backends[backend].model,
            max_tokens=self.max_tokens,
            temperature=self.temperature,
        )


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else (base / path)


def _parse_expected(value, name: DatasetName) -> DatasetSummary | None:
    if value is None:
        return None
    if value == "table1":
        return PUBLISHED_SUMMARIES[name]
    if isinstance(value, Mapping):
        try:
            return DatasetSummary.from_dict(value)
        except (KeyError, ValueError, ArithmeticError) as exc:
            raise ConfigError(f"bad expected summary for {name.value}: {exc}") from exc
    raise ConfigError(f"expected summary for {name.value} must be 'table1' or a mapping")


def config_from_dict(raw: Mapping, base_dir: str | Path = ".") -> RunConfig:
    """Build and validate a :class:`RunConfig`; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    known = {
        "datasets", "backends", "chains", "output_dir", "cache_dir", "concurrency", "extraction",
        "templates_dir", "independent_reflect", "generation", "report",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        datasets = {}
        for entry in raw.get("datasets") or []:
            name = DatasetName(entry["name"])
            datasets[name.value] = DatasetSpec(
                name=name,
                path=_resolve(base, entry["path"]),
                flags=_resolve(base, entry.get("flags")),
                expected=_parse_expected(entry.get("expected"), name),
            )
        backends = {name: BackendConfig.from_dict(spec) for name, spec in (raw.get("backends") or {}).items()}
        chains = [ChainKind(c) for c in raw.get("chains") or [k.value for k in ChainKind]]
        extraction = ExtractionPolicy.from_dict(raw.get("extraction"))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    generation = raw.get("generation") or {}
    report = raw.get("report") or {}
    config = RunConfig(
        datasets=datasets,
        backends=backends,
        chains=chains,
        output_dir=_resolve(base, raw.get("output_dir", "runs")),
        cache_dir=_resolve(base, raw.get("cache_dir")),
        concurrency=int(raw.get("concurrency", 1)),
        extraction=extraction,
        templates_dir=_resolve(base, raw.get("templates_dir")),
        independent_reflect=bool(raw.get("independent_reflect", False)),
        max_tokens=int(generation.get("max_tokens", 256)),
        temperature=float(generation.get("temperature", 0.0)),
        reference_baseline=report.get("reference_baseline", "BERT_Asp+SCAPT"),
        source=dict(raw),
    )
    validate_config(config)
    return config


def validate_config(config: RunConfig) -> None:
    if config.concurrency < 1:
        raise ConfigError("concurrency must be a positive integer")
    if config.max_tokens < 1 or config.temperature < 0:
        raise ConfigError("generation.max_tokens must be >= 1 and temperature >= 0")
    for spec in config.datasets.values():
        for path in (spec.path, spec.flags):
            if path is not None and not path.is_file():
                raise ConfigError(f"dataset file not found: {path}")
    if config.templates_dir is not None and not config.templates_dir.is_dir():
        raise ConfigError(f"template directory not found: {config.templates_dir}")


def load_config(path: str | Path, overrides: Mapping | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(raw, path.parent)


# ---------------------------------------------------------------- manifest


def _sha256_file(path: Path | None) -> str | None:
    if path is None:
        return None
    return hashlib.sha256(path.read_bytes()).hexdigest()


def experiment_fingerprint(config: RunConfig, dataset: str, backend: str, chain: ChainKind) -> str:
    """Hash of everything that determines an experiment's outputs (not concurrency)."""
    spec = config.datasets[dataset]
    payload = {
        "dataset": dataset,
        "dataset_sha256": _sha256_file(spec.path),
        "flags_sha256": _sha256_file(spec.flags),
        "backend": config.backends[backend].to_dict(),
        "chain": chain.value,
        "template_hash": config.templates().fingerprint(),
        "independent_reflect": config.independent_reflect if chain is ChainKind.SAOT else None,
        "extraction": config.extraction.to_dict(),
        "max_tokens": config.max_tokens,
        "temperature": config.temperature,
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class ExperimentManifest:
    experiment_id: str
    dataset: str
    dataset_path: str
    expected_summary: dict | None
    chain: ChainKind
    backend: str
    backend_config: dict
    template_hash: str
    extraction: dict
    concurrency: int
    fingerprint: str
    created_at: str
    status: dict[str, dict]
    effective_config: dict = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        out = {PENDING: 0, DONE: 0, FAILED: 0}
        for entry in self.status.values():
            out[entry["status"]] += 1
        return out

    def ids_with(self, *states: str) -> list[str]:
        return [iid for iid, entry in self.status.items() if entry["status"] in states]

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "dataset": self.dataset,
            "dataset_path": self.dataset_path,
            "expected_summary": self.expected_summary,
            "chain": self.chain.value,
            "backend": self.backend,
            "backend_config": self.backend_config,
            "template_hash": self.template_hash,
            "extraction": self.extraction,
            "concurrency": self.concurrency,
            "fingerprint": self.fingerprint,
            "created_at": self.created_at,
            "effective_config": self.effective_config,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> ExperimentManifest:
        data = dict(data)
        data["chain"] = ChainKind(data["chain"])
        return cls(**data)

    def save(self, path: Path) -> None:
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False, default=str), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Path) -> ExperimentManifest:
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise RunnerError(f"cannot read manifest {path}: {exc}") from exc


def default_experiment_id(dataset: str, backend: str, chain: ChainKind) -> str:
    return f"{dataset}-{backend}-{chain.value}"


def _read_jsonl(path: Path) -> list[dict]:
    """Read JSON lines, dropping a torn final line left by an interrupted write."""
    if not path.exists():
        return []
    out = []
    lines = path.read_text(encoding="utf-8").split("\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            if i >= len(lines) - 2:
                logger.warning("dropping truncated final line in %s", path)
                continue
            raise RunnerError(f"corrupt line {i + 1} in {path}")
    return out


def _compact(path: Path, id_key: str, keep: set[str]) -> None:
    """Keep only the last record per id among ``keep``; rewrite in place."""
    records: dict[str, dict] = {}
    for rec in _read_jsonl(path):
        if rec[id_key] in keep:
            records[rec[id_key]] = rec
    tmp = path.with_suffix(".tmp")
    tmp.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records.values()), encoding="utf-8")
    os.replace(tmp, path)


# -------------------------------------------------------------------- runs


@dataclass
class RunResult:
    manifest: ExperimentManifest
    processed: int
    failed: int
    directory: Path

    @property
    def exit_code(self) -> int:
        total = len(self.manifest.status)
        failed = self.manifest.counts()[FAILED]
        return 3 if total and failed / total > FAILURE_THRESHOLD else 0

    def summary(self) -> str:
        c = self.manifest.counts()
        return (
            f"{self.manifest.experiment_id}: processed {self.processed} "
            f"(done {c[DONE]}, failed {c[FAILED]}, pending {c[PENDING]} of {len(self.manifest.status)})"
        )


BackendFactory = Callable[[BackendConfig], Backend]


def _process_instance(
    instance: SentimentInstance,
    chain: ChainKind,
    backend: Backend,
    templates: TemplateSet,
    params: GenerationParams,
    policy: ExtractionPolicy,
    independent_reflect: bool,
) -> tuple[ChainTrace, PredictionRecord]:
    trace = run_chain(chain, backend, templates, instance, params, independent_reflect)
    label = extract_polarity(trace.final_text, policy)
    predicted = label if label is not None else resolve_unparseable(policy.fallback)
    record = PredictionRecord(instance.id, instance.gold, predicted, instance.is_implicit, unparseable=label is None)
    return trace, record


def _check_templates(templates: TemplateSet, chain: ChainKind, independent_reflect: bool) -> None:
    names = list(REQUIRED_TEMPLATES[chain.value])
    if chain is ChainKind.SAOT and independent_reflect:
        names[1] = "saot_reflect_independent"
    missing = [n for n in names if n not in templates]
    if missing:
        raise ConfigError(f"template set lacks: {', '.join(missing)}")


def run_experiment(
    config: RunConfig,
    dataset: str,
    backend: str,
    chain: ChainKind,
    *,
    experiment_id: str | None = None,
    skip_validate: bool = False,
    backend_factory: BackendFactory = make_backend,
) -> RunResult:
    """Run (or continue) one experiment; instances already Done are never re-run."""
    if dataset not in config.datasets:
        raise ConfigError(f"unknown dataset {dataset!r}")
    if backend not in config.backends:
        raise ConfigError(f"unknown backend {backend!r}")
    spec = config.datasets[dataset]
    instances = spec.load()
    if spec.expected is not None and not skip_validate:
        check = validate_expected(summarize(instances), spec.expected)
        if not check.passed:
            raise DataValidationError(f"dataset {dataset} does not match expected summary: {check.describe()}")

    templates = config.templates()
    _check_templates(templates, chain, config.independent_reflect)
    experiment_id = experiment_id or default_experiment_id(dataset, backend, chain)
    directory = config.output_dir / experiment_id
    manifest_path = directory / "manifest.json"
    fingerprint = experiment_fingerprint(config, dataset, backend, chain)

    if manifest_path.exists():
        manifest = ExperimentManifest.load(manifest_path)
        if manifest.fingerprint != fingerprint:
            raise ConfigDrift(
                f"experiment {experiment_id} was created with a different configuration "
                "(templates, backend, data or extraction changed); use a new experiment id"
            )
        unknown = set(manifest.status) - {inst.id for inst in instances}
        if unknown:
            raise ConfigDrift(f"manifest of {experiment_id} lists ids missing from the dataset")
    else:
        directory.mkdir(parents=True, exist_ok=True)
        manifest = ExperimentManifest(
            experiment_id=experiment_id,
            dataset=dataset,
            dataset_path=str(spec.path),
            expected_summary=spec.expected.to_dict() if spec.expected else None,
            chain=chain,
            backend=backend,
            backend_config=config.backends[backend].to_dict(),
            template_hash=templates.fingerprint(),
            extraction=config.extraction.to_dict(),
            concurrency=config.concurrency,
            fingerprint=fingerprint,
            created_at=datetime.now(timezone.utc).isoformat(),
            status={inst.id: {"status": PENDING} for inst in instances},
            effective_config=config.source,
        )
        manifest.save(manifest_path)

    done = set(manifest.ids_with(DONE))
    traces_path = directory / "traces.jsonl"
    predictions_path = directory / "predictions.jsonl"
    _compact(traces_path, "instance_id", done)
    _compact(predictions_path, "instance_id", done)

    todo = [inst for inst in instances if inst.id not in done]
    impl = backend_factory(config.backends[backend])
    if config.cache_dir is not None:
        impl = CachedBackend(impl, ResponseCache(config.cache_dir))
    params = config.generation(backend)

    processed = failed = 0
    pending_iter = iter(todo)
    in_flight: dict[Future, SentimentInstance] = {}
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool, \
            traces_path.open("a", encoding="utf-8") as traces_out, \
            predictions_path.open("a", encoding="utf-8") as preds_out:

        def fill() -> None:
            while len(in_flight) < config.concurrency:
                inst = next(pending_iter, None)
                if inst is None:
                    return
                fut = pool.submit(
                    _process_instance, inst, chain, impl, templates, params,
                    config.extraction, config.independent_reflect,
                )
                in_flight[fut] = inst

        try:
            fill()
            while in_flight:
                finished, _ = wait(in_flight, return_when=FIRST_COMPLETED)
                for fut in finished:
                    inst = in_flight.pop(fut)
                    try:
                        trace, record = fut.result()
                    except Exception as exc:  # instance-level failure; the run goes on
                        logger.warning("instance %s failed: %s", inst.id, exc)
                        manifest.status[inst.id] = {"status": FAILED, "error": f"{type(exc).__name__}: {exc}"}
                        failed += 1
                    else:
                        traces_out.write(json.dumps(trace.to_dict(), ensure_ascii=False) + "\n")
                        traces_out.flush()
                        preds_out.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
                        preds_out.flush()
                        manifest.status[inst.id] = {"status": DONE}
                    processed += 1
                    manifest.save(manifest_path)
                fill()
        except BaseException:
            for fut in in_flight:
                fut.cancel()
            raise

    result = RunResult(manifest, processed, failed, directory)
    if manifest.counts()[DONE] == len(manifest.status):
        write_experiment_report(directory, manifest, config.reference_baseline)
    logger.info(result.summary())
    return result


def resume(
    experiment_id: str,
    config: RunConfig,
    *,
    skip_validate: bool = False,
    backend_factory: BackendFactory = make_backend,
) -> RunResult:
    """Process only the Pending/Failed instances of an existing experiment."""
    manifest_path = config.output_dir / experiment_id / "manifest.json"
    if not manifest_path.exists():
        raise RunnerError(f"no manifest for experiment {experiment_id!r} in {config.output_dir}")
    manifest = ExperimentManifest.load(manifest_path)
    for name, pool in (("dataset", config.datasets), ("backend", config.backends)):
        if getattr(manifest, name) not in pool:
            raise ConfigDrift(f"config no longer defines {name} {getattr(manifest, name)!r}")
    return run_experiment(
        config,
        manifest.dataset,
        manifest.backend,
        manifest.chain,
        experiment_id=experiment_id,
        skip_validate=skip_validate,
        backend_factory=backend_factory,
    )


def run_grid(
    config: RunConfig,
    datasets: Sequence[str] | None = None,
    backends: Sequence[str] | None = None,
    chains: Sequence[ChainKind] | None = None,
    *,
    skip_validate: bool = False,
    backend_factory: BackendFactory = make_backend,
) -> list[RunResult]:
    results = []
    for dataset in datasets or list(config.datasets):
        for backend in backends or list(config.backends):
            for chain in chains or config.chains:
                results.append(run_experiment(
                    config, dataset, backend, chain,
                    skip_validate=skip_validate, backend_factory=backend_factory,
                ))
    return results


# ----------------------------------------------------------------- reports


def load_predictions(directory: Path, manifest: ExperimentManifest) -> list[PredictionRecord]:
    done = set(manifest.ids_with(DONE))
    latest = {rec["instance_id"]: rec for rec in _read_jsonl(directory / "predictions.jsonl") if rec["instance_id"] in done}
    return [PredictionRecord.from_dict(latest[iid]) for iid in sorted(latest)]


@dataclass(frozen=True)
class Report:
    text: str
    csv: str
    json: str


def build_report(
    experiments: Iterable[tuple[ExperimentManifest, list[PredictionRecord]]],
    reference: str = "BERT_Asp+SCAPT",
) -> Report:
    grouped: dict[tuple[str, ChainKind], dict[DatasetName, EvalReport]] = {}
    details = []
    for manifest, records in experiments:
        rep = evaluate(records, manifest.fingerprint)
        key = (manifest.backend, manifest.chain)
        grouped.setdefault(key, {})[DatasetName(manifest.dataset)] = rep
        details.append({
            "experiment_id": manifest.experiment_id,
            "dataset": manifest.dataset,
            "backend": manifest.backend,
            "chain": manifest.chain.value,
            "status": manifest.counts(),
            "extraction": manifest.extraction,
            "independent_reflect": bool(manifest.effective_config.get("independent_reflect", False))
            if manifest.chain is ChainKind.SAOT else None,
            "report": rep.to_dict(),
        })
    baselines = load_baselines()
    table = render_report(grouped, baselines)
    parts = [table.text]
    if grouped:
        parts.append(render_delta_block(grouped, baselines, reference))
        parts.append(render_split_view(grouped).text)
        rates = [f"  {d['experiment_id']}: {d['report']['unparseable_count']}/{d['report']['all']['support']}"
                 f" = {d['report']['unparseable_rate']:.2f} ({d['extraction']['fallback']})" for d in details]
        parts.append("Unparseable completions:\n" + "\n".join(rates) + "\n")
        modes = [f"  {d['experiment_id']}: reflect step {'independent of' if d['independent_reflect'] else 'sees'} the analysis"
                 for d in details if d["independent_reflect"] is not None]
        if modes:
            parts.append("SAoT reflect mode:\n" + "\n".join(modes) + "\n")
    payload = {"experiments": details, "table_csv": table.csv}
    return Report(
        text="\n".join(parts),
        csv=table.csv,
        json=json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
    )


def write_experiment_report(directory: Path, manifest: ExperimentManifest, reference: str) -> Report:
    rep = build_report([(manifest, load_predictions(directory, manifest))], reference)
    (directory / "report.txt").write_text(rep.text, encoding="utf-8")
    (directory / "report.csv").write_text(rep.csv, encoding="utf-8")
    (directory / "report.json").write_text(rep.json, encoding="utf-8")
    return rep


def report(
    experiment_ids: Sequence[str],
    output_dir: str | Path,
    *,
    allow_partial: bool = False,
    reference: str = "BERT_Asp+SCAPT",
) -> Report:
    """Combine finished experiments into one results table."""
    output_dir = Path(output_dir)
    loaded = []
    for eid in experiment_ids:
        directory = output_dir / eid
        if not (directory / "manifest.json").exists():
            raise ReportError(f"unknown experiment id {eid!r}")
        manifest = ExperimentManifest.load(directory / "manifest.json")
        counts = manifest.counts()
        if (counts[PENDING] or counts[FAILED]) and not allow_partial:
            raise ReportError(f"experiment {eid} is incomplete ({counts}); pass --allow-partial to report anyway")
        loaded.append((manifest, load_predictions(directory, manifest)))
    return build_report(loaded, reference)
