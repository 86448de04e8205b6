"""End-to-end runs: train -> traverse -> explain -> score -> calibrate -> select -> evaluate -> report.

A run directory looks like::

    config.json  manifest.json
    params/<variant>.tvae  params/<variant>_history.csv
    strips/<sequence_id>.png  sequences.jsonl
    responses/<sequence_id>.jsonl
    certainty.jsonl  selections.jsonl  explanations.jsonl
    calibration.csv  calibration.json  metrics.csv  report.md

Everything except manifest.json is a pure function of the config and seed
when an offline backend is used.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import __version__
from . import calibration as cal
from . import explainers as ex
from . import nlgmetrics, similarity, tinyvae, traversal
from .dataset import ImageDataset, generate_shapes_dataset, load_mnist
from .errors import BackendError, EmptyTextAfterTokenization, IncompleteRun, NoOverlap
from .imgcodec import write_image

logger = logging.getLogger(__name__)

DEFAULT_BETAS = {"vae": 1.0, "beta_vae": 4.0, "beta_tcvae": 6.0}
ESTIMATE_NAMES = {"cosine_embedding": "cosine similarity", "lexical_rougeL": "lexical similarity"}


# --- configuration -----------------------------------------------------------

@dataclass
class DatasetSource:
    kind: str = "shapes"
    name: str = ""
    count: int = 512
    side: int = 64
    images: Optional[str] = None
    labels: Optional[str] = None
    limit: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("shapes", "idx"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "idx" and not self.images:
            raise ValueError("idx dataset needs an images path")
        if self.kind == "shapes" and self.images:
            raise ValueError("give either a procedural spec or IDX paths, not both")
        self.name = self.name or ("dsprites2d" if self.kind == "shapes" else "mnist")


@dataclass
class TrainingSection:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    hidden_sizes: list = field(default_factory=lambda: [256, 128])
    latent_dim: int = 6
    tc_estimator: str = "mss"
    variants: dict = field(default_factory=lambda: {k: {} for k in DEFAULT_BETAS})

    def config_for(self, variant: str, seed: int) -> tinyvae.TrainingConfig:
        extra = dict(self.variants.get(variant) or {})
        beta = extra.pop("beta", DEFAULT_BETAS.get(variant, 1.0))
        base = dict(learning_rate=self.learning_rate, epochs=self.epochs,
                    batch_size=self.batch_size, hidden_sizes=list(self.hidden_sizes),
                    latent_dim=self.latent_dim, tc_estimator=self.tc_estimator)
        base.update(extra)
        return tinyvae.TrainingConfig(variant=variant, beta=beta, seed=seed, **base)


@dataclass
class TraversalSection:
    low: float = -3.0
    high: float = 3.0
    step: float = 0.6
    separator_px: int = 2
    resample_per_dim: bool = False


@dataclass
class SimilaritySection:
    kinds: list = field(default_factory=lambda: list(similarity.KINDS))
    provider: str = "local"
    endpoint: str = "https://api.openai.com/v1"
    model: str = "text-embedding-3-small"

    def __post_init__(self):
        for k in self.kinds:
            if k not in similarity.KINDS:
                raise ValueError(f"unknown similarity kind {k!r}")
        if not self.kinds:
            raise ValueError("at least one similarity kind is required")

    def make_provider(self):
        if self.provider == "local":
            return "local"
        return similarity.RemoteEmbedder(self.endpoint, self.model)

    def token_embedder(self):
        if self.provider == "local":
            return similarity.LocalEmbedder()
        return similarity.RemoteEmbedder(self.endpoint, self.model)


@dataclass
class RunConfig:
    dataset: DatasetSource = field(default_factory=DatasetSource)
    training: TrainingSection = field(default_factory=TrainingSection)
    traversal: TraversalSection = field(default_factory=TraversalSection)
    explainer: ex.ExplainerConfig = field(default_factory=ex.ExplainerConfig)
    prompt_template: str = ex.DEFAULT_TEMPLATE
    scenarios: Optional[str] = None
    scenario_map: dict = field(default_factory=dict)
    similarity: SimilaritySection = field(default_factory=SimilaritySection)
    epsilon: Union[float, str] = cal.DEFAULT_EPSILON
    calibration_file: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.epsilon == "calibrate":
            if not self.calibration_file:
                raise ValueError('epsilon "calibrate" needs calibration_file')
        elif self.calibration_file:
            raise ValueError("give an explicit epsilon or a calibration file, not both")
        else:
            self.epsilon = float(self.epsilon)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {
            "dataset": DatasetSource, "training": TrainingSection, "traversal": TraversalSection,
            "explainer": ex.ExplainerConfig, "similarity": SimilaritySection,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: (sections[k](**v) if k in sections else v) for k, v in d.items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolve_epsilon(self) -> float:
        if self.epsilon != "calibrate":
            return float(self.epsilon)
        with open(self.calibration_file, encoding="utf-8") as fh:
            data = json.load(fh)
        kind = self.similarity.kinds[0]
        return float(data[kind]["epsilon"] if kind in data else data["epsilon"])


@dataclass
class AnnotationRecord:
    sequence_id: str
    label: int
    references: list = field(default_factory=list)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"annotation label must be 0 or 1 for {self.sequence_id}")


# --- file helpers ------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(_dumps(rec) + "\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_annotations(path) -> dict:
    return {r.sequence_id: r for r in
            (AnnotationRecord(d["sequence_id"], int(d["label"]), list(d.get("references", [])))
             for d in read_jsonl(path))}


def update_manifest(run_dir, stage: str, info: dict) -> None:
    """Timestamps and timings live only here so every other file stays reproducible."""
    path = Path(run_dir) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {
        "versions": {"latentlens": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "stages": {},
    }
    manifest["stages"][stage] = dict(info, finished_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _save_config(run_dir, config: RunConfig) -> None:
    _write_text(Path(run_dir) / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


# --- stages ------------------------------------------------------------------

def load_dataset(source: DatasetSource, seed: int) -> ImageDataset:
    if source.kind == "shapes":
        return generate_shapes_dataset(source.count, source.side, seed)
    return load_mnist(source.images, source.labels, source.limit)


def _history_csv(history, config: tinyvae.TrainingConfig) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = list(tinyvae.LossTerms.__dataclass_fields__)
    writer.writerow(["epoch", "loss"] + names)
    for epoch, terms in enumerate(history):
        total = tinyvae.loss(config.variant, terms, config.beta)
        writer.writerow([epoch, repr(total)] + [repr(v) for v in terms.as_dict().values()])
    return buf.getvalue()


def cmd_train(config: RunConfig, out_dir) -> dict:
    """Train every configured variant; return {variant: parameter file path}."""
    out = Path(out_dir)
    _save_config(out, config)
    data = load_dataset(config.dataset, config.seed)
    paths = {}
    for variant in config.training.variants:
        tcfg = config.training.config_for(variant, config.seed)
        logger.info("training %s (beta=%s) on %d samples", variant, tcfg.beta, len(data))
        start = time.perf_counter()
        params, history = tinyvae.train(data, tcfg)
        path = out / "params" / f"{variant}.tvae"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(tinyvae.save_params(params))
        _write_text(out / "params" / f"{variant}_history.csv", _history_csv(history, tcfg))
        update_manifest(out, f"train:{variant}", {"seconds": time.perf_counter() - start,
                                                   "seed": config.seed})
        paths[variant] = path
    return paths


def _param_files(out_dir, params_file=None) -> list:
    if params_file:
        return [Path(params_file)]
    files = sorted((Path(out_dir) / "params").glob("*.tvae"))
    if not files:
        raise IncompleteRun(f"no parameter files under {out_dir}/params; run train first")
    return files


def _frame_shape(config: RunConfig, params: tinyvae.VaeParameters):
    side = config.dataset.side if config.dataset.kind == "shapes" else None
    if side and side * side == params.input_dim:
        return side, side
    return None


def _grids(config: RunConfig, out_dir, params_file=None):
    t = config.traversal
    for path in _param_files(out_dir, params_file):
        params = tinyvae.load_params(path.read_bytes())
        model = path.stem
        yield model, traversal.generate_grid(
            params, config.seed, model, t.low, t.high, t.step,
            _frame_shape(config, params), t.resample_per_dim)


def cmd_traverse(config: RunConfig, out_dir, params_file=None) -> list:
    out = Path(out_dir)
    records = []
    for _, grid in _grids(config, out, params_file):
        for seq in grid:
            rel = f"strips/{seq.sequence_id}.png"
            (out / "strips").mkdir(parents=True, exist_ok=True)
            write_image(out / rel, traversal.compose_strip(seq, config.traversal.separator_px))
            records.append(seq.metadata([rel]))
    write_jsonl(out / "sequences.jsonl", records)
    return records


def _scenario_for(config: RunConfig, scenarios: list, dim_index: int) -> ex.ScriptedScenario:
    by_id = {s.scenario_id: s for s in scenarios}
    key = config.scenario_map.get(str(dim_index))
    if key is not None:
        return by_id[key]
    return scenarios[dim_index % len(scenarios)]


def _epsilon(config: RunConfig, epsilon: Optional[float]) -> float:
    return config.resolve_epsilon() if epsilon is None else float(epsilon)


def cmd_explain(config: RunConfig, out_dir, params_file=None, epsilon: Optional[float] = None,
                client=None) -> list:
    """Strip, sample, score and select for every sequence of every model; return the records."""
    out = Path(out_dir)
    _save_config(out, config)
    eps = _epsilon(config, epsilon)
    template = ex.PromptTemplate(config.prompt_template)
    scenarios = ex.load_scenarios(config.scenarios) if config.explainer.backend == "scripted" else []
    provider = config.similarity.make_provider()
    kinds = config.similarity.kinds
    seq_records, cert_records, selections, explanations, failures, timings = [], [], [], [], [], {}

    for model, grid in _grids(config, out, params_file):
        for seq in grid:
            sid = seq.sequence_id
            dim = seq.spec.dim_index
            rel = f"strips/{sid}.png"
            (out / "strips").mkdir(parents=True, exist_ok=True)
            prompt, image = ex.build_prompt(template, seq, config.traversal.separator_px)
            (out / rel).write_bytes(image.data)
            seq_records.append(seq.metadata([rel]))
            record = {"sequence_id": sid, "model": model, "dim_index": dim, "strip": rel,
                      "epsilon": eps, "similarity_kind": kinds[0]}
            try:
                scenario = _scenario_for(config, scenarios, dim) if scenarios else None
                rs = ex.sample_responses(config.explainer, prompt, image, sequence=seq,
                                         scenario=scenario, seed=[config.seed, dim],
                                         client=client)
                reports = [similarity.certainty(rs, kind, provider) for kind in kinds]
            except (BackendError, EmptyTextAfterTokenization) as exc:
                logger.warning("sequence %s failed: %s", sid, exc)
                failures.append({"sequence_id": sid, "error": f"{type(exc).__name__}: {exc}"})
                record.update(status="error", error=type(exc).__name__, certainty=None,
                              displayed=None, selected=None)
                selections.append(record)
                continue
            timings[sid] = {"elapsed_s": rs.elapsed_s, "attempts": rs.attempts}
            write_jsonl(out / "responses" / f"{sid}.jsonl",
                        [{"index": i, "response": r, "backend": rs.backend_label}
                         for i, r in enumerate(rs.responses)])
            for rep in reports:
                cert_records.append(dict(rep.to_dict(), model=model, dim_index=dim, status="ok"))
            main = reports[0]
            chosen = rs.responses[main.selected_index]
            displayed = similarity.select_explanation(main, rs, eps)
            record.update(status="ok", certainty=main.certainty, selected=chosen,
                          selected_index=main.selected_index, displayed=displayed,
                          backend=rs.backend_label)
            selections.append(record)
            explanations.append({"sequence_id": sid, "dataset": config.dataset.name,
                                 "vae_variant": model, "backend": rs.backend_label,
                                 "explanation": chosen, "displayed": displayed})

    write_jsonl(out / "sequences.jsonl", seq_records)
    write_jsonl(out / "certainty.jsonl", cert_records)
    write_jsonl(out / "selections.jsonl", selections)
    write_jsonl(out / "explanations.jsonl", explanations)
    failure_path = out / "failures.json"
    if failures:
        _write_text(failure_path, json.dumps(failures, indent=2) + "\n")
    elif failure_path.exists():
        failure_path.unlink()
    update_manifest(out, "explain", {"backend": config.explainer.backend, "seed": config.seed,
                                     "timings": timings})
    return selections


def join_scores(annotations: dict, score_records: list, kind: str) -> list:
    scores = [cal.LabeledScore(r["sequence_id"], float(r["certainty"]),
                               annotations[r["sequence_id"]].label)
              for r in score_records
              if r.get("similarity_kind") == kind and r.get("status", "ok") == "ok"
              and r["sequence_id"] in annotations]
    if not scores:
        raise NoOverlap(f"no {kind} scores share a sequence id with the annotations")
    return scores


def cmd_calibrate(annotations_path, scores_path, out_dir=None, kinds=None) -> dict:
    """Calibrate a threshold per similarity kind; return {kind: CalibrationResult}."""
    annotations = load_annotations(annotations_path)
    records = read_jsonl(scores_path)
    present = [k for k in similarity.KINDS if any(r.get("similarity_kind") == k for r in records)]
    kinds = [k for k in (kinds or present) if k in present]
    if not kinds:
        raise NoOverlap("score file holds no certainty records")
    results = {k: cal.calibrate_threshold(join_scores(annotations, records, k)) for k in kinds}
    if out_dir is not None:
        out = Path(out_dir)
        # the lexical estimate is listed first
        order = [k for k in ("lexical_rougeL", "cosine_embedding") if k in results]
        rows = [(ESTIMATE_NAMES[k], results[k]) for k in order]
        _write_text(out / "calibration.csv", cal.calibration_table_csv(rows))
        _write_text(out / "calibration.json",
                    json.dumps({k: r.to_dict() for k, r in results.items()}, indent=2, sort_keys=True) + "\n")
    return results


def cmd_select(config: RunConfig, out_dir, epsilon: Optional[float] = None) -> list:
    """Re-apply a threshold to an existing explain run (e.g. after calibration)."""
    out = Path(out_dir)
    eps = _epsilon(config, epsilon)
    path = out / "selections.jsonl"
    if not path.exists():
        raise IncompleteRun("selections.jsonl missing; run explain first")
    records = read_jsonl(path)
    for rec in records:
        rec["epsilon"] = eps
        if rec.get("status") == "ok":
            rec["displayed"] = rec["selected"] if rec["certainty"] >= eps else similarity.SENTINEL
    write_jsonl(path, records)
    shown = {r["sequence_id"]: r["displayed"] for r in records}
    expl_path = out / "explanations.jsonl"
    if expl_path.exists():
        expl = read_jsonl(expl_path)
        for e in expl:
            e["displayed"] = shown.get(e["sequence_id"], e.get("displayed"))
        write_jsonl(expl_path, expl)
    return records


def cmd_evaluate(explanations_path, annotations_path, out_dir=None,
                 similarity_section: Optional[SimilaritySection] = None) -> list:
    section = similarity_section or SimilaritySection()
    explanations = read_jsonl(explanations_path)
    refs = {sid: a.references for sid, a in load_annotations(annotations_path).items() if a.references}
    rows = nlgmetrics.evaluate_table(explanations, refs, section.token_embedder())
    if out_dir is not None:
        _write_text(Path(out_dir) / "metrics.csv", nlgmetrics.table_csv(rows))
    return rows


def _csv_as_markdown(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return lines


def cmd_report(run_dir) -> str:
    run = Path(run_dir)
    path = run / "selections.jsonl"
    if not path.exists():
        raise IncompleteRun(f"{path} missing")
    records = read_jsonl(path)
    missing = [r["strip"] for r in records if not (run / r["strip"]).exists()]
    if missing:
        raise IncompleteRun(f"missing strips: {missing[:3]}")
    lines = ["# Latent variable explanations", ""]
    for rec in records:
        lines.append(f"## {rec['model']}: **z{rec['dim_index'] + 1}**")
        lines.append("")
        lines.append(f"![{rec['sequence_id']}]({rec['strip']})")
        lines.append("")
        if rec.get("status") != "ok":
            lines.append(f"Backend error: {rec.get('error')}")
        else:
            lines.append(f"Certainty ({rec['similarity_kind']}): {rec['certainty']:.4f} "
                         f"(threshold {rec['epsilon']:.4f})")
            lines.append("")
            lines.append(rec["displayed"])
        lines.append("")
    for title, name in (("Threshold calibration", "calibration.csv"),
                        ("Explanation quality", "metrics.csv")):
        table = run / name
        if table.exists():
            lines += [f"## {title}", ""] + _csv_as_markdown(table.read_text(encoding="utf-8")) + [""]
    text = "\n".join(lines)
    _write_text(run / "report.md", text)
    return text
