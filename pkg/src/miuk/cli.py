"""Command-line pipeline: ingest KG data, generate corpora, train, evaluate,
predict and run the numeric verification suites.

One JSON config file is the source of truth for a run; command-line flags
override individual keys, and the effective merged config is written into
every output directory. Exit codes: 0 success, 2 configuration or data
format problem, 3 numeric failure, 4 checkpoint/vocabulary incompatibility.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import click

from . import training as tr
from .autodiff import ParamStore
from .corpus import (SyntheticConfig, candidate_pairs, collect_relations,
                     generate_synthetic, insert_anchors, load_dataset,
                     load_rel2id, save_rel2id)
from .encoder import build_embedder
from .errors import (CompatibilityError, ConfigError, FormatError, MiukError,
                     NumericError)
from .kg import DescriptionStore, KnowledgeStore
from .model import Dimensions, ModeConfig, Model, check_params
from .report import write_history_report, write_ksweep_report
from .verify import (MODEL_TOLERANCE, OP_TOLERANCE, check_model_gradient,
                     check_op_gradients, run_invariant_battery)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_COMPAT = 4

ABLATIONS = {
    "nwi": {"integration": "NWI"},
    "awi": {"integration": "AWI"},
    "no-crossview": {"cross_view_inference": False},
    "no-mixedatt": {"mixed_attention": False},
    "no-entity-desp": {"use_entity_desp": False},
    "no-concept-desp": {"use_concept_desp": False},
}

PRESETS = {
    "full": {},
    "desk": {"model_dim": 32, "batch_size": 8, "lr_encoder": 1e-3, "lr_other": 1e-3},
}


@dataclass
class RunConfig:
    """Flat key space for config files; path keys must exist when set."""

    dataset: str | None = None
    dev_dataset: str | None = None
    train_dataset: str | None = None
    triples: str | None = None
    descriptions: str | None = None
    types: str | None = None
    embeddings: str | None = None
    checkpoint: str | None = None
    rel2id: str | None = None
    lr_encoder: float = 1e-5
    lr_other: float = 1e-5
    batch_size: int = 16
    epochs: int = 10
    dropout: float = 0.2
    seed: int = 0
    threshold_policy: str = "fixed"
    threshold: float = 0.5
    model_dim: int = 100
    base_dim: int = 768
    distance_dim: int = 10
    top_k: int = 3
    views: str = "three_view"
    integration: str = "PWI"
    cross_view_inference: bool = True
    mixed_attention: bool = True
    use_entity_desp: bool = True
    use_concept_desp: bool = True
    anchor_in_sentpool: bool = True
    normalize_mixed_weights: bool = False
    conditioning: str = "log1p"
    embedder: str = "hash"
    embedder_seed: int = 0


PATH_KEYS = ("dataset", "dev_dataset", "train_dataset", "triples", "descriptions",
             "types", "embeddings", "checkpoint", "rel2id")


def load_run_config(path: str | Path | None = None, preset: str | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """Defaults, then preset, then config file, then explicit flag overrides."""
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for key, value in PRESETS[preset].items():
            setattr(cfg, key, value)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in raw.items():
            setattr(cfg, key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    for key in PATH_KEYS:
        value = getattr(cfg, key)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{key} path does not exist: {value}")
    return cfg


def mode_config(cfg: RunConfig) -> ModeConfig:
    mode = ModeConfig(
        views=cfg.views, integration=cfg.integration, top_k=cfg.top_k,
        cross_view_inference=cfg.cross_view_inference,
        mixed_attention=cfg.mixed_attention,
        use_entity_desp=cfg.use_entity_desp,
        use_concept_desp=cfg.use_concept_desp,
        anchor_in_sentpool=cfg.anchor_in_sentpool,
        normalize_mixed_weights=cfg.normalize_mixed_weights)
    mode.validate()
    return mode


def train_config(cfg: RunConfig) -> tr.TrainConfig:
    tcfg = tr.TrainConfig(
        lr_encoder=cfg.lr_encoder, lr_other=cfg.lr_other,
        batch_size=cfg.batch_size, epochs=cfg.epochs, dropout=cfg.dropout,
        seed=cfg.seed, threshold_policy=cfg.threshold_policy,
        threshold=cfg.threshold)
    tcfg.validate()
    return tcfg


def make_embedder(cfg: RunConfig):
    return build_embedder(cfg.embedder, base_dim=cfg.base_dim,
                          seed=cfg.embedder_seed, path=cfg.embeddings)


def load_stores(cfg: RunConfig) -> tuple[KnowledgeStore, DescriptionStore]:
    kg = KnowledgeStore(conditioning=cfg.conditioning)
    if cfg.triples:
        kg.ingest_triples(cfg.triples)
    descriptions = DescriptionStore()
    if cfg.descriptions:
        descriptions.load_descriptions(cfg.descriptions)
    if cfg.types:
        descriptions.load_types(cfg.types)
    return kg, descriptions


def worker_count() -> int:
    """Parallelism cap: min(MIUK_THREADS, CPU count); defaults to CPU count."""
    cap = os.cpu_count() or 1
    raw = os.environ.get("MIUK_THREADS")
    if raw is None:
        return cap
    try:
        requested = int(raw)
    except ValueError:
        raise ConfigError(f"MIUK_THREADS must be an integer, got {raw!r}")
    if requested < 1:
        raise ConfigError(f"MIUK_THREADS must be at least 1, got {requested}")
    return min(requested, cap)


def write_merged_config(cfg: RunConfig, out_dir: Path) -> Path:
    path = out_dir / "merged_config.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def guarded(fn):
    """Translate domain errors into the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except CompatibilityError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_COMPAT)
        except MiukError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
    return wrapper


@click.group()
def main():
    """Multi-view relation extraction with uncertain-KG concept knowledge."""


# ----------------------------------------------------------------- ingest-kg ----

class _CollectingHandler(logging.Handler):
    def __init__(self, sink: list[str]):
        super().__init__()
        self.sink = sink

    def emit(self, record):
        self.sink.append(record.getMessage())


@main.command("ingest-kg")
@click.option("--triples", "triples_path", required=True,
              type=click.Path(exists=True), help="TSV file of entity<TAB>concept<TAB>count.")
@click.option("--desp", "desp_path", required=True, type=click.Path(exists=True),
              help="JSON Lines file of {name, text} descriptions.")
@click.option("--types", "types_path", type=click.Path(exists=True), default=None,
              help="Optional TSV of entity<TAB>type fallbacks.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Store directory.")
@guarded
def cmd_ingest_kg(triples_path, desp_path, types_path, out_dir):
    """Index triples and descriptions into a canonical store directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kg = KnowledgeStore()
    rejects: list[str] = []
    handler = _CollectingHandler(rejects)
    kg_log = logging.getLogger("miuk.kg")
    kg_log.addHandler(handler)
    try:
        accepted = kg.ingest_triples(triples_path)
    except FormatError as exc:
        (out / "rejects.log").write_text("".join(r + "\n" for r in rejects),
                                         encoding="utf-8")
        report = {"status": "failed", "error": str(exc),
                  "rejected_lines": len(rejects)}
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1)
            fh.write("\n")
        raise
    finally:
        kg_log.removeHandler(handler)

    descriptions = DescriptionStore()
    n_desc = descriptions.load_descriptions(desp_path)
    n_types = descriptions.load_types(types_path) if types_path else 0

    with open(out / "triples.tsv", "w", encoding="utf-8") as fh:
        for entity in kg.entities():
            for concept, count in sorted(kg.concept_counts(entity).items()):
                fh.write(f"{entity}\t{concept}\t{count}\n")
    shutil.copyfile(desp_path, out / "descriptions.jsonl")
    if types_path:
        shutil.copyfile(types_path, out / "types.tsv")
    (out / "rejects.log").write_text("".join(r + "\n" for r in rejects),
                                    encoding="utf-8")
    stored = sum(len(kg.concept_counts(e)) for e in kg.entities())
    report = {"status": "ok", "accepted": accepted, "rejected_lines": len(rejects),
              "stored_triples": stored, "entities": kg.num_entities,
              "concepts": len(kg.concept_vocabulary()) - 1,
              "descriptions": n_desc, "types": n_types}
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    click.echo(f"ingested {accepted} triples ({len(rejects)} rejected, "
               f"{stored} stored) into {out}")


# --------------------------------------------------------------------- synth ----

@main.command("synth")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON file of generator settings; defaults used when omitted.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def cmd_synth(config_path, seed, out_dir):
    """Generate a synthetic corpus with its KG, descriptions and rule table."""
    raw = {}
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {config_path} is not valid JSON: {exc}")
        known = {f.name for f in fields(SyntheticConfig)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown generator config keys: {', '.join(unknown)}")
    cfg = SyntheticConfig(**raw)
    corpus = generate_synthetic(cfg, seed=seed)
    paths = corpus.write(out_dir)
    click.echo(f"wrote {len(corpus.documents)} documents and "
               f"{len(corpus.triples)} triples to {Path(out_dir)}")
    click.echo(f"manifest: {paths['manifest']}")


# --------------------------------------------------------------------- train ----

def _apply_ablation(cfg: RunConfig, ablation: str | None) -> None:
    if ablation is None:
        return
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; "
                          f"valid names: {', '.join(sorted(ABLATIONS))}")
    for key, value in ABLATIONS[ablation].items():
        setattr(cfg, key, value)


def _relation_vocabulary(cfg: RunConfig, documents) -> list[str]:
    if cfg.rel2id:
        rel2id = load_rel2id(cfg.rel2id)
        return [name for name, _ in sorted(rel2id.items(), key=lambda kv: kv[1])]
    return collect_relations(documents)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
              help="Named bundle of defaults applied before the config file.")
@click.option("--ablation", default=None,
              help="Named model variant: " + ", ".join(sorted(ABLATIONS)) + ".")
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr-encoder", type=float, default=None)
@click.option("--lr-other", type=float, default=None)
@click.option("--dropout", type=float, default=None)
@click.option("--model-dim", type=int, default=None)
@click.option("--top-k", type=int, default=None)
@click.option("--integration", default=None)
@click.option("--threshold", type=float, default=None)
@click.option("--threshold-policy", default=None)
@guarded
def cmd_train(config_path, out_dir, preset, ablation, **flag_overrides):
    """Train on the configured dataset; writes checkpoint, history and report."""
    cfg = load_run_config(config_path, preset=preset, overrides=flag_overrides)
    _apply_ablation(cfg, ablation)
    if cfg.dataset is None:
        raise ConfigError("train needs a dataset path in the config")
    documents = load_dataset(cfg.dataset)
    dev_documents = load_dataset(cfg.dev_dataset) if cfg.dev_dataset else None
    kg, descriptions = load_stores(cfg)
    rel_names = _relation_vocabulary(cfg, documents)
    if not rel_names:
        raise ConfigError("no relation types found in the training data")
    dims = Dimensions(model_dim=cfg.model_dim, base_dim=cfg.base_dim,
                      distance_dim=cfg.distance_dim, num_relations=len(rel_names))
    dims.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_merged_config(cfg, out)
    result = tr.train(documents, kg, descriptions, rel_names, mode_config(cfg),
                      dims, train_config(cfg), make_embedder(cfg),
                      dev_documents=dev_documents,
                      history_path=out / "history.jsonl", log_fn=click.echo)
    result.params.save(out / "checkpoint.miuk")
    save_rel2id(rel_names, out / "rel2id.json")
    write_history_report(result.history, out)
    final = result.history[-1] if result.history else None
    metrics = {"threshold": result.threshold, "epochs": cfg.epochs, "final": final}
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1)
        fh.write("\n")
    if final is not None and final["dev_f1"] is not None:
        click.echo(f"final dev F1 {final['dev_f1']:.4f}  "
                   f"Ign F1 {final['dev_ign_f1']:.4f}  "
                   f"threshold {result.threshold:.4f}")
    click.echo(f"checkpoint: {out / 'checkpoint.miuk'}")


# ---------------------------------------------------------------------- eval ----

def _score_parallel(model: Model, documents, kg, descriptions) -> list[tr.PairScore]:
    """Evaluation forward over documents, fanned out across worker threads."""
    workers = worker_count()
    if workers <= 1 or len(documents) <= 1:
        return tr.score_documents(model, documents, kg, descriptions)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = pool.map(
            lambda doc: tr.score_documents(model, [doc], kg, descriptions), documents)
        out: list[tr.PairScore] = []
        for chunk in chunks:
            out.extend(chunk)
        return out


def _evaluate_dataset(model, documents, kg, descriptions, rel_names, threshold,
                      train_triples):
    pair_scores = _score_parallel(model, documents, kg, descriptions)
    predicted = tr.facts_from_scores(pair_scores, rel_names, threshold)
    return tr.evaluate_doclevel(predicted, tr.gold_facts(documents), train_triples)


@main.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True),
              default=None, help="Overrides the checkpoint key in the config.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--k-sweep", is_flag=True,
              help="Evaluate K = 1..5 and write a sweep table plus figure.")
@click.option("--ablation", default=None,
              help="Named model variant: " + ", ".join(sorted(ABLATIONS)) + ".")
@click.option("--threshold", type=float, default=None)
@guarded
def cmd_eval(config_path, checkpoint_path, out_dir, k_sweep, ablation, threshold):
    """Score the configured dataset with a checkpoint and report metrics."""
    cfg = load_run_config(config_path, overrides={
        "checkpoint": checkpoint_path, "threshold": threshold})
    _apply_ablation(cfg, ablation)
    if cfg.dataset is None:
        raise ConfigError("eval needs a dataset path in the config")
    if cfg.checkpoint is None:
        raise ConfigError("eval needs a checkpoint (config key or --checkpoint)")
    documents = load_dataset(cfg.dataset)
    kg, descriptions = load_stores(cfg)
    rel_names = _relation_vocabulary(cfg, documents)
    if not rel_names:
        raise ConfigError("no relation vocabulary available for evaluation")
    params = ParamStore.load(cfg.checkpoint)
    dims = Dimensions(model_dim=cfg.model_dim, base_dim=cfg.base_dim,
                      distance_dim=cfg.distance_dim, num_relations=len(rel_names))
    dims.validate()
    mode = mode_config(cfg)
    check_params(mode, dims, params)
    embedder = make_embedder(cfg)
    train_triples = (tr.name_triples(load_dataset(cfg.train_dataset))
                     if cfg.train_dataset else set())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_merged_config(cfg, out)

    def run_at(k: int):
        mode_k = dataclasses.replace(mode, top_k=k)
        model = Model(mode_k, dims, params, embedder, dropout_ratio=0.0)
        return _evaluate_dataset(model, documents, kg, descriptions, rel_names,
                                 cfg.threshold, train_triples)

    if k_sweep:
        rows = []
        for k in range(1, 6):
            result = run_at(k)
            rows.append({"k": k, "f1": result.overall.f1,
                         "ign_f1": result.ignore_train.f1})
            click.echo(f"K={k}: F1 {result.overall.f1:.4f}  "
                       f"Ign F1 {result.ignore_train.f1:.4f}")
        paths = write_ksweep_report(rows, out)
        with open(out / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump({"sweep": rows, "threshold": cfg.threshold,
                       "ablation": ablation}, fh, indent=1)
            fh.write("\n")
        click.echo(f"sweep table: {paths['csv']}")
        return

    result = run_at(cfg.top_k)
    if result.degenerate_ignore:
        click.echo("warning: every fact overlaps the training set; "
                   "Ign F1 reported as 0 over an empty remainder", err=True)
    metrics = {
        "f1": result.overall.f1, "precision": result.overall.precision,
        "recall": result.overall.recall,
        "tp": result.overall.tp, "fp": result.overall.fp, "fn": result.overall.fn,
        "ign_f1": result.ignore_train.f1,
        "ign_precision": result.ignore_train.precision,
        "ign_recall": result.ignore_train.recall,
        "degenerate_ignore": result.degenerate_ignore,
        "threshold": cfg.threshold, "top_k": cfg.top_k, "ablation": ablation,
    }
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1)
        fh.write("\n")
    click.echo(f"F1 {result.overall.f1:.4f}  Ign F1 {result.ignore_train.f1:.4f}  "
               f"(threshold {cfg.threshold})")


# ------------------------------------------------------------------- predict ----

@main.command("predict")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True),
              default=None)
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="Dataset to score; labels are ignored if present.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write predictions here instead of stdout.")
@guarded
def cmd_predict(config_path, checkpoint_path, input_path, out_path):
    """Emit per-pair relation predictions above the threshold as JSON."""
    cfg = load_run_config(config_path, overrides={"checkpoint": checkpoint_path})
    if cfg.checkpoint is None:
        raise ConfigError("predict needs a checkpoint (config key or --checkpoint)")
    if cfg.rel2id is None:
        raise ConfigError("predict needs a rel2id path naming the checkpoint's "
                          "relation vocabulary")
    documents = load_dataset(input_path)
    kg, descriptions = load_stores(cfg)
    rel2id = load_rel2id(cfg.rel2id)
    rel_names = [name for name, _ in sorted(rel2id.items(), key=lambda kv: kv[1])]
    params = ParamStore.load(cfg.checkpoint)
    dims = Dimensions(model_dim=cfg.model_dim, base_dim=cfg.base_dim,
                      distance_dim=cfg.distance_dim, num_relations=len(rel_names))
    dims.validate()
    mode = mode_config(cfg)
    check_params(mode, dims, params)
    model = Model(mode, dims, params, make_embedder(cfg), dropout_ratio=0.0)
    records = []
    for doc in documents:
        adoc = insert_anchors(doc)
        state = model.prepare_document(adoc, kg, descriptions, training=False)
        for h, t in candidate_pairs(doc):
            trace = model.forward_pair(state, h, t, training=False)
            scores = trace.scores.data
            relations = [{"r": rel_names[i], "score": float(scores[i])}
                         for i in range(len(rel_names))
                         if scores[i] >= cfg.threshold]
            records.append({"doc_id": doc.doc_id, "h": h, "t": t,
                            "relations": relations})
    payload = json.dumps(records, indent=1) + "\n"
    if out_path:
        Path(out_path).write_text(payload, encoding="utf-8")
        click.echo(f"wrote {len(records)} pair predictions to {out_path}")
    else:
        click.echo(payload, nl=False)


# -------------------------------------------------------------------- verify ----

@main.command("verify")
@click.option("--level", type=click.Choice(["ops", "model", "all"]), default="all",
              show_default=True)
@guarded
def cmd_verify(level):
    """Run finite-difference gradient checks and the invariant battery."""
    if level in ("ops", "all"):
        results = check_op_gradients()
        for name in sorted(results):
            click.echo(f"op {name}: worst relative error {results[name]:.3e} "
                       f"(tolerance {OP_TOLERANCE:g})")
    if level in ("model", "all"):
        worst = check_model_gradient()
        click.echo(f"full model: worst relative error {worst:.3e} "
                   f"(tolerance {MODEL_TOLERANCE:g})")
    if level == "all":
        stats = run_invariant_battery()
        click.echo(f"invariant battery: {stats['cases']} cases over "
                   f"{stats['pairs']} pairs, all constraints held")
    click.echo("verification passed")


if __name__ == "__main__":
    main()
