"""Command-line pipeline.

Every subcommand reads artifacts written by earlier stages and writes its own
output directory holding a ``manifest.json``::

    gen-synth | ingest   -> train_events.tsv, test_events.tsv, train.bin, test.bin, split.json
    build-graph          -> graph.ckpt, graph_stats.json
    pretrain-embed       -> graph_embeddings.ckpt, graph_index.tsv
    train                -> checkpoint_epoch*.ckpt, model.ckpt, metrics.jsonl [, diagnostics.jsonl]
    evaluate             -> report.json, report.txt, report.csv
    ablate               -> <variant>/report.json, ablation.txt, ablation.csv
    analyze              -> analysis.json and text/CSV tables

Failures exit nonzero and the last stderr line is a single machine-parsable
``srnlab-error`` record.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DataError,
    EventTable,
    ImpressionSet,
    SyntheticSpec,
    Vocab,
    build_impressions,
    ingest_taobao,
    simulate_synthetic,
    split_events,
    time_split,
)
from .evaluation import (
    MetricError,
    embedding_quality,
    evaluate_predictions,
    format_table,
    retargeting_ratio,
    stratified_auc,
    to_csv,
)
from .graphembed import (
    GraphConfig,
    HeteroGraph,
    LeakageError,
    build_graph,
    export_embeddings,
    load_embeddings,
    train_link_prediction,
)
from .nncore import ConfigurationError, load_checkpoint, save_checkpoint
from .retarget import RETARGET_THRESHOLD, ripple_ids
from .srnmodel import (
    VARIANTS,
    SrnConfig,
    TrainingError,
    ablation_config,
    coerce_fields,
    evaluate_model,
    load_model,
    predict,
    read_ini,
    run_ablation,
    save_model,
    train,
)

log = logging.getLogger("srnlab")

DATA_ROOT_ENV = "SRNLAB_DATA_ROOT"
SECONDS_PER_DAY = 86_400
DETAIL_SAMPLES = 200
REPORT_COLUMNS = ["model", "auc", "logloss", "n_samples", "config_hash"]


class CliError(Exception):
    code = 1


class UsageError(CliError):
    code = 2


class MissingArtifact(CliError):
    code = 3

    def __init__(self, path, hint: str):
        super().__init__(f"missing artifact {path}; {hint}")


class LockedError(CliError):
    code = 4


@dataclass(frozen=True)
class DataOptions:
    max_len: int = 100
    negative_ratio: int = 4
    boundary: int | None = None


SECTIONS = {"synth": SyntheticSpec, "data": DataOptions, "graph": GraphConfig, "model": SrnConfig}


# --------------------------------------------------------------------- plumbing

def load_settings(path, overrides=(), seed=None) -> dict[str, dict]:
    """Parse the INI file plus ``section.key=value`` overrides into per-section kwargs.

    All problems are collected and raised together.
    """
    raw: dict[str, dict] = {s: {} for s in SECTIONS}
    errors = []
    if path is not None:
        if not Path(path).exists():
            raise MissingArtifact(path, "pass an existing --config file")
        for section, values in read_ini(path).items():
            if section not in SECTIONS:
                errors.append(f"unknown section [{section}]; allowed: {', '.join(SECTIONS)}")
                continue
            raw[section].update(values)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            errors.append(f"override {item!r} must look like section.key=value")
        elif section not in SECTIONS:
            errors.append(f"override {item!r}: unknown section; allowed: {', '.join(SECTIONS)}")
        else:
            raw[section][name] = value
    out = {}
    for section, cls in SECTIONS.items():
        kwargs, errs = coerce_fields(cls, raw[section], section)
        errors += errs
        if seed is not None and "seed" in {f.name for f in fields(cls)}:
            kwargs["seed"] = seed
        out[section] = kwargs
    try:
        SyntheticSpec(**out["synth"]).validate()
    except (DataError, TypeError) as exc:
        errors.append(f"[synth] {exc}")
    try:
        errors += [f"[model] {e}" for e in SrnConfig(**out["model"]).errors()]
    except TypeError as exc:
        errors.append(f"[model] {exc}")
    if errors:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errors))
    return out


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunDir:
    """Output directory with a lockfile and a manifest written on success."""

    def __init__(self, path: Path, force: bool):
        self.path = Path(path)
        self.force = force
        self.lock = self.path / ".lock"

    def __enter__(self) -> RunDir:
        if self.lock.exists():
            raise LockedError(f"{self.path} is locked by another srnlab process (remove {self.lock} if stale)")
        if self.path.exists() and any(self.path.iterdir()):
            if not self.force:
                raise UsageError(f"output directory {self.path} is not empty; pass --force to overwrite")
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc) -> None:
        self.lock.unlink(missing_ok=True)

    def manifest(self, subcommand: str, args, settings: dict, inputs: dict, seed) -> Path:
        outputs = {}
        for p in sorted(self.path.rglob("*")):
            if p.is_file() and p.name not in (".lock", "manifest.json"):
                outputs[str(p.relative_to(self.path))] = sha256(p)
        body = {
            "subcommand": subcommand,
            "config_path": args.config,
            "config": settings,
            "inputs": {k: str(v) for k, v in sorted(inputs.items())},
            "outputs": outputs,
            "seed": seed,
            "version": __version__,
        }
        path = self.path / "manifest.json"
        path.write_text(json.dumps(body, sort_keys=True, indent=2, default=_jsonable) + "\n")
        return path


def _jsonable(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, hint)
    return path


def _read_manifest(directory: Path) -> dict:
    return json.loads(_require(directory / "manifest.json", "the directory was not produced by srnlab").read_text())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n")


def _write_tables(out: Path, stem: str, rows, columns, title) -> str:
    text = format_table(rows, columns, title)
    (out / f"{stem}.txt").write_text(text)
    (out / f"{stem}.csv").write_text(to_csv(rows, columns))
    return text


# --------------------------------------------------------------------- datasets

def _write_dataset(out: Path, events: EventTable, boundary: int, opts: DataOptions, seed: int) -> dict:
    train_ev, test_ev = split_events(events, boundary)
    if not len(train_ev) or not len(test_ev):
        raise DataError(f"boundary {boundary} leaves train={len(train_ev)} test={len(test_ev)} events")
    train_ev.to_tsv(out / "train_events.tsv")
    test_ev.to_tsv(out / "test_events.tsv")
    imp = build_impressions(events, max_len=opts.max_len, negative_ratio=opts.negative_ratio, seed=seed)
    if imp.leakage_violations():
        raise LeakageError(f"{imp.leakage_violations()} history positions are not before their impression")
    tr, te = time_split(imp, boundary)
    tr.write(out / "train.bin")
    te.write(out / "test.bin")
    split = {"boundary": int(boundary), "train_events": len(train_ev), "test_events": len(test_ev),
             "train_impressions": len(tr), "test_impressions": len(te), "types": list(imp.types),
             "max_len": opts.max_len}
    _write_json(out / "split.json", split)
    return split


def _load_split(data: Path) -> dict:
    return json.loads(_require(data / "split.json", "run gen-synth or ingest first").read_text())


def _load_impressions(data: Path, which: str) -> ImpressionSet:
    return ImpressionSet.read(_require(data / f"{which}.bin", "run gen-synth or ingest first"))


def _load_vocabs(data: Path) -> dict[str, Vocab]:
    return {p.stem[len("vocab_"):]: Vocab.load(p) for p in sorted(data.glob("vocab_*.tsv"))}


def _item_categories(data: Path) -> tuple[np.ndarray, np.ndarray]:
    """Item -> category map and per-item training click counts."""
    train_ev = EventTable.from_tsv(_require(data / "train_events.tsv", "run gen-synth or ingest first"))
    test_ev = EventTable.from_tsv(data / "test_events.tsv")
    both = EventTable(np.r_[train_ev.user, test_ev.user], np.r_[train_ev.item, test_ev.item],
                      np.r_[train_ev.timestamp, test_ev.timestamp], np.r_[train_ev.click, test_ev.click],
                      category=np.r_[train_ev.side["category"], test_ev.side["category"]])
    cat = both.item_side_info()["category"]
    clicks = np.bincount(train_ev.item[train_ev.click], minlength=cat.size)[:cat.size]
    return cat, clicks


# --------------------------------------------------------------------- commands

def cmd_gen_synth(args, settings, run: RunDir) -> dict:
    spec = SyntheticSpec(**settings["synth"])
    d = simulate_synthetic(spec)
    opts = DataOptions(**settings["data"])
    boundary = opts.boundary or spec.test_boundary
    split = _write_dataset(run.path, d.events, boundary, opts, spec.seed)
    save_checkpoint(run.path / "latents.ckpt",
                    {"latents": d.latents, "item_category": d.item_category, "item_product": d.item_product,
                     "category_group": d.category_group}, {"spec": spec.to_dict()})
    print(f"events: {len(d.events)}  ctr: {d.events.click.mean():.4f}  "
          f"impressions: {split['train_impressions']} train / {split['test_impressions']} test")
    return {}


def cmd_ingest(args, settings, run: RunDir) -> dict:
    src = _require(Path(args.input), "pass the raw behaviour CSV with --input")
    events = ingest_taobao(src, run.path)
    opts = DataOptions(**settings["data"])
    boundary = opts.boundary or (int(events.timestamp.max()) // SECONDS_PER_DAY) * SECONDS_PER_DAY
    seed = args.seed if args.seed is not None else 0
    split = _write_dataset(run.path, events, boundary, opts, seed)
    print(f"events: {len(events)}  rejected lines: {len(events.rejects)}  boundary: {split['boundary']}")
    return {"input": src}


def cmd_build_graph(args, settings, run: RunDir) -> dict:
    data = Path(args.data)
    split = _load_split(data)
    path = Path(args.events) if args.events else data / "train_events.tsv"
    events = EventTable.from_tsv(_require(path, "build-graph needs the training events of a dataset"))
    graph = build_graph(events, boundary=split["boundary"])
    tensors = {kind: pairs for kind, pairs in graph.edges.items()}
    save_checkpoint(run.path / "graph.ckpt", tensors, {"side_types": list(graph.side_types)})
    stats = graph.stats()
    _write_json(run.path / "graph_stats.json", stats)
    rows = [{"kind": k, "count": v} for k, v in stats["nodes"].items()]
    rows += [{"kind": k, "count": v} for k, v in stats["edges"].items()]
    print(_write_tables(run.path, "graph_stats", rows, ["kind", "count"], "graph nodes and edges"), end="")
    return {"data": data, "events": path}


def _load_graph(path: Path) -> HeteroGraph:
    tensors, meta = load_checkpoint(_require(path / "graph.ckpt", "run build-graph first"))
    return HeteroGraph(tensors, tuple(meta["side_types"]))


def cmd_pretrain_embed(args, settings, run: RunDir) -> dict:
    gdir = Path(args.graph)
    graph = _load_graph(gdir)
    cfg = GraphConfig(**settings["graph"])
    res = train_link_prediction(graph, cfg)
    data = Path(_read_manifest(gdir)["inputs"]["data"])
    export_embeddings(res.embeddings, run.path, _load_vocabs(data), {"config": cfg.to_dict()})
    _write_json(run.path / "history.json", res.history)
    print(f"nodes: {res.embeddings.node_count}  final link loss: {res.history[-1]['loss']:.5f}")
    return {"graph": gdir, "data": data}


def _model_inputs(args) -> tuple[Path, Path | None]:
    data = Path(args.data)
    emb = Path(args.embeddings) if args.embeddings else None
    return data, emb


def _graph_for(config: SrnConfig, emb: Path | None):
    if config.model == "srn" and config.embedding_source == "graph":
        if emb is None:
            raise UsageError("model=srn reads graph embeddings; pass --embeddings <pretrain-embed output>")
        return load_embeddings(_require(emb / "graph_embeddings.ckpt", "run pretrain-embed first"))
    return load_embeddings(emb) if emb is not None and (emb / "graph_embeddings.ckpt").exists() else None


def _diagnostics(model, test: ImpressionSet, path: Path) -> None:
    """One JSON line per test sample; the first few carry full per-position detail."""
    pred, details = predict(model, test, keep_details=True)
    detail = {}
    for idx, batch, diag in details:
        for j, i in enumerate(idx.tolist()):
            if i >= DETAIL_SAMPLES:
                break
            k = int(batch.mask[j].sum())
            detail[i] = {t: {"cos": diag[t]["cos"][j, :k].round(12).tolist(),
                             "weights": diag[t]["weights"][j, :k].round(12).tolist(),
                             "ripple_ids": ripple_ids(diag[t]["cos"][j, :k])} for t in diag}
    with open(path, "w") as fh:
        for i in range(len(test)):
            types = {}
            for t in model.types:
                entry = {"hrn_s_max": float(pred.hrn_s_max[t][i])}
                if t in pred.s_max:
                    entry["s_max"] = float(pred.s_max[t][i])
                entry.update(detail.get(i, {}).get(t, {}))
                types[t] = entry
            rec = {"index": i, "label": int(pred.labels[i]), "prob": float(pred.probs[i]), "types": types}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_train(args, settings, run: RunDir) -> dict:
    data, emb = _model_inputs(args)
    config = SrnConfig(**settings["model"]).validate()
    train_set = _load_impressions(data, "train")
    graph = _graph_for(config, emb)
    _write_json(run.path / "config.json", config.to_dict())
    res = train(config, train_set, graph, run.path)
    save_model(res.model, run.path / "model.ckpt", {"epochs": config.epochs})
    if args.diagnostics:
        _diagnostics(res.model, _load_impressions(data, "test"), run.path / "diagnostics.jsonl")
    last = res.history[-1]["train_loss"] if res.history else float("nan")
    print(f"model: {config.model}  epochs: {config.epochs}  final train loss: {last:.5f}")
    inputs = {"data": data}
    if emb is not None:
        inputs["embeddings"] = emb
    return inputs


def _report_row(report) -> dict:
    return {k: getattr(report, k) for k in REPORT_COLUMNS}


def cmd_evaluate(args, settings, run: RunDir) -> dict:
    src = Path(args.run)
    man = _read_manifest(src)
    data = Path(man["inputs"]["data"])
    emb = Path(man["inputs"]["embeddings"]) if "embeddings" in man["inputs"] else None
    ckpt = _require(src / "model.ckpt", "run train first")
    meta = json.loads((src / "model.ckpt.json").read_text())
    config = SrnConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    model = load_model(ckpt, _graph_for(config, emb))
    report = evaluate_model(model, _load_impressions(data, "test"))
    (run.path / "report.json").write_text(report.to_json())
    print(_write_tables(run.path, "report", [_report_row(report)], REPORT_COLUMNS, "test metrics"), end="")
    return {"run": src, "data": data}


def cmd_ablate(args, settings, run: RunDir) -> dict:
    data, emb = _model_inputs(args)
    base = SrnConfig(**{**settings["model"], "model": "srn"}).validate()
    train_set = _load_impressions(data, "train")
    test_set = _load_impressions(data, "test")
    rows = []
    for variant in VARIANTS:
        cfg = ablation_config(base, variant)
        sub = run.path / variant
        sub.mkdir()
        out = run_ablation(base, variant, train_set, test_set, _graph_for(cfg, emb), sub)
        (sub / "report.json").write_text(out["report"].to_json())
        rows.append({"variant": variant, "auc": out["auc"], "logloss": out["logloss"],
                     "config_hash": out["config_hash"]})
    ref = rows[0]["auc"]
    for r in rows:
        r["delta_auc"] = r["auc"] - ref
    cols = ["variant", "auc", "delta_auc", "logloss", "config_hash"]
    print(_write_tables(run.path, "ablation", rows, cols, "ablation study"), end="")
    return {"data": data, **({"embeddings": emb} if emb is not None else {})}


def _read_diagnostics(path: Path):
    if not path.exists():
        raise MissingArtifact(path, "re-run train with --diagnostics to record per-sample similarities")
    probs, labels, soft, hard = [], [], {}, {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            probs.append(rec["prob"])
            labels.append(rec["label"])
            for t, v in rec["types"].items():
                hard.setdefault(t, []).append(v["hrn_s_max"])
                if "s_max" in v:
                    soft.setdefault(t, []).append(v["s_max"])
    arr = lambda d: {t: np.asarray(v) for t, v in d.items()}
    return np.asarray(probs), np.asarray(labels), arr(soft), arr(hard)


def cmd_analyze(args, settings, run: RunDir) -> dict:
    src = Path(args.run)
    man = _read_manifest(src)
    probs, labels, soft, hard = _read_diagnostics(src / "diagnostics.jsonl")
    data = Path(man["inputs"]["data"])
    thr = args.threshold
    ratio_rows = []
    for t in hard:
        row = {"type": t, "hrn_ratio": retargeting_ratio(hard[t], threshold=thr)}
        if t in soft:
            row["srn_ratio"] = retargeting_ratio(soft[t], threshold=thr)
        ratio_rows.append(row)
    strata_rows = []
    for source, table in (("srn", soft), ("hrn", hard)):
        for t, s_max in table.items():
            st = stratified_auc(probs, labels, s_max, thr).to_json()
            strata_rows.append({"model": source, "type": t, "auc_retargeted": st["retargeted"]["auc"],
                                "n_retargeted": st["retargeted"]["n"], "auc_others": st["others"]["auc"],
                                "n_others": st["others"]["n"]})
    cat, clicks = _item_categories(data)
    quality_rows = []
    graph_tables = {}
    if "embeddings" in man["inputs"]:
        ge = load_embeddings(Path(man["inputs"]["embeddings"]))
        graph_tables["graph"] = ge.matrix("item", cat.size)
    state, _ = load_checkpoint(src / "model.ckpt")
    ctr = state["emb.item"]
    rows = min(ctr.shape[0], cat.size)
    graph_tables["ctr"] = np.vstack([ctr[:rows], np.zeros((cat.size - rows, ctr.shape[1]))])
    for name, emb in graph_tables.items():
        try:
            intra, inter = embedding_quality(emb, cat, args.top_categories, args.items_per_category,
                                             seed=args.seed or 0, popularity=clicks)
        except MetricError as exc:
            quality_rows.append({"embedding": name, "intra": {"undefined": str(exc)}, "inter": {"undefined": ""}})
            continue
        quality_rows.append({"embedding": name, "intra": intra, "inter": inter, "gap": intra - inter})
    out = {"threshold": thr, "retargeting_ratio": ratio_rows, "stratified_auc": strata_rows,
           "embedding_quality": quality_rows}
    _write_json(run.path / "analysis.json", out)
    text = _write_tables(run.path, "retargeting_ratio", ratio_rows, ["type", "hrn_ratio", "srn_ratio"],
                         f"retargeting ratio (s_max > {thr})")
    text += _write_tables(run.path, "stratified_auc", strata_rows,
                          ["model", "type", "auc_retargeted", "n_retargeted", "auc_others", "n_others"],
                          "AUC on retargeted vs other samples")
    text += _write_tables(run.path, "embedding_quality", quality_rows, ["embedding", "intra", "inter", "gap"],
                          "intra/inter-category cosine")
    print(text, end="")
    return {"run": src, "data": data}


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "ingest": cmd_ingest,
    "build-graph": cmd_build_graph,
    "pretrain-embed": cmd_pretrain_embed,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [synth] [data] [graph] [model] sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="seed applied to every section that has one")
    common.add_argument("--out", help=f"output directory (default: ${DATA_ROOT_ENV}/<subcommand>)")
    common.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    common.add_argument("--diagnostics", action="store_true",
                        help="train: also write per-sample similarity diagnostics for the test split")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="srnlab", description="Hard/soft retargeting CTR pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-synth", parents=[common], help="simulate a planted-signal event log")
    p = sub.add_parser("ingest", parents=[common], help="import a user,item,category,behavior,timestamp CSV")
    p.add_argument("--input", required=True)
    p = sub.add_parser("build-graph", parents=[common], help="build the click graph from training events")
    p.add_argument("--data", required=True)
    p.add_argument("--events", help="events TSV (default: <data>/train_events.tsv)")
    p = sub.add_parser("pretrain-embed", parents=[common], help="link-prediction pretraining of graph embeddings")
    p.add_argument("--graph", required=True)
    for name, text in (("train", "train one CTR model"), ("ablate", "train SRN and its four ablations")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True)
        p.add_argument("--embeddings")
    p = sub.add_parser("evaluate", parents=[common], help="score a trained run on the test split")
    p.add_argument("--run", required=True)
    p = sub.add_parser("analyze", parents=[common], help="retargeting ratio, strata and embedding quality")
    p.add_argument("--run", required=True)
    p.add_argument("--threshold", type=float, default=RETARGET_THRESHOLD)
    p.add_argument("--top-categories", type=int, default=100)
    p.add_argument("--items-per-category", type=int, default=100)
    return parser


def _default_out(args) -> Path:
    if args.out:
        return Path(args.out)
    if args.command in ("evaluate", "analyze"):
        return Path(args.run) / ("eval" if args.command == "evaluate" else "analysis")
    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"pass --out or set {DATA_ROOT_ENV}")
    return Path(root) / args.command


def _error_tail(exc: BaseException, code: int) -> str:
    msg = " ".join(str(exc).split())
    return "srnlab-error " + json.dumps({"code": code, "type": type(exc).__name__, "message": msg}, sort_keys=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = load_settings(args.config, args.set, args.seed)
        out = _default_out(args)
        with RunDir(out, args.force) as run:
            inputs = COMMANDS[args.command](args, settings, run)
            run.manifest(args.command, args, settings, inputs, args.seed)
        return 0
    except (CliError, ConfigurationError, DataError, LeakageError, MetricError, TrainingError, OSError) as exc:
        code = exc.code if isinstance(exc, CliError) else 2 if isinstance(exc, ConfigurationError) else 1
        if isinstance(exc, TrainingError) and exc.last_checkpoint is not None:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        print(str(exc), file=sys.stderr)
        print(_error_tail(exc, code), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
