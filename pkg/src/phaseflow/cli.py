"""``phaseflow`` command line: synth, align, split, train, infer, eval, plot.

Exit codes: 0 success, 2 input or configuration error, 3 data-consistency error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluate
from .align import AlignmentError, ChannelSet, align_by_lag, read_log_csv, rebase_log_timestamps, write_log_csv
from .data import (
    DEFAULT_LABEL_NAMES,
    TRANSITION,
    DataError,
    Dataset,
    DatasetSplit,
    SynthConfig,
    read_labels_csv,
    stratified_split,
    synth_audio,
    synth_generate,
    write_labels_csv,
)
from .features import EmbeddingManifest, ChannelEntry, FeatureError, write_feature_file
from .model import (
    ImageConfig,
    ImageModel,
    ModelError,
    SpeechConfig,
    SpeechModel,
    SwitchConfig,
    TrainConfig,
    load_model,
    merged_infer,
    train,
    write_history_csv,
)
from .nn import CheckpointError
from .signal import SignalError, cross_correlate_lag, detect_beeps, read_wav, write_wav

log = logging.getLogger("phaseflow")

COMMANDS = ("synth", "align", "split", "train", "infer", "eval", "plot")
PLAIN_SECTIONS = {
    "align": {"max_lag_s", "rebase_mode", "output", "write_audio"},
    "split": {"n_val", "n_test"},
    "eval": {"exclude_transition", "include_unsupported"},
}


class UsageError(Exception):
    """Bad input or configuration (exit 2)."""


class ConsistencyError(Exception):
    """Inputs that exist but disagree with each other (exit 3)."""


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    return cfg


def resolve(args) -> dict:
    """Merge the JSON config with command-line flags; flags win."""
    cfg = load_config(args.config)
    for section in ("synth", "align", "split", "speech", "image", "train", "switch", "eval"):
        cfg.setdefault(section, {})
        if not isinstance(cfg[section], dict):
            raise UsageError(f"config section {section!r} must be an object")
    # sections read key by key here; the others are checked by their dataclasses
    for section, known in PLAIN_SECTIONS.items():
        unknown = set(cfg[section]) - known
        if unknown:
            raise UsageError(f"unknown {section} config keys: {sorted(unknown)}")
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    if args.data is not None:
        cfg["data"] = args.data
    if args.out is not None:
        cfg["out"] = args.out
    cfg.setdefault("out", "out")
    if args.switch_k is not None:
        cfg["switch"]["consecutive_s"] = args.switch_k
    if args.exclude_transition:
        cfg["eval"]["exclude_transition"] = True
    if args.model is not None:
        cfg["model"] = args.model
    if args.runs is not None:
        cfg["runs"] = args.runs
    return cfg


def _data_manifest(cfg) -> Path:
    if "data" not in cfg:
        raise UsageError("no dataset manifest given (--data or config 'data')")
    p = Path(cfg["data"])
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise UsageError(f"dataset manifest not found: {p}")
    return p


def _dataset(cfg) -> Dataset:
    try:
        return Dataset.load(_data_manifest(cfg))
    except (KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"malformed dataset manifest: {exc}") from None


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _writable_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {p}: {exc.strerror or exc}") from None
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg) -> int:
    out = _writable_dir(cfg.get("data") or cfg["out"])
    try:
        scfg = SynthConfig.from_dict({**cfg["synth"], "seed": cfg["seed"]})
    except (TypeError, DataError) as exc:
        raise UsageError(f"synth config: {exc}") from None
    ops = synth_generate(scfg)
    entries = []
    for rec in ops:
        d = out / rec.operation_id
        chans = {}
        for name, values in [*rec.speech.items(), ("xray_image", rec.xray_image)]:
            write_feature_file(d / f"{name}.ftr", values)
            chans[name] = ChannelEntry(f"{name}.ftr", values.shape[1], rec.T)
        _dump_json(d / "features.json", EmbeddingManifest(rec.operation_id, chans).to_dict())
        write_labels_csv(d / "labels.csv", rec.labels)
        write_log_csv(d / "log.csv", rec.meta["log"])
        entry = {
            "operation_id": rec.operation_id,
            "features": f"{rec.operation_id}/features.json",
            "labels": f"{rec.operation_id}/labels.csv",
            "log": f"{rec.operation_id}/log.csv",
            "truth": {"ambient_lag_s": rec.meta["ambient_lag_s"], "log_offset_s": round(rec.meta["log_offset_s"], 3)},
        }
        if scfg.write_audio:
            audio = synth_audio(rec, scfg)
            entry["audio"] = {}
            for name, sig in audio.items():
                write_wav(d / f"{name}.wav", sig)
                entry["audio"][name] = f"{rec.operation_id}/{name}.wav"
        entries.append(entry)
    manifest = {
        "seed": cfg["seed"],
        "label_names": list(DEFAULT_LABEL_NAMES),
        "synth": asdict(scfg),
        "operations": entries,
    }
    _dump_json(out / "manifest.json", manifest)
    print(f"wrote {len(ops)} operations ({sum(r.T for r in ops)} s) to {out}")
    return 0


def cmd_align(cfg) -> int:
    src = _data_manifest(cfg)
    ds = _dataset(cfg)
    acfg = cfg["align"]
    max_lag_s = float(acfg.get("max_lag_s", 60.0))
    mode = acfg.get("rebase_mode", "first")
    out_path = Path(acfg.get("output", src.parent / "manifest_aligned.json"))
    entries = []
    for e in ds.entries:
        op_id = e["operation_id"]
        audio = e.get("audio", {})
        missing = [c for c in ("physician", "assistant", "ambient") if c not in audio or not (ds.root / audio[c]).exists()]
        if missing:
            raise UsageError(f"{op_id}: missing channel(s) {', '.join(missing)}")
        sigs = {c: read_wav(ds.root / audio[c]) for c in ("physician", "assistant", "ambient")}
        try:
            lag = cross_correlate_lag(sigs["physician"], sigs["ambient"], max_lag_s)
        except SignalError as exc:
            raise ConsistencyError(f"{op_id}: {exc}") from None
        chans = ChannelSet(
            sigs["physician"], sigs["assistant"], sigs["ambient"], np.ones(int(sigs["physician"].duration_s), bool)
        )
        aligned = align_by_lag(chans, lag)
        # beeps are timed on the physician clock, which the features and labels share
        events = detect_beeps(sigs["physician"])
        raw_log = ds.log(op_id)
        try:
            rebased = rebase_log_timestamps(raw_log, events, mode)
        except AlignmentError as exc:
            raise UsageError(f"{op_id}: {exc}") from None
        # log clock minus physician clock
        offset = raw_log[0].t_s - rebased[0].t_s
        log_rel = f"{op_id}/log_aligned.csv"
        write_log_csv(ds.root / log_rel, rebased)
        new = dict(e, log=log_rel, alignment={"ambient_lag_s": round(lag, 6), "log_offset_s": round(offset, 3)})
        if acfg.get("write_audio", False):
            new["aligned_audio"] = {}
            for c in ("physician", "assistant", "ambient"):
                rel = f"{op_id}/{c}_aligned.wav"
                write_wav(ds.root / rel, getattr(aligned, c))
                new["aligned_audio"][c] = rel
        entries.append(new)
        print(f"{op_id} lag={lag:+.4f}s log_offset={offset:.3f}s beeps={len(events)}")
    doc = json.loads(src.read_text())
    doc["operations"] = entries
    doc["aligned_from"] = src.name
    doc["seed"] = cfg["seed"]
    _dump_json(out_path, doc)
    print(f"wrote {out_path}")
    return 0


def _split_path(cfg) -> Path:
    return Path(cfg.get("split_file", Path(cfg["out"]) / "split.json"))


def cmd_split(cfg) -> int:
    ds = _dataset(cfg)
    scfg = cfg["split"]
    try:
        split = stratified_split(
            {i: ds.timeline(i) for i in ds.ids()}, int(scfg.get("n_val", 5)), int(scfg.get("n_test", 5))
        )
    except DataError as exc:
        raise ConsistencyError(str(exc)) from None
    path = _split_path(cfg)
    _dump_json(path, {"seed": cfg["seed"], "train": split.train, "val": split.val, "test": split.test})
    print(f"train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)} -> {path}")
    return 0


def _load_split(cfg) -> DatasetSplit:
    path = _split_path(cfg)
    if not path.exists():
        raise UsageError(f"split file not found: {path} (run 'phaseflow split' first)")
    obj = json.loads(path.read_text())
    return DatasetSplit(obj["train"], obj["val"], obj["test"])


def _records(ds: Dataset, ids):
    try:
        return ds.records(ids)
    except FeatureError as exc:
        raise ConsistencyError(str(exc)) from None
    except (FileNotFoundError, DataError, AlignmentError) as exc:
        raise UsageError(str(exc)) from None


def _checkpoint_path(cfg, kind: str) -> Path:
    return Path(cfg.get("checkpoints", cfg["out"])) / f"{kind}.ckpt"


def cmd_train(cfg) -> int:
    kind = cfg.get("model")
    if kind not in ("speech", "image"):
        raise UsageError("--model speech|image is required for train")
    ds = _dataset(cfg)
    split = _load_split(cfg)
    train_ops = _records(ds, split.train)
    val_ops = _records(ds, split.val)
    try:
        tcfg = TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})
        if kind == "speech":
            mcfg = dict(cfg["speech"])
            channels = tuple(mcfg.pop("channels", ("physician", "assistant", "ambient")))
            dims = {c: train_ops[0].speech[c].shape[1] for c in channels}
            model = SpeechModel(SpeechConfig(dims, channels=channels, **mcfg), seed=cfg["seed"])
        else:
            mcfg = dict(cfg["image"])
            model = ImageModel(ImageConfig(train_ops[0].xray_image.shape[1], **mcfg), seed=cfg["seed"])
    except (TypeError, ModelError) as exc:
        raise UsageError(f"{kind} config: {exc}") from None
    history = train(model, train_ops, tcfg, val_ops)
    ckpt = _checkpoint_path(cfg, kind)
    model.save(ckpt)
    meta = json.loads(ckpt.with_suffix(".json").read_text())
    meta["seed"] = cfg["seed"]
    meta["train"] = asdict(tcfg)
    _dump_json(ckpt.with_suffix(".json"), meta)
    write_history_csv(ckpt.with_name(f"{kind}_history.csv"), history, seed=cfg["seed"])
    last = history[-1]
    print(f"{kind}: {len(history)} epochs, loss {last.train_loss:.4f}, val acc {last.val_acc:.2f}, val F1 {last.val_f1:.2f}")
    print(f"wrote {ckpt}")
    return 0


def _pred_dir(run_dir: Path) -> Path:
    return run_dir / "pred"


def cmd_infer(cfg) -> int:
    models = {}
    for kind in ("speech", "image"):
        path = _checkpoint_path(cfg, kind)
        try:
            models[kind] = load_model(path)
        except (ModelError, CheckpointError, FileNotFoundError) as exc:
            raise UsageError(f"cannot load {kind} model: {exc}") from None
    ds = _dataset(cfg)
    ids = cfg.get("infer_ops") or _load_split(cfg).test
    try:
        sw = SwitchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["switch"].items()})
        sw.validate(ds.label_names)
    except (TypeError, ModelError) as exc:
        raise UsageError(f"switch config: {exc}") from None
    out = _pred_dir(Path(cfg["out"]))
    index = {"seed": cfg["seed"], "switch": asdict(sw), "operations": {}}
    for rec in _records(ds, ids):
        try:
            tl = merged_infer(rec, models["speech"], models["image"], sw, ds.label_names)
        except ModelError as exc:
            raise ConsistencyError(str(exc)) from None
        write_labels_csv(out / f"{rec.operation_id}.csv", tl.labels)
        index["operations"][rec.operation_id] = {"switch_s": rec.meta["switch_s"], "seconds": len(tl)}
        print(f"{rec.operation_id}: switch at {rec.meta['switch_s']}")
    _dump_json(out / "index.json", index)
    return 0


def _run_dirs(cfg) -> list[Path]:
    base = Path(cfg["out"])
    n = int(cfg.get("runs") or 1)
    if n < 1:
        raise UsageError("--runs must be >= 1")
    if n == 1:
        return [base]
    return [base / f"run{i}" for i in range(1, n + 1)]


def _predictions(ds: Dataset, run: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    pdir = _pred_dir(run)
    index_path = pdir / "index.json"
    if not index_path.exists():
        raise UsageError(f"no predictions in {pdir} (run 'phaseflow infer' first)")
    ids = sorted(json.loads(index_path.read_text())["operations"])
    out = {}
    for op_id in ids:
        try:
            pred = read_labels_csv(pdir / f"{op_id}.csv")
            gt = ds.timeline(op_id).labels
        except (FileNotFoundError, DataError) as exc:
            raise UsageError(str(exc)) from None
        if pred.shape != gt.shape:
            raise ConsistencyError(f"{op_id}: prediction has {pred.size} s, ground truth {gt.size} s")
        out[op_id] = (pred, gt)
    return out


def cmd_eval(cfg) -> int:
    ds = _dataset(cfg)
    ecfg = cfg["eval"]
    exclude = TRANSITION if ecfg.get("exclude_transition") else None
    include_unsupported = bool(ecfg.get("include_unsupported", False))
    per_run = {"accuracy": [], "f1": []}
    for run in _run_dirs(cfg):
        rows = []
        for op_id, (pred, gt) in _predictions(ds, run).items():
            try:
                acc = evaluate.frame_accuracy(pred, gt, exclude)
                f1 = evaluate.macro_f1(pred, gt, exclude_class=exclude, include_unsupported=include_unsupported)
            except evaluate.MetricError as exc:
                raise ConsistencyError(f"{op_id}: {exc}") from None
            rows.append((op_id, acc, f1))
        evaluate.write_metrics_csv(run / "metrics.csv", rows, seed=cfg["seed"])
        per_run["accuracy"].append(float(np.mean([r[1] for r in rows])))
        per_run["f1"].append(float(np.mean([r[2] for r in rows])))
        print(f"{run}: accuracy {per_run['accuracy'][-1]:.2f}  F1 {per_run['f1'][-1]:.2f}  ({len(rows)} ops)")
    summary = evaluate.summary_dict(per_run)
    summary["exclude_transition"] = exclude is not None
    path = Path(cfg["out"]) / "summary.json"
    evaluate.write_summary_json(path, summary, seed=cfg["seed"])
    acc, f1 = summary["accuracy"], summary["f1"]
    print(f"accuracy {acc['mean']:.2f} ± {acc['std']:.2f}  F1 {f1['mean']:.2f} ± {f1['std']:.2f} -> {path}")
    return 0


def cmd_plot(cfg) -> int:
    ds = _dataset(cfg)
    run = _run_dirs(cfg)[0]
    pairs = [(p, g, op_id) for op_id, (p, g) in _predictions(ds, run).items()]
    path = run / "ribbons.svg"
    path.write_text(evaluate.ribbon_svg(pairs, ds.label_names))
    print(f"wrote {path}")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "align": cmd_align,
    "split": cmd_split,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="phaseflow", description="Surgical phase recognition pipeline.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--seed", type=int, help="root seed (overrides config)")
    ap.add_argument("--data", help="dataset directory or manifest JSON")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--model", choices=("speech", "image"), help="which model to train")
    ap.add_argument("--switch-k", type=int, dest="switch_k", help="consecutive trigger seconds before switching")
    ap.add_argument("--exclude-transition", action="store_true", help="drop transition frames from metrics")
    ap.add_argument("--runs", type=int, help="evaluate OUT/run1..runN")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = int(os.environ.get("PHASEFLOW_THREADS", "1"))
    try:
        cfg = resolve(args)
        with threadpool_limits(limits=max(1, threads)):
            return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConsistencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, FeatureError, AlignmentError, SignalError, ModelError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
