"""Command-line entry point: ``kanboost {synth,prepare,train,eval,compare}``.

Settings come from a shipped profile (``--profile``) optionally overlaid by
an INI file (``--config``) and a master ``--seed``.  Every command writes the
resolved configuration next to its outputs.

Exit codes: 0 success, 2 configuration error, 3 ingestion error,
4 numeric failure (diverged training, failed comparison run).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from kanboost.boost import GbtParams
from kanboost.data import (
    DataError,
    Dataset,
    SamplingPlan,
    build_subset,
    discover_sources,
    load_device_csv,
    stratified_split,
    synth_generate,
    write_device_csv,
)
from kanboost.kan import TrainConfig, TrainingDiverged, write_loss_trace
from kanboost.pipeline import MODEL_KINDS, ModelSettings, compare_models, evaluate, load_model, train_model

log = logging.getLogger("kanboost")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
PROFILES = ("paper", "synth-small")
SEED_KEYS = (("synth", "seed"), ("sampling", "seed"), ("split", "seed"), ("train", "seed"))


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


def load_config(profile: str, config_path=None, seed: int | None = None) -> configparser.ConfigParser:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
    cfg = configparser.ConfigParser(interpolation=None)
    text = resources.files("kanboost").joinpath("profiles", f"{profile}.profile").read_text()
    cfg.read_string(text, source=f"{profile}.profile")
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cfg.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if seed is not None:
        for section, key in SEED_KEYS:
            if cfg.has_section(section):
                cfg[section][key] = str(seed)
    return cfg


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace("\n", ",").split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace("\n", ",").split(",") if v.strip()]


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.replace("\n", ",").split(",") if v.strip())


def model_settings(cfg) -> ModelSettings:
    try:
        m, t, g = cfg["model"], cfg["train"], cfg["gbt"]
        depth = g.get("max_depth", "6").strip().lower()
        lo, hi = _floats(m.get("domain", "-1, 1"))
        gbt_input = m.get("gbt_input", "hidden")
        if gbt_input not in ("hidden", "logits"):
            raise ConfigError(f"[model] gbt_input must be hidden or logits, not {gbt_input!r}")
        return ModelSettings(
            widths=tuple(_ints(m["widths"])),
            degree=m.getint("degree"),
            intervals=m.getint("intervals"),
            domain=(lo, hi),
            input_scale=m.getfloat("input_scale"),
            train=TrainConfig(
                epochs=t.getint("epochs"),
                batch_size=t.getint("batch_size"),
                learning_rate=t.getfloat("learning_rate"),
                betas=(t.getfloat("beta1"), t.getfloat("beta2")),
                eps=t.getfloat("eps"),
                step_size=t.getint("step_size"),
                gamma=t.getfloat("gamma"),
                seed=t.getint("seed"),
            ),
            gbt=GbtParams(
                n_estimators=g.getint("n_estimators"),
                learning_rate=g.getfloat("learning_rate"),
                max_depth=None if depth in ("none", "") else int(depth),
                reg_lambda=g.getfloat("reg_lambda"),
                gamma=g.getfloat("gamma"),
                min_child_weight=g.getfloat("min_child_weight"),
                base_score=g.getfloat("base_score"),
            ),
            gbt_input=gbt_input,
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad model/train/gbt settings: {exc}") from None


def sampling_plan(cfg) -> SamplingPlan:
    s = cfg["sampling"]
    try:
        return SamplingPlan(
            benign_total=s.getint("benign_total"),
            per_attack_per_device=s.getint("per_attack_per_device"),
            devices=_names(s["devices"]),
            attacks=_names(s["attacks"]),
            seed=s.getint("seed"),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad [sampling] settings: {exc}") from None


def synth_dataset(cfg) -> Dataset:
    s = cfg["synth"]
    try:
        return synth_generate(
            counts=_ints(s["counts"]),
            width=s.getint("width"),
            seed=s.getint("seed"),
            separation=s.getfloat("separation"),
            noise_fraction=s.getfloat("noise_fraction"),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad [synth] settings: {exc}") from None


def write_snapshot(cfg, out: Path) -> Path:
    path = out / "config.ini"
    with open(path, "w") as fh:
        cfg.write(fh)
    return path


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# Prepared dataset layout: <dir>/{train,test}/{features.npy,labels.npy,provenance.csv}
# --------------------------------------------------------------------------


def save_partition(ds: Dataset, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "features.npy", ds.features)
    np.save(out / "labels.npy", ds.labels)
    with open(out / "provenance.csv", "w") as fh:
        fh.write("row_id,device,kind\n")
        for rid, dev, kind in zip(ds.row_ids, ds.devices, ds.kinds):
            fh.write(f"{rid},{dev},{kind}\n")
    (out / "classes.txt").write_text("\n".join(ds.class_names) + "\n")
    return [out / n for n in ("features.npy", "labels.npy", "provenance.csv", "classes.txt")]


def load_partition(path) -> Dataset:
    path = Path(path)
    if not (path / "features.npy").is_file():
        raise DataError(f"{path}: not a prepared partition (run `kanboost prepare` first)")
    names = tuple((path / "classes.txt").read_text().split())
    rows = [line.split(",") for line in (path / "provenance.csv").read_text().splitlines()[1:]]
    return Dataset(
        np.load(path / "features.npy"),
        np.load(path / "labels.npy"),
        np.array([r[1] for r in rows], dtype=object),
        np.array([r[2] for r in rows], dtype=object),
        names,
        np.array([int(r[0]) for r in rows], dtype=np.int64),
    )


def _counts_by(values, names=None) -> dict:
    uniq, counts = np.unique(np.asarray(values), return_counts=True)
    out = {str(u): int(c) for u, c in zip(uniq, counts)}
    if names is not None:
        out = {names[int(u)]: out.get(str(u), 0) for u in range(len(names))}
    return out


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    """Write a synthetic dataset as per-(device, kind) CSV files."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = synth_dataset(cfg)
    files = {}
    for device in sorted(set(ds.devices)):
        for kind in sorted(set(ds.kinds)):
            sel = np.nonzero((ds.devices == device) & (ds.kinds == kind))[0]
            if sel.size:
                path = out / f"{device}.{kind}.csv"
                write_device_csv(ds.take(sel), path)
                files[path.name] = sha256(path)
    write_snapshot(cfg, out)
    manifest = {"rows": len(ds), "class_counts": _counts_by(ds.labels, ds.class_names), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(files)} files ({len(ds)} rows) to {out}")
    return 0


def cmd_prepare(args, cfg) -> int:
    out = Path(args.out)
    source = cfg.get("data", "source", fallback="synth")
    sources = {}
    if source == "synth":
        ds = synth_dataset(cfg)
        plan_seed = cfg.getint("synth", "seed")
    elif source == "nbaiot":
        root = cfg.get("data", "source_dir", fallback="").strip()
        if not root or not Path(root).is_dir():
            raise ConfigError(f"[data] source_dir {root!r} is not a directory")
        plan = sampling_plan(cfg)
        wanted = set(plan.devices)
        triples = [t for t in discover_sources(root) if t[1] in wanted]
        if not triples:
            raise DataError(f"no N-BaIoT CSV files for the configured devices under {root}")
        fragments = []
        for path, device, kind in triples:
            log.info("loading %s", path)
            fragments.append(load_device_csv(path, device, kind))
            sources[str(Path(path).relative_to(root))] = sha256(path)
        ds = build_subset(fragments, plan)
        plan_seed = plan.seed
    else:
        raise ConfigError(f"[data] source must be synth or nbaiot, not {source!r}")

    split = cfg["split"]
    train, test = stratified_split(ds, split.getfloat("test_fraction"), split.getint("seed"))
    out.mkdir(parents=True, exist_ok=True)
    written = save_partition(train, out / "train") + save_partition(test, out / "test")
    write_snapshot(cfg, out)
    manifest = {
        "source": source,
        "rows": len(ds),
        "class_counts": _counts_by(ds.labels, ds.class_names),
        "device_counts": _counts_by(ds.devices),
        "benign_rows": int(np.sum(ds.labels == 0)),
        "malicious_rows": int(np.sum(ds.labels != 0)),
        "train_rows": len(train),
        "test_rows": len(test),
        "sampling_seed": plan_seed,
        "split_seed": split.getint("seed"),
        "sources": sources,
        "outputs": {str(p.relative_to(out)): sha256(p) for p in written},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"prepared {len(ds)} rows ({manifest['benign_rows']} benign / {manifest['malicious_rows']} malicious) in {out}")
    return 0


def _data_dir(args, cfg) -> Path:
    path = Path(args.data) if args.data else None
    if path is None or not path.is_dir():
        raise ConfigError(f"--data {args.data!r} is not a prepared dataset directory")
    return path


def cmd_train(args, cfg) -> int:
    data = _data_dir(args, cfg)
    kind = args.model or cfg.get("model", "kind")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model {kind!r}")
    cfg["model"]["kind"] = kind
    settings = model_settings(cfg)
    train = load_partition(data / "train")
    out = Path(args.out)
    try:
        model = train_model(kind, train, settings)
    except TrainingDiverged as exc:
        print(f"error: training diverged in epoch {exc.epoch} (loss {exc.loss!r})", file=sys.stderr)
        return EXIT_NUMERIC
    paths = model.save(out)
    paths.append(write_snapshot(cfg, out))
    print(f"trained {kind}; wrote {', '.join(p.name for p in paths)} to {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    data = _data_dir(args, cfg)
    model_dir = Path(args.model_dir or args.out)
    if not model_dir.is_dir():
        raise ConfigError(f"model directory {model_dir} does not exist")
    model = load_model(model_dir)
    ds = load_partition(data / args.split)
    try:
        pred = model.predict(ds.features)
    except ValueError as exc:
        raise ConfigError(f"model does not fit the dataset: {exc}") from None
    report = evaluate(pred, ds.labels, ds.n_classes, ds.class_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / f"report_{args.split}.json")
    report.write_confusion_csv(out / f"confusion_{args.split}.csv")
    average = cfg.get("report", "average", fallback="weighted")
    print(f"{model.kind} [{args.split}] {report.summary(average)}")
    return 0


def cmd_compare(args, cfg) -> int:
    data = _data_dir(args, cfg)
    settings = model_settings(cfg)
    train = load_partition(data / "train")
    test = load_partition(data / "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out)

    def flush(kind, result):
        result.write_csv(out / "comparison.csv")
        report = result.reports.get(kind)
        if kind in result.models:
            result.models[kind].save(out / "models" / kind)
        if report is not None:
            report.write_json(out / f"report_{kind}.json")
            report.write_confusion_csv(out / f"confusion_{kind}.csv")
        for name, losses in result.losses.items():
            header = ("round", "loss") if name == "hybrid_gbt" else ("epoch", "loss")
            write_loss_trace(out / f"loss_{name}.csv", losses, header)

    result = compare_models(train, test, settings, on_result=flush)
    average = cfg.get("report", "average", fallback="weighted")
    for kind in MODEL_KINDS:
        report = result.reports.get(kind)
        line = report.summary(average) if report is not None else f"FAILED: {result.errors.get(kind)}"
        print(f"{kind:>7}  {line}")
    return EXIT_NUMERIC if result.errors else 0


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kanboost", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--profile", default="synth-small", choices=PROFILES)
        p.add_argument("--config", help="INI file overriding profile settings")
        p.add_argument("--seed", type=int, help="override every seed in the configuration")
        p.add_argument("--out", required=True, help="output directory")
        if name in ("train", "eval", "compare"):
            p.add_argument("--data", required=True, help="directory written by `prepare`")
        if name == "train":
            p.add_argument("--model", choices=MODEL_KINDS)
        if name == "eval":
            p.add_argument("--model-dir", help="trained model directory (default: --out)")
            p.add_argument("--split", choices=("test", "train"), default="test")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.profile, args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
