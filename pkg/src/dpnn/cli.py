"""Command-line driver: synth, tf-project, pretrain, finetune, crossval, eval, project.

Configuration is a flat JSON object with dotted keys (``train.max_epochs``,
``phantom.seed``, ...). A ``--config`` file is read first, then dedicated
flags and ``--set key=value`` pairs override it. The merged configuration is
validated before any work starts and echoed to ``<run dir>/config.json``;
``dpnn <command> --config <run dir>/config.json`` replays the run.

Exit codes: 0 success, 2 configuration/contract error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .errors import ConfigError, ContractError, DpnnError, ShapeError, VolumeIOError
from .losses import MSE_ONLY, MSE_SSIM, SsimConfig
from .model import build_compression, build_dpnn, load_checkpoint, load_state, save_checkpoint, state_dict, xavier_init
from .optim import AdamConfig
from .tf_oracle import tucker_project
from .train import (
    VARIANTS,
    MetricsReport,
    TrainConfig,
    confusion,
    crossval,
    finetune,
    predict,
    pretrain,
    project,
    variant_config,
)

log = logging.getLogger("dpnn")

RUN_ROOT_ENV = "DPNN_RUN_ROOT"
COMMANDS = ("synth", "tf-project", "pretrain", "finetune", "crossval", "eval", "project")
LOSS_CODES = {MSE_SSIM: 0.0, MSE_ONLY: 1.0}

DEFAULTS: dict[str, object] = {
    "run.dir": None,
    "variant": "full",
    "data.manifest": None,
    "data.targets": None,
    "data.unlabeled": False,
    "model.checkpoint": None,
    "model.schedule": None,
    "model.channels": [1, 16, 32, 64, 64, 64],
    "phantom.dims": [64, 64, 48],
    "phantom.n_per_class": 50,
    "phantom.noise_sigma": 0.05,
    "phantom.jitter": 0.1,
    "phantom.shift": 1.5,
    "phantom.amplitude": 2.0,
    "phantom.multipliers": {"MSA": [0.3, 0.3], "PSP": [0.6, 1.6], "PD": [1.8, 1.6]},
    "phantom.seed": 0,
    "ssim.window": 6,
    "ssim.c1": 1e-4,
    "ssim.c2": 9e-4,
    "adam.beta1": 0.9,
    "adam.beta2": 0.999,
    "adam.eps": 1e-8,
    "adam.weight_decay": 1e-5,
    "train.batch_size": 10,
    "train.patience": 10,
    "train.min_delta": 1e-4,
    "train.max_epochs": 200,
    "train.val_fraction": 0.2,
    "train.seed": 0,
    "train.pretrain_decay": False,
    "crossval.k": 5,
}


class UsageError(ConfigError):
    pass


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def merge_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded.pop("command", None)
        cfg.update(loaded)
    flag_keys = {
        "run_dir": "run.dir",
        "variant": "variant",
        "manifest": "data.manifest",
        "targets": "data.targets",
        "checkpoint": "model.checkpoint",
        "seed": "train.seed",
        "k": "crossval.k",
        "n_per_class": "phantom.n_per_class",
        "phantom_seed": "phantom.seed",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "unlabeled", False):
        cfg["data.unlabeled"] = True
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg[key.strip()] = _parse_value(raw)
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if cfg["run.dir"] is None:
        cfg["run.dir"] = str(Path(os.environ.get(RUN_ROOT_ENV, "runs")) / args.command)
    return cfg


def _field(cfg: dict, key: str, kind, check=None, msg: str = ""):
    value = cfg[key]
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            out = value
        elif kind is int:
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            out = int(value)
        else:
            out = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None
    if check is not None and not check(out):
        raise ConfigError(f"{key}: {msg or 'invalid value'} (got {value!r})")
    return out


def phantom_config(cfg: dict) -> D.PhantomConfig:
    dims = cfg["phantom.dims"]
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d >= 1 for d in dims)):
        raise ConfigError(f"phantom.dims: expected three positive ints [H, W, D], got {dims!r}")
    mult = cfg["phantom.multipliers"]
    if not isinstance(mult, dict):
        raise ConfigError("phantom.multipliers: expected an object keyed by class")
    try:
        pc = D.PhantomConfig(
            dims=tuple(dims),
            multipliers={k: tuple(float(x) for x in v) for k, v in mult.items()},
            amplitude=_field(cfg, "phantom.amplitude", float, lambda v: v > 0, "must be > 0"),
            jitter=_field(cfg, "phantom.jitter", float),
            shift=_field(cfg, "phantom.shift", float),
            noise_sigma=_field(cfg, "phantom.noise_sigma", float),
            seed=_field(cfg, "phantom.seed", int, lambda v: v >= 0, "must be >= 0"),
        )
        pc.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"phantom: {exc}") from None
    _field(cfg, "phantom.n_per_class", int, lambda v: v >= 1, "must be >= 1")
    return pc


def train_config(cfg: dict, stage: str) -> TrainConfig:
    ssim = SsimConfig(
        window=_field(cfg, "ssim.window", int),
        c1=_field(cfg, "ssim.c1", float),
        c2=_field(cfg, "ssim.c2", float),
    )
    adam = AdamConfig(
        beta1=_field(cfg, "adam.beta1", float),
        beta2=_field(cfg, "adam.beta2", float),
        eps=_field(cfg, "adam.eps", float),
        weight_decay=_field(cfg, "adam.weight_decay", float),
    )
    variant = cfg["variant"]
    if variant not in VARIANTS:
        raise ConfigError(f"variant: must be one of {sorted(VARIANTS)}, got {variant!r}")
    base = TrainConfig(
        stage=stage,
        batch_size=_field(cfg, "train.batch_size", int),
        patience=_field(cfg, "train.patience", int),
        min_delta=_field(cfg, "train.min_delta", float),
        max_epochs=_field(cfg, "train.max_epochs", int),
        val_fraction=_field(cfg, "train.val_fraction", float),
        seed=_field(cfg, "train.seed", int, lambda v: v >= 0, "must be >= 0"),
        pretrain_decay=_field(cfg, "train.pretrain_decay", bool),
        ssim=ssim,
        adam=adam,
    )
    return variant_config(base, variant)


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"{key} is required for this command")
    return str(cfg[key])


def _model_shape(cfg: dict, vols: list[D.Volume]):
    if not vols:
        raise ContractError("manifest lists no volumes")
    shapes = {v.voxels.shape for v in vols}
    if len(shapes) != 1:
        raise ContractError(f"volumes differ in shape: {sorted(shapes)}")
    return shapes.pop()  # (D, H, W)


def _schedule(cfg: dict, depth: int):
    sched = cfg["model.schedule"]
    return None if sched is None else list(sched)


def _make_dpnn(cfg: dict, shape):
    d, h, w = shape
    return build_dpnn(d, h, w, _schedule(cfg, d), tuple(cfg["model.channels"]))


def _load_pretrained(cfg: dict, tcfg: TrainConfig) -> dict | None:
    if not tcfg.pretrained:
        log.info("variant %s: compression part randomly initialized (Xavier), no pretraining", cfg["variant"])
        return None
    ckpt = _require(cfg, "model.checkpoint")
    state = load_checkpoint(ckpt)
    code = state.pop("meta.loss_variant", None)
    expected = LOSS_CODES[tcfg.loss_variant]
    if code is None or float(np.ravel(code)[0]) != expected:
        raise ContractError(
            f"variant {cfg['variant']} needs a compression checkpoint pretrained with {tcfg.loss_variant!r}; "
            f"{ckpt} was not"
        )
    log.info("variant %s: compression part initialized from %s", cfg["variant"], ckpt)
    return state


def _labeled(vols):
    labeled = [v for v in vols if v.label is not None]
    if not labeled:
        raise ContractError("manifest has no labeled volumes")
    return labeled


def _write_report(run: Path, report: MetricsReport, title: str) -> None:
    (run / "metrics.txt").write_text(report.table(title))
    (run / "metrics.kv").write_text(report.keyvalue())


# -- subcommands --------------------------------------------------------------


def cmd_synth(cfg: dict, run: Path) -> None:
    pc = phantom_config(cfg)
    vols = D.synth_phantoms(pc, int(cfg["phantom.n_per_class"]))
    out = run / "volumes"
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in vols:
        path = out / f"{v.id}.dpnv"
        D.save_volume(v, path)
        label = None if cfg["data.unlabeled"] else v.label
        entries.append(D.ManifestEntry(v.id, f"volumes/{path.name}", label))
    D.write_manifest(D.DatasetManifest(entries, pc.seed), run / "manifest.tsv")
    log.info("wrote %d volumes to %s", len(vols), out)


def cmd_tf_project(cfg: dict, run: Path) -> None:
    manifest = D.read_manifest(_require(cfg, "data.manifest"))
    out = run / "targets"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for e in manifest.entries:
        v = D.load_volume(e.path, id=e.id, label=e.label)
        try:
            v = D.global_mean_normalize(v)
        except ContractError:
            log.warning("volume %s is all zero; projection flagged degenerate", e.id)
        target = tucker_project(v)
        if target.degenerate:
            log.warning("degenerate projection for %s", e.id)
        D.save_map(target.map, out / f"{e.id}.map")
        rows.append(f"{e.id}\ttargets/{e.id}.map\t{int(target.degenerate)}")
    (run / "targets.tsv").write_text("\n".join(rows) + "\n")
    log.info("wrote %d target maps to %s", len(rows), out)


def _read_targets(path: str) -> dict[str, np.ndarray]:
    base = Path(path).parent
    maps = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        cols = line.split("\t")
        p = Path(cols[1])
        maps[cols[0]] = D.load_map(p if p.is_absolute() else base / p)
    return maps


def cmd_pretrain(cfg: dict, run: Path) -> None:
    tcfg = replace(train_config(cfg, "pretrain"), stage="pretrain")
    manifest = D.read_manifest(_require(cfg, "data.manifest"))
    targets = _read_targets(_require(cfg, "data.targets"))
    vols = D.load_manifest_volumes(manifest)
    missing = [v.id for v in vols if v.id not in targets]
    if missing:
        raise ContractError(f"no target map for {missing[:3]}")
    d, h, w = _model_shape(cfg, vols)
    net = build_compression(d, _schedule(cfg, d))
    xavier_init(net, tcfg.seed)
    result = pretrain(net, D.stack_volumes(vols), np.stack([targets[v.id] for v in vols]), tcfg)
    state = state_dict(net, "compression.")
    state["meta.loss_variant"] = np.array([LOSS_CODES[tcfg.loss_variant]])
    save_checkpoint(state, run / "compression.ckpt")
    (run / "loss.csv").write_text(result.history_csv())
    log.info("pretraining (%s) stopped at epoch %d, best epoch %d", tcfg.loss_variant, len(result.history), result.best_epoch)


def cmd_finetune(cfg: dict, run: Path) -> None:
    tcfg = train_config(cfg, "finetune")
    vols = _labeled(D.load_manifest_volumes(D.read_manifest(_require(cfg, "data.manifest"))))
    shape = _model_shape(cfg, vols)
    model = _make_dpnn(cfg, shape)
    pretrained = _load_pretrained(cfg, tcfg)
    result = finetune(model, D.stack_volumes(vols), [v.label for v in vols], tcfg, pretrained)
    save_checkpoint(state_dict(model), run / "dpnn.ckpt")
    (run / "loss.csv").write_text(result.history_csv())
    log.info("fine-tuning stopped at epoch %d, best epoch %d", len(result.history), result.best_epoch)


def cmd_crossval(cfg: dict, run: Path) -> None:
    tcfg = train_config(cfg, "finetune")
    k = _field(cfg, "crossval.k", int)
    vols = _labeled(D.load_manifest_volumes(D.read_manifest(_require(cfg, "data.manifest"))))
    shape = _model_shape(cfg, vols)
    pretrained = _load_pretrained(cfg, tcfg)
    result = crossval(
        lambda: _make_dpnn(cfg, shape),
        D.stack_volumes(vols),
        [v.label for v in vols],
        tcfg,
        k=k,
        compression_state=pretrained,
    )
    for f, hist in enumerate(result.histories):
        (run / f"fold{f}_loss.csv").write_text(hist.history_csv())
    _write_report(run, result.report, f"DPNN[{cfg['variant']}]")
    log.info("cross-validation mean accuracy %.4f", result.report.mean_accuracy)


def _load_full_model(cfg: dict, vols):
    model = _make_dpnn(cfg, _model_shape(cfg, vols))
    state = load_checkpoint(_require(cfg, "model.checkpoint"))
    load_state(model, state)
    return model


def cmd_eval(cfg: dict, run: Path) -> None:
    vols = _labeled(D.load_manifest_volumes(D.read_manifest(_require(cfg, "data.manifest"))))
    model = _load_full_model(cfg, vols)
    preds = predict(model, D.stack_volumes(vols), _field(cfg, "train.batch_size", int))
    report = MetricsReport.from_confusions([confusion(preds, [v.label for v in vols])])
    _write_report(run, report, f"DPNN[{cfg['variant']}]")
    log.info("accuracy %.4f on %d volumes", report.mean_accuracy, len(vols))


def cmd_project(cfg: dict, run: Path) -> None:
    vols = D.load_manifest_volumes(D.read_manifest(_require(cfg, "data.manifest")))
    model = _load_full_model(cfg, vols)
    maps = project(model, D.stack_volumes(vols), _field(cfg, "train.batch_size", int))
    out = run / "maps"
    out.mkdir(parents=True, exist_ok=True)
    for v, m in zip(vols, maps):
        D.save_map_pgm(m, out / f"{v.id}.pgm")
    log.info("wrote %d projection maps to %s", len(vols), out)


HANDLERS = {
    "synth": cmd_synth,
    "tf-project": cmd_tf_project,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "crossval": cmd_crossval,
    "eval": cmd_eval,
    "project": cmd_project,
}


def validate(cfg: dict, command: str) -> None:
    """Check every field the command uses before doing any work."""
    if command == "synth":
        phantom_config(cfg)
    if command in ("pretrain", "finetune", "crossval"):
        train_config(cfg, "pretrain" if command == "pretrain" else "finetune")
    if command == "crossval":
        _field(cfg, "crossval.k", int, lambda v: v >= 2, "must be >= 2")
    if command in ("eval", "project"):
        _field(cfg, "train.batch_size", int, lambda v: v >= 1, "must be >= 1")
    if cfg["model.schedule"] is not None and not isinstance(cfg["model.schedule"], list):
        raise ConfigError("model.schedule: expected a list of channel counts")
    ch = cfg["model.channels"]
    if not (isinstance(ch, list) and all(isinstance(c, int) for c in ch)):
        raise ConfigError("model.channels: expected a list of ints")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with flat dotted keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--run-dir")
        p.add_argument("--variant", choices=sorted(VARIANTS))
        p.add_argument("--seed", type=int, help="training seed (train.seed)")
        if name == "synth":
            p.add_argument("--n-per-class", type=int)
            p.add_argument("--phantom-seed", type=int)
            p.add_argument("--unlabeled", action="store_true", help="omit labels from the manifest")
        else:
            p.add_argument("--manifest")
        if name == "pretrain":
            p.add_argument("--targets")
        if name in ("finetune", "crossval", "eval", "project"):
            p.add_argument("--checkpoint")
        if name == "crossval":
            p.add_argument("--k", type=int)
    return parser


def _setup_logging(verbose: bool) -> None:
    pkg = logging.getLogger("dpnn")
    pkg.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(getattr(h, "_dpnn_cli", False) for h in pkg.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        handler._dpnn_cli = True
        pkg.addHandler(handler)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = merge_config(args)
        validate(cfg, args.command)
        run = Path(cfg["run.dir"])
        run.mkdir(parents=True, exist_ok=True)
        echo = {"command": args.command, **dict(sorted(cfg.items()))}
        (run / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
        HANDLERS[args.command](cfg, run)
    except (ContractError, ShapeError) as exc:
        log.error("%s", exc)
        return 2
    except (VolumeIOError, OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 3
    except DpnnError as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
