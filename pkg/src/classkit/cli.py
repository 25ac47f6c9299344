"""Command-line entry point: ``classkit <command> [options]``.

Exit codes: 0 success, 1 runtime failure (one-line cause on stderr),
2 usage error (unknown flag or config key, malformed value).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import data as dataio
from . import gradcheck
from .errors import ClassKitError, ConfigError
from .metrics import evaluate_dataset, write_metrics_csv, write_pr_csv
from .model import ModelConfig, build, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad
from .train import TrainConfig, predict, train_loop


class UsageError(Exception):
    pass


# -- run config ------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parser_for(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        inner = float if default and isinstance(default[0], float) else str
        return lambda text: tuple(inner(t.strip()) for t in text.split(",") if t.strip())
    return type(default)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


KEY_HELP = {
    "base_channels": "common feature width C",
    "input_size": "training image side in pixels (multiple of 16)",
    "levels": "encoder levels (fixed at 4)",
    "norm_epsilon": "batch-norm epsilon",
    "init_seed": "parameter initialisation seed",
    "use_cla_position": "enable position-wise cross-level attention",
    "use_cla_channel": "enable channel-wise cross-level attention",
    "fusion": "decoder fusion: ffm or sum",
    "ffm_residual": "add the refined features back after gating",
    "epochs": "training epochs",
    "batch_size": "samples per step",
    "lr_max_backbone": "peak learning rate of the encoder",
    "lr_max_rest": "peak learning rate of all other parameters",
    "momentum": "SGD momentum",
    "weight_decay": "L2 decay (not applied to gains, norm parameters, biases)",
    "warmup_fraction": "share of all steps spent ramping up the learning rate",
    "seed": "shuffling and augmentation seed",
    "region_window": "region-loss window at 64 px (scaled with the map side)",
    "region_stride": "region-loss stride at 64 px (scaled with the map side)",
    "scales": "comma-separated multi-scale factors, one drawn per batch",
    "flip": "random horizontal flips",
    "loss_terms": "comma-separated subset of pixel,region,object",
    "supervision_levels": "heads supervised, final first (1 = final only)",
}

CONFIG_KEYS: dict[str, tuple[str, object]] = {}
for _section, _cls in (("model", ModelConfig), ("train", TrainConfig)):
    _defaults = _cls()
    for _f in fields(_cls):
        CONFIG_KEYS[_f.name] = (_section, getattr(_defaults, _f.name))


def parse_value(key: str, text: str):
    if key not in CONFIG_KEYS:
        raise UsageError(f"unknown config key {key!r}")
    try:
        return _parser_for(CONFIG_KEYS[key][1])(text)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from None


def read_run_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, text = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, text)
    return values


def build_configs(args, base: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(read_run_config(args.config))
    for key in CONFIG_KEYS:
        override = getattr(args, key, None)
        if override is not None:
            values[key] = parse_value(key, override)
    model_kw = {k: v for k, v in values.items() if CONFIG_KEYS[k][0] == "model"}
    train_kw = {k: v for k, v in values.items() if CONFIG_KEYS[k][0] == "train"}
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def write_run_config(path, model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    lines = []
    for key in CONFIG_KEYS:
        obj = model_cfg if CONFIG_KEYS[key][0] == "model" else train_cfg
        lines.append(f"{key} = {_format(getattr(obj, key))}")
    Path(path).write_text("\n".join(lines) + "\n")


def _add_config_flags(p: argparse.ArgumentParser, defaults: dict | None = None) -> None:
    p.add_argument("--config", help="key = value run config file; flags override it")
    group = p.add_argument_group("config keys (flag overrides file)")
    for key, (section, default) in CONFIG_KEYS.items():
        shown = (defaults or {}).get(key, default)
        group.add_argument(f"--{key}", metavar="VALUE", default=None,
                           help=f"{KEY_HELP[key]} [{section}; default: {_format(shown)}]")


# -- helpers -----------------------------------------------------------------

def _sidecar(out: Path, message: str) -> None:
    with open(out / "run.log", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


def _load_split(manifest_path, model_cfg: ModelConfig):
    samples = dataio.load_dataset(manifest_path)
    side = samples[0].image.shape[-1]
    for s in samples:
        if s.image.shape[-2:] != (model_cfg.input_size, model_cfg.input_size):
            raise ConfigError(f"sample {s.id} is {s.image.shape[-2]}x{s.image.shape[-1]} but input_size is "
                              f"{model_cfg.input_size}")
    return samples, side


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    manifest = dataio.generate(args.seed, args.count, args.size, args.out, split=args.split)
    print(f"wrote {len(manifest.entries)} samples to {manifest.root}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = build_configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, _ = _load_split(args.data, model_cfg)
    val_set = _load_split(args.val, model_cfg)[0] if args.val else None
    write_run_config(out / "run_config.txt", model_cfg, train_cfg)
    _sidecar(out, "train start")

    def report(epoch, log):
        rep = log.validation[-1]
        extra = "" if rep is None else f" val f_max {rep.f_max:.4f} mae {rep.mae:.4f} s {rep.s_measure:.4f}"
        print(f"epoch {epoch + 1}/{train_cfg.epochs} loss {log.epoch_loss[-1]:.4f}{extra}", flush=True)

    model = build(model_cfg)
    model, log = train_loop(model, train_set, val_set, train_cfg, out_dir=out, resume=args.resume, on_epoch=report)
    save_checkpoint(out / "final.clsk", model, {"epochs": train_cfg.epochs})
    _sidecar(out, "train end")
    print(f"checkpoint: {out / 'final.clsk'}")
    return 0


def _predictions_from_dir(pred_dir: Path, samples):
    pairs = []
    for s in samples:
        path = pred_dir / f"{s.id}.pgm"
        if not path.is_file():
            raise ConfigError(f"{s.id}: no prediction at {path}")
        pred = dataio.read_image(path)[0]
        if pred.shape != s.mask.shape[1:]:
            raise ConfigError(f"{s.id}: prediction {pred.shape} does not match mask {s.mask.shape[1:]}")
        pairs.append((s.id, pred, s.mask[0]))
    return pairs


def cmd_eval(args) -> int:
    samples = dataio.load_dataset(args.data)
    if bool(args.predictions) == bool(args.checkpoint):
        raise UsageError("eval needs exactly one of --predictions or --checkpoint")
    if args.predictions:
        pairs = _predictions_from_dir(Path(args.predictions), samples)
    else:
        model, _, _ = load_checkpoint(args.checkpoint)
        images = np.stack([s.image for s in samples])
        preds = predict(model, images)
        pairs = [(s.id, preds[k, 0], s.mask[0]) for k, s in enumerate(samples)]
    report = evaluate_dataset(pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", report)
    write_pr_csv(out / "pr_curve.csv", report.curve)
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    for key, value in report.summary().items():
        print(f"{key:<11} {value:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed, args.instances, args.case or None)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_infer(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() == ".ppm")
    if not paths:
        raise ConfigError(f"no .ppm images in {args.images}")
    for path in paths:
        pred = predict(model, dataio.read_image(path)[None])
        dataio.write_image(out / f"{path.stem}.pgm", pred[0, 0])
    print(f"wrote {len(paths)} predictions to {out}")
    return 0


def cmd_attn_dump(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    image = dataio.read_image(args.image)
    if image.shape[0] != 3:
        raise ConfigError(f"{args.image} is not an RGB image")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    with no_grad():
        _, feats = model(Tensor(image[None]), diagnostics=True)
    written = 0
    for level, maps in feats["maps"].items():
        for kind, arr in (("position", maps.position_map), ("channel", maps.channel_map)):
            if arr is None:
                continue
            m = arr.data[0] if isinstance(arr, Tensor) else np.asarray(arr)[0]
            peak = m.max()
            dataio.write_image(out / f"level{level}_{kind}.pgm", m / peak if peak > 0 else m)
            written += 1
    print(f"wrote {written} attention maps to {out}")
    return 0


# -- ablation ----------------------------------------------------------------

ABLATIONS = [
    # id, name, loss terms, multi-level supervision, CLA-C, CLA-P, FFM
    (1, "pixel", ("pixel",), False, False, False, False),
    (2, "pixel+region", ("pixel", "region"), False, False, False, False),
    (3, "pixel+region+object", ("pixel", "region", "object"), False, False, False, False),
    (4, "+MS", ("pixel", "region", "object"), True, False, False, False),
    (5, "+MS+FFM", ("pixel", "region", "object"), True, False, False, True),
    (6, "+MS+CLA", ("pixel", "region", "object"), True, True, True, False),
    (7, "+MS+CLA-C+FFM", ("pixel", "region", "object"), True, True, False, True),
    (8, "+MS+CLA-P+FFM", ("pixel", "region", "object"), True, False, True, True),
    (9, "pixel+MS+CLA+FFM", ("pixel",), True, True, True, True),
    (10, "full", ("pixel", "region", "object"), True, True, True, True),
]
ABLATION_DEFAULTS = {"epochs": 8}
ABLATION_COLUMNS = ["id", "name", "pixel", "region", "object", "ms", "cla_c", "cla_p", "ffm",
                    "f_max", "s_measure", "mae", "final_epoch_loss"]
DIRECTIONS = [
    ("pixel+region >= pixel on s_measure", 2, 1, "s_measure", 1),
    ("pixel+region+object >= pixel+region on f_max", 3, 2, "f_max", 1),
    ("+MS >= single-level on f_max", 4, 3, "f_max", 1),
    ("full >= +MS on f_max", 10, 4, "f_max", 1),
    ("full <= +MS on mae", 10, 4, "mae", -1),
]


def run_ablation(train_set, val_set, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 only: list[int] | None = None) -> list[dict]:
    rows = []
    for ab_id, name, terms, ms, cla_c, cla_p, ffm in ABLATIONS:
        if only and ab_id not in only:
            continue
        mcfg = replace(model_cfg, use_cla_channel=cla_c, use_cla_position=cla_p, fusion="ffm" if ffm else "sum")
        tcfg = replace(train_cfg, loss_terms=terms, supervision_levels=4 if ms else 1)
        model, log = train_loop(build(mcfg), train_set, val_set, tcfg)
        rep = log.validation[-1]
        rows.append({"id": ab_id, "name": name, "pixel": "pixel" in terms, "region": "region" in terms,
                     "object": "object" in terms, "ms": ms, "cla_c": cla_c, "cla_p": cla_p, "ffm": ffm,
                     "f_max": rep.f_max, "s_measure": rep.s_measure, "mae": rep.mae,
                     "final_epoch_loss": log.epoch_loss[-1]})
    return rows


def ablation_directions(rows: list[dict]) -> list[dict]:
    by_id = {r["id"]: r for r in rows}
    out = []
    for label, a, b, metric, sign in DIRECTIONS:
        if a in by_id and b in by_id:
            holds = sign * (by_id[a][metric] - by_id[b][metric]) >= 0
            out.append({"claim": label, "holds": bool(holds)})
    return out


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = build_configs(args, base=dict(ABLATION_DEFAULTS))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        train_set, _ = _load_split(args.data, model_cfg)
    else:
        train_set = [dataio.render_sample(args.data_seed, i, model_cfg.input_size) for i in range(args.train_count)]
    if args.val:
        val_set, _ = _load_split(args.val, model_cfg)
    else:
        val_set = [dataio.render_sample(args.data_seed + 1000, i, model_cfg.input_size)
                   for i in range(args.val_count)]
    _sidecar(out, "ablate start")
    rows = run_ablation(train_set, val_set, model_cfg, train_cfg, args.only)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    doc = {"format": "classkit-ablation v1", "columns": ABLATION_COLUMNS, "rows": rows,
           "directions": ablation_directions(rows), "train_samples": len(train_set), "val_samples": len(val_set),
           "model_config": json.loads(model_cfg.to_json()), "train_config": train_cfg.to_dict()}
    (out / "ablation.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _sidecar(out, "ablate end")
    print(f"{'id':>3} {'name':<22} {'f_max':>7} {'s':>7} {'mae':>7}")
    for r in rows:
        print(f"{r['id']:>3} {r['name']:<22} {r['f_max']:7.4f} {r['s_measure']:7.4f} {r['mae']:7.4f}")
    return 0


# -- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="classkit", description="Cross-level attention saliency toolkit (desk scale).")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--val", help="validation manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/latest.clsk")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions or a checkpoint against a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", help="directory of <id>.pgm maps")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--case", action="append", choices=[c.name for c in gradcheck.SUITE])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("infer", help="predict maps for a directory of PPM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("attn-dump", help="write per-level attention maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("ablate", help="train the ten ablation configurations")
    p.add_argument("--data", help="training manifest (default: generate in memory)")
    p.add_argument("--val", help="validation manifest (default: generate in memory)")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--val-count", type=int, default=50)
    p.add_argument("--only", type=int, action="append", choices=range(1, 11), help="run only these ids")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ABLATION_DEFAULTS)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ClassKitError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
