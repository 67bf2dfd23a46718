"""Command-line entry point for the laboratory.

Subcommands: gen-data, train, eval, sweep, decode-latent, kv-sim, report.
Configuration lives in a JSON file with "model", "data" and "train" sections
plus top-level "label" and "seed"; --set key=value overrides are applied
after the file (dotted paths or unique bare keys). Unknown keys are
rejected. Exit status: 0 success, 2 malformed config (field path reported),
1 runtime failure; failures print a machine-readable JSON error line.

The output root can be overridden with the KVLATENT_OUT_ROOT environment
variable.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

from .data import DataConfig, generate_split, write_dataset
from .introspect import (
    decode_latent_trace,
    export_reports,
    kv_similarity,
    write_similarity_csvs,
)
from .model import ModelConfig, load_checkpoint
from .trainer import EVAL_MODES, TrainConfig, evaluate_model, train

OUT_ROOT_ENV = "KVLATENT_OUT_ROOT"

ALIASES = {
    "lambda": "eviction_lambda",
    "M": "m_latent",
    "T": "jacobi_iters",
}


class ConfigError(ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _build_section(cls, payload: dict, section: str):
    valid = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        name = ALIASES.get(key, key)
        if name not in valid:
            raise ConfigError(f"unknown key {key!r} in section {section!r}", field=f"{section}.{key}")
        kwargs[name] = tuple(value) if isinstance(value, list) and name == "final_eval_modes" else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {section} config: {err}", field=section) from err


def load_config(path: str | None, overrides: list[str], seed: int | None = None):
    payload = {"model": {}, "data": {}, "train": {}}
    if path:
        try:
            with open(path) as f:
                payload.update(json.load(f))
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}", field="config") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}", field="config") from err
    for section in ("model", "data", "train"):
        payload.setdefault(section, {})
        if not isinstance(payload[section], dict):
            raise ConfigError(f"section {section!r} must be an object", field=section)

    known_top = {"model", "data", "train", "label", "seed"}
    for key in payload:
        if key not in known_top:
            raise ConfigError(f"unknown top-level key {key!r}", field=key)

    section_fields = {
        "train": {f.name for f in fields(TrainConfig)},
        "data": {f.name for f in fields(DataConfig)},
        "model": {f.name for f in fields(ModelConfig)},
    }

    def apply_override(key: str, raw_value: str):
        value = _coerce(raw_value)
        if "." in key:
            section, name = key.split(".", 1)
            if section not in section_fields:
                raise ConfigError(f"unknown section {section!r} in override {key!r}", field=key)
            payload[section][name] = value
            return
        if key in ("label", "seed"):
            payload[key] = value
            return
        name = ALIASES.get(key, key)
        homes = [s for s, names in section_fields.items() if name in names]
        if not homes:
            raise ConfigError(f"unknown override key {key!r}", field=key)
        if len(homes) > 1:
            raise ConfigError(
                f"ambiguous override key {key!r} (sections {homes}); use section.key", field=key
            )
        payload[homes[0]][key] = value

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", field=item)
        key, value = item.split("=", 1)
        apply_override(key.strip(), value.strip())

    if seed is not None:
        payload["seed"] = seed

    label = payload.get("label", "run")
    top_seed = int(payload.get("seed", payload["train"].get("seed", 0)))
    payload["train"].setdefault("seed", top_seed)
    payload["train"]["label"] = payload["train"].get("label", label)

    train_cfg = _build_section(TrainConfig, payload["train"], "train")
    data_cfg = _build_section(DataConfig, payload["data"], "data")
    model_cfg = _build_section(ModelConfig, payload["model"], "model")
    try:
        train_cfg.validate()
        data_cfg.validate()
        model_cfg.validate()
    except ValueError as err:
        raise ConfigError(str(err), field="config") from err
    return train_cfg, data_cfg, model_cfg


def _out_root(explicit: str | None) -> str:
    return explicit or os.environ.get(OUT_ROOT_ENV, "runs")


def cmd_gen_data(args) -> int:
    _, data_cfg, _ = load_config(args.config, args.set, args.seed)
    examples = generate_split(data_cfg, args.split)
    write_dataset(args.out, examples)
    print(f"gen-data: wrote {len(examples)} {data_cfg.style} examples ({args.split}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    train_cfg, data_cfg, model_cfg = load_config(args.config, args.set, args.seed)
    out_dir = args.out or os.path.join(_out_root(None), f"{train_cfg.label}_s{train_cfg.seed}")
    result = train(train_cfg, data_cfg, model_cfg, out_dir)
    print(
        f"train: {train_cfg.label} seed={train_cfg.seed} steps={result.steps} "
        f"best_val={result.best_val_acc:.4f} -> {out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    if args.run:
        ckpt = os.path.join(args.run, "checkpoint_best.kvl")
        if not os.path.exists(ckpt):
            ckpt = os.path.join(args.run, "checkpoint_final.kvl")
    else:
        ckpt = args.checkpoint
    if not ckpt or not os.path.exists(ckpt):
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, extra = load_checkpoint(ckpt)
    data_cfg = DataConfig(**extra.get("data_config", {}))
    tc = extra.get("train_config", {})
    examples = generate_split(data_cfg, args.split)
    res = evaluate_model(
        model,
        examples,
        args.mode,
        m_latent=int(tc.get("m_latent", 24)),
        jacobi_iters=int(tc.get("jacobi_iters", 3)),
        answer_cap=int(tc.get("answer_cap", 8)),
        full_cot_cap=int(tc.get("full_cot_cap", 160)),
        max_len=data_cfg.max_len,
    )
    summary = {
        "mode": args.mode,
        "split": args.split,
        "n": res["n"],
        "accuracy": res["accuracy"],
        "mean_passes": res["mean_passes"],
    }
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as f:
            json.dump(summary, f, indent=2)
    print(
        f"eval: mode={args.mode} split={args.split} acc={res['accuracy']:.4f} "
        f"passes={res['mean_passes']:.2f} (n={res['n']})"
    )
    return 0


def _sweep_child(payload):
    train_cfg, data_cfg, model_cfg, out_dir = payload
    result = train(train_cfg, data_cfg, model_cfg, out_dir)
    return train_cfg.label, train_cfg.seed, result.final_eval


def cmd_sweep(args) -> int:
    grids = []
    for spec in args.grid:
        if "=" not in spec:
            raise ConfigError(f"grid spec {spec!r} is not key=v1,v2,...", field=spec)
        key, values = spec.split("=", 1)
        grids.append((key.strip(), [v.strip() for v in values.split(",") if v.strip()]))
    if not grids:
        raise ConfigError("sweep requires at least one --grid", field="grid")
    root = args.out or os.path.join(_out_root(None), "sweep")
    os.makedirs(root, exist_ok=True)
    jobs = []
    for combo in itertools.product(*(vals for _, vals in grids)):
        sets = list(args.set)
        tag_parts = []
        for (key, _), value in zip(grids, combo):
            sets.append(f"{key}={value}")
            tag_parts.append(f"{key}{value}")
        tag = "_".join(tag_parts).replace("/", "-")
        train_cfg, data_cfg, model_cfg = load_config(args.config, sets, args.seed)
        train_cfg.label = f"{train_cfg.label}_{tag}"
        out_dir = os.path.join(root, f"{train_cfg.label}_s{train_cfg.seed}")
        jobs.append((train_cfg, data_cfg, model_cfg, out_dir))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_child, jobs))
    else:
        results = [_sweep_child(j) for j in jobs]
    export_reports(root, os.path.join(root, "report"))
    for label, seed, final_eval in results:
        print(f"sweep: {label} seed={seed} -> {json.dumps(final_eval)}")
    print(f"sweep: {len(results)} runs complete, report at {os.path.join(root, 'report')}")
    return 0


def cmd_decode_latent(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    tc = extra.get("train_config", {})
    grid = decode_latent_trace(
        model,
        args.prompt,
        k=args.k,
        m_latent=int(tc.get("m_latent", 24)),
        jacobi_iters=int(tc.get("jacobi_iters", 3)),
        answer_cap=int(tc.get("answer_cap", 8)),
    )
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as f:
            f.write(grid.to_json())
    print(f"decode-latent: {len(grid.entries)} positions, answer={grid.answer_text!r}")
    return 0


def cmd_kv_sim(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    tc = extra.get("train_config", {})
    data_cfg = DataConfig(**extra.get("data_config", {}))
    examples = generate_split(data_cfg, args.split)
    example = examples[args.index]
    written = []
    for target in args.target.split(","):
        for kind in args.kind.split(","):
            res = kv_similarity(
                model,
                example,
                target=target.strip(),
                kind=kind.strip(),
                m_latent=int(tc.get("m_latent", 24)),
                jacobi_iters=int(tc.get("jacobi_iters", 3)),
                eviction_lambda=float(tc.get("eviction_lambda", 0.1)),
                max_len=data_cfg.max_len,
            )
            written += write_similarity_csvs(res, args.out)
    print(f"kv-sim: wrote {len(written)} grids to {args.out}")
    return 0


def cmd_report(args) -> int:
    manifest = export_reports(args.runs, args.out)
    print(
        f"report: {len(manifest['runs'])} runs, {len(manifest['absent'])} absent -> {args.out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvlatent", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="write a dataset split as JSONL")
    common(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training configuration")
    common(p)
    p.add_argument("--out", default=None, help="run directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--run", default=None, help="run directory (uses its best checkpoint)")
    p.add_argument("--mode", choices=EVAL_MODES, default="latent")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default=None, help="write summary JSON here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="grid of training runs plus a report")
    common(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="sweep root directory")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("decode-latent", help="top-k readout of the latent trace")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_decode_latent)

    p = sub.add_parser("kv-sim", help="similarity grids for one test example")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--target", default="full,evicted")
    p.add_argument("--kind", default="keys,values")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_kv_sim)

    p = sub.add_parser("report", help="assemble tables from run directories")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(json.dumps({"error": str(err), "kind": "config", "field": err.field}), file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure contract: exit 1 with JSON
        print(json.dumps({"error": str(err), "kind": type(err).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
