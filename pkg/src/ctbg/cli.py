"""Command-line interface.

Subcommands: gen-data, train, eval, infer, grad-check, render.  Every
run is driven by a RunConfig assembled from defaults, then an optional
JSON config file, then command-line flags, in that order.  A resolved
copy of the configuration is written beside every output artifact so a
run can be reproduced from the echo alone.

Exit codes: 0 success, 2 bad flags or config, 3 I/O failure, 4 training
divergence.  Errors print as a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .gradcheck import run_micro_check
from .graph import Block, Edge
from .metrics import evaluate, load_predictions, save_report
from .model import ModelConfig
from .render import render_scene, save_svg
from .synth import (
    PRESETS,
    DifficultyConfig,
    SceneGenerationError,
    generate_corpus,
    load_scenes,
    save_scenes,
)
from .train import TrainConfig, TrainingDiverged, load_model, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    pass


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_DATA_FIELDS = {f.name for f in dataclasses.fields(DifficultyConfig)}
_TOP_FIELDS = {"seed", "difficulty"}
_TUPLE_FIELDS = {
    "betas",
    "block_count",
    "units_per_block",
    "unit_height",
    "unit_aspect",
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for one command invocation."""

    seed: int
    difficulty: str
    model: ModelConfig
    train: TrainConfig
    data: DifficultyConfig

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "difficulty": self.difficulty,
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
        }


def resolve_config(config_path: str | None, overrides: dict) -> RunConfig:
    """Merge defaults <- config file <- flag overrides into a RunConfig.

    Both sources use one flat key namespace (field names are unique
    across the three sections).  Unknown keys are rejected.
    """
    merged: dict = {}
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as e:
            raise IOFailure(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        merged.update(doc)
    merged.update(overrides)

    known = _MODEL_FIELDS | _TRAIN_FIELDS | _DATA_FIELDS | _TOP_FIELDS
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    difficulty = merged.get("difficulty", "easy")
    if difficulty not in PRESETS:
        raise ConfigError(
            f"unknown difficulty {difficulty!r}; choose from {sorted(PRESETS)}"
        )

    def section(names, base: dict) -> dict:
        out = dict(base)
        for key in names & set(merged):
            val = merged[key]
            if key in _TUPLE_FIELDS:
                if not isinstance(val, (list, tuple)) or len(val) != 2:
                    raise ConfigError(f"{key} must be a pair")
                val = tuple(val)
            out[key] = val
        return out

    try:
        model = ModelConfig(**section(_MODEL_FIELDS, {}))
        train_cfg = TrainConfig(**section(_TRAIN_FIELDS, {}))
        data = DifficultyConfig(
            **section(_DATA_FIELDS, dataclasses.asdict(PRESETS[difficulty]()))
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(
        seed=int(merged.get("seed", 0)),
        difficulty=difficulty,
        model=model,
        train=train_cfg,
        data=data,
    )


class IOFailure(RuntimeError):
    pass


def write_config_echo(out_path: Path, command: str, cfg: RunConfig, args: dict) -> None:
    """Drop a resolved-config JSON file next to an output artifact."""
    if out_path.suffix:
        echo = out_path.with_name(out_path.name + ".config.json")
    else:
        echo = out_path / "config.json"
    doc = {"command": command, "args": args, "config": cfg.to_json()}
    with open(echo, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _collect_overrides(args: argparse.Namespace) -> dict:
    mapping = {
        "seed": "seed",
        "difficulty": "difficulty",
        "dim": "dim",
        "layers": "layers",
        "top_k": "top_k",
        "raster_base": "raster_base",
        "lr": "lr",
        "total_iters": "total_iters",
        "batch_size": "batch_size",
        "warmup_iters": "warmup_iters",
    }
    out = {}
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = val
    if getattr(args, "no_dgsr", False):
        out["dynamic_refine"] = False
    if getattr(args, "no_caf", False):
        out["cross_first"] = False
    if getattr(args, "no_rasa", False):
        out["relation_mask"] = False
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": message, "exit": EXIT_USAGE}), file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> _Parser:
    p = _Parser(prog="ctbg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, train_flags=False):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--difficulty", choices=sorted(PRESETS))
        sp.add_argument("--dim", type=int)
        sp.add_argument("--layers", type=int)
        sp.add_argument("--top-k", dest="top_k", type=int)
        sp.add_argument("--raster-base", dest="raster_base", type=int)
        sp.add_argument("--no-dgsr", action="store_true", help="disable edge refinement")
        sp.add_argument("--no-caf", action="store_true", help="self-attention first")
        sp.add_argument("--no-rasa", action="store_true", help="unmasked node attention")
        if train_flags:
            sp.add_argument("--lr", type=float)
            sp.add_argument("--total-iters", dest="total_iters", type=int)
            sp.add_argument("--batch-size", dest="batch_size", type=int)
            sp.add_argument("--warmup-iters", dest="warmup_iters", type=int)

    sp = sub.add_parser("gen-data", help="generate a synthetic scene corpus")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--out", required=True)
    common(sp)

    sp = sub.add_parser("train", help="train a model on a scene corpus")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    common(sp, train_flags=True)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    common(sp)

    sp = sub.add_parser("infer", help="predict blocks for a scene corpus")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    common(sp)

    sp = sub.add_parser("grad-check", help="finite-difference whole-model check")
    sp.add_argument("--tol", type=float, default=1e-5)

    sp = sub.add_parser("render", help="render a scene and its blocks to SVG")
    sp.add_argument("--data", required=True)
    sp.add_argument("--pred", help="prediction JSONL; omitted renders ground truth")
    sp.add_argument("--out", required=True)
    sp.add_argument("--index", type=int, default=0, help="scene index in the corpus")
    common(sp)

    return p


def _load_scenes_checked(path: str):
    try:
        return load_scenes(path)
    except OSError as e:
        raise IOFailure(str(e)) from e
    except ValueError as e:
        raise IOFailure(f"bad scene file {path}: {e}") from e


def cmd_gen_data(args, cfg: RunConfig) -> int:
    scenes = generate_corpus(cfg.seed, args.count, cfg.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scenes(out, scenes)
    write_config_echo(out, "gen-data", cfg, {"count": args.count, "out": str(out)})
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    scenes = _load_scenes_checked(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(out, "train", cfg, {"data": args.data, "out": str(out)})
    model, rows = train(
        scenes, cfg.model, cfg.train, seed=cfg.seed, out_dir=out, progress=True
    )
    print(f"finished {len(rows)} iterations; final loss {rows[-1].loss_total:.4f}")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    try:
        model = load_model(args.ckpt)
    except OSError as e:
        raise IOFailure(str(e)) from e
    except CheckpointError as e:
        raise IOFailure(f"bad checkpoint: {e}") from e
    scenes = _load_scenes_checked(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for scene in scenes:
            result = model.forward_scene(scene)
            fh.write(json.dumps(result.prediction(), separators=(",", ":")) + "\n")
    write_config_echo(
        out, "infer", cfg, {"ckpt": args.ckpt, "data": args.data, "out": str(out)}
    )
    print(f"wrote predictions for {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    gts = _load_scenes_checked(args.gt)
    try:
        preds = load_predictions(args.pred, gts)
    except OSError as e:
        raise IOFailure(str(e)) from e
    except ValueError as e:
        raise IOFailure(f"bad predictions {args.pred}: {e}") from e
    report = evaluate(preds, gts)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_report(out, report)
    write_config_echo(
        out, "eval", cfg, {"pred": args.pred, "gt": args.gt, "out": str(out)}
    )
    for key in ("iou_0.50", "iou_0.75", "iou_avg"):
        if key in report.values:
            v = report.values[key]
            print(f"{key}: LA {v['la']:.4f} LC {v['lc']:.4f} GA {v['ga']:.4f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    report = run_micro_check(tol=args.tol)
    status = "pass" if report.passed else "FAIL"
    print(
        f"max relative error {report.max_err:.3e} over {report.n_parameters} "
        f"parameters in {report.seconds:.1f}s: {status} (tol {report.tol:g})"
    )
    if not report.passed:
        for c in report.failures():
            print(f"  {c.name}: {c.max_err:.3e}", file=sys.stderr)
        return 1
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    scenes = _load_scenes_checked(args.data)
    if not 0 <= args.index < len(scenes):
        raise ConfigError(f"--index {args.index} out of range for {len(scenes)} scenes")
    scene = scenes[args.index]

    if args.pred is not None:
        try:
            with open(args.pred, encoding="utf-8") as fh:
                lines = fh.read().splitlines()
            record = json.loads(lines[args.index])
        except OSError as e:
            raise IOFailure(str(e)) from e
        except (IndexError, json.JSONDecodeError) as e:
            raise IOFailure(f"bad predictions {args.pred}: {e}") from e
        blocks = [Block(tuple(b)) for b in record["blocks"]]
        edges = [Edge(s, d, sc) for s, d, sc in record.get("edges", [])]
    else:
        blocks = [Block(tuple(b)) for b in scene.blocks]
        succ = scene.successors()
        n = scene.n_units
        edges = [Edge(i, int(succ[i]), 1.0) for i in range(n) if succ[i] < n]

    svg = render_scene(scene.units, edges=edges, blocks=blocks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_svg(out, svg)
    write_config_echo(
        out,
        "render",
        cfg,
        {"data": args.data, "pred": args.pred, "out": str(out), "index": args.index},
    )
    print(f"wrote {out}")
    return EXIT_OK


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "grad-check":
            return cmd_grad_check(args)
        cfg = resolve_config(args.config, _collect_overrides(args))
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "infer": cmd_infer,
            "render": cmd_render,
        }[args.command]
        return handler(args, cfg)
    except (ConfigError, SceneGenerationError) as e:
        print(json.dumps({"error": str(e), "exit": EXIT_USAGE}), file=sys.stderr)
        return EXIT_USAGE
    except IOFailure as e:
        print(json.dumps({"error": str(e), "exit": EXIT_IO}), file=sys.stderr)
        return EXIT_IO
    except TrainingDiverged as e:
        print(json.dumps({"error": str(e), "exit": EXIT_DIVERGED}), file=sys.stderr)
        return EXIT_DIVERGED


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
