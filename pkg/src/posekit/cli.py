"""Command-line entry point.

Every subcommand reads an optional JSON run config (``--config``), a seed
(``--seed``) and an output directory (``--out``). Outputs land under
``--out`` next to ``run-manifest.json``, which records the fully resolved
config, its SHA-256, the argv, input/output file hashes and library versions.
No timestamps are written, so reruns are byte-identical.

CSV schemas (column order frozen):

  loss.csv          epoch,coarse_l2,refine_l2,focal,heatmap_l2,total
  eval.csv          metric,value
  nms_bound.csv     nms_kind,threshold,recall,ap_hard
  refine_gain.csv   mode,mean_best_oks
  gradcheck.csv     op,configs,failures,max_rel_err,coords,kinks

Exit codes: 0 success, 1 config or input validation error, 2 internal
failure (training divergence, gradient-check failure, unexpected error).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import typing
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .domain import Pose, PoseError, Scene, SkeletonSpec
from .evaluation import DEFAULT_CUTS, predict, refinement_gain, summarize, write_eval, nms_upper_bound
from .gradsuite import run_suite, CASES
from .io import CocoFormatError, read_coco_keypoints, read_results, read_scenes, write_results, write_scenes
from .model import HeadConfig, build_model, load_checkpoint, save_checkpoint
from .oks import OksParams
from .supervision import LossReport
from .training import (DatasetError, SynthConfig, TrainConfig, TrainingDiverged, crowd_index, skeleton_for,
                       synth_dataset, train)

log = logging.getLogger("posekit")

EXIT_OK, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2
MANIFEST = "run-manifest.json"

CSV_SCHEMAS = {
    "loss.csv": ("epoch",) + LossReport.FIELDS,
    "eval.csv": ("metric", "value"),
    "nms_bound.csv": ("nms_kind", "threshold", "recall", "ap_hard"),
    "refine_gain.csv": ("mode", "mean_best_oks"),
    "gradcheck.csv": ("op", "configs", "failures", "max_rel_err", "coords", "kinks"),
}


class ConfigError(ValueError):
    pass


class InternalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- run config

@dataclasses.dataclass(frozen=True)
class OksSection:
    sigmas: Optional[tuple[float, ...]] = None  # None: the dataset skeleton's sigmas
    scale_floor: float = 1.0


@dataclasses.dataclass(frozen=True)
class EvalSection:
    cuts: tuple[float, float] = DEFAULT_CUTS
    nms_thresholds: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 20))
    score_policy: str = "uniform"
    use_refine: bool = True

    def __post_init__(self):
        if self.score_policy not in ("uniform", "random"):
            raise ValueError("score_policy must be 'uniform' or 'random'")


@dataclasses.dataclass(frozen=True)
class GradcheckSection:
    configs: int = 50
    eps: float = 1e-4
    tol: float = 1e-4
    coords: int = 32
    ops: Optional[tuple[str, ...]] = None


SECTIONS = {
    "synth": SynthConfig,
    "train": TrainConfig,
    "head": HeadConfig,
    "oks": OksSection,
    "eval": EvalSection,
    "gradcheck": GradcheckSection,
}
# seeds come from the top-level ``seed`` / ``--seed`` only
SEEDED = {"synth", "train"}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int
    synth: SynthConfig
    train: TrainConfig
    head: HeadConfig
    oks: OksSection
    eval: EvalSection
    gradcheck: GradcheckSection

    def to_json(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            doc = dataclasses.asdict(getattr(self, name))
            if name in SEEDED:
                doc.pop("seed")
            out[name] = _jsonable(doc)
        return out

    def digest(self) -> str:
        return hashlib.sha256(canonical(self.to_json()).encode()).hexdigest()

    def oks_params(self, skeleton: Optional[SkeletonSpec] = None) -> OksParams:
        if self.oks.sigmas is not None:
            if len(self.oks.sigmas) != self.head.K:
                raise ConfigError(f"oks.sigmas has {len(self.oks.sigmas)} entries, head.K is {self.head.K}")
            return OksParams(self.oks.sigmas, self.oks.scale_floor)
        if skeleton is not None:
            return OksParams(skeleton.sigmas, self.oks.scale_floor)
        return OksParams.for_k(self.head.K, self.oks.scale_floor)


def canonical(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _coerce(value, hint, where: str):
    """Check a JSON value against a dataclass field annotation; returns the coerced value."""
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {hint!r}")


def _build_section(name: str, cls, doc, seed: int):
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls)} - ({"seed"} if name in SEEDED else set())
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in doc.items()}
    if name in SEEDED:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def load_config(doc: Optional[dict], seed: Optional[int] = None) -> RunConfig:
    """Validate a run-config document; every field defaults, unknown keys are errors."""
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    base_seed = _coerce(doc.get("seed", 0), int, "seed")
    seed = base_seed if seed is None else seed
    sections = {name: _build_section(name, cls, doc.get(name, {}), seed) for name, cls in SECTIONS.items()}
    cfg = RunConfig(seed=seed, **sections)
    if cfg.synth.K != cfg.head.K:
        raise ConfigError(f"synth.K ({cfg.synth.K}) and head.K ({cfg.head.K}) differ")
    if cfg.synth.channels != cfg.head.in_channels:
        raise ConfigError(f"synth.channels ({cfg.synth.channels}) and head.in_channels "
                          f"({cfg.head.in_channels}) differ")
    cuts = cfg.eval.cuts
    if not 0.0 <= cuts[0] <= cuts[1] <= 1.0:
        raise ConfigError(f"eval.cuts must be ascending in [0, 1], got {list(cuts)}")
    if any(not 0.0 < t < 1.0 for t in cfg.eval.nms_thresholds) or not cfg.eval.nms_thresholds:
        raise ConfigError("eval.nms_thresholds must be a non-empty list in (0, 1)")
    if cfg.gradcheck.ops is not None and set(cfg.gradcheck.ops) - set(CASES):
        raise ConfigError(f"gradcheck.ops: unknown op(s); choose from {sorted(CASES)}")
    return cfg


def read_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    if path is None:
        return load_config(None, seed)
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    return load_config(doc, seed)


# ---------------------------------------------------------------- helpers

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, argv: Sequence[str], cfg: RunConfig,
                   inputs: dict[str, Path], summary: Optional[dict] = None) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    doc = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "config_sha256": cfg.digest(),
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in sorted(inputs.items())},
        "outputs": {str(p.relative_to(out)): sha256_file(p) for p in files},
        "versions": {
            "posekit": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    if summary is not None:
        doc["summary"] = summary
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_SCHEMAS[path.name])
        w.writerows(rows)


def load_data(data: Optional[str], cfg: RunConfig, inputs: dict) -> tuple[SkeletonSpec, list[Scene]]:
    """Scenes from a manifest (``--data``) or freshly synthesized from the config."""
    if data is None:
        return skeleton_for(cfg.synth.K), synth_dataset(cfg.synth)
    path = Path(data)
    path = path / "scenes.json" if path.is_dir() else path
    if not path.exists():
        raise ConfigError(f"scene manifest {path} not found")
    inputs["data"] = path
    skeleton, scenes = read_scenes(path)
    if not scenes:
        raise ConfigError(f"{path}: no scenes")
    if skeleton.K != cfg.head.K:
        raise ConfigError(f"{path}: dataset has K={skeleton.K}, config head.K={cfg.head.K}")
    return skeleton, scenes


def load_gt(path: str, inputs: dict) -> tuple[SkeletonSpec, list[int], list[tuple[Pose, ...]], list[float]]:
    """GT from a scene manifest (image id = scene index) or a COCO keypoints document."""
    p = Path(path)
    p = p / "scenes.json" if p.is_dir() else p
    if not p.exists():
        raise ConfigError(f"ground truth {p} not found")
    inputs["gt"] = p
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    if isinstance(doc, dict) and "scenes" in doc and "images" not in doc:
        skeleton, scenes = read_scenes(p)
        return (skeleton, list(range(len(scenes))), [s.gt_poses for s in scenes],
                [s.crowd_index for s in scenes])
    skeleton, images = read_coco_keypoints(p)
    gts = [tuple(im.poses) for im in images]
    return (skeleton, [im.info.id for im in images], gts,
            [crowd_index(g) for g in gts])


def _float(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, cfg: RunConfig, out: Path, inputs: dict) -> dict:
    scenes = synth_dataset(cfg.synth)
    write_scenes(scenes, out, skeleton_for(cfg.synth.K))
    return {"scenes": len(scenes), "persons": sum(len(s.gt_poses) for s in scenes)}


def cmd_train(args, cfg: RunConfig, out: Path, inputs: dict) -> dict:
    skeleton, scenes = load_data(args.data, cfg, inputs)
    params = cfg.oks_params(skeleton)
    model = build_model(cfg.head, cfg.seed)
    try:
        result = train(model, scenes, cfg.train, params, progress=args.verbose)
    except TrainingDiverged as exc:
        raise InternalFailure(str(exc)) from exc
    save_checkpoint(result.model, out / "checkpoint.json")
    write_csv(out / "loss.csv", ([e] + [repr(float(v)) for v in r.as_row()] for e, r in enumerate(result.history)))
    return {"initial_total": float(result.initial_total), "final_total": float(result.final_total),
            "epochs": len(result.history)}


def _load_model(args, cfg: RunConfig, inputs: dict):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    inputs["checkpoint"] = path
    model = load_checkpoint(path)
    # decode settings follow the run config; architecture follows the checkpoint
    decode_cfg = dataclasses.replace(model.cfg, score_threshold=cfg.head.score_threshold,
                                     topk_per_level=cfg.head.topk_per_level, nms_mode=cfg.head.nms_mode,
                                     nms_threshold=cfg.head.nms_threshold, max_keep=cfg.head.max_keep)
    return dataclasses.replace(model, cfg=decode_cfg)


def cmd_infer(args, cfg: RunConfig, out: Path, inputs: dict) -> dict:
    model = _load_model(args, cfg, inputs)
    skeleton, scenes = load_data(args.data, dataclasses.replace(cfg, head=model.cfg), inputs)
    dets = predict(model, scenes, use_refine=cfg.eval.use_refine, params=cfg.oks_params(skeleton))
    write_results({i: d for i, d in enumerate(dets)}, out / "results.json")
    return {"scenes": len(scenes), "detections": sum(len(d) for d in dets)}


def cmd_eval(args, cfg: RunConfig, out: Path, inputs: dict) -> dict:
    if args.results is None or args.gt is None:
        raise ConfigError("--results and --gt are required")
    skeleton, ids, gts, crowd = load_gt(args.gt, inputs)
    rpath = Path(args.results)
    if not rpath.exists():
        raise ConfigError(f"results {rpath} not found")
    inputs["results"] = rpath
    results = read_results(rpath)
    stray = sorted(set(results) - set(ids))
    if stray:
        raise ConfigError(f"{rpath}: results reference unknown image id(s) {stray[:5]}")
    for iid, dets in results.items():
        for d in dets:
            if len(d.pose) != skeleton.K:
                raise ConfigError(f"{rpath}: image {iid} has a {len(d.pose)}-joint detection, GT has K={skeleton.K}")
    params = OksParams(cfg.oks.sigmas, cfg.oks.scale_floor) if cfg.oks.sigmas is not None \
        else OksParams(skeleton.sigmas, cfg.oks.scale_floor)
    if params.K != skeleton.K:
        raise ConfigError(f"oks.sigmas has {params.K} entries, GT has K={skeleton.K}")
    dets = [results.get(i, []) for i in ids]
    result = summarize(dets, gts, params, crowd, cfg.eval.cuts)
    write_eval(result, out)
    return {"mAP": result.mAP, "AP50": result.ap50, "AP75": result.ap75}


def cmd_nms_bound(args, cfg: RunConfig, out: Path, inputs: dict) -> dict:
    skeleton, scenes = load_data(args.data, cfg, inputs)
    table = nms_upper_bound(scenes, cfg.eval.nms_thresholds, cfg.eval.score_policy, cfg.oks_params(skeleton),
                            cfg.eval.cuts, cfg.seed, cfg.head.max_keep)
    write_csv(out / "nms_bound.csv", ([r.nms_kind, repr(r.threshold), repr(r.recall), _float(r.ap_hard)]
                                      for r in table.rows))
    (out / "nms_bound.json").write_text(json.dumps(table.to_json(), indent=2) + "\n")
    return {"max_recall_oks": table.max_recall("oks"), "max_recall_iou": table.max_recall("iou")}


def cmd_refine_gain(args, cfg: RunConfig, out: Path, inputs: dict) -> dict:
    model = _load_model(args, cfg, inputs)
    skeleton, scenes = load_data(args.data, dataclasses.replace(cfg, head=model.cfg), inputs)
    coarse, refined = refinement_gain(model, scenes, cfg.oks_params(skeleton))
    write_csv(out / "refine_gain.csv", [["coarse", repr(coarse)], ["refined", repr(refined)]])
    summary = {"coarse": coarse, "refined": refined, "gain": refined - coarse}
    (out / "refine_gain.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_gradcheck(args, cfg: RunConfig, out: Path, inputs: dict) -> dict:
    g = cfg.gradcheck
    results = run_suite(g.configs, cfg.seed, g.ops, g.eps, g.tol, g.coords)
    write_csv(out / "gradcheck.csv", ([r.op, r.configs, r.failures, repr(float(r.max_rel_err)), r.coords, r.kinks]
                                      for r in results))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.op}: {r.configs} configs, {r.failures} failures, "
              f"max rel err {float(r.max_rel_err):.3g}, {r.seconds:.1f}s")
    failed = [r.op for r in results if not r.passed]
    summary = {"failed": failed}
    if failed:
        raise InternalFailure(f"gradient check failed for {', '.join(failed)}", summary)
    return summary


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic scene dataset (scenes.json + float32 arrays)"),
    "train": (cmd_train, "train the toy model; writes checkpoint.json and loss.csv"),
    "infer": (cmd_infer, "checkpoint + scenes -> COCO results.json (image_id = scene index)"),
    "eval": (cmd_eval, "results + GT (scene manifest or COCO keypoints JSON) -> eval.csv / eval.json"),
    "nms-bound": (cmd_nms_bound, "GT poses through OKS- and IoU-NMS at each threshold -> nms_bound.csv"),
    "refine-gain": (cmd_refine_gain, "mean best-OKS per GT with coarse-only vs refined decode"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite; exit 2 on any failure"),
}


def _epilog() -> str:
    lines = ["CSV files (column order is frozen):"]
    lines += [f"  {name:<16} {','.join(cols)}" for name, cols in CSV_SCHEMAS.items()]
    lines += ["", "exit codes: 0 success, 1 config/validation error, 2 internal failure",
              "POSEKIT_THREADS caps per-scene evaluation threads (0 = serial)."]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posekit", description="Toy single-stage multi-person pose pipeline.",
                                     epilog=_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"posekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_epilog(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON run config (sections: seed, synth, train, head, oks, eval, gradcheck)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config's top-level seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "infer", "nms-bound", "refine-gain"):
            p.add_argument("--data", help="scene manifest or directory; synthesized from the config if omitted")
        if name in ("infer", "refine-gain"):
            p.add_argument("--checkpoint", required=True)
        if name == "eval":
            p.add_argument("--results", required=True, help="COCO results JSON")
            p.add_argument("--gt", required=True, help="scene manifest or COCO person-keypoints JSON")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    inputs: dict[str, Path] = {}
    out = Path(args.out)
    try:
        cfg = read_config(args.config, args.seed)
        if args.config is not None:
            inputs["config"] = Path(args.config)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command][0](args, cfg, out, inputs)
    except (ConfigError, CocoFormatError, PoseError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InternalFailure as exc:
        print(f"failure: {exc.args[0]}", file=sys.stderr)
        if len(exc.args) > 1:
            write_manifest(out, args.command, argv, cfg, inputs, exc.args[1])
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    write_manifest(out, args.command, argv, cfg, inputs, summary)
    return EXIT_OK


def main() -> int:
    return run()
