"""Command-line orchestration: synth, fit-prior, train, detect, eval, ablate.

All randomness flows from --seed; sub-seeds are derived by hashing
(seed, purpose) so splitting, augmentation, and initialization have
independent reproducible streams. Every command writes a copy of its
effective configuration into the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import (
    HeadParams,
    InferConfig,
    ReferenceExtractor,
    TrainConfig,
    TrainingDivergedError,
    detections_to_json,
    infer,
    train,
)
from .geometry import AnchorSpec, Box3, Detection
from .landmarks import LANDMARK_NAMES, derive_seed
from .metrics import EvalResult, evaluate, format_table
from .phantom import ConstellationTemplate, dataset, load_volume, save_volume
from .prior import DetectionFailureError, LandmarkGraph, PriorModel, RatioDef, fit_prior

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DETECTION = 4
EXIT_DIVERGED = 5


@dataclass
class RunConfig:
    """Every knob a run can turn; flags override config-file values."""

    seed: int = 0
    n: int = 152
    dims: int = 96
    spacing_mm: float = 1.3
    test_count: int | None = None
    base_sizes: tuple[float, ...] = (13.0, 16.0, 20.0, 28.0)
    stride: int = 4
    steps: int = 2000
    learning_rate: float = 0.02
    iou_balance: bool = True
    iou_exponent: float = 1.75
    reg_weight: float = 1.0
    neg_ratio: int = 3
    neg_cap: int = 256
    init_scale: float = 0.01
    prior_filter: bool = True
    nms_iou: float = 0.1
    topk: int = 2
    edges: list | None = None
    ratios: list | None = None

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    def anchor_spec(self) -> AnchorSpec:
        return AnchorSpec(tuple(self.base_sizes), self.stride)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            learning_rate=self.learning_rate,
            iou_balance=self.iou_balance,
            iou_exponent=self.iou_exponent,
            seed=self.seed,
            neg_ratio=self.neg_ratio,
            neg_cap=self.neg_cap,
            reg_weight=self.reg_weight,
            init_scale=self.init_scale,
        )

    def infer_config(self) -> InferConfig:
        return InferConfig(nms_iou=self.nms_iou, topk=self.topk)

    def graph(self) -> LandmarkGraph:
        kwargs = {}
        if self.edges is not None:
            kwargs["edges"] = tuple(tuple(e) for e in self.edges)
        if self.ratios is not None:
            kwargs["ratios"] = tuple(RatioDef.from_json(r) for r in self.ratios)
        return LandmarkGraph(**kwargs)


def _build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        file_values = json.loads(Path(args.config).read_text())
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(file_values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = dataclasses.replace(cfg, **file_values)
    for field in dataclasses.fields(RunConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            setattr(cfg, field.name, value)
    return cfg


def _write_config(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(cfg.to_json_dict(), indent=2) + "\n")


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def _onoff(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on|off, got {value!r}")


def _load_manifest(data_dir: Path) -> dict:
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    return json.loads(manifest_path.read_text())


def _load_split(data_dir: Path, names: list[str]):
    return [load_volume(data_dir, name) for name in names]


def _load_split_landmarks(data_dir: Path, names: list[str]) -> list[np.ndarray]:
    points = []
    for name in names:
        header = json.loads((data_dir / f"{name}.json").read_text())
        points.append(np.array([header["landmarks"][k] for k in LANDMARK_NAMES]))
    return points


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    _write_config(cfg, out)
    split = None if cfg.test_count is None else (cfg.n - cfg.test_count, cfg.test_count)
    train_set, test_set = dataset(
        n=cfg.n,
        split=split,
        seed=cfg.seed,
        template=ConstellationTemplate(),
        dims=(cfg.dims,) * 3,
        spacing_mm=cfg.spacing_mm,
    )
    for vol in train_set + test_set:
        save_volume(vol, out)
    manifest = {
        "n": cfg.n,
        "dims": [cfg.dims] * 3,
        "spacing_mm": cfg.spacing_mm,
        "seed": cfg.seed,
        "train": [v.name for v in train_set],
        "test": [v.name for v in test_set],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {cfg.n} volumes ({len(train_set)} train / {len(test_set)} test) to {out}")
    return EXIT_OK


def cmd_fit_prior(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    data_dir = Path(args.data)
    manifest = _load_manifest(data_dir)
    points = _load_split_landmarks(data_dir, manifest["train"])
    prior = fit_prior(points, cfg.graph())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    prior.save(out)
    print(f"fitted {len(prior.graph.ratios)} ratios over {prior.sample_count} sets -> {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    data_dir = Path(args.data)
    manifest = _load_manifest(data_dir)
    volumes = _load_split(data_dir, manifest["train"])
    extractor = ReferenceExtractor(stride=cfg.stride)
    params, curve = train(volumes, extractor, cfg.train_config(), cfg.anchor_spec())
    out = Path(args.params)
    out.parent.mkdir(parents=True, exist_ok=True)
    params.save(out)
    if args.report:
        report = {"config": cfg.to_json_dict(), "loss_curve": curve}
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    print(
        f"trained {cfg.steps} steps on {len(volumes)} volumes; "
        f"final loss {curve[-1]['total']:.4f} -> {out}"
    )
    return EXIT_OK


def _run_inference(volumes, extractor, params, prior, cfg: RunConfig):
    preds: dict[str, list[Detection]] = {}
    failures: dict[str, str] = {}
    elapsed = []
    for vol in volumes:
        start = time.perf_counter()
        try:
            dets = infer(vol, extractor, params, prior, cfg.infer_config(), cfg.anchor_spec())
            preds[vol.name] = dets
        except DetectionFailureError as exc:
            preds[vol.name] = []
            failures[vol.name] = str(exc)
        elapsed.append((time.perf_counter() - start) * 1000.0)
    return preds, failures, float(np.mean(elapsed)) if elapsed else 0.0


def _oracle_predictions(volumes) -> dict[str, list[Detection]]:
    preds = {}
    for vol in volumes:
        preds[vol.name] = [
            Detection(box=Box3.from_array(vol.gt.boxes[i]), class_id=i + 1, score=1.0, anchor_index=i)
            for i in range(len(LANDMARK_NAMES))
        ]
    return preds


def cmd_detect(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    data_dir = Path(args.data)
    manifest = _load_manifest(data_dir)
    volumes = _load_split(data_dir, manifest[args.split])
    params = HeadParams.load(args.params)
    prior = PriorModel.load(args.prior) if (cfg.prior_filter and args.prior) else None
    extractor = ReferenceExtractor(stride=cfg.stride)
    preds, failures, mean_ms = _run_inference(volumes, extractor, params, prior, cfg)
    doc = {
        "config": cfg.to_json_dict(),
        "mean_time_ms": mean_ms,
        "volumes": {
            name: detections_to_json(dets, cfg.spacing_mm) for name, dets in preds.items()
        },
        "failures": failures,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"detected on {len(volumes)} volumes ({len(failures)} failures) -> {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    data_dir = Path(args.data)
    manifest = _load_manifest(data_dir)
    volumes = _load_split(data_dir, manifest[args.split])
    gts = {vol.name: vol.gt for vol in volumes}
    if args.oracle:
        preds = _oracle_predictions(volumes)
        mean_ms = 0.0
        label = "oracle"
    else:
        if not args.params:
            raise ValueError("--params is required unless --oracle is set")
        params = HeadParams.load(args.params)
        prior = PriorModel.load(args.prior) if (cfg.prior_filter and args.prior) else None
        extractor = ReferenceExtractor(stride=cfg.stride)
        preds, _, mean_ms = _run_inference(volumes, extractor, params, prior, cfg)
        label = "prior-filter" if prior is not None else "score-only"
    result = evaluate(preds, gts, cfg.spacing_mm, time_ms=mean_ms)
    table = format_table([(label, result)])
    print(table)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config": cfg.to_json_dict(), "label": label, "metrics": result.to_json_dict()}
    report_path.write_text(json.dumps(doc, indent=2) + "\n")
    report_path.with_suffix(".txt").write_text(table + "\n")
    return EXIT_OK


ABLATION_CELLS = (
    ("baseline", False, False),
    ("iou-balance", True, False),
    ("prior", False, True),
    ("iou-balance+prior", True, True),
)


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    data_dir = Path(args.data)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    _write_config(cfg, out)
    manifest = _load_manifest(data_dir)
    train_vols = _load_split(data_dir, manifest["train"])
    test_vols = _load_split(data_dir, manifest["test"])
    gts = {vol.name: vol.gt for vol in test_vols}
    prior = fit_prior(
        [vol.gt.landmarks for vol in train_vols], cfg.graph()
    )
    extractor = ReferenceExtractor(stride=cfg.stride)
    cells = ABLATION_CELLS if args.grid == "full" else (ABLATION_CELLS[0], ABLATION_CELLS[3])
    rows: list[tuple[str, EvalResult]] = []
    report_rows = []
    for label, balance, use_prior in cells:
        cell_cfg = dataclasses.replace(cfg, iou_balance=balance, prior_filter=use_prior)
        cell_dir = out / label.replace("+", "_")
        cell_dir.mkdir(exist_ok=True)
        params, curve = train(
            train_vols, extractor, cell_cfg.train_config(), cell_cfg.anchor_spec()
        )
        params.save(cell_dir / "params.json")
        preds, failures, mean_ms = _run_inference(
            test_vols, extractor, params, prior if use_prior else None, cell_cfg
        )
        result = evaluate(preds, gts, cfg.spacing_mm, time_ms=mean_ms)
        (cell_dir / "eval.json").write_text(json.dumps(result.to_json_dict(), indent=2) + "\n")
        rows.append((label, result))
        report_rows.append(
            {
                "label": label,
                "iou_balance": balance,
                "prior_filter": use_prior,
                "final_loss": curve[-1]["total"],
                "failures": len(failures),
                "metrics": result.to_json_dict(),
            }
        )
    table = format_table(rows)
    print(table)
    (out / "ablation.json").write_text(
        json.dumps({"config": cfg.to_json_dict(), "rows": report_rows}, indent=2) + "\n"
    )
    (out / "ablation.txt").write_text(table + "\n")
    return EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser, *names: str) -> None:
    flags = {
        "seed": dict(type=int),
        "n": dict(type=int),
        "dims": dict(type=int),
        "spacing_mm": dict(type=float),
        "test_count": dict(type=int),
        "stride": dict(type=int),
        "steps": dict(type=int),
        "learning_rate": dict(type=float),
        "iou_balance": dict(type=_onoff, metavar="on|off"),
        "iou_exponent": dict(type=float),
        "reg_weight": dict(type=float),
        "prior_filter": dict(type=_onoff, metavar="on|off"),
        "nms_iou": dict(type=float),
        "topk": dict(type=int),
    }
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    for name in names:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, **flags[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volmark", description="3D anchor-based landmark detection pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p, "n", "dims", "seed", "spacing_mm", "test_count")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-prior", help="fit distance-ratio statistics on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit_prior)

    p = sub.add_parser("train", help="train detection heads on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True, help="output head-parameter file")
    p.add_argument("--report", help="optional loss-curve report JSON")
    _add_config_flags(p, "seed", "steps", "learning_rate", "iou_balance", "iou_exponent", "reg_weight", "stride")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run inference and dump detections")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--prior")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    _add_config_flags(p, "prior_filter", "nms_iou", "topk", "stride")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="run inference and score it")
    p.add_argument("--data", required=True)
    p.add_argument("--params")
    p.add_argument("--prior")
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    _add_config_flags(p, "prior_filter", "nms_iou", "topk", "stride")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the toggle grid from one seed")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--grid", choices=("full", "pair"), default="full")
    _add_config_flags(p, "seed", "steps", "learning_rate", "iou_exponent", "reg_weight", "stride", "nms_iou", "topk")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, FileExistsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DetectionFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DETECTION
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
