"""``scmii`` command-line entry point and pipeline configuration."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import jsonschema

from .evaluation import boxes_within, eval_report, evaluate, report_json, report_text
from .fusion import FusionConfig, fusion_kernel
from .geometry import Pose6DoF, RigidTransform, compose, invert, load_calibration, save_calibration
from .model import Detection, NetworkSpec, Weights, default_network_spec, init_weights, load_model, run_head
from .ndt import calibrate
from .pointcloud import (
    GroundTruth, PointCloud, SceneSpec, gen_frames, load_cloud, reference_frame_boxes, save_cloud, sensor_layout,
)
from .runtime import CostModel, LinkModel, input_fusion_infer, run_edge, serve, server_infer, simulate_pipeline

log = logging.getLogger("scmii")

FUSION_FLAGS = {"max": ("max", 1), "concat1": ("concat-conv", 1), "concat3": ("concat-conv", 3)}


class ConfigError(ValueError):
    pass


def _obj(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer"}
_PATH = {"type": ["string", "null"]}

SCHEMA = _obj({
    "scene": _obj({
        "seed": {"type": "integer", "minimum": 0},
        "frames": {"type": "integer", "minimum": 1},
        "devices": {"type": "integer", "minimum": 1, "maximum": 64},
        "object_count": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "extent": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
        "sensor_height": _POS,
    }),
    "inputs": _obj({
        "frames": {"type": "array", "minItems": 1,
                   "items": {"type": "array", "minItems": 1, "items": {"type": "string"}}},
        "truth": _PATH,
    }),
    "network": _obj({
        "model_path": _PATH,
        "seed": {"type": "integer", "minimum": 0},
        "mode": {"enum": ["identity-preserving", "seeded-random"]},
        "voxel_size": _POS,
        "half_extent": _POS,
        "height_cells": {"type": "integer", "minimum": 1},
        "ground_clearance": _NUM,
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    }),
    "fusion": _obj({
        "method": {"enum": list(FUSION_FLAGS)},
        "weights": {"enum": ["averaging", "seeded-random"]},
        "seed": {"type": "integer", "minimum": 0},
    }),
    "calibration": _obj({
        "path": _PATH,
        "inline": {"type": "boolean"},
        "reference": {"type": "integer", "minimum": 0},
        "cell_size": _POS,
        "guesses": {"type": "object", "additionalProperties": False,
                    "patternProperties": {"^[0-9]+$": {"type": "array", "items": _NUM,
                                                       "minItems": 6, "maxItems": 6}}},
    }),
    "link": _obj({"latency_ms": _NONNEG, "bandwidth_mbps": _POS, "jitter_ms": _NONNEG,
                  "corruption": {"type": "number", "minimum": 0, "maximum": 1}, "seed": _INT}),
    "cost": _obj({"edge_macs_per_s": _POS, "server_macs_per_s": _POS, "layer_overhead_ms": _NONNEG,
                  "edge_serialize_mb_per_s": _POS, "server_serialize_mb_per_s": _POS,
                  "voxelize_us_per_point": _NONNEG}),
    "runtime": _obj({
        "transport": {"enum": ["simulated", "sockets"]},
        "endpoints": {"type": "array", "items": {"type": "string"}},
        "timeout_ms": _NONNEG,
        "colocated_baseline": {"type": "boolean"},
    }),
    "output": _obj({"dir": {"type": "string"}}),
})

DEFAULTS = {
    "scene": {"seed": 0, "frames": 1, "devices": 2, "object_count": [5, 15],
              "extent": [-30.0, 30.0, -30.0, 30.0], "sensor_height": 4.0},
    "network": {"model_path": None, "seed": 0, "mode": "identity-preserving", "voxel_size": 0.2,
                "half_extent": 40.0, "height_cells": 20, "ground_clearance": 0.15, "threshold": 0.5},
    "fusion": {"method": "max", "weights": "averaging", "seed": 0},
    "calibration": {"path": None, "inline": False, "reference": 0, "cell_size": 2.0, "guesses": {}},
    "link": {"latency_ms": 0.2, "bandwidth_mbps": 1000.0, "jitter_ms": 0.0, "corruption": 0.0, "seed": 0},
    "cost": {"edge_macs_per_s": 2.0e10, "server_macs_per_s": 4.0e11, "layer_overhead_ms": 0.5,
             "edge_serialize_mb_per_s": 1000.0, "server_serialize_mb_per_s": 4000.0,
             "voxelize_us_per_point": 0.05},
    "runtime": {"transport": "simulated", "endpoints": [], "timeout_ms": 100.0, "colocated_baseline": False},
    "output": {"dir": "out"},
}


@dataclass
class PipelineConfig:
    """Validated configuration document with every default filled in."""

    doc: dict
    base_dir: Path = Path(".")

    def section(self, name: str) -> dict:
        return self.doc[name]

    @property
    def synthetic(self) -> bool:
        return "inputs" not in self.doc

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def __eq__(self, other):
        return isinstance(other, PipelineConfig) and self.doc == other.doc


def _json_path(err: jsonschema.ValidationError) -> str:
    path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
    return path


def config_from_dict(raw: dict, base_dir: Path = Path(".")) -> PipelineConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config error at {_json_path(e)}: {e.message}")
    if "scene" in raw and "inputs" in raw:
        raise ConfigError("config error at $: give either 'scene' or 'inputs', not both")
    doc = copy.deepcopy(DEFAULTS)
    if "inputs" in raw:
        del doc["scene"]
    for key, value in raw.items():
        if isinstance(value, dict) and key in doc:
            doc[key].update(copy.deepcopy(value))
        else:
            doc[key] = copy.deepcopy(value)
    if "inputs" in doc:
        doc["inputs"].setdefault("truth", None)
    cfg = PipelineConfig(doc, base_dir)
    paths = []
    if "inputs" in doc:
        paths += [(f"$.inputs.frames[{i}][{j}]", p) for i, fr in enumerate(doc["inputs"]["frames"])
                  for j, p in enumerate(fr)]
        if doc["inputs"]["truth"]:
            paths.append(("$.inputs.truth", doc["inputs"]["truth"]))
    if doc["network"]["model_path"]:
        paths.append(("$.network.model_path", doc["network"]["model_path"]))
    if doc["calibration"]["path"]:
        paths.append(("$.calibration.path", doc["calibration"]["path"]))
    for where, p in paths:
        if not cfg.resolve(p).exists():
            raise ConfigError(f"config error at {where}: file not found: {cfg.resolve(p)}")
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(raw, path.parent)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- pipeline assembly

def scene_spec(cfg: PipelineConfig) -> SceneSpec:
    s = cfg.section("scene")
    return SceneSpec(extent=tuple(s["extent"]), object_count=tuple(s["object_count"]),
                     sensors=sensor_layout(s["devices"], s["sensor_height"]), seed=s["seed"])


def load_frames(cfg: PipelineConfig) -> tuple[list[dict[int, PointCloud]], list[GroundTruth] | None]:
    if cfg.synthetic:
        scenes = gen_frames(scene_spec(cfg), cfg.section("scene")["frames"])
        return [dict(enumerate(c)) for c, _ in scenes], [t for _, t in scenes]
    inputs = cfg.section("inputs")
    frames = [{d: load_cloud(cfg.resolve(p)) for d, p in enumerate(fr)} for fr in inputs["frames"]]
    truths = None
    if inputs["truth"]:
        truths = load_truth(cfg.resolve(inputs["truth"]))
    return frames, truths


def build_network(cfg: PipelineConfig) -> tuple[NetworkSpec, Weights]:
    n = cfg.section("network")
    if n["model_path"]:
        return load_model(cfg.resolve(n["model_path"]))
    height = cfg.section("scene")["sensor_height"] if cfg.synthetic else DEFAULTS["scene"]["sensor_height"]
    spec = default_network_spec(height, n["half_extent"], n["voxel_size"], n["height_cells"], n["ground_clearance"])
    spec = NetworkSpec(spec.grid, spec.head, spec.tail, n["threshold"], spec.score_channel)
    return spec, init_weights(spec, n["seed"], n["mode"])


def fusion_config(cfg: PipelineConfig, spec: NetworkSpec, devices: Sequence[int],
                  method: str | None = None) -> FusionConfig:
    f = cfg.section("fusion")
    kind, k = FUSION_FLAGS[method or f["method"]]
    reference = cfg.section("calibration")["reference"]
    order = [reference] + [d for d in sorted(devices) if d != reference]
    kernel = None
    if kind == "concat-conv":
        kernel = fusion_kernel(len(order), spec.feature_channels, k, f["weights"], f["seed"])
    return FusionConfig(kind, tuple(order), spec.feature_grid, kernel)


def resolve_transforms(cfg: PipelineConfig, frames, truths) -> dict[int, RigidTransform]:
    c = cfg.section("calibration")
    ref = c["reference"]
    devices = sorted(frames[0])
    if ref not in devices:
        raise ConfigError(f"config error at $.calibration.reference: no device {ref}")
    if c["path"]:
        transforms, file_ref = load_calibration(cfg.resolve(c["path"]))
        if file_ref != ref:
            raise ConfigError(f"calibration file reference {file_ref} differs from configured reference {ref}")
        missing = [d for d in devices if d not in transforms]
        if missing:
            raise ConfigError(f"calibration file has no transform for devices {missing}")
        return {d: transforms[d] for d in devices}
    if c["inline"]:
        return calibrate_devices(cfg, frames[0])
    if truths is None:
        raise ConfigError("no calibration: set calibration.path or calibration.inline for recorded inputs")
    ext = truths[0].extrinsics
    return {d: compose(invert(ext[ref]), ext[d]) for d in devices}


def calibrate_devices(cfg: PipelineConfig, clouds: dict[int, PointCloud]) -> dict[int, RigidTransform]:
    c = cfg.section("calibration")
    ref = c["reference"]
    others = [d for d in sorted(clouds) if d != ref]
    guesses = [Pose6DoF.from_array(c["guesses"].get(str(d), [0.0] * 6)) for d in others]
    transforms = calibrate(clouds[ref], [clouds[d] for d in others], guesses, cell_size=c["cell_size"])
    out = {ref: RigidTransform.identity()}
    out.update(zip(others, transforms))
    return out


def integration_range(spec: NetworkSpec) -> tuple[list[float], list[float]]:
    g = spec.feature_grid
    lo = list(g.origin)
    hi = [o + d * e for o, d, e in zip(g.origin, g.dims, g.effective_voxel)]
    return lo, hi


def detections_doc(results: dict[int, tuple[list[Detection], bool]], spec: NetworkSpec) -> dict:
    lo, hi = integration_range(spec)
    return {
        "integration_range": {"lo": lo, "hi": hi},
        "frames": [{"frame_id": fid, "complete": complete, "detections": [d.to_dict() for d in dets]}
                   for fid, (dets, complete) in sorted(results.items())],
    }


def write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def save_truth(path: Path, truths: Sequence[GroundTruth], reference: int = 0) -> None:
    write_json(path, {"reference": reference, "frames": [t.to_dict() for t in truths]})


def load_truth(path) -> list[GroundTruth]:
    doc = json.loads(Path(path).read_text())
    try:
        return [GroundTruth.from_dict(f) for f in doc["frames"]]
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: malformed truth file ({e})") from None


# ---------------------------------------------------------------- subcommands

def cmd_gen_scene(cfg: PipelineConfig, out: Path) -> int:
    frames, truths = load_frames(cfg)
    for fid, clouds in enumerate(frames):
        for dev, cloud in clouds.items():
            path = out / f"frame_{fid:03d}" / f"device_{dev}.bin"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_cloud(cloud, path)
    if truths is not None:
        save_truth(out / "truth.json", truths)
        ext = truths[0].extrinsics
        save_calibration(out / "calibration_truth.json",
                         {d: compose(invert(ext[0]), e) for d, e in enumerate(ext)}, 0)
    print(f"wrote {len(frames)} frame(s) of {len(frames[0])} device(s) to {out}")
    return 0


def cmd_calibrate(cfg: PipelineConfig, out: Path) -> int:
    frames, _ = load_frames(cfg)
    transforms = calibrate_devices(cfg, frames[0])
    out.mkdir(parents=True, exist_ok=True)
    save_calibration(out / "calibration.json", transforms, cfg.section("calibration")["reference"])
    print(f"wrote {out / 'calibration.json'}")
    return 0


def _accuracy_rows(frames, truths, transforms, spec, weights, cfg, devices, report) -> list:
    lo, hi = integration_range(spec)
    ref = cfg.section("calibration")["reference"]
    gts = [boxes_within(reference_frame_boxes(t, ref), lo, hi) for t in truths]
    heads = [{d: run_head(c, spec, weights) for d, c in clouds.items()} for clouds in frames]
    rows = []
    for dev in devices:
        fc = fusion_config(cfg, spec, [dev], "max")
        dets = [server_infer({dev: h[dev]}, transforms, fc, spec, weights) for h in heads]
        rows.append(evaluate(f"single-sensor d{dev}", list(zip(dets, gts))))
    base = [report.baseline_detections.get(i) or input_fusion_infer(c, transforms, spec, weights)[0]
            for i, c in enumerate(frames)]
    rows.append(evaluate("input-fusion", list(zip(base, gts))))
    for label, flag in (("max", "max"), ("concat-k1", "concat1"), ("concat-k3", "concat3")):
        fc = fusion_config(cfg, spec, devices, flag)
        dets = [server_infer(h, transforms, fc, spec, weights) for h in heads]
        rows.append(evaluate(label, list(zip(dets, gts))))
    return rows


def cmd_run(cfg: PipelineConfig, out: Path) -> int:
    if cfg.section("runtime")["transport"] != "simulated":
        raise ConfigError("run uses simulated links; start 'serve' and 'edge' roles for socket transport")
    frames, truths = load_frames(cfg)
    spec, weights = build_network(cfg)
    transforms = resolve_transforms(cfg, frames, truths)
    devices = sorted(frames[0])
    fc = fusion_config(cfg, spec, devices)
    rt = cfg.section("runtime")
    report = simulate_pipeline(frames, transforms, spec, weights, fc, LinkModel(**cfg.section("link")),
                               CostModel(**cfg.section("cost")), rt["timeout_ms"], rt["colocated_baseline"])
    complete = {f.frame_id: f.complete for f in report.frames}
    results = {fid: (dets, complete[fid]) for fid, dets in report.detections.items()}
    write_json(out / "detections.json", detections_doc(results, spec))
    (out / "timing.json").write_text(report.to_json() + "\n")
    (out / "timing.txt").write_text(report.to_text())
    if truths is not None:
        rows = _accuracy_rows(frames, truths, transforms, spec, weights, cfg, devices, report)
        doc = eval_report(rows, report)
        (out / "report.json").write_text(report_json(doc))
        (out / "report.txt").write_text(report_text(doc))
        print(report_text(doc), end="")
    else:
        print(report.to_text(), end="")
    return 0


def _endpoint(s: str) -> tuple[str, int]:
    host, sep, port = s.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"endpoint {s!r} must look like HOST:PORT")
    return host or "127.0.0.1", int(port)


def cmd_serve(cfg: PipelineConfig, out: Path, listen: str) -> int:
    host, port = _endpoint(listen)
    frames, truths = load_frames(cfg)
    spec, weights = build_network(cfg)
    transforms = resolve_transforms(cfg, frames, truths)
    fc = fusion_config(cfg, spec, sorted(frames[0]))
    results = serve(host, port, transforms, fc, spec, weights, cfg.section("runtime")["timeout_ms"])
    write_json(out / "detections.json", detections_doc(results, spec))
    print(f"served {len(results)} frame(s); wrote {out / 'detections.json'}")
    return 0


def cmd_edge(cfg: PipelineConfig, connect: str, device_id: int) -> int:
    host, port = _endpoint(connect)
    frames, _ = load_frames(cfg)
    if device_id not in frames[0]:
        raise ConfigError(f"no device {device_id} in the configured inputs")
    spec, weights = build_network(cfg)
    sent = run_edge(host, port, device_id, [f[device_id] for f in frames], spec, weights)
    print(f"device {device_id}: sent {len(frames)} frame(s), {sent} bytes")
    return 0


BENCH_BANDWIDTHS = (100.0, 1000.0, 10000.0)
BENCH_SERVER_RATIOS = (5.0, 10.0, 20.0, 40.0)


def cmd_bench(cfg: PipelineConfig, out: Path) -> int:
    frames, truths = load_frames(cfg)
    spec, weights = build_network(cfg)
    transforms = resolve_transforms(cfg, frames, truths)
    fc = fusion_config(cfg, spec, sorted(frames[0]))
    rt = cfg.section("runtime")
    rows = []
    for bw in BENCH_BANDWIDTHS:
        for ratio in BENCH_SERVER_RATIOS:
            link = LinkModel(**{**cfg.section("link"), "bandwidth_mbps": bw})
            c = cfg.section("cost")
            cost = CostModel(**{**c, "server_macs_per_s": c["edge_macs_per_s"] * ratio})
            rep = simulate_pipeline(frames, transforms, spec, weights, fc, link, cost,
                                    rt["timeout_ms"], rt["colocated_baseline"])
            totals = [f.total_ms for f in rep.frames]
            rows.append({
                "bandwidth_mbps": bw, "server_ratio": ratio,
                "mean_total_ms": sum(totals) / len(totals) if totals else float("nan"),
                "mean_baseline_ms": sum(f.baseline_ms for f in rep.frames) / max(len(rep.frames), 1),
                "mean_speedup": rep.mean_speedup, "max_speedup": rep.max_speedup,
                "mean_edge_reduction": rep.mean_edge_reduction,
            })
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "bench.json", {"rows": rows})
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['bandwidth_mbps']:>8.0f} Mbit/s  server x{r['server_ratio']:<4g} "
              f"speedup {r['mean_speedup']:.2f}x  edge cut {100 * r['mean_edge_reduction']:.1f}%")
    return 0


def cmd_eval(detections: Path, truth: Path, out: Path | None, reference: int) -> int:
    doc = json.loads(Path(detections).read_text())
    truths = load_truth(truth)
    rng = doc.get("integration_range")
    pairs = []
    for fr in doc["frames"]:
        fid = int(fr["frame_id"])
        if fid >= len(truths):
            raise ValueError(f"detections reference frame {fid}, truth has {len(truths)} frame(s)")
        gt = reference_frame_boxes(truths[fid], reference)
        if rng:
            gt = boxes_within(gt, rng["lo"], rng["hi"])
        pairs.append(([Detection.from_dict(d) for d in fr["detections"]], gt))
    rep = eval_report([evaluate(Path(detections).stem, pairs)])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(report_json(rep))
        (out / "eval.txt").write_text(report_text(rep))
    print(report_text(rep), end="")
    return 0


# ---------------------------------------------------------------- dispatch

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scmii", description="Split-computing multi-LiDAR detection pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", metavar="PATH", help="pipeline config (JSON)")
        sp.add_argument("--seed", type=int, metavar="N", help="scene seed override")
        sp.add_argument("--devices", type=int, metavar="N", help="number of synthetic sensors")
        sp.add_argument("--fusion", choices=sorted(FUSION_FLAGS), help="integration method")
        sp.add_argument("--timeout-ms", type=float, metavar="N", help="frame barrier timeout")
        if out:
            sp.add_argument("--out", metavar="DIR", help="output directory")

    common(sub.add_parser("gen-scene", help="generate synthetic clouds and ground truth"))
    common(sub.add_parser("calibrate", help="NDT extrinsic calibration against the reference device"))
    common(sub.add_parser("run", help="full pipeline over simulated links with reports"))
    sp = sub.add_parser("serve", help="server role over stream sockets")
    common(sp)
    sp.add_argument("--listen", metavar="HOST:PORT", required=True)
    sp = sub.add_parser("edge", help="edge role over stream sockets")
    common(sp, out=False)
    sp.add_argument("--connect", metavar="HOST:PORT", required=True)
    sp.add_argument("--device-id", type=int, metavar="N", required=True)
    common(sub.add_parser("bench", help="timing sweeps over link and server throughput"))
    sp = sub.add_parser("eval", help="AP report for a detections file against ground truth")
    sp.add_argument("detections", metavar="DETECTIONS")
    sp.add_argument("truth", metavar="TRUTH")
    sp.add_argument("--out", metavar="DIR")
    return p


def _apply_flags(raw: dict, args) -> dict:
    raw = copy.deepcopy(raw)
    if getattr(args, "seed", None) is not None:
        raw.setdefault("scene", {})["seed"] = args.seed
    if getattr(args, "devices", None) is not None:
        raw.setdefault("scene", {})["devices"] = args.devices
    if getattr(args, "fusion", None) is not None:
        raw.setdefault("fusion", {})["method"] = args.fusion
    if getattr(args, "timeout_ms", None) is not None:
        raw.setdefault("runtime", {})["timeout_ms"] = args.timeout_ms
    if getattr(args, "out", None) is not None:
        raw.setdefault("output", {})["dir"] = args.out
    return raw


def _config_for(args) -> PipelineConfig:
    raw, base = {}, Path(".")
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        base = path.parent
    raw = _apply_flags(raw, args)
    return config_from_dict(raw, base)


def setup_logging() -> None:
    level = os.environ.get("SCMII_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if level not in levels:
        log.warning("unknown SCMII_LOG level %r; using warn", level)


def main(argv: Sequence[str] | None = None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        if args.command == "eval":
            return cmd_eval(Path(args.detections), Path(args.truth), Path(args.out) if args.out else None, 0)
        cfg = _config_for(args)
        out = Path(cfg.section("output")["dir"])
        if args.command == "gen-scene":
            return cmd_gen_scene(cfg, out)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, out)
        if args.command == "run":
            return cmd_run(cfg, out)
        if args.command == "serve":
            return cmd_serve(cfg, out, args.listen)
        if args.command == "edge":
            return cmd_edge(cfg, args.connect, args.device_id)
        if args.command == "bench":
            return cmd_bench(cfg, out)
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"scmii {args.command}: error: {e}", file=sys.stderr)
        return 1
    parser.print_usage(sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
