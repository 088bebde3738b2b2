"""Command line front door: convert, optimize, calibrate, quantize, detect,
eval, bench, dataset and the end-to-end pipeline.

Flags can come from an INI config file (section name = subcommand); explicit
command-line flags win. JETFORGE_SEED is the seed fallback when neither is
given. Exit codes: 0 success, 1 validation/diagnostic failure, 2 I/O or
usage errors.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, bench, data, detect, evaluation, executor
from . import frontend, passes, quant, tensorio
from . import graph as graphlib

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2

IMAGE_EXTENSIONS = (".ppm", ".pgm", ".f32", ".raw", ".bin", ".tensor")


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _tool_meta(config: dict) -> dict:
    """Version + effective-config echo for output files. Output locations are
    dropped and input paths reduced to basenames so reruns with the same
    inputs produce byte-identical artifacts wherever they land."""
    echo = {}
    for key, value in config.items():
        if key in ("output", "out_dir"):
            continue
        if isinstance(value, str) and (os.sep in value or value.endswith((
                ".cfg", ".weights", ".uir", ".json", ".jsonl", ".csv"))):
            value = os.path.basename(value)
        echo[key] = value
    return {"tool": f"jetforge {__version__}", "config": echo}


class ConfigFile:
    def __init__(self, path: str | None):
        self.parser = configparser.ConfigParser()
        if path:
            if not os.path.exists(path):
                raise CliError(f"config file not found: {path}")
            self.parser.read(path)

    def fill(self, args: argparse.Namespace, section: str, defaults: dict) -> dict:
        """CLI flag > config file > default. Returns the effective map."""
        effective = {}
        for key, default in defaults.items():
            flag = getattr(args, key, None)
            if flag is not None:
                effective[key] = flag
            elif self.parser.has_option(section, key):
                raw = self.parser.get(section, key)
                effective[key] = type(default)(raw) if default is not None else raw
            else:
                effective[key] = default
            setattr(args, key, effective[key])
        return effective


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("JETFORGE_SEED")
    if env is not None:
        return int(env)
    return 0


def _require_file(path, what: str):
    if not path or not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _load_model(path) -> graphlib.Graph:
    _require_file(path, "model container")
    return graphlib.load_container(path)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        digest.update(f.read())
    return digest.hexdigest()


def _list_images(directory) -> list[str]:
    _require_file(directory, "image directory")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTENSIONS))
    if not names:
        raise CliError(f"no images (ppm/pgm/raw) in {directory}")
    return [os.path.join(directory, n) for n in names]


def _load_calibration_tensors(directory, graph: graphlib.Graph) -> list[np.ndarray]:
    shape = graph.input_shape
    tensors = []
    for path in _list_images(directory):
        x = tensorio.load_input(path, channels=shape.c)
        if x.ndim == 4 and tuple(x.shape) == tuple(shape):
            tensors.append(x)
        else:
            img = x[0].transpose(1, 2, 0) if x.ndim == 4 else x
            boxed, _ = detect.letterbox(img, shape.w, shape.h)
            tensors.append(boxed)
    return tensors


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_convert(args, config: ConfigFile) -> int:
    effective = config.fill(args, "convert", {"cfg": None, "weights": None, "output": None})
    _require_file(args.cfg, "cfg file")
    _require_file(args.weights, "weights file")
    if not args.output:
        raise CliError("convert needs -o/--output")
    with open(args.cfg, "r", encoding="utf-8") as f:
        graph = frontend.parse_cfg(f.read())
    with open(args.weights, "rb") as f:
        graph = frontend.load_weights(f.read(), graph)
    diags = graphlib.validate(graph)
    if diags:
        for d in diags:
            print(f"invalid: {d}", file=sys.stderr)
        return EXIT_INVALID
    graphlib.save_container(graph, args.output, _tool_meta(effective))
    stats = frontend.model_stats(graph)
    print(f"wrote {args.output}")
    print(f"nodes: {sum(stats.node_counts.values())} "
          f"({', '.join(f'{k}={v}' for k, v in sorted(stats.node_counts.items()))})")
    for act, count in sorted(stats.activation_counts.items()):
        print(f"activations[{act}]: {count}")
    print(f"parameters: {stats.parameter_count}")
    print(f"conv MACs: {stats.total_macs}")
    return EXIT_OK


def cmd_optimize(args, config: ConfigFile) -> int:
    effective = config.fill(args, "optimize", {
        "model": None, "output": None, "pass_names": "fuse-conv-bn", "report": None})
    graph = _load_model(args.model)
    names = [p.strip() for p in args.pass_names.split(",") if p.strip()]
    graph, reports = passes.apply_passes(graph, names)
    diags = graphlib.validate(graph)
    if diags:
        for d in diags:
            print(f"invalid after passes: {d}", file=sys.stderr)
        return EXIT_INVALID
    if args.output:
        graphlib.save_container(graph, args.output, _tool_meta(effective))
        print(f"wrote {args.output}")
    doc = {"meta": _tool_meta(effective), "reports": [r.to_dict() for r in reports]}
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    for r in reports:
        print(f"pass {r.name}: nodes {r.nodes_before} -> {r.nodes_after}, "
              f"mac delta {r.mac_delta}")
        for w in r.warnings:
            print(f"WARNING: {w}")
    return EXIT_OK


def cmd_calibrate(args, config: ConfigFile) -> int:
    effective = config.fill(args, "calibrate", {
        "model": None, "images": None, "output": None,
        "count": 1000, "bins": 2048, "levels": 256, "seed": None})
    seed = _resolve_seed(args)
    effective["seed"] = seed
    graph = _load_model(args.model)
    tensors = _load_calibration_tensors(args.images, graph)
    cfg = quant.CalibrationConfig(image_count=int(args.count), seed=seed,
                                  bin_count=int(args.bins), levels=int(args.levels))
    qparams = quant.calibrate_graph(graph, tensors, cfg)
    if not args.output:
        raise CliError("calibrate needs -o/--output")
    meta = {**_tool_meta(effective),
            "images_used": min(len(tensors), cfg.image_count),
            "bin_count": cfg.bin_count, "seed": seed}
    quant.save_ranges(args.output, qparams, meta)
    print(f"wrote {args.output} ({len(qparams)} tensor ranges)")
    return EXIT_OK


def cmd_quantize(args, config: ConfigFile) -> int:
    effective = config.fill(args, "quantize", {"model": None, "ranges": None, "output": None})
    graph = _load_model(args.model)
    _require_file(args.ranges, "ranges file")
    qparams, _meta = quant.load_ranges(args.ranges)
    out = graph.copy()
    out.qparams = qparams
    missing = [t for t in ([out.input_id] + [n.output for n in out.nodes])
               if t not in qparams]
    if missing:
        print(f"ranges file misses tensors: {', '.join(missing[:8])}", file=sys.stderr)
        return EXIT_INVALID
    graphlib.save_container(out, args.output, _tool_meta(effective))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_detect(args, config: ConfigFile) -> int:
    effective = config.fill(args, "detect", {
        "model": None, "output": None, "mode": "f32",
        "conf": detect.DEMO_CONF_THRESHOLD, "nms": detect.DEFAULT_NMS_IOU})
    graph = _load_model(args.model)
    if args.mode == executor.I8 and graph.qparams is None:
        raise CliError("i8 mode needs a quantized container (run quantize first)")
    per_image = {}
    for path in args.images:
        _require_file(path, "image")
        img_tensor = tensorio.load_input(path, channels=graph.input_shape.c)
        img = img_tensor[0].transpose(1, 2, 0)
        dets = detect.detect_image(graph, img, mode=args.mode,
                                   conf_threshold=float(args.conf),
                                   nms_iou=float(args.nms))
        per_image[os.path.basename(path)] = dets
    if args.output:
        detect.write_detections_jsonl(args.output, per_image, _tool_meta(effective))
        print(f"wrote {args.output}")
    else:
        for image, dets in per_image.items():
            for d in dets:
                print(json.dumps({"image": image, **d}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, config: ConfigFile) -> int:
    effective = config.fill(args, "eval", {
        "dets": None, "manifest": None, "output": None,
        "iou": 0.5, "ignore_eval": "on"})
    _require_file(args.dets, "detections file")
    _require_file(args.manifest, "manifest")
    detections = detect.read_detections_jsonl(args.dets)
    manifest = data.load_manifest(args.manifest)
    report = evaluation.evaluate(detections, manifest, iou_thresh=float(args.iou),
                                 apply_ignore=(args.ignore_eval == "on"))
    print(report.table())
    if args.output:
        evaluation.save_report(args.output, report, _tool_meta(effective))
        print(f"wrote {args.output}")
    return EXIT_OK


def cmd_bench(args, config: ConfigFile) -> int:
    effective = config.fill(args, "bench", {
        "model": None, "output": None, "mode": "f32", "iters": bench.DEFAULT_ITERS,
        "warmup": bench.DEFAULT_WARMUP, "variant": "model"})
    if int(args.iters) < 1:
        raise CliError("need at least 1 iteration")
    graph = _load_model(args.model)
    if args.mode == executor.I8 and graph.qparams is None:
        raise quant.MissingRanges("i8 bench needs a quantized container")
    stats = bench.run_bench(graph, args.mode, iters=int(args.iters),
                            warmup=int(args.warmup), variant=args.variant)
    if args.output:
        bench.write_csv(args.output, [stats], _tool_meta(effective))
        print(f"wrote {args.output}")
    print(f"{stats.variant}/{stats.mode}: median {stats.median_ns / 1e6:.3f} ms "
          f"(p5 {stats.p5_ns / 1e6:.3f}, p95 {stats.p95_ns / 1e6:.3f}), "
          f"nodes {stats.nodes}, macs {stats.macs}")
    return EXIT_OK


def cmd_dataset_merge(args, config: ConfigFile) -> int:
    effective = config.fill(args, "dataset-merge", {"output": None, "default_size": None})
    lists = []
    for path in args.coco or []:
        _require_file(path, "coco json")
        lists.append(data.ingest_coco(path))
    default_size = None
    if args.default_size:
        w, h = args.default_size.lower().split("x")
        default_size = (int(w), int(h))
    for directory in args.visdrone or []:
        _require_file(directory, "visdrone annotation dir")
        lists.append(data.ingest_visdrone(
            directory, images_dir=args.visdrone_images,
            default_size=default_size, categories_path=args.category_map))
    if not lists:
        raise CliError("dataset merge needs --coco and/or --visdrone inputs")
    manifest = data.merge(lists)
    data.save_manifest(args.output, manifest, _tool_meta(effective))
    print(f"wrote {args.output}")
    print(json.dumps(manifest.summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_dataset_anchors(args, config: ConfigFile) -> int:
    effective = config.fill(args, "dataset-anchors", {
        "manifest": None, "output": None, "k": 9, "net_w": 608, "net_h": 352,
        "seed": None})
    seed = _resolve_seed(args)
    effective["seed"] = seed
    _require_file(args.manifest, "manifest")
    manifest = data.load_manifest(args.manifest)
    boxes = data.anchor_boxes_from_manifest(manifest, int(args.net_w), int(args.net_h))
    result = data.kmeans_anchors(boxes, int(args.k), seed=seed)
    doc = {
        "meta": _tool_meta(effective),
        "anchors": [[round(float(w), 4), round(float(h), 4)] for w, h in result.anchors],
        "mean_iou": result.mean_iou,
        "iterations": result.iterations,
    }
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"wrote {args.output}")
    print(f"mean IoU: {result.mean_iou:.4f} over {len(boxes)} boxes")
    for w, h in result.anchors:
        print(f"  {w:.1f} x {h:.1f}")
    return EXIT_OK


def cmd_pipeline(args, config: ConfigFile) -> int:
    effective = config.fill(args, "pipeline", {
        "cfg": None, "weights": None, "calib_dir": None, "out_dir": None,
        "eval_manifest": None, "eval_images": None,
        "count": 200, "iters": 5, "warmup": 1, "seed": None})
    seed = _resolve_seed(args)
    effective["seed"] = seed
    out_dir = args.out_dir
    if not out_dir:
        raise CliError("pipeline needs --out-dir")
    os.makedirs(out_dir, exist_ok=True)
    stage = "convert"
    try:
        _require_file(args.cfg, "cfg file")
        _require_file(args.weights, "weights file")
        with open(args.cfg, "r", encoding="utf-8") as f:
            graph = frontend.parse_cfg(f.read())
        with open(args.weights, "rb") as f:
            graph = frontend.load_weights(f.read(), graph)
        diags = graphlib.validate(graph)
        if diags:
            raise CliError("; ".join(map(str, diags)), code=EXIT_INVALID)
        model_path = os.path.join(out_dir, "model.uir")
        graphlib.save_container(graph, model_path, _tool_meta(effective))

        stage = "optimize"
        optimized, reports = passes.apply_passes(
            graph, ["fuse-conv-bn", "decompose-leaky", "fold-scale"])
        opt_path = os.path.join(out_dir, "model_opt.uir")
        graphlib.save_container(optimized, opt_path, _tool_meta(effective))

        stage = "calibrate"
        _require_file(args.calib_dir, "calibration directory")
        tensors = _load_calibration_tensors(args.calib_dir, optimized)
        cal_cfg = quant.CalibrationConfig(image_count=int(args.count), seed=seed)
        qparams = quant.calibrate_graph(optimized, tensors, cal_cfg)
        ranges_path = os.path.join(out_dir, "ranges.json")
        quant.save_ranges(ranges_path, qparams,
                          {**_tool_meta(effective), "seed": seed,
                           "images_used": min(len(tensors), cal_cfg.image_count),
                           "bin_count": cal_cfg.bin_count})

        stage = "quantize"
        quantized = optimized.copy()
        quantized.qparams = qparams
        quant_path = os.path.join(out_dir, "model_i8.uir")
        graphlib.save_container(quantized, quant_path, _tool_meta(effective))

        stage = "bench"
        iters, warmup = int(args.iters), int(args.warmup)
        rows = [
            bench.run_bench(graph, executor.F32, iters, warmup, variant="baseline"),
            bench.run_bench(optimized, executor.F32, iters, warmup, variant="optimized"),
            bench.run_bench(optimized, executor.F16, iters, warmup, variant="optimized"),
            bench.run_bench(quantized, executor.I8, iters, warmup, variant="optimized"),
        ]
        bench_path = os.path.join(out_dir, "bench.csv")
        bench.write_csv(bench_path, rows, _tool_meta(effective))

        stage = "eval"
        produced = [model_path, opt_path, ranges_path, quant_path, bench_path]
        if args.eval_manifest:
            _require_file(args.eval_manifest, "eval manifest")
            manifest = data.load_manifest(args.eval_manifest)
            images_dir = args.eval_images or os.path.dirname(args.eval_manifest)
            for mode, model in ((executor.F32, graph), (executor.I8, quantized)):
                per_image = {}
                for rec in manifest.records:
                    img_path = os.path.join(images_dir, rec.image)
                    _require_file(img_path, "eval image")
                    tensor = tensorio.load_input(img_path, channels=model.input_shape.c)
                    img = tensor[0].transpose(1, 2, 0)
                    per_image[rec.image] = detect.detect_image(
                        model, img, mode=mode,
                        conf_threshold=detect.EVAL_CONF_THRESHOLD)
                dets_path = os.path.join(out_dir, f"dets_{mode}.jsonl")
                detect.write_detections_jsonl(dets_path, per_image, _tool_meta(effective))
                dets = detect.read_detections_jsonl(dets_path)
                report = evaluation.evaluate(dets, manifest)
                report_path = os.path.join(out_dir, f"eval_{mode}.json")
                evaluation.save_report(report_path, report, _tool_meta(effective))
                produced.extend([dets_path, report_path])
                print(f"eval[{mode}] mAP@0.5 = {report.map50:.4f}")

        manifest_path = os.path.join(out_dir, "pipeline_manifest.json")
        doc = {
            "meta": _tool_meta(effective),
            "files": {os.path.basename(p): _sha256(p) for p in produced},
            "pass_reports": [r.to_dict() for r in reports],
        }
        with open(manifest_path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"pipeline complete: {len(produced) + 1} artifacts in {out_dir}")
        return EXIT_OK
    except CliError as e:
        raise CliError(f"pipeline aborted at stage '{stage}': {e}", code=e.code) from e
    except Exception as e:
        raise CliError(f"pipeline aborted at stage '{stage}': {e}",
                       code=EXIT_INVALID) from e


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jetforge",
        description="Darknet detector optimization pipeline at desk scale")
    parser.add_argument("--version", action="version", version=f"jetforge {__version__}")
    parser.add_argument("--config", help="INI config file ([section] per subcommand)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="cfg + weights -> model container")
    p.add_argument("--cfg")
    p.add_argument("--weights")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("optimize", help="apply rewrite passes")
    p.add_argument("-m", "--model")
    p.add_argument("--passes", dest="pass_names",
                   help="comma list: fuse-conv-bn,decompose-leaky,fold-scale,relu-swap")
    p.add_argument("-o", "--output")
    p.add_argument("--report", help="write pass reports as JSON")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("calibrate", help="collect histograms and entropy-calibrate ranges")
    p.add_argument("-m", "--model")
    p.add_argument("--images", help="directory of calibration images")
    p.add_argument("--count", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="attach calibrated ranges to a container")
    p.add_argument("-m", "--model")
    p.add_argument("--ranges")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("detect", help="run detection on images")
    p.add_argument("-m", "--model")
    p.add_argument("-i", "--images", nargs="+", required=True)
    p.add_argument("--mode", choices=executor.MODES)
    p.add_argument("--conf", type=float)
    p.add_argument("--nms", type=float)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against a manifest")
    p.add_argument("--dets")
    p.add_argument("--manifest")
    p.add_argument("--iou", type=float)
    p.add_argument("--ignore-eval", dest="ignore_eval", choices=("on", "off"))
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency microbenchmark")
    p.add_argument("-m", "--model")
    p.add_argument("--mode", choices=executor.MODES)
    p.add_argument("--iters", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--variant")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dataset", help="dataset tooling")
    dsub = p.add_subparsers(dest="dataset_command", required=True)

    dm = dsub.add_parser("merge", help="ingest + merge COCO/Visdrone annotations")
    dm.add_argument("--coco", nargs="*", default=None)
    dm.add_argument("--visdrone", nargs="*", default=None)
    dm.add_argument("--visdrone-images", dest="visdrone_images")
    dm.add_argument("--category-map", dest="category_map")
    dm.add_argument("--default-size", dest="default_size", help="WxH for images without files")
    dm.add_argument("-o", "--output", required=True)
    dm.set_defaults(func=cmd_dataset_merge)

    da = dsub.add_parser("anchors", help="recluster anchors over a manifest")
    da.add_argument("--manifest")
    da.add_argument("-k", type=int)
    da.add_argument("--net-w", dest="net_w", type=int)
    da.add_argument("--net-h", dest="net_h", type=int)
    da.add_argument("--seed", type=int)
    da.add_argument("-o", "--output")
    da.set_defaults(func=cmd_dataset_anchors)

    p = sub.add_parser("pipeline", help="convert -> optimize -> calibrate -> quantize -> bench -> eval")
    p.add_argument("--cfg")
    p.add_argument("--weights")
    p.add_argument("--calib-dir", dest="calib_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--eval-manifest", dest="eval_manifest")
    p.add_argument("--eval-images", dest="eval_images")
    p.add_argument("--count", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = ConfigFile(args.config)
        return args.func(args, config)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (frontend.FrontendError, graphlib.GraphError, passes.PassError,
            quant.QuantError, data.DataError, evaluation.EvalError,
            detect.DetectError, bench.BenchError, executor.ExecutionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
