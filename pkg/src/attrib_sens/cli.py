"""Command-line entry point: ``attrib-sens <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema
import numpy as np

from . import attribution as at
from . import data, harness, metrics, nn, reports
from .tensorio import read_tensor, write_tensor

logger = logging.getLogger("attrib_sens")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
THREADS_ENV = "ATTRIB_SENS_THREADS"
KINDS = ("noise_invariance", "smoothing_trend", "hyperparam_sensitivity", "accuracy_variance",
         "global_std", "object_size_study")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending config path."""


# ----------------------------------------------------------------------
# schema and validation

_POS_INT = {"type": "integer", "minimum": 1}
_VALUE = {"type": ["number", "string", "boolean"]}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["dataset", "models", "experiments", "output"],
    "additionalProperties": False,
    "properties": {
        "description": {"type": "string"},
        "dataset": {
            "type": "object",
            "required": ["count", "seed"],
            "additionalProperties": False,
            "properties": {"count": _POS_INT, "seed": {"type": "integer", "minimum": 0},
                           "test_count": _POS_INT},
        },
        "models": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "robust", "train"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "robust": {"type": "boolean"},
                    "seed": {"type": "integer", "minimum": 0},
                    "train": {"type": "object"},
                    "pgd": {"type": "object"},
                },
            },
        },
        "experiments": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "kind"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "kind": {"enum": list(KINDS)},
                    "models": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    "method": {"type": ["object", "string"]},
                    "sweep": {
                        "type": "object",
                        "required": ["field"],
                        "additionalProperties": False,
                        "properties": {
                            "field": {"type": "string"},
                            "reference": _VALUE,
                            "variants": {"type": "array", "items": _VALUE},
                            "values": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                        },
                    },
                    "metrics": {"type": "array", "items": {"enum": list(harness.ALL_METRICS)}},
                    "images": _POS_INT,
                    "sigma": {"type": "number", "minimum": 0},
                    "seed": {"type": "integer", "minimum": 0},
                    "ball_sizes": {"type": "array", "items": _POS_INT, "minItems": 1},
                    "patch_sizes": {"type": "array", "items": _POS_INT, "minItems": 1},
                    "stride": _POS_INT,
                    "guided": {"type": "boolean"},
                },
            },
        },
        "output": {
            "type": "object",
            "required": ["dir"],
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "render": {"type": "boolean"}},
        },
    },
}


def format_path(parts):
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _dataclass_from(cls, obj, where):
    known = {f.name for f in fields(cls)}
    extra = sorted(set(obj) - known)
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {extra}; expected a subset of {sorted(known)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class ModelEntry:
    id: str
    robust: bool
    train: nn.TrainConfig
    pgd: nn.PGDConfig | None
    seed: int = 0


@dataclass
class ExperimentConfig:
    path: Path
    raw: dict
    dataset_count: int
    dataset_seed: int
    test_count: int
    models: list
    experiments: list
    output_dir: Path
    render: bool

    def model(self, model_id):
        for m in self.models:
            if m.id == model_id:
                return m
        raise KeyError(model_id)

    @property
    def base_dir(self):
        return self.path.parent


def validate_config(raw, path=Path("config.json")):
    """Schema check plus cross-field rules; returns an ExperimentConfig or raises ConfigError."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        e = errors[0]
        raise ConfigError(f"{format_path(e.absolute_path)}: {e.message}")

    models = []
    seen = set()
    for i, m in enumerate(raw["models"]):
        if m["id"] in seen:
            raise ConfigError(f"models[{i}].id: duplicate model id {m['id']!r}")
        seen.add(m["id"])
        train = _dataclass_from(nn.TrainConfig, m["train"], f"models[{i}].train")
        pgd = None
        if m["robust"]:
            pgd = _dataclass_from(nn.PGDConfig, m.get("pgd", {}), f"models[{i}].pgd")
        elif "pgd" in m:
            raise ConfigError(f"models[{i}].pgd: only allowed when robust is true")
        models.append(ModelEntry(m["id"], m["robust"], train, pgd, m.get("seed", 0)))

    names = set()
    experiments = []
    for i, e in enumerate(raw["experiments"]):
        where = f"experiments[{i}]"
        if e["name"] in names:
            raise ConfigError(f"{where}.name: duplicate experiment name {e['name']!r}")
        names.add(e["name"])
        for j, mid in enumerate(e.get("models", [])):
            if mid not in seen:
                raise ConfigError(f"{where}.models[{j}]: unknown model id {mid!r}; declared: {sorted(seen)}")
        experiments.append(_validate_experiment(e, where))

    count = raw["dataset"]["count"]
    if count < len(data.SHAPES):
        raise ConfigError(f"dataset.count: {count} cannot cover {len(data.SHAPES)} classes")
    test_count = raw["dataset"].get("test_count", max(len(data.SHAPES), count // 4))
    for i, e in enumerate(experiments):
        if e.get("images", 0) > test_count:
            raise ConfigError(f"experiments[{i}].images: {e['images']} exceeds dataset.test_count {test_count}")
    out_dir = (path.parent / raw["output"]["dir"]).resolve()
    return ExperimentConfig(path, raw, count, raw["dataset"]["seed"], test_count, models, experiments,
                            out_dir, raw["output"].get("render", False))


def _validate_experiment(e, where):
    kind = e["kind"]
    e = dict(e)
    if kind == "object_size_study":
        for key in ("ball_sizes", "patch_sizes"):
            if key not in e:
                raise ConfigError(f"{where}.{key}: required for {kind}")
        return e
    try:
        e["method_spec"] = at.parse_method(e.get("method", {"Gradient": {}}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.method: {exc}") from None
    if kind == "noise_invariance":
        return e
    sweep = e.get("sweep")
    if sweep is None:
        raise ConfigError(f"{where}.sweep: required for {kind}")
    if kind == "smoothing_trend":
        if not isinstance(e["method_spec"], (at.SmoothGrad, at.IntegratedGradients)):
            raise ConfigError(f"{where}.method: smoothing_trend needs SmoothGrad or IntegratedGradients")
        if len(e.get("models", [])) != 2:
            raise ConfigError(f"{where}.models: smoothing_trend needs exactly [regular, robust]")
        if "values" not in sweep:
            raise ConfigError(f"{where}.sweep.values: required for smoothing_trend")
        return e
    for key in ("reference", "variants"):
        if key not in sweep:
            raise ConfigError(f"{where}.sweep.{key}: required for {kind}")
    field_names = {f.name for f in fields(e["method_spec"])}
    if field_names and sweep["field"] not in field_names:
        raise ConfigError(f"{where}.sweep.field: {sweep['field']!r} is not a field of "
                          f"{at.method_name(e['method_spec'])} ({sorted(field_names)})")
    default_metrics = harness.SIMILARITY_METRICS if kind == "hyperparam_sensitivity" else harness.ACCURACY_METRICS
    try:
        spec = harness.SweepSpec(e["method_spec"], sweep["field"], sweep["reference"], sweep["variants"],
                                 tuple(e.get("models", ())), tuple(e.get("metrics", default_metrics)))
        for v in spec.values:
            spec.method_at(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.sweep: {exc}") from None
    if kind != "hyperparam_sensitivity" and not set(spec.metrics) & set(harness.ACCURACY_METRICS):
        raise ConfigError(f"{where}.metrics: {kind} needs at least one accuracy metric")
    e["sweep_spec"] = spec
    return e


def load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return validate_config(raw, path)


# ----------------------------------------------------------------------
# shared steps


def training_split(cfg):
    return data.generate_dataset(cfg.dataset_count, cfg.dataset_seed)


def test_split(cfg, count=None):
    count = cfg.test_count if count is None else count
    return [data.render_sample(cfg.dataset_seed, cfg.dataset_count + i) for i in range(count)]


def model_dir(cfg, model_id):
    return cfg.output_dir / "models" / model_id


def train_model(cfg, model_id, train_samples=None):
    entry = cfg.model(model_id)
    samples = train_samples if train_samples is not None else training_split(cfg)
    images, labels, _ = data.stack(samples)
    model = nn.MicroClassifier(seed=entry.seed, input_mean=data.dataset_mean_color(images),
                               input_std=data.dataset_std_color(images))
    start = time.perf_counter()
    nn.train(model, images, labels, entry.train, pgd=entry.pgd, log_every=1)
    model.provenance["model_id"] = model_id
    model.provenance["dataset"] = {"count": cfg.dataset_count, "seed": cfg.dataset_seed}
    directory = model_dir(cfg, model_id)
    model.save(directory)
    logger.info("trained %s in %.1fs -> %s", model_id, time.perf_counter() - start, directory)
    return model


def load_or_train(cfg, model_id):
    directory = model_dir(cfg, model_id)
    if (directory / "manifest.json").exists():
        return nn.MicroClassifier.load(directory)
    logger.info("model %s not found under %s; training it", model_id, directory)
    return train_model(cfg, model_id)


def resolve_threads(value):
    if value is not None:
        threads = value
    else:
        env = os.environ.get(THREADS_ENV, "").strip()
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: expected an integer, got {env!r}") from None
    if threads < 1:
        raise ConfigError(f"--threads: must be >= 1, got {threads}")
    return threads


def run_experiment(e, models, test_samples, threads):
    items = harness.items_from_samples(test_samples[:e.get("images", len(test_samples))])
    model_ids = e.get("models") or list(models)
    selected = {m: models[m] for m in model_ids}
    kind = e["kind"]
    if kind == "noise_invariance":
        return harness.run_noise_invariance(selected, items, e["method_spec"], e.get("sigma", 0.1),
                                            e.get("seed", 0), threads)
    if kind == "smoothing_trend":
        regular_id, robust_id = model_ids
        return harness.run_smoothing_trend(models[regular_id], models[robust_id], items, e["method_spec"],
                                           e["sweep"]["values"], regular_id, robust_id, threads,
                                           e.get("guided", True))
    if kind == "object_size_study":
        rows, agg, maps = [], {}, {}
        for mid in model_ids:
            rep = harness.run_object_size_study(models[mid], e["ball_sizes"], e["patch_sizes"],
                                                e.get("stride", 3), mid, threads=threads)
            rows.extend(rep.rows)
            agg[mid] = rep.aggregates
            maps[mid] = rep.maps
        out = harness.SensitivityReport(kind, rows, agg)
        out.maps = maps
        return out
    runner = {
        "hyperparam_sensitivity": harness.run_hyperparam_sensitivity,
        "accuracy_variance": harness.run_accuracy_variance_per_image,
        "global_std": harness.run_global_accuracy_std,
    }[kind]
    spec = e["sweep_spec"]
    if not spec.models:
        spec = harness.SweepSpec(spec.method, spec.swept_field, spec.reference_value, spec.variant_values,
                                 tuple(model_ids), spec.metrics)
    return runner(spec, selected, items, threads)


def experiment_meta(e):
    meta = {"name": e["name"], "kind": e["kind"]}
    for key in ("models", "method", "sweep", "metrics", "images", "sigma", "seed", "ball_sizes",
                "patch_sizes", "stride"):
        if key in e:
            meta[key] = e[key]
    return meta


# ----------------------------------------------------------------------
# subcommands


def _config_with_out(args):
    cfg = load_config(args.config)
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out).resolve()
    return cfg


def cmd_gen_data(args):
    cfg = _config_with_out(args)
    out = cfg.output_dir / "data"
    train_manifest = data.write_dataset(training_split(cfg), out / "train")
    test_manifest = data.write_dataset(test_split(cfg), out / "test")
    print(json.dumps({"train": str(train_manifest), "test": str(test_manifest)}))
    return EXIT_OK


def cmd_train(args):
    cfg = _config_with_out(args)
    ids = [m.id for m in cfg.models] if args.model == "all" else [args.model]
    for model_id in ids:
        try:
            cfg.model(model_id)
        except KeyError:
            raise ConfigError(f"--model: unknown model id {model_id!r}; declared: "
                              f"{[m.id for m in cfg.models]}") from None
    samples = training_split(cfg)
    test = test_split(cfg)
    images, labels, _ = data.stack(test)
    for model_id in ids:
        model = train_model(cfg, model_id, samples)
        summary = {"model": model_id, "dir": str(model_dir(cfg, model_id)),
                   "test_accuracy": nn.accuracy(model, images, labels)}
        print(json.dumps(summary))
    return EXIT_OK


def _load_model(path):
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"--model: no manifest.json in {path}")
    return nn.MicroClassifier.load(path)


def _load_image(path, model):
    img = read_tensor(path)
    if img.shape != (model.input_side, model.input_side, 3):
        raise ValueError(f"--image: shape {img.shape} does not match model input "
                         f"({model.input_side}, {model.input_side}, 3)")
    return img.astype(model.dtype)


def cmd_attribute(args):
    try:
        spec = at.parse_method(json.loads(args.method))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--method: invalid JSON ({exc.msg})") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"--method: {exc}") from None
    model = _load_model(args.model)
    image = _load_image(args.image, model)
    cls = int(np.argmax(model.forward(image))) if args.target_class is None else args.target_class
    amap = at.attribute(model, image, cls, spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out, amap.values.astype(np.float64))
    if args.render:
        reports.write_heatmap_png(amap.values, out.with_suffix(".png"), amap.range_tag)
    print(json.dumps({"heatmap": str(out), "class": cls, "range": amap.range_tag}))
    return EXIT_OK


def cmd_evaluate(args):
    model = _load_model(args.model)
    image = _load_image(args.image, model)
    heatmap = read_tensor(args.heatmap)
    mask = read_tensor(args.mask)
    if heatmap.shape != image.shape[:2] or mask.shape != image.shape[:2]:
        raise ValueError(f"heatmap {heatmap.shape} and mask {mask.shape} must be {image.shape[:2]}")
    cls = int(np.argmax(model.forward(image))) if args.target_class is None else args.target_class
    scores = metrics.accuracy_scores(model, image, heatmap, cls, mask, steps=args.steps)
    print(reports.dumps_json(scores.as_dict()), end="")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config_with_out(args)
    threads = resolve_threads(args.threads)
    only = set(args.only or [])
    unknown = only - {e["name"] for e in cfg.experiments}
    if unknown:
        raise ConfigError(f"--only: unknown experiment(s) {sorted(unknown)}")
    experiments = [e for e in cfg.experiments if not only or e["name"] in only]
    needed = []
    for e in experiments:
        for mid in e.get("models") or [m.id for m in cfg.models]:
            if mid not in needed:
                needed.append(mid)
    models = {mid: load_or_train(cfg, mid) for mid in needed}
    test = test_split(cfg)
    report_dir = cfg.output_dir / "reports"
    for e in experiments:
        start = time.perf_counter()
        rep = run_experiment(e, models, test, threads)
        reports.write_report(rep.rows, rep.aggregates, report_dir / e["name"], experiment_meta(e))
        logger.info("experiment %s: %d rows in %.1fs", e["name"], len(rep.rows), time.perf_counter() - start)
        if cfg.render and e["kind"] == "object_size_study":
            for mid, rep_maps in rep.maps.items():
                for size, by_patch in rep_maps.items():
                    for p, amap in by_patch.items():
                        reports.write_heatmap_png(amap, cfg.output_dir / "heatmaps" / e["name"]
                                                  / f"{mid}_disk{size}_p{p}.png")
    print(json.dumps({"reports": str(report_dir), "experiments": [e["name"] for e in experiments]}))
    return EXIT_OK


def cmd_report(args):
    from . import plotting

    in_dir = Path(args.input)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"--in: {in_dir} is not a directory")
    out_dir = Path(args.out) if args.out else in_dir / "summary"
    csvs = sorted(p for p in in_dir.glob("*.csv"))
    if not csvs:
        raise FileNotFoundError(f"--in: no report CSV files in {in_dir}")
    all_rows, merged = [], {}
    for csv_path in csvs:
        rows = reports.read_report_rows(csv_path)
        doc = reports.read_report_json(csv_path.with_suffix(".json"))
        all_rows.extend(rows)
        merged[csv_path.stem] = doc
    reports.write_report(all_rows, {name: d.get("aggregates") for name, d in merged.items()},
                         out_dir / "summary", {"sources": [p.name for p in csvs]})
    figures = []
    global_entries = {}
    for name, doc in merged.items():
        agg = doc.get("aggregates")
        if not agg:
            continue
        kind = doc.get("kind")
        fig_path = out_dir / "figures" / f"{name}.png"
        if kind == "smoothing_trend":
            figures.append(plotting.plot_trend(agg, fig_path, name))
        elif kind == "noise_invariance":
            figures.append(plotting.plot_similarity_bars(agg["mean"], fig_path, name))
        elif "similarity" in agg:
            figures.append(plotting.plot_similarity_bars(agg["similarity"], fig_path, name))
        if "global_std" in agg and kind != "smoothing_trend":
            global_entries[name] = agg["global_std"]["global"]
        if kind == "object_size_study":
            for mid, model_agg in agg.items():
                figures.append(plotting.plot_object_size(model_agg["max_abs_attribution"],
                                                         out_dir / "figures" / f"{name}_{mid}.png"))
    if global_entries:
        figures.append(plotting.plot_global_std(global_entries, out_dir / "figures" / "global_std.png"))
    print(json.dumps({"summary": str(out_dir / "summary.csv"), "figures": [str(f) for f in figures]}))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="attrib-sens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset under the output dir")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override output.dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model (or 'all') declared in the config")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None, help="override output.dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attribute", help="compute one attribution map")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--image", required=True, help="image tensor file (.atns)")
    p.add_argument("--method", required=True, help='method JSON, e.g. \'{"Gradient": {}}\'')
    p.add_argument("--out", required=True, help="heatmap tensor file to write")
    p.add_argument("--class", dest="target_class", type=int, default=None,
                   help="target class (default: predicted class)")
    p.add_argument("--render", action="store_true", help="also write a PNG next to --out")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("sweep", help="run every experiment in the config")
    p.add_argument("--config", required=True)
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (fallback ${THREADS_ENV}, default 1)")
    p.add_argument("--out", default=None, help="override output.dir")
    p.add_argument("--only", nargs="*", help="run only these experiment names")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="accuracy scores of one heatmap")
    p.add_argument("--model", required=True)
    p.add_argument("--heatmap", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--class", dest="target_class", type=int, default=None)
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge report files and render figures")
    p.add_argument("--in", dest="input", required=True, help="directory of report CSV/JSON files")
    p.add_argument("--out", default=None, help="output directory (default: <in>/summary)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 3
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
