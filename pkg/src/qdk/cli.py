"""Command line front end.

    qdk calibrate|quantize|eval|simulate|report --config run.yaml [--seed N]
        [--precision fp32|w4a8|w4a4] [--fusion on|off] [--out DIR]

Artifacts written to ``--out`` (default ``qdk_out``):

    calibrate  calibration.json   polishing factors + activation params
    quantize   model.qrtd         quantized weights + per-layer sidecar
    eval       eval.csv           float vs quantized depth metrics
    simulate   latency.csv        one row per (precision, resolution)
               trace_<p>.csv      instruction trace at the first resolution
    report     summary.csv        one row per (precision, method)

Every file is written to a temp name and renamed, so a failed command
never leaves a partial artifact behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, QdkError
from .metrics import METRIC_NAMES, evaluate_batch
from .modelfile import atomic_write
from .network import build_toy_mde
from .pipeline import (Calibration, QuantizedModel, calibrate, calibration_images, eval_images,
                       load_model, quantize_network, save_model)
from .sim.hw import PRECISIONS
from .sim.profile import compare_configs
from .sim.program import lower_network, network_workload, vit_workload
from .sim.schedule import simulate

log = logging.getLogger("qdk")

CALIBRATION_FILE = "calibration.json"
MODEL_FILE = "model.qrtd"
EVAL_FILE = "eval.csv"
LATENCY_FILE = "latency.csv"
SUMMARY_FILE = "summary.csv"

EVAL_COLUMNS = ("model", "precision", "method", "weight_bits", "act_bits", *METRIC_NAMES)
LATENCY_COLUMNS = ("workload", "precision", "resolution", "fusion", "makespan_cycles", "total_ms", "fps",
                   "speedup", "gmacs", "energy_pj", "power_efficiency_gmac_per_w",
                   "frac_matmul", "frac_conv", "frac_softmax", "frac_layernorm", "frac_vector",
                   "frac_data-movement")
SUMMARY_COLUMNS = ("precision", "method", "weight_bits", "act_bits", *METRIC_NAMES,
                   "resolution", "total_ms", "fps", "speedup", "power_efficiency_gmac_per_w")


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- commands

def _settings(cfg: RunConfig) -> dict:
    # everything the activation calibration depends on
    return {"seed": cfg.seed, "act_bits": cfg.act_bits, "method": cfg.method, "epsilon": cfg.epsilon,
            "calibration_samples": cfg.calibration_samples, "network": cfg.network}


def cmd_calibrate(cfg: RunConfig, out: Path, args) -> None:
    if cfg.act_bits >= 32 or cfg.weight_bits >= 32:
        raise ConfigError(f"nothing to calibrate at {cfg.label}: activations stay in float")
    net = build_toy_mde(cfg.seed, **cfg.network)
    calib = calibrate(net, calibration_images(cfg.seed, cfg.calibration_samples), cfg.quant_config())
    doc = {"settings": _settings(cfg), "calibration": calib.to_dict()}
    atomic_write(out / CALIBRATION_FILE, json.dumps(doc, sort_keys=True, indent=1) + "\n")
    log.info("wrote %s (%d layers)", out / CALIBRATION_FILE, len(calib.layers))


def _cached_calibration(cfg: RunConfig, out: Path) -> Calibration | None:
    path = out / CALIBRATION_FILE
    if not path.exists():
        return None
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("settings") != json.loads(json.dumps(_settings(cfg))):
        log.info("%s was made with other settings; recalibrating", path)
        return None
    return Calibration.from_dict(doc["calibration"])


def cmd_quantize(cfg: RunConfig, out: Path, args) -> None:
    net = build_toy_mde(cfg.seed, **cfg.network)
    if cfg.weight_bits >= 32:
        qm = QuantizedModel(net, cfg.quant_config(), {}, None)
        qm.config.method = "float"
    else:
        cal = calibration_images(cfg.seed, cfg.calibration_samples)
        qm = quantize_network(net, cal, cfg.quant_config(), calibration=_cached_calibration(cfg, out))
    save_model(qm, out / MODEL_FILE, {"seed": cfg.seed, "precision": cfg.label})
    log.info("wrote %s", out / MODEL_FILE)


def _evaluate(qm: QuantizedModel, seed: int, n: int) -> dict:
    # the float network rebuilt from its seed is the depth oracle
    ref_net = build_toy_mde(**asdict(qm.network.spec))
    images = eval_images(seed, n)
    reference = ref_net.forward(images)
    return evaluate_batch(qm.network.forward(images), reference).as_dict()


def _model_row(qm: QuantizedModel, meta_precision: str, metrics: dict) -> dict:
    c = qm.config
    return {"precision": meta_precision, "method": c.method, "weight_bits": c.weight_bits,
            "act_bits": c.act_bits, **metrics}


def _load_run_model(out: Path) -> tuple[QuantizedModel, dict]:
    path = out / MODEL_FILE
    if not path.exists():
        raise ConfigError(f"{path} not found; run `qdk quantize` first")
    qm = load_model(path)
    return qm, qm.meta


def cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    qm, meta = _load_run_model(out)
    seed = meta.get("seed", cfg.seed)
    precision = meta.get("precision", cfg.label)
    metrics = _evaluate(qm, seed, cfg.eval_samples)
    float_row = {"model": "float", "precision": "fp32", "method": "float", "weight_bits": 32, "act_bits": 32,
                 **_evaluate(QuantizedModel(build_toy_mde(**asdict(qm.network.spec)), qm.config, {}, None),
                             seed, cfg.eval_samples)}
    rows = [float_row, {"model": "quantized", **_model_row(qm, precision, metrics)}]
    atomic_write(out / EVAL_FILE, _csv(EVAL_COLUMNS, rows))
    log.info("wrote %s: absrel %.5g", out / EVAL_FILE, metrics["absrel"])


def _workload_factory(cfg: RunConfig):
    if cfg.simulate.workload == "vit":
        return vit_workload
    net = build_toy_mde(cfg.seed, **cfg.network)
    return lambda res: network_workload(net, res)


def cmd_simulate(cfg: RunConfig, out: Path, args) -> None:
    precision = cfg.label
    if precision not in PRECISIONS:
        raise ConfigError(f"no simulator precision for {precision}; pass --precision {'|'.join(PRECISIONS)}")
    fusion = cfg.simulate.fusion
    factory = _workload_factory(cfg)
    precisions = ("fp32",) if precision == "fp32" else ("fp32", precision)
    rows = compare_configs(factory, cfg.hardware, precisions, cfg.simulate.resolutions, fusion)
    table = []
    for r in rows:
        wl = factory(r.resolution)
        table.append({"workload": wl.name, "precision": r.precision, "resolution": r.resolution,
                      "fusion": r.fusion, "speedup": r.speedup, **r.report.row()})
    atomic_write(out / LATENCY_FILE, _csv(LATENCY_COLUMNS, table))
    res0 = cfg.simulate.resolutions[0]
    trace = simulate(lower_network(factory(res0), precision, fusion, cfg.hardware), cfg.hardware)
    atomic_write(out / f"trace_{precision}.csv", trace.to_csv())
    for r in rows:
        log.info("%s @%d: %.4g ms, %.3gx over fp32", r.precision, r.resolution, r.report.total_ms, r.speedup)


def cmd_report(cfg: RunConfig, out: Path, args) -> None:
    run_dirs = [Path(d) for d in (args.runs or [])] or [out]
    summary: dict[tuple[str, str], dict] = {}
    for d in run_dirs:
        qm, meta = _load_run_model(d)
        precision = meta.get("precision", cfg.label)
        eval_path = d / EVAL_FILE
        metrics = None
        if eval_path.exists():
            for r in _read_csv(eval_path):
                if r["model"] == "quantized":
                    metrics = {k: float(r[k]) for k in METRIC_NAMES}
        if metrics is None:
            metrics = _evaluate(qm, meta.get("seed", cfg.seed), cfg.eval_samples)
        row = _model_row(qm, precision, metrics)
        lat_path = d / LATENCY_FILE
        if lat_path.exists():
            lat = [r for r in _read_csv(lat_path) if r["precision"] == precision]
            if lat:
                first = min(lat, key=lambda r: int(r["resolution"]))
                row.update({k: first[k] for k in ("resolution", "total_ms", "fps", "speedup",
                                                    "power_efficiency_gmac_per_w")})
        key = (row["precision"], row["method"])
        if key in summary:
            log.warning("%s: a later run replaces the %s/%s row", d, *key)
        summary[key] = row
    rows = [summary[k] for k in sorted(summary)]
    atomic_write(out / SUMMARY_FILE, _csv(SUMMARY_COLUMNS, rows))
    log.info("wrote %s (%d rows)", out / SUMMARY_FILE, len(rows))


COMMANDS = {
    "calibrate": cmd_calibrate,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdk", description="Post-training quantization and accelerator simulation "
                                "for toy depth-estimation networks.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--precision", choices=PRECISIONS, help="override the bit widths")
    p.add_argument("--method", choices=("full", "minmax"), help="override the quantization method")
    p.add_argument("--fusion", choices=("on", "off"), help="override simulate.fusion")
    p.add_argument("--out", default="qdk_out", help="artifact directory (default: qdk_out)")
    p.add_argument("--runs", nargs="*", help="report: run directories to join (default: --out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _origin(exc: BaseException) -> str:
    """Module in which the exception was raised, for error messages."""
    tb = exc.__traceback__
    name = "qdk"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("qdk"):
            name = mod
        tb = tb.tb_next
    return name


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision is not None:
        cfg = cfg.with_precision(args.precision)
    if args.method is not None:
        cfg.method = args.method
    if args.fusion is not None:
        cfg.simulate.fusion = args.fusion == "on"
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args)
        out = Path(args.out)
        COMMANDS[args.command](cfg, out, args)
    except (QdkError, OSError, json.JSONDecodeError) as e:
        print(f"qdk {args.command}: error in {_origin(e)}: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
