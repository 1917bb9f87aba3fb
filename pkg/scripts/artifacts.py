"""
artifacts.py
------------
File plumbing shared by the stage scripts: logging setup, JSON / CSV /
parquet writers, and the readers that hand one stage's output to the next.
"""
import glob
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from boundary_layer import TailSet
from config import DEFAULT_PATHS, EXIT_CONFIG_ERROR, EXIT_MODULE_ERROR
from errors import ConfigParse, HomogError
from microstructure import correctors_frame, correctors_from_frame

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s :: %(levelname)s :: %(name)s :: %(message)s"


def setup_logging(out_dir, level=logging.INFO):
    """Console handler plus <out>/run.log (appended across stages)."""
    log_path = out_path(out_dir, "run_log")
    ensure_dir(log_path)
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter(LOG_FORMAT)
    console = logging.StreamHandler(sys.stdout)
    console.setFormatter(fmt)
    file_handler = logging.FileHandler(log_path, mode="a", encoding="utf-8")
    file_handler.setFormatter(fmt)
    root.addHandler(console)
    root.addHandler(file_handler)
    root.setLevel(level)
    return log_path


def out_path(out_dir, key):
    return os.path.join(out_dir, DEFAULT_PATHS[key])


def ensure_dir(path):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (set, tuple)):
        return list(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def write_json(obj, path):
    ensure_dir(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, default=_jsonable)
        f.write("\n")
    return path


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(df, path):
    ensure_dir(path)
    df.to_csv(path, index=False, float_format="%.17g")
    return path


# =============================================================================
# CELL CORRECTORS
# =============================================================================
def correctors_meta(corr):
    return {
        "tensor": corr.tensor_name,
        "n": corr.n,
        "n_components": corr.n_components,
        "rule": corr.rule,
        "diagonal": corr.diagonal,
        "levels": corr.levels,
        "homogenized": corr.homogenized.tolist(),
    }


def write_correctors(corr, path):
    ensure_dir(path)
    df = correctors_frame(corr)
    df.to_parquet(path, index=False)
    return df.shape


def read_correctors(path, meta):
    df = pd.read_parquet(path)
    corr = correctors_from_frame(df, meta)
    logger.info("Loaded correctors from %s: n=%d, N=%d, rule=%s", path, corr.n, corr.n_components, corr.rule)
    return corr


def load_cell_stage(out_dir):
    """(fine, matched) correctors from the cell stage; matched is None when it was not computed."""
    summary_path = out_path(out_dir, "cell_summary")
    if not os.path.exists(summary_path):
        raise FileNotFoundError(f"Cell summary not found: {summary_path} (run the cell stage first)")
    summary = read_json(summary_path)
    fine = read_correctors(out_path(out_dir, "correctors"), summary["fine"])
    matched = None
    if summary.get("matched"):
        matched = read_correctors(out_path(out_dir, "correctors_matched"), summary["matched"])
    return fine, matched


# =============================================================================
# TAILS
# =============================================================================
def load_tail_sets(out_dir):
    """eps -> TailSet from tails.json."""
    path = out_path(out_dir, "tails")
    if not os.path.exists(path):
        raise FileNotFoundError(f"Tail file not found: {path} (run the tails stage first)")
    data = read_json(path)
    out = {}
    for group in data["groups"]:
        ts = TailSet.from_dict(group)
        for e in group["epsilons"]:
            out[float(e)] = ts
    logger.info("Loaded %d tail sets for %d epsilons", len(data["groups"]), len(out))
    return out


# =============================================================================
# REPORTS
# =============================================================================
def write_report(report, reports_dir):
    """reports/<quantity>.csv and .json."""
    base = os.path.join(reports_dir, report.quantity)
    write_csv(report.to_frame(), base + ".csv")
    write_json(report.to_dict(), base + ".json")
    return base + ".json"


def collect_pass_flags(out_dir):
    """name -> bool for every pass/fail flag the stages wrote."""
    flags = {}
    for path in sorted(glob.glob(os.path.join(out_dir, DEFAULT_PATHS["reports_dir"], "*.json"))):
        data = read_json(path)
        if "pass" in data and "quantity" in data:
            flags[data["quantity"]] = bool(data["pass"])
    tails = out_path(out_dir, "tails")
    if os.path.exists(tails):
        flags["tails_decay"] = not read_json(tails)["flagged"]
    spectrum = out_path(out_dir, "spectrum_summary")
    if os.path.exists(spectrum):
        data = read_json(spectrum)
        if "osborn_bounded" in data:
            flags["osborn_bounded"] = bool(data["osborn_bounded"])
        for entry in data.get("rotation_invariance", []):
            flags[f"rotation_invariance_k{entry['mode']}"] = bool(entry["pass"])
    return flags


# =============================================================================
# STAGE ENTRY POINT
# =============================================================================
def run_stage(main):
    """Call a stage's main(); map errors onto exit codes with the module-qualified code in the log."""
    try:
        main()
    except ConfigParse as e:
        logger.error("%s: %s", e.code, e)
        sys.exit(EXIT_CONFIG_ERROR)
    except HomogError as e:
        logger.error("%s: %s", e.code, e)
        if e.details:
            logger.error("details: %s", json.dumps(e.details, default=_jsonable))
        record = getattr(e, "record", None)
        if record:
            logger.error("record: %s", json.dumps(record, default=_jsonable))
        sys.exit(EXIT_MODULE_ERROR)
