"""Command-line front end: CSV in, JSON (or CSV) out.

Every command writes to ``--out`` (stdout by default) and exits 0 on success.
On failure a single JSON error record goes to stderr and the exit code is 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .domain import ContrastDataset, validate_contrast
from .estimators import ALL_ESTIMATORS, LOOP_X, TTEST, EffectEstimate, estimate_all
from .imputers import ForestParams
from .inference import bh_adjust, by_adjust, variance_ratio, z_inference
from .remnant import RemnantModel, predict_remnant, train_remnant
from .simulation import bundled_scenario, load_scenario, run_scenario
from .subgroups import (
    HIGH,
    LOW,
    PopulationWeights,
    covariate_values,
    estimate_subgroups,
    make_scheme,
    post_stratify,
)

RESERVED = ("contrast_id", "z", "y", "p", "yhat_r", "group", "unit_id")
RATIO_BASELINES = (TTEST, LOOP_X)


class CliError(Exception):
    def __init__(self, code: str, message: str, line: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.code, self.message, self.line, self.column = code, message, line, column

    def record(self) -> dict:
        return {"error": {"code": self.code, "message": self.message, "line": self.line, "column": self.column}}


# ---------------------------------------------------------------- JSON output

def _num(v: float) -> str:
    return format(v, ".17g") if math.isfinite(v) else "null"


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with insertion-ordered keys, 17 significant digits and null for NaN."""
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        items = [f"{inner}{dumps(v, indent, _level + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if hasattr(obj, "value"):  # enums
        return json.dumps(obj.value)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- CSV input

@dataclass
class _Rows:
    header: list
    rows: list  # (line number, dict)


def _read_csv(path) -> _Rows:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError("FileError", f"cannot read {path}: {exc.strerror}") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CliError("ParseError", f"{path} is empty", line=1) from None
    if len(set(header)) != len(header):
        dup = next(h for h in header if header.count(h) > 1)
        raise CliError("SchemaError", f"duplicate column {dup!r}", line=1, column=dup)
    rows = []
    try:
        for rec in reader:
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise CliError(
                    "ParseError", f"expected {len(header)} fields, found {len(rec)}", line=reader.line_num
                )
            rows.append((reader.line_num, dict(zip(header, (c.strip() for c in rec)))))
    except csv.Error as exc:
        raise CliError("ParseError", str(exc), line=reader.line_num) from None
    return _Rows(header, rows)


def _float(s: str, line: int, column: str, allow_missing: bool = False) -> float:
    if s == "" or s.upper() == "NA":
        if allow_missing:
            return math.nan
        raise CliError("MissingValue", f"missing value in column {column!r}", line, column)
    try:
        v = float(s)
    except ValueError:
        raise CliError("ParseError", f"not a number: {s!r}", line, column) from None
    if not math.isfinite(v):
        raise CliError("ParseError", f"non-finite value {s!r}", line, column)
    return v


def read_contrasts(path) -> list[ContrastDataset]:
    """Parse a contrast CSV into datasets, in order of first appearance.

    Missing covariate values are filled with the contrast mean and flagged by
    an added ``<name>_missing`` indicator column.
    """
    data = _read_csv(path)
    for col in ("contrast_id", "z", "y"):
        if col not in data.header:
            raise CliError("SchemaError", f"required column {col!r} is missing", line=1, column=col)
    covs = [h for h in data.header if h not in RESERVED]
    groups: dict = {}
    for line, row in data.rows:
        cid = row["contrast_id"]
        if cid == "":
            raise CliError("MissingValue", "missing contrast_id", line, "contrast_id")
        z = _float(row["z"], line, "z")
        if z not in (0.0, 1.0):
            raise CliError("SchemaError", f"z must be 0 or 1, got {row['z']!r}", line, "z")
        rec = {
            "line": line,
            "z": int(z),
            "y": _float(row["y"], line, "y"),
            "p": _float(row["p"], line, "p") if "p" in row and row["p"] != "" else 0.5,
            "yhat_r": _float(row["yhat_r"], line, "yhat_r") if "yhat_r" in row else None,
            "group": row.get("group") or None,
            "unit_id": row.get("unit_id") or None,
            "x": [_float(row[c], line, c, allow_missing=True) for c in covs],
        }
        if not 0.0 < rec["p"] < 1.0:
            raise CliError("SchemaError", "p must lie in (0, 1)", line, "p")
        groups.setdefault(cid, []).append(rec)

    out = []
    for cid, recs in groups.items():
        ps = {r["p"] for r in recs}
        if len(ps) > 1:
            raise CliError("SchemaError", f"contrast {cid!r} mixes assignment probabilities", recs[0]["line"], "p")
        ids = [r["unit_id"] for r in recs]
        if "unit_id" in data.header:
            seen = set()
            for r in recs:
                if r["unit_id"] is None or r["unit_id"] in seen:
                    raise CliError("SchemaError", f"missing or duplicate unit_id in contrast {cid!r}",
                                   r["line"], "unit_id")
                seen.add(r["unit_id"])
        x = np.array([r["x"] for r in recs], dtype=float).reshape(len(recs), len(covs))
        cols, names = [], []
        for j, name in enumerate(covs):
            col = x[:, j]
            miss = np.isnan(col)
            if miss.all():
                raise CliError("MissingValue", f"covariate {name!r} is missing for all of contrast {cid!r}",
                               recs[0]["line"], name)
            if miss.any():
                col = np.where(miss, col[~miss].mean(), col)
                cols += [col, miss.astype(float)]
                names += [name, f"{name}_missing"]
            else:
                cols.append(col)
                names.append(name)
        out.append(
            ContrastDataset(
                contrast_id=cid,
                z=np.array([r["z"] for r in recs]),
                y=np.array([r["y"] for r in recs]),
                x=np.column_stack(cols) if cols else np.zeros((len(recs), 0)),
                yhat_r=np.array([r["yhat_r"] for r in recs]) if "yhat_r" in data.header else None,
                group=np.array([r["group"] for r in recs], dtype=object) if "group" in data.header else None,
                unit_ids=np.array(ids, dtype=object) if "unit_id" in data.header else None,
                p=ps.pop(),
                covariate_names=tuple(names),
            )
        )
    return out


def _with_remnant(datasets, predictions: Optional[str], model_path: Optional[str]) -> list:
    if predictions and model_path:
        raise CliError("UsageError", "give either --remnant-predictions or --remnant-model, not both")
    if model_path:
        try:
            model = RemnantModel.load(model_path)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError("FileError", f"cannot load remnant model: {exc}") from None
        out = []
        for ds in datasets:
            missing = [f for f in model.feature_names if f not in ds.covariate_names]
            if missing:
                raise CliError("SchemaError", f"input lacks model feature {missing[0]!r}", column=missing[0])
            cols = [ds.covariate_names.index(f) for f in model.feature_names]
            out.append(_replace_r(ds, predict_remnant(model, ds.x[:, cols])))
        return out
    if predictions:
        data = _read_csv(predictions)
        for col in ("unit_id", "yhat_r"):
            if col not in data.header:
                raise CliError("SchemaError", f"predictions file needs column {col!r}", line=1, column=col)
        keyed = "contrast_id" in data.header
        table = {}
        for line, row in data.rows:
            key = (row["contrast_id"] if keyed else None, row["unit_id"])
            if key in table:
                raise CliError("SchemaError", f"duplicate prediction for unit {row['unit_id']!r}", line, "unit_id")
            table[key] = _float(row["yhat_r"], line, "yhat_r")
        out = []
        for ds in datasets:
            if ds.unit_ids.dtype != object:
                raise CliError("SchemaError", "joining predictions needs a unit_id column in the input", column="unit_id")
            try:
                r = [table[(ds.contrast_id if keyed else None, u)] for u in ds.unit_ids]
            except KeyError as exc:
                raise CliError("SchemaError", f"no prediction for unit {exc.args[0][1]!r}", column="unit_id") from None
            out.append(_replace_r(ds, np.array(r)))
        return out
    return datasets


def _replace_r(ds: ContrastDataset, r) -> ContrastDataset:
    return ContrastDataset(ds.contrast_id, ds.z, ds.y, ds.x, r, ds.group, ds.unit_ids, ds.p, ds.covariate_names)


# ---------------------------------------------------------------- report pieces

def _contrast_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0] & 0x7FFFFFFF)


def _verdict_dict(v) -> dict:
    return {
        "eligible": v.eligible,
        "reasons": [r.value for r in v.reasons],
        "binom_p": v.binom_p,
        "n1": v.arm_sizes[0],
        "n0": v.arm_sizes[1],
    }


def _estimate_dict(est: Optional[EffectEstimate], alpha: float) -> Optional[dict]:
    if est is None:
        return None
    inf = z_inference(est, alpha)
    return {
        "tau_hat": est.tau_hat,
        "var_hat": est.var_hat,
        "se": inf.se,
        "ci_lo": inf.ci_lo,
        "ci_hi": inf.ci_hi,
        "p_value": inf.p_value,
        "n": est.n,
        "n1": est.n1,
        "n0": est.n0,
    }


def _ratios(estimates: dict) -> dict:
    out = {}
    for base in RATIO_BASELINES:
        if base not in estimates:
            continue
        row = {}
        for eid, est in estimates.items():
            if est.var_hat > 0 and estimates[base].var_hat >= 0:
                row[eid] = variance_ratio(estimates[base].var_hat, est.var_hat)
        out[base] = row
    return out


def _estimate_block(es, estimators, alpha) -> dict:
    return {
        "estimates": {eid: _estimate_dict(es.estimates.get(eid), alpha) for eid in estimators},
        "skipped": {eid: es.skipped[eid] for eid in estimators if eid in es.skipped},
        "variance_ratios": _ratios(es.estimates),
    }


def fdr_table(labels: list, pvalues: list, alpha: float) -> dict:
    bh = bh_adjust(pvalues, alpha)
    by = by_adjust(pvalues, alpha)
    return {
        "m": len(pvalues),
        "unadjusted_rejections": int(sum(p < alpha for p in pvalues)),
        "bh_rejections": bh.n_rejected,
        "by_rejections": by.n_rejected,
        "tests": [
            {"id": lab, "p_value": p, "bh_adjusted": float(bh.adjusted[i]), "by_adjusted": float(by.adjusted[i]),
             "bh_rejected": bool(bh.rejected[i]), "by_rejected": bool(by.rejected[i])}
            for i, (lab, p) in enumerate(zip(labels, pvalues))
        ],
    }


def _batch_fdr(entries: list, estimators, alpha: float, id_of) -> dict:
    out = {}
    for eid in estimators:
        labels, ps = [], []
        for entry in entries:
            est = entry.get("estimates", {}).get(eid) if entry.get("estimates") else None
            if est is not None:
                labels.append(id_of(entry))
                ps.append(est["p_value"])
        out[eid] = fdr_table(labels, ps, alpha)
    return out


def _header(command: str, args, config: dict) -> dict:
    return {"tool": "reloop", "version": __version__, "command": command, "seed": args.seed, "config": config}


def _estimators(arg: Optional[str]) -> tuple:
    if not arg:
        return ALL_ESTIMATORS
    ids = tuple(s.strip() for s in arg.split(",") if s.strip())
    unknown = [e for e in ids if e not in ALL_ESTIMATORS]
    if unknown:
        raise CliError("UsageError", f"unknown estimator {unknown[0]!r}; choose from {', '.join(ALL_ESTIMATORS)}")
    return ids


def _forest(args, index: int) -> ForestParams:
    return ForestParams(n_trees=args.trees, min_leaf=args.min_leaf, seed=_contrast_seed(args.seed, index))


def _map(fn, items, workers: int) -> list:
    """Order-preserving map, in-process or over a process pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- commands

def _validate_one(ds, args) -> dict:
    return {"contrast_id": ds.contrast_id, "n": ds.n, **_verdict_dict(
        validate_contrast(ds, args.min_arm, args.binom_alpha))}


def cmd_validate(args) -> dict:
    datasets = read_contrasts(args.input)
    config = {"input": args.input, "min_arm": args.min_arm, "binom_alpha": args.binom_alpha}
    verdicts = [_validate_one(ds, args) for ds in datasets]
    return {**_header("validate", args, config), "contrasts": verdicts}


@dataclass(frozen=True)
class _AnalyzeJob:
    ds: ContrastDataset
    index: int
    args: argparse.Namespace
    estimators: tuple


def _analyze_job(job: _AnalyzeJob) -> dict:
    ds, args = job.ds, job.args
    verdict = validate_contrast(ds, args.min_arm, args.binom_alpha)
    entry = {"contrast_id": ds.contrast_id, "verdict": _verdict_dict(verdict)}
    if not verdict.eligible:
        entry.update(estimates=None, skipped={}, variance_ratios={})
        return entry
    es = estimate_all(ds, _forest(args, job.index), job.estimators)
    entry.update(_estimate_block(es, job.estimators, args.alpha))
    return entry


def cmd_analyze(args) -> dict:
    ests = _estimators(args.estimators)
    datasets = _with_remnant(read_contrasts(args.input), args.remnant_predictions, args.remnant_model)
    jobs = [_AnalyzeJob(ds, i, args, ests) for i, ds in enumerate(datasets)]
    contrasts = _map(_analyze_job, jobs, args.workers)
    config = _config(args, estimators=list(ests))
    return {
        **_header("analyze", args, config),
        "contrasts": contrasts,
        "fdr": _batch_fdr(contrasts, ests, args.alpha, lambda e: e["contrast_id"]),
    }


def _subgroup_job(job) -> list:
    (ds, index, args, ests, schemes) = job
    verdict = validate_contrast(ds, None, args.binom_alpha)
    out = []
    for scheme in schemes:
        res = estimate_subgroups(ds, scheme, args.min_arm, _forest(args, index), ests)
        for label in (LOW, HIGH):
            r = res[label]
            entry = {
                "contrast_id": ds.contrast_id,
                "covariate": scheme.covariate_id,
                "subgroup": label,
                "contrast_eligible": verdict.eligible,
                "n1": r.arm_sizes[0],
                "n0": r.arm_sizes[1],
                "skip_reason": r.skip_reason,
            }
            if r.estimates is None:
                entry.update(estimates=None, skipped={}, variance_ratios={})
            else:
                entry.update(_estimate_block(r.estimates, ests, args.alpha))
            out.append(entry)
    return out


def cmd_subgroup(args) -> dict:
    ests = _estimators(args.estimators)
    datasets = _with_remnant(read_contrasts(args.input), args.remnant_predictions, args.remnant_model)
    covs = [c.strip() for c in args.covariates.split(",") if c.strip()]
    schemes = []
    for c in covs:
        try:
            pooled = np.concatenate([covariate_values(ds, c) for ds in datasets])
        except KeyError as exc:
            raise CliError("SchemaError", str(exc.args[0]), column=c) from None
        schemes.append(make_scheme(c, pooled))
    jobs = [(ds, i, args, ests, schemes) for i, ds in enumerate(datasets)]
    entries = [e for block in _map(_subgroup_job, jobs, args.workers) for e in block]
    fdr = {}
    for s in schemes:
        for label in (LOW, HIGH):
            sel = [e for e in entries if e["covariate"] == s.covariate_id and e["subgroup"] == label]
            fdr[f"{s.covariate_id}:{label}"] = _batch_fdr(sel, ests, args.alpha, lambda e: e["contrast_id"])
    config = _config(args, estimators=list(ests), covariates=covs)
    return {
        **_header("subgroup", args, config),
        "schemes": [{"covariate": s.covariate_id, "q_lo": s.q_lo, "q_hi": s.q_hi} for s in schemes],
        "subgroups": entries,
        "fdr": fdr,
    }


def read_weights(path) -> PopulationWeights:
    data = _read_csv(path)
    for col in ("group", "pi"):
        if col not in data.header:
            raise CliError("SchemaError", f"weights file needs column {col!r}", line=1, column=col)
    w = {}
    for line, row in data.rows:
        if row["group"] in w:
            raise CliError("SchemaError", f"duplicate group {row['group']!r}", line, "group")
        w[row["group"]] = _float(row["pi"], line, "pi")
    try:
        return PopulationWeights(w)
    except ValueError as exc:
        raise CliError("SchemaError", str(exc), column="pi") from None


def _poststrat_job(job) -> dict:
    ds, index, args, ests, weights = job
    verdict = validate_contrast(ds, args.min_arm, args.binom_alpha)
    entry = {"contrast_id": ds.contrast_id, "verdict": _verdict_dict(verdict)}
    if not verdict.eligible:
        entry.update(estimates=None, skipped={}, groups={})
        return entry
    forest = _forest(args, index)
    groups, per_group = {}, {}
    for g in sorted(weights.weights, key=str):
        mask = ds.group == g
        n1 = int(ds.z[mask].sum())
        n0 = int(mask.sum()) - n1
        if min(n1, n0) < 2:
            groups[g] = {"n1": n1, "n0": n0, "skip_reason": "ArmTooSmall", "estimates": None}
            continue
        es = estimate_all(ds.subset(mask), forest, ests)
        per_group[g] = es
        groups[g] = {"n1": n1, "n0": n0, "skip_reason": None,
                     "estimates": {eid: _estimate_dict(es.estimates.get(eid), args.alpha) for eid in ests}}
    estimates, skipped = {}, {}
    for eid in ests:
        have = {g: es.estimates[eid] for g, es in per_group.items() if eid in es.estimates}
        if len(have) != len(weights.weights):
            skipped[eid] = "MissingSubgroupEstimate"
            estimates[eid] = None
        else:
            estimates[eid] = _estimate_dict(post_stratify(have, weights), args.alpha)
    entry.update(estimates=estimates, skipped=skipped, groups=groups)
    return entry


def cmd_poststratify(args) -> dict:
    ests = _estimators(args.estimators)
    weights = read_weights(args.weights)
    datasets = _with_remnant(read_contrasts(args.input), args.remnant_predictions, args.remnant_model)
    for ds in datasets:
        if ds.group is None:
            raise CliError("SchemaError", "post-stratification needs a group column", column="group")
        extra = sorted({g for g in ds.group.tolist()} - set(weights.weights), key=str)
        if extra:
            raise CliError("SchemaError", f"group {extra[0]!r} has no population weight", column="group")
    jobs = [(ds, i, args, ests, weights) for i, ds in enumerate(datasets)]
    contrasts = _map(_poststrat_job, jobs, args.workers)
    config = _config(args, estimators=list(ests), weights=dict(sorted(weights.weights.items())))
    return {
        **_header("poststratify", args, config),
        "contrasts": contrasts,
        "fdr": _batch_fdr(contrasts, ests, args.alpha, lambda e: e["contrast_id"]),
    }


def cmd_simulate(args) -> dict:
    path = args.scenario
    if not Path(path).exists():
        try:
            path = bundled_scenario(path)
        except FileNotFoundError as exc:
            raise CliError("FileError", str(exc)) from None
    try:
        spec = load_scenario(path)
    except (ValueError, TypeError) as exc:
        raise CliError("SchemaError", f"bad scenario: {exc}") from None
    if args.replications is not None:
        spec = replace(spec, replications=args.replications)
    seed = spec.seed if args.seed is None else args.seed
    result = run_scenario(spec, seed, workers=args.workers)
    return {"tool": "reloop", "version": __version__, "command": "simulate", "seed": seed, **result}


def cmd_remnant_train(args) -> dict:
    data = _read_csv(args.input)
    if args.outcome not in data.header:
        raise CliError("SchemaError", f"outcome column {args.outcome!r} is missing", line=1, column=args.outcome)
    if args.features:
        feats = [f.strip() for f in args.features.split(",") if f.strip()]
        for f in feats:
            if f not in data.header:
                raise CliError("SchemaError", f"feature column {f!r} is missing", line=1, column=f)
    else:
        feats = [h for h in data.header if h not in RESERVED and h != args.outcome]
    X = np.array([[_float(r[f], line, f) for f in feats] for line, r in data.rows]).reshape(len(data.rows), len(feats))
    y = np.array([_float(r[args.outcome], line, args.outcome) for line, r in data.rows])
    try:
        model = train_remnant(X, y, args.lam, feats)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise CliError("FitError", str(exc)) from None
    return model.to_dict()


def cmd_remnant_predict(args) -> str:
    try:
        model = RemnantModel.load(args.remnant_model)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError("FileError", f"cannot load remnant model: {exc}") from None
    data = _read_csv(args.input)
    for f in model.feature_names:
        if f not in data.header:
            raise CliError("SchemaError", f"feature column {f!r} is missing", line=1, column=f)
    X = np.array([[_float(r[f], line, f, allow_missing=True) for f in model.feature_names]
                  for line, r in data.rows]).reshape(len(data.rows), model.k)
    # a missing feature takes the training mean, i.e. contributes nothing
    X = np.where(np.isnan(X), np.asarray(model.means), X)
    pred = predict_remnant(model, X)
    keys = [c for c in ("contrast_id", "unit_id") if c in data.header]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys + ["yhat_r"])
    for (_, row), v in zip(data.rows, pred):
        w.writerow([row[k] for k in keys] + [format(float(v), ".17g")])
    return buf.getvalue()


def _config(args, **extra) -> dict:
    cfg = {
        "input": args.input,
        "remnant_predictions": args.remnant_predictions,
        "remnant_model": args.remnant_model,
        "alpha": args.alpha,
        "min_arm": args.min_arm,
        "binom_alpha": args.binom_alpha,
        "trees": args.trees,
        "min_leaf": args.min_leaf,
    }
    cfg.update(extra)
    return cfg


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reloop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"reloop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, estimation=True, min_arm=None):
        p.add_argument("--input", required=True, help="contrast CSV")
        p.add_argument("--out", help="output path (default stdout)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--min-arm", type=int, default=min_arm, dest="min_arm")
        p.add_argument("--binom-alpha", type=float, default=0.1, dest="binom_alpha")
        if estimation:
            p.add_argument("--remnant-predictions", dest="remnant_predictions")
            p.add_argument("--remnant-model", dest="remnant_model")
            p.add_argument("--alpha", type=float, default=0.05)
            p.add_argument("--estimators", help="comma list, default all")
            p.add_argument("--trees", type=int, default=500, help="trees per forest")
            p.add_argument("--min-leaf", type=int, default=5, dest="min_leaf")
            p.add_argument("--workers", type=int, default=1)

    common(sub.add_parser("validate", help="apply the exclusion rules"), estimation=False)
    common(sub.add_parser("analyze", help="estimate effects for every contrast"))
    p = sub.add_parser("subgroup", help="estimate effects within tercile subgroups")
    common(p, min_arm=10)
    p.add_argument("--covariates", required=True, help="comma list of covariates (yhat_r allowed)")
    p = sub.add_parser("poststratify", help="reweight group estimates to population shares")
    common(p)
    p.add_argument("--weights", required=True, help="CSV with columns group, pi")

    p = sub.add_parser("simulate", help="run a synthetic scenario")
    p.add_argument("--scenario", default="representative", help="TOML path or bundled scenario name")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")

    rem = sub.add_parser("remnant", help="train or apply the baseline remnant model")
    rsub = rem.add_subparsers(dest="action", required=True)
    t = rsub.add_parser("train")
    t.add_argument("--input", required=True, help="remnant CSV with features and outcome")
    t.add_argument("--outcome", default="y")
    t.add_argument("--features", help="comma list (default: all non-reserved columns)")
    t.add_argument("--lambda", type=float, default=0.0, dest="lam")
    t.add_argument("--out")
    t.add_argument("--seed", type=int, default=0)
    pr = rsub.add_parser("predict")
    pr.add_argument("--input", required=True)
    pr.add_argument("--remnant-model", required=True, dest="remnant_model")
    pr.add_argument("--out")
    pr.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {
    "validate": cmd_validate,
    "analyze": cmd_analyze,
    "subgroup": cmd_subgroup,
    "poststratify": cmd_poststratify,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "remnant":
            if args.action == "train":
                result = cmd_remnant_train(args)
            else:
                _emit(cmd_remnant_predict(args), args.out)
                return 0
        else:
            if getattr(args, "workers", 1) < 1:
                raise CliError("UsageError", "--workers must be at least 1")
            result = COMMANDS[args.command](args)
        _emit(dumps(result) + "\n", args.out)
        return 0
    except CliError as exc:
        sys.stderr.write(dumps(exc.record()) + "\n")
        return 1
    except (ValueError, KeyError, np.linalg.LinAlgError) as exc:
        err = CliError(type(exc).__name__, str(exc))
        sys.stderr.write(dumps(err.record()) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
