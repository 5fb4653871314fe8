"""File formats: dataset CSV, design/hierarchy JSON, result tables."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from .design import Dataset, DesignError, EndpointHierarchy, TrialDesign, unit_period_bounds

BASE_COLUMNS = ["cluster", "period", "sequence", "time", "treatment"]
FLOAT_FORMAT = "%.12g"


class SchemaError(ValueError):
    pass


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def frame_to_csv(df: pd.DataFrame, path) -> None:
    atomic_write_text(path, df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))


def write_json(obj, path) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dataset_frame(ds: Dataset) -> pd.DataFrame:
    df = pd.DataFrame({"cluster": ds.cluster, "period": ds.period, "sequence": ds.sequence,
                       "time": ds.time, "treatment": ds.treatment})
    for m in range(ds.outcomes.shape[1]):
        df[f"y{m + 1}"] = ds.outcomes[:, m]
    return df


def write_dataset(ds: Dataset, path, hierarchy_sidecar: bool = True) -> None:
    frame_to_csv(dataset_frame(ds), path)
    if hierarchy_sidecar:
        write_json(ds.hierarchy.to_dict(), hierarchy_path(path))
        write_json(ds.design.to_dict(), design_path(path))


def hierarchy_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".hierarchy.json")


def design_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".design.json")


def read_hierarchy(path) -> EndpointHierarchy:
    with open(path) as fh:
        return EndpointHierarchy.from_dict(json.load(fh))


def read_design(path) -> TrialDesign:
    with open(path) as fh:
        return TrialDesign.from_dict(json.load(fh))


def infer_design(df: pd.DataFrame) -> TrialDesign:
    """Design implied by a dataset's cluster/sequence/treatment columns, unit periods."""
    K, J = int(df["cluster"].max()), int(df["period"].max())
    seq_of = df.groupby("cluster")["sequence"].agg(["min", "max"])
    if (seq_of["min"] != seq_of["max"]).any():
        raise SchemaError("a cluster appears in more than one sequence")
    if sorted(seq_of.index) != list(range(1, K + 1)):
        raise SchemaError("cluster ids must be 1..K with every cluster present")
    treated = df[df["treatment"] == 1].groupby("sequence")["period"].min()
    S = int(df["sequence"].max())
    missing = set(range(1, S + 1)) - set(treated.index)
    if missing:
        raise SchemaError(f"sequences {sorted(missing)} are never treated")
    return TrialDesign(K, J, S, {int(k): int(v) for k, v in seq_of["min"].items()},
                       {int(s): int(j) for s, j in treated.items()}, unit_period_bounds(J))


def read_dataset(path, hierarchy: EndpointHierarchy | None = None,
                 design: TrialDesign | None = None) -> Dataset:
    """Load a dataset CSV, reporting schema problems with 1-based data row numbers."""
    df = pd.read_csv(path)
    missing = [c for c in BASE_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing required columns {missing}")
    ycols = [c for c in df.columns if c.startswith("y") and c[1:].isdigit()]
    ycols.sort(key=lambda c: int(c[1:]))
    if ycols != [f"y{m}" for m in range(1, len(ycols) + 1)] or not ycols:
        raise SchemaError(f"{path}: outcome columns must be y1..yM, got {ycols}")
    extra = set(df.columns) - set(BASE_COLUMNS) - set(ycols)
    if extra:
        raise SchemaError(f"{path}: unexpected columns {sorted(extra)}")
    for c in BASE_COLUMNS + ycols:
        vals = pd.to_numeric(df[c], errors="coerce")
        bad = np.flatnonzero(vals.isna().to_numpy())
        if bad.size:
            raise SchemaError(f"{path}: row {int(bad[0]) + 1}: column {c!r} is missing or not numeric")
        df[c] = vals
    for c in ("cluster", "period", "sequence", "treatment"):
        bad = np.flatnonzero((df[c] != np.round(df[c])).to_numpy())
        if bad.size:
            raise SchemaError(f"{path}: row {int(bad[0]) + 1}: column {c!r} must be an integer")
    if hierarchy is None:
        hp = hierarchy_path(path)
        if not hp.exists():
            raise SchemaError(f"{path}: no hierarchy given and no sidecar {hp.name}")
        hierarchy = read_hierarchy(hp)
    if len(hierarchy) != len(ycols):
        raise SchemaError(f"{path}: {len(ycols)} outcome columns but hierarchy has {len(hierarchy)}")
    if design is None:
        dp = design_path(path)
        design = read_design(dp) if dp.exists() else infer_design(df)
    seq = np.array([design.sequence_of_cluster.get(int(k), -1) for k in df["cluster"]])
    bad = np.flatnonzero(seq != df["sequence"].to_numpy())
    if bad.size:
        raise SchemaError(f"{path}: row {int(bad[0]) + 1}: sequence disagrees with the design")
    period = df["period"].to_numpy(int)
    bad = np.flatnonzero((period < 1) | (period > design.num_periods))
    if bad.size:
        raise SchemaError(f"{path}: row {int(bad[0]) + 1}: period out of range")
    X = design.treatment_matrix()[df["cluster"].to_numpy(int) - 1, period - 1]
    bad = np.flatnonzero(X != df["treatment"].to_numpy())
    if bad.size:
        raise SchemaError(f"{path}: row {int(bad[0]) + 1}: treatment disagrees with the design")
    lo = np.array([b[0] for b in design.period_bounds])[period - 1]
    hi = np.array([b[1] for b in design.period_bounds])[period - 1]
    t = df["time"].to_numpy(float)
    bad = np.flatnonzero((t < lo) | (t >= hi))
    if bad.size:
        raise SchemaError(f"{path}: row {int(bad[0]) + 1}: time outside its period")
    try:
        return Dataset(design, hierarchy, df["cluster"].to_numpy(int), df["period"].to_numpy(int),
                       df["time"].to_numpy(float), df["treatment"].to_numpy(int),
                       df[ycols].to_numpy(float))
    except DesignError as e:
        raise SchemaError(f"{path}: {e}") from e
