import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import linregress

from utils import ArgumentError


logger = logging.getLogger(__name__)

TIDY_COLUMNS = ["experiment", "eps", "seed", "t", "metric", "value"]
QUANTILES = (0.1, 0.5, 0.9)


class ResultAnalyzer:
    """Aggregation of experiment rows: fits, medians, quantiles and the long plot format."""

    def __init__(self, df: pd.DataFrame | None = None, experiment: str | None = None):
        self.df = df if df is not None else pd.DataFrame()
        self.experiment = experiment

    @classmethod
    def from_rows(cls, rows: list[dict], experiment: str | None = None) -> "ResultAnalyzer":
        return cls(pd.DataFrame.from_records(rows), experiment)

    @classmethod
    def from_result_dir(cls, result_dir) -> "ResultAnalyzer":
        """All CSV tables listed in MANIFEST.json, concatenated."""
        result_dir = Path(result_dir)
        manifest = json.loads((result_dir / "MANIFEST.json").read_text())
        frames = []
        for artifact in manifest["artifacts"]:
            path = result_dir / artifact["path"]
            if path.suffix == ".csv":
                frames.append(pd.read_csv(path))
            elif path.suffix == ".ndjson":
                frames.append(pd.read_json(path, orient="records", lines=True))
        df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
        return cls(df, manifest["experiment"])

    def metrics(self) -> list[str]:
        if "metric" in self.df:
            return sorted(self.df["metric"].dropna().unique().tolist())
        return []

    def log_scaling_fit(self, x: str = "N", y: str = "c_eps") -> dict:
        """Least-squares fit of y against x; used for c^ε against log₂(1/ε)."""
        rows = self.df.dropna(subset=[x, y])
        if len(rows) < 2:
            raise ArgumentError(f"need at least two rows to fit {y} against {x}")
        fit = linregress(rows[x].astype(float), rows[y].astype(float))
        return {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.rvalue**2}

    def medians(self, metric: str, by: str = "eps") -> pd.Series:
        rows = self.df[self.df["metric"] == metric]
        return rows.groupby(by)["value"].median()

    def quantiles(self, metric: str, by: str = "eps", qs=QUANTILES) -> pd.DataFrame:
        """Rows (by, metric_qNN, value) for each quantile level."""
        rows = self.df[self.df["metric"] == metric]
        out = []
        for key, group in rows.groupby(by):
            for q in qs:
                out.append({by: key, "metric": f"{metric}_q{int(round(100 * q)):02d}", "value": group["value"].quantile(q)})
        return pd.DataFrame(out)

    def survival_fraction(self, by: str = "eps") -> pd.Series:
        """Fraction of (ε, seed) cells that finished without a blow-up."""
        cells = self.df.drop_duplicates(subset=[by, "seed"])
        return (~cells["blowup"].astype(bool)).groupby(cells[by]).mean()

    def median_ratio(self, metric: str, by: str = "eps") -> float:
        """max/min of the per-group medians."""
        med = self.medians(metric, by)
        return float(med.max() / med.min())

    def relative_spread(self, metric: str, by: str = "eps") -> float:
        return self.median_ratio(metric, by) - 1.0

    def growth_factors(self, metric: str, by: str = "eps") -> pd.Series:
        """Median at each finer level over the median at the level before it, indexed by the finer level."""
        med = self.medians(metric, by).sort_index(ascending=False)
        return pd.Series(med.to_numpy()[1:] / med.to_numpy()[:-1], index=med.index[1:], dtype=float)

    def is_decreasing(self, metric: str, by: str = "eps") -> bool:
        """Medians strictly decrease as `by` decreases (finer lattices)."""
        med = self.medians(metric, by).sort_index(ascending=False)
        return bool(np.all(np.diff(med.to_numpy()) < 0))

    def tidy(self, metric: str) -> pd.DataFrame:
        """Long format (experiment, eps, seed, t, metric, value); distributions come as quantile rows."""
        if metric not in self.metrics():
            stem = metric.rsplit("_q", 1)[0]
            if stem in self.metrics() and metric != stem:
                return self._tidy_quantile(stem, metric)
            raise ArgumentError(f"unknown metric {metric!r}, available: {', '.join(self.metrics())}")
        rows = self.df[self.df["metric"] == metric].copy()
        rows["experiment"] = self.experiment
        for col in TIDY_COLUMNS:
            if col not in rows:
                rows[col] = np.nan
        return rows[TIDY_COLUMNS].sort_values(["eps", "seed", "t"], na_position="first").reset_index(drop=True)

    def _tidy_quantile(self, stem: str, metric: str) -> pd.DataFrame:
        table = self.quantiles(stem)
        table = table[table["metric"] == metric].copy()
        table["experiment"] = self.experiment
        table["seed"] = np.nan
        table["t"] = np.nan
        return table[TIDY_COLUMNS].reset_index(drop=True)


def convergence_order(errors, refinement: float = 2.0) -> float:
    """Observed order from errors of successive refinements: log(e_k/e_{k+1}) / log(refinement), averaged."""
    errors = np.asarray(errors, dtype=float)
    if errors.size < 2 or np.any(errors <= 0):
        raise ArgumentError("need at least two positive errors")
    return float(np.mean(np.log(errors[:-1] / errors[1:]) / np.log(refinement)))
