"""Evaluation: ROC-AUC, navigation metrics, score CDFs, alignment exports.

AUC is the tie-aware rank statistic P(score+ > score-) + 0.5 P(tie) computed
by a single sorted sweep with midrank tie handling; it matches the brute-force
pairwise count exactly because both numerators are sums of halves, which are
exact in float64 at these sizes.
"""

from __future__ import annotations

import csv
import io

import numpy as np

from .common import InputError, MetricError, atomic_write_bytes, atomic_write_text
from .envgraph import EnvironmentGraph, Path

DEFAULT_SUCCESS_THRESHOLD_M = 3.0


def auc(scored) -> float:
    """Area under the ROC curve from (score, label) pairs, ties at half credit."""
    scores = []
    labels = []
    for s, y in scored:
        scores.append(float(s))
        labels.append(int(bool(y)))
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc needs at least one positive and one negative example")
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    rank_sum_pos = 0.0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        midrank = (i + j) / 2.0 + 1.0  # ranks are 1-based
        for k in range(i, j + 1):
            if labels[order[k]]:
                rank_sum_pos += midrank
        i = j + 1
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def nav_metrics(
    env: EnvironmentGraph,
    reference: Path,
    predicted: Path,
    d_th: float = DEFAULT_SUCCESS_THRESHOLD_M,
) -> dict[str, float]:
    """PL, NE, SR, SPL for one episode; both paths must share the environment."""
    if not (d_th > 0):
        raise InputError(f"success threshold must be > 0, got {d_th}")
    if reference.env_id != env.env_id or predicted.env_id != env.env_id:
        raise InputError(
            f"episode mixes environments: ref={reference.env_id!r} pred={predicted.env_id!r} env={env.env_id!r}"
        )
    pl = env.path_length(predicted)
    ne = env.geodesic(predicted.nodes[-1], reference.nodes[-1])
    sr = 1.0 if ne < d_th else 0.0
    optimal = env.geodesic(reference.nodes[0], reference.nodes[-1])
    if optimal == 0.0:
        spl = sr
    else:
        spl = sr * optimal / max(pl, optimal)
    return {"PL": pl, "NE": ne, "SR": sr, "SPL": spl}


def aggregate_metrics(rows) -> dict[str, float]:
    rows = list(rows)
    if not rows:
        raise MetricError("cannot aggregate zero episodes")
    return {key: sum(r[key] for r in rows) / len(rows) for key in ("PL", "NE", "SR", "SPL")}


def score_cdf(named_scores: dict[str, list[float]]) -> tuple[list[dict], dict[str, float]]:
    """Empirical CDF rows at every sample point plus the per-dataset means."""
    rows = []
    means = {}
    for name in sorted(named_scores):
        values = sorted(float(v) for v in named_scores[name])
        if not values:
            raise MetricError(f"score_cdf: dataset {name!r} is empty")
        n = len(values)
        for i, v in enumerate(values):
            rows.append({"dataset": name, "score": v, "cdf": (i + 1) / n})
        means[name] = sum(values) / n
    return rows, means


def cdf_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=("dataset", "score", "cdf"), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({"dataset": row["dataset"], "score": repr(row["score"]), "cdf": repr(row["cdf"])})
    return buf.getvalue()


def matrix_to_csv(a: np.ndarray) -> str:
    lines = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(a)]
    return "\n".join(lines) + "\n"


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [
        [float(cell) for cell in line.split(",")]
        for line in text.strip().splitlines()
        if line.strip()
    ]
    return np.asarray(rows, dtype=np.float64)


def matrix_to_pgm(a: np.ndarray) -> bytes:
    """8-bit binary PGM, min-max normalized; darker pixels mean higher alignment."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    n, m = a.shape
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < 1e-300:
        pixels = np.full((n, m), 128, dtype=np.uint8)
    else:
        normalized = (a - lo) / (hi - lo)
        pixels = np.round(255.0 * (1.0 - normalized)).astype(np.uint8)
    header = f"P5 {m} {n} 255\n".encode("ascii")
    return header + pixels.tobytes()


def export_alignment(
    a: np.ndarray,
    token_labels,
    step_labels,
    out_prefix: str,
) -> dict[str, str]:
    """Write <prefix>.csv, <prefix>.pgm and <prefix>.labels.json; returns the paths."""
    from .common import canonical_json

    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape != (len(token_labels), len(step_labels)):
        raise InputError(
            f"alignment export: matrix {a.shape} does not match {len(token_labels)} tokens "
            f"x {len(step_labels)} steps"
        )
    paths = {
        "csv": out_prefix + ".csv",
        "pgm": out_prefix + ".pgm",
        "labels": out_prefix + ".labels.json",
    }
    atomic_write_text(paths["csv"], matrix_to_csv(a))
    atomic_write_bytes(paths["pgm"], matrix_to_pgm(a))
    atomic_write_text(
        paths["labels"],
        canonical_json({"tokens": list(token_labels), "steps": list(step_labels)}) + "\n",
    )
    return paths


def diagonality(a: np.ndarray) -> float:
    """Pearson correlation of per-row argmax position against row index, both in [0, 1].

    Quantifies how diagonal the alignment looks: 1 for a monotone left-to-right
    pattern, -1 for a reversed one, 0 when every row peaks in the same column.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2 or a.shape[1] < 2:
        raise MetricError(f"diagonality needs an (n>=2, m>=2) matrix, got shape {a.shape}")
    n, m = a.shape
    x = np.argmax(a, axis=1) / (m - 1)
    y = np.arange(n) / (n - 1)
    sx = x.std()
    sy = y.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    r = float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))
    return max(-1.0, min(1.0, r))
