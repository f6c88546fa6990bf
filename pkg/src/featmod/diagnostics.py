"""Hidden-state probes: modulation influence, feature drift, token classes.

All probes reduce to per-token cosine distances between paired hidden
states. Degenerate vectors follow a fixed convention: distance 0 when both
vectors are zero, 1 when exactly one is.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditioning import VisualContext
from .model import ForwardCapture, Model, forward
from .tensors import ConfigError, ShapeError


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), clamped to [0, 2].

    Conventions: identical vectors give exactly 0 (no rounding residue);
    two zero vectors give 0; exactly one zero vector gives 1.
    """
    if np.array_equal(a, b):
        return 0.0
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(np.clip(1.0 - float(np.dot(a, b)) / (na * nb), 0.0, 2.0))


def _row_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([cosine_distance(a[i], b[i]) for i in range(a.shape[0])])


@dataclass
class LayerStats:
    layer: int
    mean: float
    min: float
    max: float


@dataclass
class DiagnosticTrace:
    """Per-token distances, one row per probed layer, plus exact aggregates."""

    layers: list[int]
    per_token: np.ndarray  # (len(layers), T)
    token_labels: list[str] | None = None

    def __post_init__(self) -> None:
        if self.per_token.ndim != 2 or self.per_token.shape[0] != len(self.layers):
            raise ShapeError(
                f"per_token shape {self.per_token.shape} does not match {len(self.layers)} layers"
            )

    @property
    def per_layer(self) -> list[LayerStats]:
        return [
            LayerStats(
                layer=layer,
                mean=float(row.mean()),
                min=float(row.min()),
                max=float(row.max()),
            )
            for layer, row in zip(self.layers, self.per_token)
        ]


def modulation_influence(model: Model, t_emb: np.ndarray, visual: VisualContext) -> DiagnosticTrace:
    """Distance between each modulated layer's plain-normalization output and
    its modulated output, per token, from a single forward pass.

    When both slots of a block are modulated the two slot distances are
    averaged per token.
    """
    if model.cfg.paradigm != "fmi":
        raise ConfigError(f"modulation influence needs an fmi model, got {model.cfg.paradigm!r}")
    capture = ForwardCapture()
    forward(model, t_emb, visual, capture)
    layers = sorted(capture.modulation)
    rows = []
    for layer in layers:
        pairs = capture.modulation[layer]
        slot_rows = [_row_distances(plain, modulated) for plain, modulated in pairs]
        rows.append(np.mean(slot_rows, axis=0))
    return DiagnosticTrace(layers=layers, per_token=np.array(rows))


def feature_drift(
    model_a: Model,
    model_b: Model,
    t_emb: np.ndarray,
    visual: VisualContext | None,
) -> DiagnosticTrace:
    """Per-layer token distances between model_a run on text plus vision and
    model_b (the reference stack) run on text only.

    When model_a grows the sequence with a visual prefix, the trailing T
    positions are compared.
    """
    if model_a.cfg.L != model_b.cfg.L or model_a.cfg.C != model_b.cfg.C:
        raise ConfigError("models must agree on depth and width")
    cap_a = ForwardCapture()
    cap_b = ForwardCapture()
    forward(model_a, t_emb, visual, cap_a)
    forward(model_b, t_emb, None, cap_b)
    t = t_emb.shape[0]
    rows = []
    for h_a, h_b in zip(cap_a.hidden, cap_b.hidden):
        rows.append(_row_distances(h_a[-t:], h_b[-t:]))
    return DiagnosticTrace(layers=list(range(len(rows))), per_token=np.array(rows))


def token_class_influence(trace: DiagnosticTrace, labels: list[str]) -> dict[str, float]:
    """Mean distance per token class, averaged over layers and tokens.

    Classes are reported in first-appearance order; cross-class ordering is
    observational, never asserted.
    """
    if not labels:
        raise ConfigError("label list must be non-empty")
    if len(labels) != trace.per_token.shape[1]:
        raise ShapeError(
            f"{len(labels)} labels for {trace.per_token.shape[1]} tokens"
        )
    means: dict[str, float] = {}
    for label in labels:
        if label not in means:
            mask = np.array([lab == label for lab in labels])
            means[label] = float(trace.per_token[:, mask].mean())
    return means


# ---------------------------------------------------------------------------
# CSV export

def write_trace_csv(path: str | Path, trace: DiagnosticTrace) -> None:
    """One row per (layer, token) plus exact per-layer aggregates."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "token", "label", "distance", "layer_mean", "layer_min", "layer_max"])
        for stats, row in zip(trace.per_layer, trace.per_token):
            for tok in range(row.shape[0]):
                label = trace.token_labels[tok] if trace.token_labels else ""
                writer.writerow([
                    stats.layer,
                    tok,
                    label,
                    f"{row[tok]:.12g}",
                    f"{stats.mean:.12g}",
                    f"{stats.min:.12g}",
                    f"{stats.max:.12g}",
                ])
