"""Test-time evaluation: log-likelihood, error rate, and calibration.

Calibration uses the standard binned expected calibration error:
confidence is the max class probability, bins are equal-width on (0, 1]
with right-closed edges, and the score is the count-weighted mean
absolute gap between per-bin confidence and accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-12  # clamp before log so the likelihood is never -inf


@dataclass(frozen=True)
class ReliabilityBin:
    low: float
    high: float
    count: int
    confidence: float  # mean max-probability in the bin, 0 if empty
    accuracy: float  # fraction correct in the bin, 0 if empty


@dataclass
class EvalReport:
    mean_loglik: float  # nats per example
    error: float
    ece: float
    bins: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mean_loglik": self.mean_loglik,
            "error": self.error,
            "ece": self.ece,
            "bins": [vars(b) for b in self.bins],
        }


def log_likelihood(probs, labels):
    """Mean log predicted probability of the true label, in nats."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(np.log(np.maximum(picked, PROB_FLOOR)).mean())


def error_rate(probs, labels):
    """Fraction misclassified by the argmax rule (ties to the lowest index)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    return float((probs.argmax(axis=1) != labels).mean())


def ece(probs, labels, bins=10):
    """Expected calibration error and per-bin reliability data."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    confidence = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    # bin k covers (k/bins, (k+1)/bins]; confidences are > 0 so ceil-1 is safe
    idx = np.ceil(confidence * bins).astype(int) - 1
    idx = np.clip(idx, 0, bins - 1)

    total = 0.0
    out = []
    for k in range(bins):
        mask = idx == k
        count = int(mask.sum())
        if count > 0:
            conf_k = float(confidence[mask].mean())
            acc_k = float(correct[mask].mean())
            total += (count / n) * abs(acc_k - conf_k)
        else:
            conf_k, acc_k = 0.0, 0.0
        out.append(ReliabilityBin(k / bins, (k + 1) / bins, count, conf_k, acc_k))
    return total, out


def evaluate_predictions(probs, labels, bins=10):
    """Bundle the three test metrics into one report."""
    score, bin_data = ece(probs, labels, bins)
    return EvalReport(
        mean_loglik=log_likelihood(probs, labels),
        error=error_rate(probs, labels),
        ece=score,
        bins=bin_data,
    )


def reliability_csv(bins):
    """Reliability-diagram data as CSV text."""
    lines = ["bin_low,bin_high,count,confidence,accuracy"]
    for b in bins:
        lines.append(f"{b.low:.6g},{b.high:.6g},{b.count},{b.confidence:.17g},{b.accuracy:.17g}")
    return "\n".join(lines) + "\n"
