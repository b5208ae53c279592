"""CHSH analysis of coincidence channel pairs.

Counts are binned into a 4x4 matrix indexed by (alice channel, bob
channel). For one pair of analyzer bases the correlation coefficient is

    E = (P - M) / (P + M)

where P sums the two agreeing channel combinations and M the two
disagreeing ones. Its statistical error from Poisson counting is

    sigma_E = 2 * sqrt(P * M / N^3),  N = P + M.

Four correlations at the canonical settings combine into

    S = |E(a, b) - E(a, b') + E(a', b) + E(a', b')|

which quantum mechanics bounds by 2 * sqrt(2). The equivalent error rate
of a key link running on the same correlations is
qber = (1 - S / S_qm) / 2, and S / S_qm is the receiver-side visibility.
No background subtraction is applied anywhere; the matrix is analyzed as
measured.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .simulate import MeasurementSettings
from .sync import Coincidences

S_QUANTUM_MAX = 2.0 * math.sqrt(2.0)


class EmptyBasisError(ValueError):
    """A correlation was requested for a basis pair without counts."""


@dataclass
class CoincidenceMatrix:
    """4x4 coincidence counts with the analyzer angles that produced them."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))
    settings: MeasurementSettings = field(default_factory=MeasurementSettings)
    accumulation_span: float = 0.0

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (4, 4):
            raise ValueError("counts must be a 4x4 matrix")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, other: "CoincidenceMatrix") -> "CoincidenceMatrix":
        if other.settings != self.settings:
            raise ValueError("cannot merge matrices with different settings")
        return CoincidenceMatrix(self.counts + other.counts, self.settings,
                                 self.accumulation_span + other.accumulation_span)


def accumulate(events: Coincidences, settings: MeasurementSettings | None = None,
               accumulation_span: float = 0.0) -> CoincidenceMatrix:
    """Bin matched events into a coincidence matrix."""
    settings = settings or MeasurementSettings()
    flat = events.alice_channels.astype(np.int64) * 4 + events.bob_channels.astype(np.int64)
    counts = np.bincount(flat, minlength=16).reshape(4, 4)
    return CoincidenceMatrix(counts, settings, accumulation_span)


@dataclass(frozen=True)
class CorrelationResult:
    """One basis-pair correlation coefficient."""

    e: float
    sigma: float
    angle_alice: float
    angle_bob: float
    n_total: int


def correlation_e(matrix: CoincidenceMatrix, alice_basis: int,
                  bob_basis: int) -> CorrelationResult:
    """Correlation coefficient for one pair of bases (0 = first basis).

    Channels 2*basis and 2*basis+1 are the plus and minus outputs of a
    basis, so P pairs equal outputs and M opposite ones.
    """
    if alice_basis not in (0, 1) or bob_basis not in (0, 1):
        raise ValueError("basis indices must be 0 or 1")
    a0, a1 = 2 * alice_basis, 2 * alice_basis + 1
    b0, b1 = 2 * bob_basis, 2 * bob_basis + 1
    c = matrix.counts
    agree = int(c[a0, b0] + c[a1, b1])
    disagree = int(c[a0, b1] + c[a1, b0])
    n = agree + disagree
    if n == 0:
        raise EmptyBasisError(
            f"no counts for basis pair ({alice_basis}, {bob_basis})")
    e = (agree - disagree) / n
    sigma = 2.0 * math.sqrt(agree * disagree / n**3)
    return CorrelationResult(e, sigma, matrix.settings.alice_angles[a0],
                             matrix.settings.bob_angles[b0], n)


def chsh_s(correlations: tuple[CorrelationResult, CorrelationResult,
                               CorrelationResult, CorrelationResult]) -> tuple[float, float]:
    """CHSH S and its propagated error.

    Expects the four correlations ordered (a,b), (a,b'), (a',b), (a',b');
    the second term enters with a minus sign.
    """
    e1, e2, e3, e4 = correlations
    s = abs(e1.e - e2.e + e3.e + e4.e)
    sigma = math.sqrt(e1.sigma**2 + e2.sigma**2 + e3.sigma**2 + e4.sigma**2)
    return s, sigma


def qber_from_s(s: float) -> float:
    """Equivalent qubit error rate of a link with a given S, clamped to [0, 1]."""
    return min(1.0, max(0.0, 0.5 * (1.0 - s / S_QUANTUM_MAX)))


def visibility_from_s(s: float) -> float:
    """Receiver-side visibility implied by S, clamped to [0, 1]."""
    return min(1.0, max(0.0, s / S_QUANTUM_MAX))


@dataclass(frozen=True)
class BellReport:
    """Full analysis summary for one accumulated matrix."""

    matrix: CoincidenceMatrix
    correlations: tuple[CorrelationResult, CorrelationResult,
                        CorrelationResult, CorrelationResult]
    s: float
    s_sigma: float
    s_quantum: float
    qber: float
    visibility: float
    coincidence_total: int
    locked_seconds: float

    def to_dict(self) -> dict:
        return {
            "counts": self.matrix.counts.tolist(),
            "alice_angles": list(self.matrix.settings.alice_angles),
            "bob_angles": list(self.matrix.settings.bob_angles),
            "correlations": [
                {"angle_alice": c.angle_alice, "angle_bob": c.angle_bob,
                 "e": c.e, "sigma": c.sigma, "n": c.n_total}
                for c in self.correlations
            ],
            "s": self.s,
            "s_sigma": self.s_sigma,
            "s_quantum": self.s_quantum,
            "qber": self.qber,
            "visibility": self.visibility,
            "coincidence_total": self.coincidence_total,
            "locked_seconds": self.locked_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_text(self) -> str:
        settings = self.matrix.settings
        lines = ["coincidence counts"]
        header = "  alice \\ bob " + "".join(f"{b:>9.1f}" for b in settings.bob_angles)
        lines.append(header)
        for i, a in enumerate(settings.alice_angles):
            row = "".join(f"{int(n):>9d}" for n in self.matrix.counts[i])
            lines.append(f"  {a:>11.1f} {row}")
        lines.append("correlations")
        for c in self.correlations:
            lines.append(f"  E({c.angle_alice:.1f}, {c.angle_bob:.1f}) = "
                         f"{c.e:+.4f} +- {c.sigma:.4f}  (n = {c.n_total})")
        lines.append(f"S           = {self.s:.4f} +- {self.s_sigma:.4f}"
                     f"  (quantum max {self.s_quantum:.4f})")
        lines.append(f"qber        = {100.0 * self.qber:.2f} %")
        lines.append(f"visibility  = {100.0 * self.visibility:.2f} %")
        if self.locked_seconds > 0:
            rate = self.coincidence_total / self.locked_seconds
            lines.append(f"coincidences = {self.coincidence_total} in "
                         f"{self.locked_seconds:.1f} locked s ({rate:.1f} /s)")
        else:
            lines.append(f"coincidences = {self.coincidence_total}")
        return "\n".join(lines) + "\n"


def bell_report(matrix: CoincidenceMatrix, locked_seconds: float = 0.0) -> BellReport:
    """Analyze a matrix at the canonical CHSH basis ordering."""
    correlations = (
        correlation_e(matrix, 0, 0),
        correlation_e(matrix, 0, 1),
        correlation_e(matrix, 1, 0),
        correlation_e(matrix, 1, 1),
    )
    s, s_sigma = chsh_s(correlations)
    return BellReport(
        matrix=matrix,
        correlations=correlations,
        s=s,
        s_sigma=s_sigma,
        s_quantum=S_QUANTUM_MAX,
        qber=qber_from_s(s),
        visibility=visibility_from_s(s),
        coincidence_total=matrix.total,
        locked_seconds=locked_seconds,
    )
