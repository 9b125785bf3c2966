"""Gradient-flow diagnostics: the kappa metrics, the two training rules,
and the weight-variance studies.

kappa0 measures how close the last layer's logits sit to the softmax
saturation region; kappa1/kappa2 are the proportionality constants of the
gradient-variance relation between adjacent linear layers (with and
without batch normalization).  Healthy training keeps kappa0 well below
one and kappa1 of order one.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor, mean_square_value, no_grad
from .quant import RescaleMode, dorefa_clamp, quantize_weight, signed_clamped

__all__ = [
    "LayerStats",
    "DiagnosticsRecord",
    "kappa0",
    "kappa1",
    "kappa2",
    "collect_records",
    "collect_static_records",
    "EtrReport",
    "etr_check",
    "clamp_variance_study",
    "quant_variance_study",
    "records_to_csv",
    "records_to_json",
    "CSV_COLUMNS",
]

CSV_COLUMNS = (
    "step", "layer", "n_in", "n_hat", "k_pool", "var_weight", "var_grad",
    "kappa0", "kappa1", "kappa2", "alpha", "lr",
)

ETR1_PASS = 0.1
ETR1_WARN = 1.0
ETR2_LOW = 0.1
ETR2_HIGH = 10.0


@dataclass
class LayerStats:
    """Variance snapshot of one linear layer at one step."""

    n_in: int
    n_hat: int
    k_pool: float
    var_weight: float
    var_grad: float | None


def kappa0(var_weight_last: float, n_last: int, k_pool: float) -> float:
    """Saturation metric of the last fully-connected layer."""
    if var_weight_last <= 0 or n_last <= 0 or k_pool <= 0:
        raise ValueError("kappa0 inputs must be positive")
    return n_last * var_weight_last / (k_pool * k_pool)


def kappa1(stats_l: LayerStats, stats_l1: LayerStats) -> float:
    """Gradient-flow constant between adjacent layers (BN case).

    NaN marks a dead layer (zero gradient variance) rather than raising.
    """
    if not stats_l.var_grad or not stats_l1.var_grad:
        return float("nan")
    weight_ratio = (stats_l.n_in * stats_l.var_weight) / (
        stats_l1.n_hat * stats_l1.var_weight
    )
    grad_ratio = stats_l.var_grad / stats_l1.var_grad
    return (stats_l.k_pool**2) * weight_ratio * grad_ratio


def kappa2(stats_l: LayerStats, stats_l1: LayerStats) -> float:
    """Gradient-flow constant between adjacent layers (no-BN case)."""
    if not stats_l.var_grad or not stats_l1.var_grad:
        return float("nan")
    denom = stats_l1.n_hat * stats_l1.var_weight * stats_l1.var_grad
    return (stats_l.k_pool**4) * stats_l.var_grad / denom


@dataclass
class DiagnosticsRecord:
    """Per-step, per-layer snapshot row.

    ``k_pool`` is the pool kernel of the layer's own block as built (max
    pools keep their true kernel here even though the kappa computation
    counts them as 1, so either convention can be recomputed offline).
    """

    step: int
    layer: int
    n_in: int
    n_hat: int
    k_pool: float
    var_weight: float
    var_grad: float | None
    kappa0: float | None
    kappa1: float | None
    kappa2: float | None
    alpha: float | None
    lr: float | None


def _layer_stats(infos, with_grad: bool) -> list[LayerStats]:
    stats = []
    for info in infos:
        eff = info.layer.last_effective
        if eff is None:
            with no_grad():
                eff = info.layer.effective()
        var_w = mean_square_value(eff.data)
        var_g = None
        if with_grad and eff.grad is not None:
            var_g = mean_square_value(eff.grad)
        stats.append(
            LayerStats(
                n_in=info.layer.n_in,
                n_hat=info.layer.n_hat,
                k_pool=info.kappa_k,
                var_weight=var_w,
                var_grad=var_g,
            )
        )
    return stats


def collect_records(model, step: int, lr: float | None) -> list[DiagnosticsRecord]:
    """Sample one row per linear layer from the most recent backward pass.

    Must run after ``loss.backward()`` and before the optimizer step so the
    gradients are the raw loss gradients, untouched by weight decay or
    momentum.  kappa1/kappa2 are attached to the lower layer of each
    adjacent pair; pairs that straddle a residual add are left blank.
    """
    infos = model.linear_infos()
    stats = _layer_stats(infos, with_grad=True)
    records = []
    last = len(infos) - 1
    for i, (info, st) in enumerate(zip(infos, stats)):
        k0 = k1 = k2 = None
        if i == last:
            k0 = kappa0(st.var_weight, st.n_in, infos[i].preceding_pool_k)
        elif not info.skip_boundary:
            nxt = stats[i + 1]
            if st.var_grad is not None and nxt.var_grad is not None:
                k1 = kappa1(st, nxt)
                k2 = kappa2(st, nxt)
        records.append(
            DiagnosticsRecord(
                step=step,
                layer=info.index,
                n_in=st.n_in,
                n_hat=st.n_hat,
                k_pool=info.k_pool,
                var_weight=st.var_weight,
                var_grad=st.var_grad,
                kappa0=k0,
                kappa1=k1,
                kappa2=k2,
                alpha=info.pact.alpha_value if info.pact else None,
                lr=lr,
            )
        )
    return records


def collect_static_records(model) -> list[DiagnosticsRecord]:
    """Weight-only snapshot (no gradients), e.g. from a loaded checkpoint."""
    infos = model.linear_infos()
    stats = _layer_stats(infos, with_grad=False)
    records = []
    last = len(infos) - 1
    for i, (info, st) in enumerate(zip(infos, stats)):
        k0 = None
        if i == last:
            k0 = kappa0(st.var_weight, st.n_in, infos[i].preceding_pool_k)
        records.append(
            DiagnosticsRecord(
                step=0, layer=info.index, n_in=st.n_in, n_hat=st.n_hat,
                k_pool=info.k_pool, var_weight=st.var_weight, var_grad=None,
                kappa0=k0, kappa1=None, kappa2=None,
                alpha=info.pact.alpha_value if info.pact else None, lr=None,
            )
        )
    return records


@dataclass
class EtrRow:
    rule: str
    scope: str
    verdict: str   # PASS | WARN | FAIL
    value: float | None
    detail: str = ""


@dataclass
class EtrReport:
    rows: list

    @property
    def passed(self) -> bool:
        return all(r.verdict == "PASS" for r in self.rows)

    def verdict(self, rule: str) -> str:
        verdicts = [r.verdict for r in self.rows if r.rule == rule]
        for v in ("FAIL", "WARN"):
            if v in verdicts:
                return v
        return "PASS"

    def table(self) -> str:
        lines = [f"{'rule':8} {'scope':16} {'verdict':8} value"]
        for r in self.rows:
            val = "" if r.value is None else f"{r.value:.6g}"
            lines.append(f"{r.rule:8} {r.scope:16} {r.verdict:8} {val}")
        return "\n".join(lines)


def etr_check(model, records: list[DiagnosticsRecord]) -> EtrReport:
    """Verdicts for the two training rules.

    Rule 1 (logit saturation): kappa0 of the last layer < 0.1 passes,
    < 1 warns, otherwise fails.  Rule 2 (gradient scale): every linear
    layer without a following BN must either have rescaling enabled or a
    weight variance commensurate with 1/fan_out.
    """
    rows = []
    k0_values = [r.kappa0 for r in records if r.kappa0 is not None]
    if k0_values:
        worst = max(k0_values)
        verdict = "PASS" if worst < ETR1_PASS else ("WARN" if worst < ETR1_WARN else "FAIL")
        rows.append(EtrRow("ETR-I", "last-layer", verdict, worst))
    infos = model.linear_infos()
    latest: dict[int, DiagnosticsRecord] = {}
    for r in records:
        latest[r.layer] = r
    for info in infos:
        layer = info.layer
        if layer.follows_bn:
            continue
        if layer.scheme is not None and layer.scheme.rescale is not RescaleMode.NONE:
            rows.append(EtrRow("ETR-II", info.name, "PASS", None, "rescale enabled"))
            continue
        rec = latest.get(info.index)
        var_w = rec.var_weight if rec else mean_square_value(
            layer.last_effective.data if layer.last_effective is not None else layer.w.data
        )
        product = var_w * layer.n_hat
        ok = ETR2_LOW <= product <= ETR2_HIGH
        rows.append(
            EtrRow("ETR-II", info.name, "PASS" if ok else "FAIL", product,
                   "weight variance times fan-out")
        )
    return EtrReport(rows)


# -- variance studies -----------------------------------------------------


def clamp_variance_study(
    n_values, samples: int = 10_000, seed: int = 0
) -> list[tuple[int, float]]:
    """Variance amplification of tanh-max clamping vs neuron count.

    For each n, draws Gaussian weights with variance 1/n and reports
    mean_square(clamped) / mean_square(original).
    """
    if samples < 10_000:
        raise ValueError("study needs at least 10000 samples per point")
    rows = []
    for n in n_values:
        if n <= 0:
            raise ValueError(f"neuron counts must be positive, got {n}")
        rng = np.random.default_rng([seed, int(n)])
        w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(n), size=samples))
        with no_grad():
            clamped = signed_clamped(dorefa_clamp(w))
        rows.append((int(n), mean_square_value(clamped) / mean_square_value(w)))
    return rows


def quant_variance_study(
    b_values, n: int = 256, samples: int = 10_000, seed: int = 0
) -> list[tuple[int, float]]:
    """Std ratio of quantized vs clamped weights against bit-width.

    Gaussian weights with variance 1/n; reports
    sqrt(mean_square(quantized) / mean_square(clamped)) per bit-width.
    """
    rng = np.random.default_rng([seed, int(n)])
    w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(n), size=samples))
    rows = []
    with no_grad():
        wt = dorefa_clamp(w)
        base = mean_square_value(signed_clamped(wt))
        for b in b_values:
            if b < 1:
                raise ValueError(f"bit-widths must be >= 1, got {b}")
            q = quantize_weight(wt, int(b))
            rows.append((int(b), math.sqrt(mean_square_value(q) / base)))
    return rows


# -- serialization ----------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def records_to_csv(records: list[DiagnosticsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def records_to_json(records: list[DiagnosticsRecord]) -> str:
    def clean(d):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in d.items()}

    return json.dumps([clean(asdict(r)) for r in records], indent=1)
