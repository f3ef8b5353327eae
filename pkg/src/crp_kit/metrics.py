"""Evaluation: SI-SDR, compressed-domain MSE and the per-pair evaluation harness."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .network import Checkpoint
from .sampler import PRINTED, Schedule, solve_reverse
from .sde import BbedParams
from .spectral import CompressedSpec, ShapeError, TimeSignal, synthesise

log = logging.getLogger(__name__)

SI_SDR_CAP_DB = 100.0
METHODS = ("baseline_dsm", "crp", "predictive")


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB."""
    s = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    s_hat = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if s.shape != s_hat.shape:
        raise ShapeError(f"length mismatch: {s.shape} vs {s_hat.shape}")
    ref_energy = np.dot(s, s)
    if ref_energy == 0:
        raise ValueError("SI-SDR is undefined for an all-zero reference")
    alpha = np.dot(s_hat, s) / ref_energy
    target = alpha * s
    err = np.dot(target - s_hat, target - s_hat)
    sig = np.dot(target, target)
    if err <= sig * 10 ** (-SI_SDR_CAP_DB / 10):
        return SI_SDR_CAP_DB
    return float(10 * np.log10(sig / err))


def compressed_mse(a, b) -> float:
    """Mean squared complex modulus of ``a - b`` over all entries."""
    if isinstance(a, CompressedSpec) and isinstance(b, CompressedSpec):
        if (a.alpha, a.beta) != (b.alpha, b.beta):
            raise ShapeError("compression parameters differ")
    av = np.asarray(getattr(a, "values", a))
    bv = np.asarray(getattr(b, "values", b))
    if av.shape != bv.shape:
        raise ShapeError(f"shape mismatch: {av.shape} vs {bv.shape}")
    d = av - bv
    return float(np.mean(d.real ** 2 + d.imag ** 2))


@dataclass
class EvalRecord:
    pair_id: int
    method: str
    nfe: int
    si_sdr_db: float
    compressed_mse: float
    seed: int
    capped: bool = False
    warning: str = ""


@dataclass
class TestSet:
    """Held-out pairs in both representations."""

    clean: list          # TimeSignal per pair
    x0: np.ndarray       # (N, K, F) compressed clean
    y: np.ndarray        # (N, K, F) compressed noisy
    ids: list
    meta: object = None  # StftMeta used for synthesis


def method_of(ck: Checkpoint) -> str:
    return {"dsm": "baseline_dsm", "crp": "crp", "predictive": "predictive"}[ck.stage]


def enhance_batch(ck: Checkpoint, y, sched: Schedule | None, seed, mode="em",
                  p=BbedParams(), convention=PRINTED, corrector=None):
    """Enhance a batch of compressed mixtures. Returns ``(estimates, nfe)``."""
    net = ck.eval_net()
    if ck.stage == "predictive":
        return net(y, y, None), 1
    res = solve_reverse(y, net, sched, p, np.random.default_rng(seed), mode=mode,
                        corrector=corrector, convention=convention)
    return res.estimate, res.nfe


def evaluate_method(ck: Checkpoint, test: TestSet, sched: Schedule | None, mode="em",
                    seeds=(0,), p=BbedParams(), convention=PRINTED, corrector=None,
                    method: str | None = None) -> list[EvalRecord]:
    """Enhance every test pair for every seed and score it."""
    method = method or method_of(ck)
    warning = ""
    if ck.stage == "crp" and sched is not None and ck.schedule is not None \
            and list(sched.times) != list(ck.schedule):
        warning = "schedule differs from the one the checkpoint was tuned for"
        log.warning("%s: %s", method, warning)
    records = []
    for seed in seeds:
        est, nfe = enhance_batch(ck, test.y, sched, seed, mode, p, convention, corrector)
        for i, pid in enumerate(test.ids):
            mse = compressed_mse(est[i], test.x0[i])
            ref = test.clean[i]
            spec = CompressedSpec(est[i], stft_meta=test.meta) if test.meta else CompressedSpec(est[i])
            sig = synthesise(spec, len(ref))
            val = si_sdr(ref, sig)
            records.append(EvalRecord(int(pid), method, int(nfe), val, mse, int(seed),
                                      val >= SI_SDR_CAP_DB, warning))
    return records


RECORD_FIELDS = [f for f in EvalRecord.__dataclass_fields__]


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        w.writeheader()
        for r in records:
            row = asdict(r)
            row["si_sdr_db"] = repr(float(row["si_sdr_db"])) if np.isfinite(row["si_sdr_db"]) else ""
            row["compressed_mse"] = repr(float(row["compressed_mse"])) if np.isfinite(row["compressed_mse"]) else ""
            w.writerow(row)


def summarise(records) -> dict:
    """Per-method, per-NFE mean and standard deviation of both metrics."""
    out: dict = {}
    for r in records:
        if r.warning and not np.isfinite(r.compressed_mse):
            continue
        out.setdefault(r.method, {}).setdefault(r.nfe, []).append(r)
    summary = {}
    for method, by_nfe in out.items():
        curve = []
        for nfe in sorted(by_nfe):
            rs = by_nfe[nfe]
            mse = np.array([r.compressed_mse for r in rs])
            sdr = np.array([r.si_sdr_db for r in rs])
            curve.append({"nfe": nfe, "n": len(rs),
                          "compressed_mse_mean": float(mse.mean()),
                          "compressed_mse_std": float(mse.std()),
                          "si_sdr_db_mean": float(sdr.mean()),
                          "si_sdr_db_std": float(sdr.std())})
        summary[method] = curve
    return summary


def write_summary_json(summary, path):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
