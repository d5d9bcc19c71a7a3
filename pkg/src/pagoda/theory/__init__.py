"""Numerical checks of the stability, optimality and error-bound claims on exact instances."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from ..nd.checkpoint import atomic_write
from . import bounds, optimality, stability

__all__ = ["bounds", "optimality", "stability", "report", "run_lab", "LABS"]


def report(instance_id, claim_id, lhs=None, rhs=None, spectrum=None, holds=None, **extra):
    out = {"instance": instance_id, "claim": claim_id, "lhs": lhs, "rhs": rhs, "holds": holds}
    if spectrum is not None:
        sp = np.asarray(spectrum)
        out["spectrum"] = [[float(z.real), float(z.imag)] for z in sp]
    out.update(extra)
    return out


def _stability_lab(out_dir, h=0.05, steps=4000):
    rows = []
    cases = [("dirac", dict(eta=1.0), 0.1), ("dirac", dict(eta=0.0), 0.1), ("dirac", dict(eta=1.0, kappa=1.0), 0.1), ("mixture", dict(eta=5.0), 0.01)]
    for name, kw, pert in cases:
        inst, th, ps = stability.SHIPPED[name](**kw)
        R, eta_min = stability.restricted_jacobian(inst, th, ps)
        hc = stability.hurwitz_check(R.J)
        sim = stability.simulate_altgd(inst, th + pert, ps + pert, h, steps, th, ps)
        lam_max = float(np.max(np.abs(hc["spectrum"])))
        rows.append(report(
            inst.name, "local-stability", lhs=hc["max_real_part"], rhs=-1e-10, spectrum=hc["spectrum"],
            holds=bool(hc["is_hurwitz"] == sim["converged"]), eta=inst.eta, eta_min=eta_min,
            fitted_rate=sim["rate"], abs_lambda_max=lam_max, converged=sim["converged"],
        ))
        if out_dir is not None:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["step", "distance"] + [f"theta{i}" for i in range(inst.n_theta)] + [f"psi{i}" for i in range(inst.n_psi)])
            for k, (d, x) in enumerate(zip(sim["distance"], sim["trajectory"])):
                w.writerow([k, d, *x])
            atomic_write(Path(out_dir) / f"trajectory_{inst.name}.csv", buf.getvalue().encode())
    return rows


def _optimality_lab(out_dir):
    rows = []
    for mk, mode in ((optimality.pagoda_instance, "pagoda"), (optimality.kd_gan_instance, "kd_gan")):
        inst = mk()
        r = optimality.optimality_search(inst, mode)
        ok = r["max_gap"] == 0 if mode == "pagoda" else r["min_gap"] > 0
        rows.append(report(inst.name, f"optimality-{mode}", lhs=r["min_gap"], rhs=r["max_gap"], holds=bool(ok), minimizers=r["minimizers"]))
    return rows


def _bounds_lab(out_dir):
    rows = []
    for eps in (0.0, 0.05, 0.1):
        for T in (1.0, 2.0, 3.0):
            for gamma in (2.0, 4.0):
                inst = bounds.BoundInstance(1 / math.sqrt(gamma), T, eps)
                G = inst.distilled_generator()
                for fn in (bounds.w2_bound_check, bounds.w1_bound_check):
                    r = fn(inst, G)
                    rows.append(report(f"gauss(eps={eps},T={T},gamma={gamma})", r["claim"], r["lhs"], r["rhs"], holds=r["holds"], ratio=r["ratio"]))
    return rows


LABS = {"stability": _stability_lab, "optimality": _optimality_lab, "bounds": _bounds_lab}


def run_lab(name, out_dir=None):
    """Run one lab (or "all") and write report.json (+ trajectory CSVs) to ``out_dir``."""
    names = list(LABS) if name == "all" else [name]
    for n in names:
        if n not in LABS:
            raise ValueError(f"unknown lab {n!r}; choose from {sorted(LABS)} or 'all'")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    rows = [r for n in names for r in LABS[n](out_dir)]
    if out_dir is not None:
        atomic_write(Path(out_dir) / "report.json", json.dumps(rows, indent=1).encode())
    return rows
