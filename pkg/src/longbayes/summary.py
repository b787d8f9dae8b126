"""Activation areas and longitudinal reliability statistics."""

from dataclasses import dataclass, asdict
import csv

import numpy as np

METHODS = ("bayes", "classical-bonferroni", "classical-fdr")


@dataclass(frozen=True)
class ActivationRecord:
    subject_id: str
    visit_id: str
    method: str
    gamma: float
    hemisphere: str
    area: float


def activation_area(active, vertex_areas):
    """Total surface area (mm^2) of the active vertices."""
    active = np.asarray(active, bool)
    vertex_areas = np.asarray(vertex_areas, float)
    if active.shape != vertex_areas.shape:
        raise ValueError(f"map has {active.size} vertices, areas have {vertex_areas.size}")
    return float(vertex_areas[active].sum())


def write_records(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "visit_id", "method", "gamma", "hemisphere", "area"])
        for r in records:
            w.writerow([r.subject_id, r.visit_id, r.method, repr(r.gamma), r.hemisphere,
                        repr(r.area)])


def read_records(path):
    with open(path, newline="") as fh:
        return [ActivationRecord(r["subject_id"], r["visit_id"], r["method"], float(r["gamma"]),
                                 r["hemisphere"], float(r["area"])) for r in csv.DictReader(fh)]


def _cv(sd, mean):
    return sd / mean if mean != 0 else float("nan")


def subject_stats(areas):
    """(mean, sample SD, CV) of one subject's areas across visits."""
    a = np.asarray(areas, float)
    if a.size < 2:
        raise ValueError("need at least 2 visits")
    m, s = float(a.mean()), float(a.std(ddof=1))
    return m, s, _cv(s, m)


def reliability_stats(records):
    """Within-subject and between-subject variability of activation size.

    Records are grouped by (method, gamma, hemisphere). Returns
    ``(per_subject, per_method)``: rows with subject mean/SD/within-CV, and
    rows with between-subject CV plus the OLS slope and intercept of SD on
    mean.
    """
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.gamma, r.hemisphere), {}) \
              .setdefault(r.subject_id, []).append(r.area)
    per_subject, per_method = [], []
    for (method, gamma, hemi), subs in sorted(groups.items()):
        means, sds = [], []
        for sid, areas in sorted(subs.items()):
            if len(areas) < 2:
                continue
            m, s, cv = subject_stats(areas)
            means.append(m)
            sds.append(s)
            per_subject.append({"method": method, "gamma": gamma, "hemisphere": hemi,
                                "subject_id": sid, "n_visits": len(areas), "mean": m,
                                "sd": s, "within_cv": cv})
        if len(means) < 2:
            continue
        means, sds = np.array(means), np.array(sds)
        between = _cv(float(means.std(ddof=1)), float(means.mean()))
        if np.ptp(means) > 0:
            slope, intercept = np.polyfit(means, sds, 1)
        else:
            slope, intercept = float("nan"), float("nan")
        cvs = np.array([r["within_cv"] for r in per_subject[-len(means):]])
        # subjects with zero mean area have no CV
        med_cv = float(np.median(cvs[np.isfinite(cvs)])) if np.isfinite(cvs).any() \
            else float("nan")
        per_method.append({"method": method, "gamma": gamma, "hemisphere": hemi,
                           "n_subjects": len(means), "between_cv": between,
                           "median_within_cv": med_cv,
                           "sd_mean_slope": float(slope), "sd_mean_intercept": float(intercept)})
    return per_subject, per_method


def write_rows(path, rows):
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
