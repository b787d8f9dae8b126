"""Configuration-driven batch pipeline: prep, fit, excur, summarize, lmm."""

from concurrent.futures import ProcessPoolExecutor
import copy
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import time

import numpy as np

from . import __version__
from .bayes import (FitOptions, HyperPriors, fit_bayes_longitudinal, read_fit, write_fit)
from .classical import bh_fdr, bonferroni, fit_classical
from .excursions import excursion_sets
from .formats import read_vertex_map, write_vertex_map
from .longitudinal import (ALS_HAND, ALS_TOTAL, HC_INTERCEPT, ITEM_NAMES, ClinicalVisit,
                           ModelSpec, aic, coefficient_curve, disability_scores, fit_lmm, lrt,
                           progression_rate, windowing)
from .summary import (ActivationRecord, activation_area, read_records, reliability_stats,
                      write_records, write_rows)
from .surface import assemble_fem, load_mesh
from .timeseries import (DataError, HrfParams, SessionData, prepare_session, read_bold,
                         read_schedule, read_table)

log = logging.getLogger(__name__)

STAGES = ("prep", "fit", "excur", "summarize", "lmm")

DEFAULTS = {
    "output_dir": "output",
    "sessions": None,
    "clinical": None,
    "hrf": {},
    "scrub": {"multiplier": 4.0, "exclusion_fraction": 0.25},
    "priors": {},
    "fit": {},
    "gammas": [0.0, 1.0, 2.0],
    "alpha": 0.05,
    "excursion": {"n_samples": 5000, "seed": 0},
    "classical": {"alternative": "two-sided"},
    "lmm": {"method": "bayes", "exclude": [], "window_days": 730, "curve_points": 41,
            "curve_quantile": 0.9, "lrt_gamma": None, "lrt_hemisphere": None},
    "workers": 1,
    "seed": 0,
    "simulate": None,
}


class ConfigError(ValueError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path, overrides=None):
    """Read the JSON config, fill defaults and validate.

    Relative paths are resolved against the config file's directory, except
    paths inside the output directory produced by ``simulate``.
    """
    try:
        with open(path) as fh:
            user = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, user)
    cfg = _merge(cfg, overrides or {})
    base = os.path.dirname(os.path.abspath(path))
    cfg["output_dir"] = os.path.normpath(os.path.join(base, cfg["output_dir"]))
    for key in ("sessions", "clinical"):
        if cfg[key]:
            cfg[key] = os.path.normpath(os.path.join(base, cfg[key]))
    if cfg["sessions"] is None:
        if not cfg["simulate"]:
            raise ConfigError("config needs 'sessions' or a 'simulate' block")
        sim = os.path.join(cfg["output_dir"], "simulated")
        cfg["sessions"] = os.path.join(sim, "sessions.csv")
        cfg["clinical"] = os.path.join(sim, "clinical.csv")
    try:
        HrfParams(**cfg["hrf"])
        HyperPriors(**cfg["priors"])
        FitOptions(**cfg["fit"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid parameter block: {exc}") from None
    if not 0 < cfg["alpha"] < 1:
        raise ConfigError("alpha must be in (0, 1)")
    if any(g < 0 for g in cfg["gammas"]) or not cfg["gammas"]:
        raise ConfigError("gammas must be a nonempty list of nonnegative values")
    if int(cfg["excursion"]["n_samples"]) < 1000:
        raise ConfigError("excursion.n_samples must be >= 1000")
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    if cfg["classical"]["alternative"] not in ("two-sided", "greater"):
        raise ConfigError("classical.alternative must be 'two-sided' or 'greater'")
    return cfg


# ------------------------------------------------------------------ helpers

def _out(cfg, *parts):
    return os.path.join(cfg["output_dir"], *parts)


def _read_sessions(cfg):
    path = cfg["sessions"]
    if not os.path.exists(path):
        raise DataError(f"session table not found: {path}")
    base = os.path.dirname(path)
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            r = dict(r)
            for k in ("mesh", "bold", "schedule", "nuisance"):
                if r.get(k):
                    r[k] = os.path.normpath(os.path.join(base, r[k]))
            r.setdefault("hemisphere", "left")
            r["hemisphere"] = r["hemisphere"] or "left"
            r.setdefault("group", "")
            r["tag"] = f"{r['subject_id']}_{r['visit_id']}_{r['hemisphere']}"
            rows.append(r)
    if not rows:
        raise DataError(f"{path}: no sessions")
    return rows


def _units(rows):
    """(subject, hemisphere) fitting units in first-appearance order."""
    units = {}
    for r in rows:
        units.setdefault((r["subject_id"], r["hemisphere"]), []).append(r)
    return units


def _stage_key(payload):
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def _manifest_path(cfg, stage):
    return _out(cfg, stage, "manifest.json")


def _load_manifest(cfg, stage):
    p = _manifest_path(cfg, stage)
    if not os.path.exists(p):
        return None
    with open(p) as fh:
        return json.load(fh)


def _outputs_exist(cfg, man):
    return all(os.path.exists(_out(cfg, o)) for o in man.get("outputs", []))


def _write_manifest(cfg, stage, key, inputs, outputs, seconds, extra=None):
    man = {"stage": stage, "key": key, "version": __version__, "seed": cfg["seed"],
           "inputs": inputs, "outputs": sorted(outputs), "seconds": seconds,
           "finished": dt.datetime.now().isoformat(timespec="seconds")}
    man.update(extra or {})
    with open(_manifest_path(cfg, stage), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
    return man


def _upstream_checksums(cfg, stage):
    man = _load_manifest(cfg, stage)
    if man is None:
        raise DataError(f"stage '{stage}' has not been run (no {_manifest_path(cfg, stage)})")
    return man


def _verify(cfg, recorded):
    """Check that recorded file checksums still match."""
    for path, digest in sorted(recorded.items()):
        full = path if os.path.isabs(path) else _out(cfg, path)
        if not os.path.exists(full):
            raise DataError(f"missing input {full}")
        now = sha256_file(full)
        if now != digest:
            raise DataError(f"checksum mismatch for {full}: sha256 {now}, expected {digest}")


def _run_stage(cfg, stage, key_payload, inputs, body, force):
    os.makedirs(_out(cfg, stage), exist_ok=True)
    key = _stage_key({"payload": key_payload, "inputs": inputs, "version": __version__})
    man = _load_manifest(cfg, stage)
    if not force and man and man.get("key") == key and _outputs_exist(cfg, man):
        log.info("%s: up to date, skipping", stage)
        return man, False
    t0 = time.perf_counter()
    outputs, extra = body()
    man = _write_manifest(cfg, stage, key, inputs, outputs, time.perf_counter() - t0, extra)
    log.info("%s: done in %.1f s", stage, man["seconds"])
    return man, True


def _rel(cfg, path):
    return os.path.relpath(path, cfg["output_dir"])


def _checksums(cfg, paths):
    return {p if os.path.isabs(p) else p: sha256_file(p if os.path.isabs(p) else _out(cfg, p))
            for p in paths}


# ------------------------------------------------------------------ simulate

def stage_simulate(cfg, force=False):
    from .synth import SynthStudyConfig, generate_study, write_studies

    sim = cfg["simulate"]
    if not sim:
        raise ConfigError("no 'simulate' block in config")
    cohorts = sim.get("cohorts", [sim])
    dest = _out(cfg, "simulated")

    def body():
        studies = []
        for i, c in enumerate(cohorts):
            c = dict(c)
            c.setdefault("seed", cfg["seed"] + i)
            try:
                studies.append(generate_study(SynthStudyConfig(**c)))
            except TypeError as exc:
                raise ConfigError(f"simulate cohort {i}: {exc}") from None
        os.makedirs(dest, exist_ok=True)
        files = write_studies(studies, dest)
        return [_rel(cfg, f) for f in files], {}

    return _run_stage(cfg, "simulated", {"simulate": sim, "seed": cfg["seed"]}, {}, body, force)


# ------------------------------------------------------------------ prep

def _prep_one(args):
    row, hrf, scrub, out_npz, out_scrub = args
    Y = read_bold(row["bold"])
    mesh = load_mesh(row["mesh"])
    if Y.shape[1] != mesh.n_vertices:
        raise DataError(f"{row['bold']}: {Y.shape[1]} columns but mesh {row['mesh']} "
                        f"has {mesh.n_vertices} vertices")
    Y = Y[:, mesh.mask]
    sched = read_schedule(row["schedule"])
    N = read_table(row["nuisance"])[0] if row.get("nuisance") else None
    sess, rep = prepare_session(Y, sched, N, HrfParams(**hrf), scrub,
                                row["visit_id"], row["subject_id"])
    np.savez(out_npz, Y=sess.Y, X_task=sess.X_task, N=sess.N_nuisance, keep=sess.keep_flags,
             df=sess.df, meta=json.dumps(sess.meta))
    rep.write(out_scrub)
    return {"tag": row["tag"], "excluded": bool(rep.session_excluded),
            "fraction_flagged": rep.fraction_flagged}


def _load_session(path, row):
    z = np.load(path)
    return SessionData(z["Y"], z["X_task"], z["N"], z["keep"], row["visit_id"],
                       row["subject_id"], int(z["df"]), json.loads(str(z["meta"])))


def _map(cfg, fn, items):
    if int(cfg["workers"]) > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=int(cfg["workers"])) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def stage_prep(cfg, force=False):
    rows = _read_sessions(cfg)
    raw = set()
    for r in rows:
        for k in ("mesh", "bold", "schedule", "nuisance"):
            if r.get(k):
                if not os.path.exists(r[k]):
                    raise DataError(f"missing input file {r[k]} (session {r['tag']})")
                raw.add(r[k])
    inputs = _checksums(cfg, sorted(raw) + [cfg["sessions"]])

    def body():
        jobs = [(r, cfg["hrf"], cfg["scrub"], _out(cfg, "prep", r["tag"] + ".npz"),
                 _out(cfg, "prep", r["tag"] + "_scrub.csv")) for r in rows]
        res = _map(cfg, _prep_one, jobs)
        outputs = [_rel(cfg, j[3]) for j in jobs] + [_rel(cfg, j[4]) for j in jobs]
        return outputs, {"sessions": res}

    return _run_stage(cfg, "prep", {"hrf": cfg["hrf"], "scrub": cfg["scrub"]}, inputs, body,
                      force)


# ------------------------------------------------------------------ fit

def _fit_unit(args):
    (sid, hemi), rows, excluded, cfg = args
    mesh = load_mesh(rows[0]["mesh"])
    if any(r["mesh"] != rows[0]["mesh"] for r in rows):
        raise DataError(f"subject {sid} ({hemi}): visits use different meshes")
    fem = assemble_fem(mesh)
    use = [r for r in rows if r["tag"] not in excluded]
    outputs = []
    if not use:
        return outputs, None
    sessions = [_load_session(_out(cfg, "prep", r["tag"] + ".npz"), r) for r in use]
    fit = fit_bayes_longitudinal(sessions, fem, HyperPriors(**cfg["priors"]),
                                 FitOptions(**cfg["fit"]))
    d = _out(cfg, "fit", f"{sid}_{hemi}")
    write_fit(fit, d, mesh.checksum())
    outputs += [os.path.join(d, f) for f in sorted(os.listdir(d))]
    for r, s in zip(use, sessions):
        cf = fit_classical(s, cfg["classical"]["alternative"])
        p = _out(cfg, "fit", r["tag"] + "_classical.csv")
        cf.write(p)
        write_vertex_map(_out(cfg, "fit", r["tag"] + "_pvals.bin"), cf.pvals)
        write_vertex_map(_out(cfg, "fit", r["tag"] + "_tstat.bin"), cf.tstat)
        outputs += [p, _out(cfg, "fit", r["tag"] + "_pvals.bin"),
                    _out(cfg, "fit", r["tag"] + "_tstat.bin")]
    return outputs, {"unit": f"{sid}_{hemi}", "theta_hat": fit.theta_hat.as_dict(),
                     "converged": fit.diagnostics["converged"],
                     "seconds": fit.diagnostics["seconds"]}


def stage_fit(cfg, force=False):
    rows = _read_sessions(cfg)
    prep = _upstream_checksums(cfg, "prep")
    _verify(cfg, prep["inputs"])
    prep_out = {o: sha256_file(_out(cfg, o)) for o in prep["outputs"]}
    excluded = {s["tag"] for s in prep["sessions"] if s["excluded"]}
    units = _units(rows)

    def body():
        res = _map(cfg, _fit_unit, [(u, rs, excluded, cfg) for u, rs in units.items()])
        outputs = [_rel(cfg, o) for r in res for o in r[0]]
        return outputs, {"units": [r[1] for r in res if r[1]], "excluded": sorted(excluded)}

    return _run_stage(cfg, "fit", {"priors": cfg["priors"], "fit": cfg["fit"],
                                   "classical": cfg["classical"]}, prep_out, body, force)


# ------------------------------------------------------------------ excursions

def _classical_maps(cfg, tag, alpha):
    p = read_vertex_map(_out(cfg, "fit", tag + "_pvals.bin"))
    t = read_vertex_map(_out(cfg, "fit", tag + "_tstat.bin"))
    pos = t > 0  # activation maps count positive effects
    return {"classical-bonferroni": bonferroni(p, alpha) & pos,
            "classical-fdr": bh_fdr(p, alpha) & pos}


def _excur_unit(args):
    (sid, hemi), rows, cfg = args
    d = _out(cfg, "fit", f"{sid}_{hemi}")
    outputs = []
    if not os.path.exists(os.path.join(d, "fit.json")):
        return outputs
    fit = read_fit(d)
    ex = cfg["excursion"]
    for r in rows:
        if r["visit_id"] not in fit.visit_ids:
            continue
        seed = int(hashlib.sha256(f"{ex['seed']}:{r['tag']}".encode()).hexdigest()[:8], 16)
        sets = excursion_sets(fit, r["visit_id"], cfg["gammas"], cfg["alpha"],
                              int(ex["n_samples"]), seed)
        for g, res in sets.items():
            stem = _out(cfg, "excur", f"{r['tag']}_bayes_g{g:g}")
            res.write(stem)
            outputs += [stem + ".bin", stem + ".json"]
        for m, active in _classical_maps(cfg, r["tag"], cfg["alpha"]).items():
            p = _out(cfg, "excur", f"{r['tag']}_{m}.bin")
            write_vertex_map(p, active)
            outputs.append(p)
    return outputs


def stage_excur(cfg, force=False):
    rows = _read_sessions(cfg)
    fitm = _upstream_checksums(cfg, "fit")
    inputs = {o: sha256_file(_out(cfg, o)) for o in fitm["outputs"]}

    def body():
        res = _map(cfg, _excur_unit, [(u, rs, cfg) for u, rs in _units(rows).items()])
        return [_rel(cfg, o) for r in res for o in r], {}

    return _run_stage(cfg, "excur", {"gammas": cfg["gammas"], "alpha": cfg["alpha"],
                                     "excursion": cfg["excursion"]}, inputs, body, force)


# ------------------------------------------------------------------ summarize

def stage_summarize(cfg, force=False):
    rows = _read_sessions(cfg)
    exm = _upstream_checksums(cfg, "excur")
    inputs = {o: sha256_file(_out(cfg, o)) for o in exm["outputs"]}

    def body():
        records = []
        areas_by_mesh = {}
        for r in rows:
            if r["mesh"] not in areas_by_mesh:
                areas_by_mesh[r["mesh"]] = assemble_fem(load_mesh(r["mesh"])).vertex_areas
            va = areas_by_mesh[r["mesh"]]
            for g in cfg["gammas"]:
                p = _out(cfg, "excur", f"{r['tag']}_bayes_g{g:g}.bin")
                if os.path.exists(p):
                    records.append(ActivationRecord(r["subject_id"], r["visit_id"], "bayes",
                                                    float(g), r["hemisphere"],
                                                    activation_area(read_vertex_map(p), va)))
            for m in ("classical-bonferroni", "classical-fdr"):
                p = _out(cfg, "excur", f"{r['tag']}_{m}.bin")
                if os.path.exists(p):
                    records.append(ActivationRecord(r["subject_id"], r["visit_id"], m, 0.0,
                                                    r["hemisphere"],
                                                    activation_area(read_vertex_map(p), va)))
        group = {r["subject_id"]: r.get("group", "") for r in rows}
        files = {"areas": _out(cfg, "summarize", "areas.csv"),
                 "subj": _out(cfg, "summarize", "reliability_subject.csv"),
                 "meth": _out(cfg, "summarize", "reliability_method.csv")}
        write_records(files["areas"], records)
        hc = [rec for rec in records if group.get(rec.subject_id) == "HC"] or records
        per_subject, per_method = reliability_stats(hc)
        write_rows(files["subj"], per_subject)
        write_rows(files["meth"], per_method)
        return [_rel(cfg, f) for f in files.values()], {}

    return _run_stage(cfg, "summarize", {}, inputs, body, force)


# ------------------------------------------------------------------ lmm

def _parse_date(s):
    return dt.date.fromisoformat(s) if s else None


def read_clinical(path):
    visits = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            items = None
            if all(r.get(n, "") != "" for n in ITEM_NAMES):
                items = tuple(int(r[n]) for n in ITEM_NAMES)
            visits.append(ClinicalVisit(r["subject_id"], r["group"], _parse_date(r["visit_date"]),
                                        _parse_date(r["enrollment_date"]),
                                        _parse_date(r.get("onset_date", "")), items,
                                        r.get("visit_id", "")))
    return visits


def _curve_rows(fit, predictor, hi, n, held):
    grid = np.linspace(0.0, hi, n)
    mean, se, ex = coefficient_curve(fit, predictor, grid, held)
    return [{"x": float(x), "mean": float(m), "se": float(s), "extrapolated": bool(e)}
            for x, m, s, e in zip(grid, mean, se, ex)]


def run_lmm(cfg, records, visits):
    """All mixed-model analyses; returns a dict of tables."""
    lc = cfg["lmm"]
    method = lc["method"]
    area = {(r.subject_id, r.visit_id, r.gamma, r.hemisphere): r.area
            for r in records if r.method == method}
    hemis = sorted({r.hemisphere for r in records})
    als = [v for v in visits if v.group == "ALS" and v.alsfrs_items is not None]
    hc = [v for v in visits if v.group == "HC"]
    out = {"fits": [], "lrt": [], "curves": {}, "progression": []}

    by_sub = {}
    for v in als:
        by_sub.setdefault(v.subject_id, []).append(v)
    classes = {}
    for sid, vs in sorted(by_sub.items()):
        last = max(vs, key=lambda v: v.visit_date)
        if last.onset_date is None:
            continue
        rate, cls = progression_rate(last.total, last.onset_date, last.visit_date)
        classes[sid] = cls
        out["progression"].append({"subject_id": sid, "rate_per_month": rate, "class": cls})

    als_w = windowing(als, lc["window_days"], exclude=set(lc["exclude"]))
    hc_w = windowing(hc, lc["window_days"])

    def dataset(vs, gamma, hemi):
        y, g, pred = [], [], {"D_tot": [], "D_hand": [], "D_oth": []}
        for v in vs:
            key = (v.subject_id, v.visit_id, float(gamma), hemi)
            if key not in area:
                continue
            y.append(area[key])
            g.append(v.subject_id)
            if v.alsfrs_items is not None:
                dtot, dh, do = disability_scores(v.alsfrs_items)
                pred["D_tot"].append(dtot)
                pred["D_hand"].append(dh)
                pred["D_oth"].append(do)
        return np.array(y), np.array(g), {k: np.array(x) for k, x in pred.items()}

    def record(fit, gamma, hemi, cohort):
        out["fits"].append({"model": fit.spec.name, "cohort": cohort, "gamma": gamma,
                            "hemisphere": hemi, "n_obs": fit.n_obs,
                            "n_subjects": fit.n_subjects, "loglik": fit.loglik,
                            "reml_loglik": fit.reml_loglik, "aic": aic(fit),
                            "sigma2_b": fit.random_intercept_var, "sigma2": fit.residual_var,
                            "fixed_effects": dict(zip(fit.names, fit.fixed_effects.tolist()))})

    def try_fit(spec, y, pred, g):
        try:
            return fit_lmm(spec, y, pred, g)
        except ValueError as exc:
            log.warning("%s skipped: %s", spec.name, exc)
            return None

    for hemi in hemis:
        for gamma in cfg["gammas"]:
            y, g, pred = dataset(als_w, gamma, hemi)
            if len(np.unique(g)) >= 2 and len(np.unique(pred["D_hand"])) >= 4:
                f2 = try_fit(ALS_TOTAL, y, pred, g)
                f3 = try_fit(ALS_HAND, y, pred, g)
                if f2 is None or f3 is None:
                    continue
                record(f2, gamma, hemi, "ALS")
                record(f3, gamma, hemi, "ALS")
                hi_h = float(np.quantile(pred["D_hand"], lc["curve_quantile"]))
                hi_o = float(np.quantile(pred["D_oth"], lc["curve_quantile"]))
                out["curves"][f"als_hand_{hemi}_g{gamma:g}_D_hand"] = _curve_rows(
                    f3, "D_hand", hi_h, lc["curve_points"], {"D_oth": 0.0})
                out["curves"][f"als_hand_{hemi}_g{gamma:g}_D_oth"] = _curve_rows(
                    f3, "D_oth", hi_o, lc["curve_points"], {"D_hand": 0.0})
                out["curves"][f"als_total_{hemi}_g{gamma:g}_D_tot"] = _curve_rows(
                    f2, "D_tot", float(np.quantile(pred["D_tot"], lc["curve_quantile"])),
                    lc["curve_points"], {})
                for cls in ("moderate", "fast"):
                    sel = np.array([classes.get(s) == cls for s in g])
                    if sel.sum() > 6 and len(np.unique(g[sel])) >= 2 \
                            and len(np.unique(pred["D_hand"][sel])) >= 4:
                        fc = try_fit(ALS_HAND, y[sel], {k: x[sel] for k, x in pred.items()},
                                     g[sel])
                        if fc is not None:
                            record(fc, gamma, hemi, f"ALS-{cls}")
            y, g, pred = dataset(hc_w, gamma, hemi)
            if len(np.unique(g)) >= 2:
                fh = try_fit(HC_INTERCEPT, y, {}, g)
                if fh is not None:
                    record(fh, gamma, hemi, "HC")
                    out["curves"][f"hc_{hemi}_g{gamma:g}"] = [
                        {"x": 0.0, "mean": float(fh.fixed_effects[0]),
                         "se": float(np.sqrt(fh.fixed_cov[0, 0])), "extrapolated": False}]

    # model-selection LRTs (by default: first hemisphere, smallest gamma)
    lg = lc["lrt_gamma"] if lc["lrt_gamma"] is not None else min(cfg["gammas"])
    lh = lc["lrt_hemisphere"] or (hemis[0] if hemis else None)
    y, g, pred = dataset(als_w, lg, lh)
    if len(np.unique(g)) >= 2 and len(np.unique(pred["D_hand"])) >= 4 \
            and len(np.unique(pred["D_oth"])) >= 4:
        forms = {"none": None, "linear": "linear", "spline": "spline"}
        for target, other in (("D_hand", ("D_oth", "linear")), ("D_oth", ("D_hand", "spline"))):
            fits = {}
            for label, kind in forms.items():
                terms = ((other,) if kind is None else ((target, kind), other))
                fits[label] = try_fit(ModelSpec(f"{target}_{label}", terms), y, pred, g)
            if any(f is None for f in fits.values()):
                continue
            for null, alt in (("none", "linear"), ("linear", "spline")):
                st, df, p = lrt(fits[null], fits[alt])
                out["lrt"].append({"predictor": target, "null": null, "alternative": alt,
                                   "statistic": st, "df": df, "p": p,
                                   "aic_null": aic(fits[null]), "aic_alt": aic(fits[alt]),
                                   "gamma": lg, "hemisphere": lh})
    return out


def stage_lmm(cfg, force=False):
    summ = _upstream_checksums(cfg, "summarize")
    inputs = {o: sha256_file(_out(cfg, o)) for o in summ["outputs"]}
    clin = cfg["clinical"]
    if clin and os.path.exists(clin):
        inputs[clin] = sha256_file(clin)

    def body():
        records = read_records(_out(cfg, "summarize", "areas.csv"))
        visits = read_clinical(clin) if clin and os.path.exists(clin) else []
        res = run_lmm(cfg, records, visits)
        files = [_out(cfg, "lmm", "fits.json"), _out(cfg, "lmm", "lrt.csv"),
                 _out(cfg, "lmm", "progression.csv")]
        with open(files[0], "w") as fh:
            json.dump(res["fits"], fh, indent=2, sort_keys=True)
        write_rows(files[1], res["lrt"])
        write_rows(files[2], res["progression"])
        os.makedirs(_out(cfg, "lmm", "curves"), exist_ok=True)
        for name, rows_ in res["curves"].items():
            p = _out(cfg, "lmm", "curves", name + ".csv")
            write_rows(p, rows_)
            files.append(p)
        return [_rel(cfg, f) for f in files], {}

    return _run_stage(cfg, "lmm", {"lmm": cfg["lmm"], "gammas": cfg["gammas"]}, inputs, body,
                      force)


# ------------------------------------------------------------------ report

def write_report(cfg):
    """Acceptance-report table summarizing a run (uses truth.json when present)."""
    rows = []
    records = read_records(_out(cfg, "summarize", "areas.csv"))
    for m in ("bayes", "classical-bonferroni", "classical-fdr"):
        for g in sorted({r.gamma for r in records if r.method == m}):
            a = [r.area for r in records if r.method == m and r.gamma == g]
            rows.append({"metric": f"median_area[{m},gamma={g:g}]",
                         "value": float(np.median(a)) if a else float("nan")})
    truth_path = os.path.join(os.path.dirname(cfg["sessions"]), "truth.json")
    if os.path.exists(truth_path):
        with open(truth_path) as fh:
            truth = json.load(fh)
        fp = []
        for s in truth["sessions"]:
            tag = None
            for r in _read_sessions(cfg):
                if r["subject_id"] == s["subject_id"] and r["visit_id"] == s["visit_id"]:
                    tag = r["tag"]
            p = _out(cfg, "excur", f"{tag}_bayes_g{min(cfg['gammas']):g}.bin")
            if tag and os.path.exists(p):
                active = read_vertex_map(p)
                fp.append(bool(np.any(active & (np.asarray(s["beta_hrf"]) <= min(cfg["gammas"])))))
        if fp:
            rows.append({"metric": "sessions_with_false_positive_fraction",
                         "value": float(np.mean(fp))})
    curves = _out(cfg, "lmm", "curves")
    if os.path.isdir(curves):
        for f in sorted(os.listdir(curves)):
            if f.startswith("als_hand_") and f.endswith("_D_hand.csv"):
                with open(os.path.join(curves, f), newline="") as fh:
                    mean = np.array([float(r["mean"]) for r in csv.DictReader(fh)])
                signs = np.sign(np.diff(mean))
                signs = signs[signs != 0]
                changes = int(np.sum(signs[1:] != signs[:-1])) if signs.size else 0
                shape = "rise-then-fall" if signs.size and signs[0] > 0 and signs[-1] < 0 \
                    and changes == 1 else "other"
                rows.append({"metric": f"curve_shape[{f[:-4]}]", "value": shape})
    write_rows(_out(cfg, "report.csv"), rows)
    return rows


STAGE_FUNCS = {"prep": stage_prep, "fit": stage_fit, "excur": stage_excur,
               "summarize": stage_summarize, "lmm": stage_lmm}


def run_all(cfg, force=False):
    if cfg["simulate"] and not os.path.exists(cfg["sessions"]):
        stage_simulate(cfg, force)
    for st in STAGES:
        STAGE_FUNCS[st](cfg, force)
    return write_report(cfg)


def save_resolved_config(cfg):
    os.makedirs(cfg["output_dir"], exist_ok=True)
    with open(_out(cfg, "config.resolved.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
