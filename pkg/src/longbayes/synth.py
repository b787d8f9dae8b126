"""Synthetic meshes, GMRF fields and multi-visit fMRI studies."""

from dataclasses import dataclass, field, asdict
import csv
import datetime as dt
import json
import os

import numpy as np
import scipy.sparse as sp

from .linalg import SparseCholesky
from .surface import SurfaceMesh, assemble_fem, spde_precision, write_mesh, SpdePrecision
from .timeseries import (SessionData, block_schedule, build_task_regressors, HrfParams,
                         nuisance_regress, write_bold, write_schedule, write_table)
from .longitudinal import ITEM_NAMES, HAND_ITEMS


# ------------------------------------------------------------------ meshes

def grid_patch(nx, ny=None, spacing=2.0):
    """Planar rectangular grid, each cell split into two triangles."""
    ny = nx if ny is None else ny
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    i, j = np.meshgrid(np.arange(ny - 1), np.arange(nx - 1), indexing="ij")
    a = (i * nx + j).ravel()
    tris = np.concatenate([np.column_stack([a, a + 1, a + nx + 1]),
                           np.column_stack([a, a + nx + 1, a + nx])])
    return SurfaceMesh(verts, tris)


def _icosphere(subdivisions):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces)


def icosphere_patch(n_vertices=500, radius=70.0, bumpiness=0.08, subdivisions=None,
                    submesh=False):
    """Curved cortical-like patch: a bumpy sphere with a polar-cap mask.

    The cap angle is chosen so that about ``n_vertices`` vertices are masked.
    With ``submesh=True`` only the masked patch is returned.
    """
    if subdivisions is None:
        subdivisions = 4 if n_vertices <= 800 else 5
    unit, faces = _icosphere(subdivisions)
    theta = np.arccos(np.clip(unit[:, 2], -1, 1))
    phi = np.arctan2(unit[:, 1], unit[:, 0])
    r = radius * (1 + bumpiness * np.sin(5 * theta) * np.cos(3 * phi))
    verts = unit * r[:, None]
    order = np.argsort(theta, kind="stable")
    mask = np.zeros(len(unit), bool)
    mask[order[:min(n_vertices, len(unit))]] = True
    # drop rim vertices that belong to no fully masked triangle
    inside = mask[faces].all(axis=1)
    mask[:] = False
    mask[np.unique(faces[inside])] = True
    mesh = SurfaceMesh(verts, faces, mask)
    if submesh:
        return mesh.submesh()[0]
    return mesh


def make_mesh(kind="grid", n_vertices=300, spacing=2.0):
    if kind == "grid":
        nx = max(3, int(round(np.sqrt(n_vertices))))
        ny = max(3, int(round(n_vertices / nx)))
        return grid_patch(nx, ny, spacing)
    if kind == "icosphere":
        return icosphere_patch(n_vertices)
    raise ValueError(f"unknown mesh fixture {kind!r}")


# ------------------------------------------------------------------ fields

def sample_gmrf(Q, seed=None, n_samples=None):
    """Exact draw(s) from N(0, Q^{-1}); returns (V,) or (n_samples, V)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Qm = Q.Q if isinstance(Q, SpdePrecision) else Q
    x = SparseCholesky(Qm).sample(1 if n_samples is None else n_samples, rng)
    return x[:, 0] if n_samples is None else x.T


def bump(vertices, center, width, amplitude):
    """Gaussian-profile activation (sd ``width`` mm) peaking at ``center``."""
    d2 = np.sum((vertices - np.asarray(center, float)) ** 2, axis=1)
    return amplitude * np.exp(-0.5 * d2 / width ** 2)


# ------------------------------------------------------------------ studies

def inverted_u(d, base=1.2, slope=9.0, curv=13.0):
    """Default inverted-U amplitude (% signal change) vs hand disability."""
    return np.maximum(base + slope * d - curv * d ** 2, 0.0)


@dataclass
class SynthStudyConfig:
    mesh: str = "grid"                 # fixture name or mesh file path
    n_vertices: int = 300
    n_subjects: int = 1
    n_visits: int = 2
    n_volumes: int = 150
    TR: float = 2.0
    n_dropped_initial: int = 0
    kappa: tuple = (0.3, 0.3)
    tau: tuple = (1.0, 1.0)
    sigma2: float = 1.0
    field_source: str = "prior"        # prior | activation | prior+activation
    amplitude: float = 2.0             # peak % signal change of the injected bump
    width: float = 6.0                 # bump sd, mm
    center: tuple = None               # default: vertex nearest the patch centroid
    trajectory: str = "constant"       # constant | inverted_u | list of multipliers
    subject_amplitude_sd: float = 0.0  # between-subject spread of the bump amplitude
    group: str = "HC"                  # HC | ALS
    spikes: int = 0
    nuisance: bool = False
    baseline: float = 1000.0
    seed: int = 0

    def as_dict(self):
        return asdict(self)


@dataclass
class SynthSession:
    subject_id: str
    visit_id: str
    group: str
    Y_raw: np.ndarray          # T x V_full, raw scanner units
    schedule: object
    N: np.ndarray              # T x p nuisance regressors
    beta: np.ndarray           # K x V_masked true fields
    spike_volumes: list
    visit_day: int


@dataclass
class SynthStudy:
    config: SynthStudyConfig
    mesh: SurfaceMesh
    fem: object
    sessions: list
    clinical: list = field(default_factory=list)

    def session_data(self, i):
        """Model-space SessionData for session i (no scrubbing, exact model).

        The data are the masked PSC signal with the intercept projected out, as
        the preparation pipeline would produce for clean data.
        """
        s = self.sessions[i]
        Yraw = s.Y_raw[:, self.fem.vertex_index]
        m = Yraw.mean(axis=0)
        Y = 100.0 * (Yraw - m) / m
        X = build_task_regressors(s.schedule)
        N = s.N if s.N.size else None
        Yr, Xr, df = nuisance_regress(Y, X, N)
        p = 0 if N is None else N.shape[1]
        return SessionData(Yr, Xr, np.zeros((Y.shape[0], p)) if N is None else N,
                           np.ones(Y.shape[0], bool), s.visit_id, s.subject_id, df)

    def subject_sessions(self, subject_id):
        return [i for i, s in enumerate(self.sessions) if s.subject_id == subject_id]

    def subjects(self):
        return list(dict.fromkeys(s.subject_id for s in self.sessions))


def _schedule(cfg):
    # 30 s task blocks, 15 s rest, repeated to fill the run
    period = 45.0
    length = cfg.TR * (cfg.n_volumes + cfg.n_dropped_initial)
    n_blocks = max(1, int((length - 10.0) // period))
    return block_schedule(n_blocks, 30.0, 15.0, cfg.TR, cfg.n_volumes, cfg.n_dropped_initial,
                          lead=10.0)


def _motion(rng, T):
    steps = rng.normal(0, 0.05, size=(T, 6))
    mot = np.cumsum(steps, axis=0)
    mot -= mot.mean(axis=0)
    dmot = np.vstack([np.zeros((1, 6)), np.diff(mot, axis=0)])
    t = np.linspace(-1, 1, T)
    return np.column_stack([mot, dmot, t, t ** 2 - np.mean(t ** 2)])


def _als_clinical(rng, subject, n_visits, start):
    """Visit days and ALSFRS-R items for one progressing ALS subject."""
    rate = rng.uniform(0.25, 1.1)        # hand-item points lost per visit step
    days = np.cumsum(np.r_[0, rng.integers(80, 140, n_visits - 1)])
    onset = start - dt.timedelta(days=int(rng.integers(200, 500)))
    hand0 = rng.uniform(10.5, 12.0)
    oth0 = rng.uniform(31, 36)
    rows = []
    for j, d in enumerate(days):
        hand = np.clip(hand0 - rate * 1.6 * j - rng.normal(0, 0.3), 0, 12)
        oth = np.clip(oth0 - rate * 2.0 * j - rng.normal(0, 0.5), 0, 36)
        items = np.zeros(12, int)
        h = int(round(hand))
        hand_items = [min(4, max(0, h // 3 + (1 if k < h % 3 else 0))) for k in range(3)]
        o = int(round(oth))
        other = [min(4, max(0, o // 9 + (1 if k < o % 9 else 0))) for k in range(9)]
        hi = iter(hand_items)
        oi = iter(other)
        for k, name in enumerate(ITEM_NAMES):
            items[k] = next(hi) if name in HAND_ITEMS else next(oi)
        rows.append({"subject_id": subject, "group": "ALS", "visit_id": str(j + 1),
                     "visit_date": (start + dt.timedelta(days=int(d))).isoformat(),
                     "onset_date": onset.isoformat(), "enrollment_date": start.isoformat(),
                     **{n: int(v) for n, v in zip(ITEM_NAMES, items)}})
    return rows


def _hc_clinical(rng, subject, n_visits, start):
    days = np.cumsum(np.r_[0, rng.integers(80, 160, n_visits - 1)])
    return [{"subject_id": subject, "group": "HC", "visit_id": str(j + 1),
             "visit_date": (start + dt.timedelta(days=int(d))).isoformat(),
             "onset_date": "", "enrollment_date": start.isoformat(),
             **{n: "" for n in ITEM_NAMES}} for j, d in enumerate(days)]


def _multipliers(cfg, clinical_rows):
    if cfg.trajectory == "constant":
        return np.ones(cfg.n_visits)
    if cfg.trajectory == "inverted_u":
        from .longitudinal import disability_scores
        d = np.array([disability_scores([r[n] for n in ITEM_NAMES])[1] for r in clinical_rows])
        return inverted_u(d) / cfg.amplitude
    mult = np.asarray(cfg.trajectory, float)
    if mult.shape != (cfg.n_visits,):
        raise ValueError("trajectory list needs one multiplier per visit")
    return mult


def generate_study(cfg):
    """Simulate every subject and visit of a study.

    Fields come from the SPDE prior, from an injected Gaussian bump on the
    HRF task, or both. The observed signal is ``sum_k x_k beta_k + eps`` plus
    optional nuisance drifts and spikes, mapped to raw units around
    ``baseline``. Identical configs give identical outputs.
    """
    if cfg.field_source not in ("prior", "activation", "prior+activation"):
        raise ValueError(f"unknown field_source {cfg.field_source!r}")
    if os.path.exists(str(cfg.mesh)):
        from .surface import load_mesh
        mesh = load_mesh(cfg.mesh)
    else:
        mesh = make_mesh(cfg.mesh, cfg.n_vertices)
    fem = assemble_fem(mesh)
    vm = mesh.vertices[fem.vertex_index]
    center = cfg.center
    if center is None:
        c = vm.mean(axis=0)
        center = vm[np.argmin(np.sum((vm - c) ** 2, axis=1))]
    elif np.min(np.sum((vm - np.asarray(center)) ** 2, axis=1)) > (3 * cfg.width) ** 2:
        raise ValueError("activation center lies outside the masked patch")
    K = 2
    precisions = [spde_precision(fem, k, t).Q for k, t in zip(cfg.kappa, cfg.tau)]
    sched = _schedule(cfg)
    X = build_task_regressors(sched, HrfParams())
    T = cfg.n_volumes
    root = np.random.SeedSequence(cfg.seed)
    sessions, clinical = [], []
    start = dt.date(2015, 1, 5)
    prefix = "A" if cfg.group == "ALS" else "H"
    for i, ss in enumerate(root.spawn(cfg.n_subjects)):
        rng = np.random.default_rng(ss)
        sid = f"{prefix}{i + 1:02d}"
        if cfg.group == "ALS":
            rows = _als_clinical(rng, sid, cfg.n_visits, start)
        else:
            rows = _hc_clinical(rng, sid, cfg.n_visits, start)
        clinical += rows
        mult = _multipliers(cfg, rows)
        subj_amp = cfg.amplitude * max(0.0, 1 + cfg.subject_amplitude_sd * rng.standard_normal())
        for j in range(cfg.n_visits):
            beta = np.zeros((K, fem.n))
            if "prior" in cfg.field_source:
                for k in range(K):
                    beta[k] = SparseCholesky(precisions[k]).sample(1, rng)[:, 0]
            if "activation" in cfg.field_source:
                beta[0] += bump(vm, center, cfg.width, subj_amp * mult[j])
            eps = rng.normal(0.0, np.sqrt(cfg.sigma2), size=(T, fem.n))
            sig = X @ beta + eps
            Nmat = np.zeros((T, 0))
            if cfg.nuisance:
                Nmat = _motion(rng, T)
                sig += Nmat @ rng.normal(0, 0.5, size=(Nmat.shape[1], fem.n))
            full = rng.normal(0.0, np.sqrt(cfg.sigma2), size=(T, mesh.n_vertices))
            full[:, fem.vertex_index] = sig
            spikes = sorted(rng.choice(T, cfg.spikes, replace=False).tolist()) if cfg.spikes else []
            sd = full.std()
            for t in spikes:
                full[t] += 10.0 * sd
            full -= full.mean(axis=0)
            Y_raw = cfg.baseline * (1.0 + full / 100.0)
            sessions.append(SynthSession(sid, str(j + 1), cfg.group, Y_raw, sched, Nmat, beta,
                                         spikes, j))
    return SynthStudy(cfg, mesh, fem, sessions, clinical)


def study_sessions(cfg):
    """Shortcut: generate a study and return (study, model-space sessions)."""
    study = generate_study(cfg)
    return study, [study.session_data(i) for i in range(len(study.sessions))]


# ------------------------------------------------------------------ files

def write_study(study, directory, hemisphere="left"):
    """Write one study in the pipeline's input formats; see :func:`write_studies`."""
    return write_studies([study], directory, hemisphere)


def write_studies(studies, directory, hemisphere="left"):
    """Write one or more cohorts into a single pipeline input directory.

    Creates ``mesh_<subject>.txt``, ``bold/``, ``schedule/``, ``nuisance/``,
    ``clinical.csv``, ``sessions.csv`` and ``truth.json``, and returns the
    list of files written.
    """
    for sub in ("bold", "schedule", "nuisance"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    seen = set()
    for study in studies:
        dup = seen & set(study.subjects())
        if dup:
            raise ValueError(f"duplicate subject ids across cohorts: {sorted(dup)}")
        seen |= set(study.subjects())
    rows, clinical, files = [], [], []
    truth = {"cohorts": [], "sessions": []}
    for study in studies:
        for sid in study.subjects():
            p = os.path.join(directory, f"mesh_{sid}.txt")
            write_mesh(study.mesh, p)
            files.append(p)
        truth["cohorts"].append({"config": study.config.as_dict(),
                                 "subjects": study.subjects(),
                                 "vertex_index": study.fem.vertex_index.tolist()})
        for s in study.sessions:
            tag = f"{s.subject_id}_{s.visit_id}"
            bold = os.path.join("bold", f"{tag}.bold")
            sch = os.path.join("schedule", f"{tag}.csv")
            nui = os.path.join("nuisance", f"{tag}.csv") if s.N.size else ""
            write_bold(os.path.join(directory, bold), s.Y_raw)
            write_schedule(os.path.join(directory, sch), s.schedule)
            files += [os.path.join(directory, bold), os.path.join(directory, sch)]
            if nui:
                write_table(os.path.join(directory, nui), s.N,
                            [f"n{i}" for i in range(s.N.shape[1])])
                files.append(os.path.join(directory, nui))
            rows.append({"subject_id": s.subject_id, "visit_id": s.visit_id, "group": s.group,
                         "hemisphere": hemisphere, "mesh": f"mesh_{s.subject_id}.txt",
                         "bold": bold, "schedule": sch, "nuisance": nui})
            truth["sessions"].append({"subject_id": s.subject_id, "visit_id": s.visit_id,
                                      "group": s.group, "beta_hrf": s.beta[0].tolist(),
                                      "spikes": s.spike_volumes})
        clinical += study.clinical
    p = os.path.join(directory, "sessions.csv")
    with open(p, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    files.append(p)
    if clinical:
        p = os.path.join(directory, "clinical.csv")
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(clinical[0]))
            w.writeheader()
            w.writerows(clinical)
        files.append(p)
    p = os.path.join(directory, "truth.json")
    with open(p, "w") as fh:
        json.dump(truth, fh)
    files.append(p)
    return files
