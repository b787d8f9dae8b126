"""Task regressors, percent-signal-change scaling and nuisance regression."""

from dataclasses import dataclass, field, asdict
import csv
import struct

import numpy as np
from scipy import stats
from scipy.linalg import qr

BOLD_MAGIC = b"BOLD"
_BOLD_HEADER = struct.Struct("<4sIII")
_DTYPE_F64 = 1


class DataError(ValueError):
    """Input data that cannot be used (bad file, bad values)."""


@dataclass(frozen=True)
class HrfParams:
    """Double-gamma HRF: peak and undershoot gamma kernels, seconds."""

    peak: float = 6.0
    undershoot: float = 16.0
    peak_dispersion: float = 1.0
    undershoot_dispersion: float = 1.0
    ratio: float = 1.0 / 6.0
    length: float = 32.0

    def __post_init__(self):
        for name in ("peak", "undershoot", "peak_dispersion", "undershoot_dispersion", "length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"HRF parameter {name} must be positive")
        if self.ratio < 0:
            raise ValueError("HRF undershoot ratio must be nonnegative")

    def as_dict(self):
        return asdict(self)


def _hrf_raw(t, p):
    t = np.asarray(t, dtype=float)
    g1 = stats.gamma.pdf(t, p.peak / p.peak_dispersion + 1.0, scale=p.peak_dispersion)
    g2 = stats.gamma.pdf(t, p.undershoot / p.undershoot_dispersion + 1.0,
                         scale=p.undershoot_dispersion)
    return g1 - p.ratio * g2


def _hrf_peak(p):
    grid = np.arange(0.0, 3.0 * p.peak + 10 * p.peak_dispersion, 0.001)
    return float(np.max(_hrf_raw(grid, p)))


def hrf(t, params=HrfParams()):
    """Double-gamma response scaled to a peak value of 1.

    Each kernel is a gamma density whose mode sits at ``peak`` (resp.
    ``undershoot``) seconds with the given dispersion (scale).
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("hrf is defined for t >= 0")
    return _hrf_raw(t, params) / _hrf_peak(params)


@dataclass(frozen=True)
class StimulusSchedule:
    """Block onsets/durations in seconds from the start of acquisition.

    Time zero is the first excited volume, so the ``n_dropped_initial``
    unrecorded volumes come before the first row of the data.
    """

    onsets: tuple
    durations: tuple
    TR: float
    n_volumes: int
    n_dropped_initial: int = 0

    def __post_init__(self):
        on = np.asarray(self.onsets, float)
        du = np.asarray(self.durations, float)
        if on.shape != du.shape:
            raise ValueError("onsets and durations must have the same length")
        if self.TR <= 0 or self.n_volumes < 1 or self.n_dropped_initial < 0:
            raise ValueError("TR must be positive and n_volumes >= 1")
        if np.any(on < 0) or np.any(np.diff(on) <= 0):
            raise ValueError("onsets must be nonnegative and increasing")
        if np.any(du < 0):
            raise ValueError("durations must be nonnegative")
        if on.size and np.max(on + du) > self.scan_length + 1e-9:
            raise ValueError(f"stimulus ends at {np.max(on + du):g} s, after the scan "
                             f"({self.scan_length:g} s)")
        object.__setattr__(self, "onsets", tuple(on.tolist()))
        object.__setattr__(self, "durations", tuple(du.tolist()))

    @property
    def scan_length(self):
        return self.TR * (self.n_volumes + self.n_dropped_initial)


def block_schedule(n_blocks, block, rest, TR, n_volumes, n_dropped_initial=0, lead=0.0):
    """Alternating task/rest blocks, as in a paced block design."""
    onsets = [lead + i * (block + rest) for i in range(n_blocks)]
    return StimulusSchedule(tuple(onsets), (block,) * n_blocks, TR, n_volumes, n_dropped_initial)


def _rescale(col):
    m = np.max(np.abs(col))
    return col / m if m > 0 else col


def build_task_regressors(sched, params=HrfParams(), dt=None):
    """T x 2 design: stimulus boxcar convolved with the HRF, and its derivative.

    The convolution is carried out on a fine grid (``dt``, default TR/16) and
    sampled at volume acquisition times. Both columns have max |value| 1.
    """
    dt = sched.TR / 16.0 if dt is None else dt
    n_fine = int(round(sched.scan_length / dt)) + 1
    tf = np.arange(n_fine) * dt
    box = np.zeros(n_fine)
    for on, du in zip(sched.onsets, sched.durations):
        box[(tf >= on - 1e-9) & (tf < on + du - 1e-9)] = 1.0
    kernel = hrf(np.arange(0.0, params.length + dt / 2, dt), params)
    conv = np.convolve(box, kernel)[:n_fine] * dt
    acq = (sched.n_dropped_initial + np.arange(sched.n_volumes)) * sched.TR
    idx = np.rint(acq / dt).astype(int)
    col = conv[idx]
    dcol = np.gradient(col, sched.TR) if len(col) > 1 else np.zeros_like(col)
    return np.column_stack([_rescale(col), _rescale(dcol)])


def to_percent_signal_change(Y_raw, tol=1e-8):
    """Scale each column to percent deviation from its temporal mean."""
    Y = np.asarray(Y_raw, dtype=float)
    m = Y.mean(axis=0)
    bad = np.flatnonzero(~(m > tol))
    if bad.size:
        raise DataError(f"{bad.size} vertices have nonpositive or near-zero mean "
                        f"(first: vertex {bad[0]}, mean {m[bad[0]]:.3g})")
    out = 100.0 * (Y - m) / m
    return out - out.mean(axis=0)


def nuisance_regress(Y, X_task, N=None):
    """Residualize data and task design on ``[intercept | N]``.

    Returns ``(Y_resid, X_resid, df)`` with ``df = T - 1 - p``.
    """
    Y = np.asarray(Y, float)
    X_task = np.asarray(X_task, float)
    T = Y.shape[0]
    N = np.zeros((T, 0)) if N is None else np.asarray(N, float).reshape(T, -1)
    Z = np.column_stack([np.ones(T), N])
    R, piv = qr(Z, mode="r", pivoting=True)[0:2]
    rdiag = np.abs(np.diag(R)) if R.size else np.zeros(0)
    tol = max(Z.shape) * np.finfo(float).eps * (rdiag[0] if rdiag.size else 0.0)
    rank = int(np.sum(rdiag > tol))
    if rank < Z.shape[1]:
        names = ["intercept"] + [f"nuisance[{i}]" for i in range(N.shape[1])]
        dep = sorted(piv[rank:].tolist())
        raise DataError("nuisance design is rank deficient; dependent columns: "
                        + ", ".join(names[i] for i in dep))
    Qz, _ = np.linalg.qr(Z)

    def resid(A):
        return A - Qz @ (Qz.T @ A)

    return resid(Y), resid(X_task), T - Z.shape[1]


@dataclass
class SessionData:
    """One prepared visit: percent-signal-change data and task design.

    Scrubbed rows are already removed from ``Y``, ``X_task`` and
    ``N_nuisance``; ``keep_flags`` keeps the original-length record.
    """

    Y: np.ndarray
    X_task: np.ndarray
    N_nuisance: np.ndarray
    keep_flags: np.ndarray
    visit_id: str = "1"
    subject_id: str = "s1"
    df: int = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.Y.shape[0] != self.X_task.shape[0]:
            raise DataError(f"Y has {self.Y.shape[0]} rows but X_task has {self.X_task.shape[0]}")
        if self.df is None:
            self.df = self.Y.shape[0] - 1 - self.N_nuisance.shape[1]

    @property
    def n_nuisance(self):
        return self.N_nuisance.shape[1]

    @property
    def T(self):
        return self.Y.shape[0]


def prepare_session(Y_raw, sched, N=None, hrf_params=HrfParams(), scrub_opts=None,
                    visit_id="1", subject_id="s1"):
    """Raw BOLD -> SessionData.

    Order: percent signal change, task regressors (rescaled), nuisance
    regression, leverage scrubbing on the residualized data, then removal of
    flagged volumes and a second residualization on the kept volumes.
    Returns ``(session, scrub_report)``.
    """
    from .scrub import scrub_session

    Y = to_percent_signal_change(Y_raw)
    T = Y.shape[0]
    if T != sched.n_volumes:
        raise DataError(f"BOLD has {T} volumes but the schedule expects {sched.n_volumes}")
    X = build_task_regressors(sched, hrf_params)
    N = np.zeros((T, 0)) if N is None else np.asarray(N, float).reshape(T, -1)
    Yr, _, _ = nuisance_regress(Y, X, N)
    report = scrub_session(Yr, **(scrub_opts or {}))
    keep = ~report.flags
    Yk, Xk, df = nuisance_regress(Y[keep], X[keep], N[keep])
    meta = {"hrf": hrf_params.as_dict(), "n_scrubbed": int(report.flags.sum()),
            "session_excluded": bool(report.session_excluded),
            "corr_hrf_dhrf": float(np.corrcoef(X[:, 0], X[:, 1])[0, 1])
            if np.ptp(X[:, 0]) > 0 and np.ptp(X[:, 1]) > 0 else float("nan")}
    sess = SessionData(Yk, Xk, N[keep], keep, str(visit_id), str(subject_id), df, meta)
    return sess, report


# ---------------------------------------------------------------- file formats

def write_bold(path, Y):
    Y = np.ascontiguousarray(Y, dtype="<f8")
    T, V = Y.shape
    with open(path, "wb") as fh:
        fh.write(_BOLD_HEADER.pack(BOLD_MAGIC, T, V, _DTYPE_F64))
        fh.write(Y.tobytes())


def read_bold(path):
    with open(path, "rb") as fh:
        head = fh.read(_BOLD_HEADER.size)
        if len(head) != _BOLD_HEADER.size:
            raise DataError(f"{path}: truncated BOLD header")
        magic, T, V, dt = _BOLD_HEADER.unpack(head)
        if magic != BOLD_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if dt != _DTYPE_F64:
            raise DataError(f"{path}: unsupported dtype code {dt}")
        body = fh.read()
    if len(body) != 8 * T * V:
        raise DataError(f"{path}: expected {8 * T * V} data bytes, found {len(body)}")
    Y = np.frombuffer(body, dtype="<f8").reshape(T, V).astype(float)
    if not np.all(np.isfinite(Y)):
        raise DataError(f"{path}: non-finite values in BOLD data")
    return Y


def write_schedule(path, sched):
    with open(path, "w", newline="") as fh:
        fh.write(f"# TR={sched.TR!r} n_volumes={sched.n_volumes} "
                 f"n_dropped_initial={sched.n_dropped_initial}\n")
        w = csv.writer(fh)
        w.writerow(["onset", "duration"])
        for on, du in zip(sched.onsets, sched.durations):
            w.writerow([repr(on), repr(du)])


def read_schedule(path):
    meta, rows = {}, []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    meta[k] = v
            elif line.strip():
                lines.append(line)
    reader = csv.DictReader(lines)
    try:
        for r in reader:
            rows.append((float(r["onset"]), float(r["duration"])))
        TR = float(meta["TR"])
        nv = int(meta["n_volumes"])
        nd = int(meta.get("n_dropped_initial", 0))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: malformed schedule ({exc})") from None
    try:
        return StimulusSchedule(tuple(r[0] for r in rows), tuple(r[1] for r in rows), TR, nv, nd)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_table(path, A, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.asarray(A, float).tolist():
            w.writerow([repr(x) for x in row])


def read_table(path):
    """Numeric delimited table with a header row -> (array, header)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty table")
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return data.reshape(-1, len(rows[0])), rows[0]
