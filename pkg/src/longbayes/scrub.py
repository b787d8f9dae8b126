"""PCA leverage scrubbing of fMRI volumes."""

from dataclasses import dataclass
import csv

import numpy as np


@dataclass(frozen=True)
class ScrubReport:
    leverage: np.ndarray
    flags: np.ndarray
    fraction_flagged: float
    session_excluded: bool
    n_components: int
    multiplier: float
    exclusion_fraction: float

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["volume", "leverage", "flag"])
            for t, (lev, f) in enumerate(zip(self.leverage.tolist(), self.flags.tolist())):
                w.writerow([t, repr(lev), int(f)])


def leverage(Y):
    """Hat-matrix diagonal of the regression on high-variance PC scores.

    Components are kept when their variance exceeds the mean variance of the
    nonzero components of the column-centered data. The result sums to the
    number of kept components.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 3:
        raise ValueError("leverage needs a T x V matrix with T >= 3")
    Yc = Y - Y.mean(axis=0)
    U, s, _ = np.linalg.svd(Yc, full_matrices=False)
    tol = max(Yc.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    nz = s > tol
    if not nz.any():
        raise ValueError("data has rank zero after centering")
    var = s[nz] ** 2
    keep = np.flatnonzero(nz)[var > var.mean()]
    if keep.size == 0:  # all nonzero components equal
        keep = np.flatnonzero(nz)
    return np.sum(U[:, keep] ** 2, axis=1)


def scrub_session(Y, multiplier=4.0, exclusion_fraction=0.25):
    lev = leverage(Y)
    flags = lev > multiplier * np.median(lev)
    frac = float(flags.mean())
    n_comp = int(round(lev.sum()))
    return ScrubReport(lev, flags, frac, frac > exclusion_fraction, n_comp,
                       float(multiplier), float(exclusion_fraction))
