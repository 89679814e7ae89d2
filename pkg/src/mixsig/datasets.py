"""Mixture datasets: the synthetic peak-shift generator and CSV input/output."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, SimplexViolation
from .numerics import RngStream

SIMPLEX_TOL = 1e-6
ONE_HOT_TOL = 1e-8
FLOAT_FORMAT = "%.17g"


@dataclass
class MixtureDataset:
    """Observed rows with known (train) and unknown (test) mixture weights.

    ``R_test_truth`` holds the held-out weights of the test rows when known;
    models never see it. ``truth`` carries generator internals for scoring.
    """

    Y_train: np.ndarray
    R_train: np.ndarray
    Y_test: np.ndarray
    lam: np.ndarray
    R_test_truth: np.ndarray | None = None
    mode: str = "regression"
    provenance: str = ""
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y_train = np.asarray(self.Y_train, dtype=float)
        self.R_train = np.asarray(self.R_train, dtype=float)
        m = self.Y_train.shape[1] if self.Y_train.ndim == 2 else np.shape(self.Y_test)[1]
        self.Y_train = self.Y_train.reshape(-1, m)
        if self.R_train.ndim != 2:
            self.R_train = self.R_train.reshape(self.Y_train.shape[0], -1)
        self.Y_test = np.asarray(self.Y_test, dtype=float).reshape(-1, m)
        self.lam = np.asarray(self.lam, dtype=float)
        if self.R_test_truth is not None:
            self.R_test_truth = np.asarray(self.R_test_truth, dtype=float)
            if self.R_test_truth.ndim != 2:
                self.R_test_truth = self.R_test_truth.reshape(self.Y_test.shape[0], -1)
        if self.lam.shape != (m,):
            raise ValueError(f"expected {m} measurement locations, got {self.lam.shape}")
        if m > 1 and not np.all(np.diff(self.lam) > 0):
            raise ValueError("measurement locations must be strictly increasing")

    @property
    def n_train(self) -> int:
        return self.Y_train.shape[0]

    @property
    def n_test(self) -> int:
        return self.Y_test.shape[0]

    @property
    def n_locations(self) -> int:
        return self.Y_train.shape[1]

    @property
    def n_components(self) -> int:
        if self.R_train.shape[0]:
            return self.R_train.shape[1]
        if self.R_test_truth is not None:
            return self.R_test_truth.shape[1]
        return self.R_train.shape[1]


def check_weights(r, mode="regression", tol=None) -> None:
    """Raise SimplexViolation listing rows off the simplex (or not one-hot)."""
    r = np.asarray(r, dtype=float)
    if mode == "regression":
        tol = SIMPLEX_TOL if tol is None else tol
        bad = (np.abs(r.sum(axis=1) - 1.0) > tol) | np.any(r < -tol, axis=1)
        msg = "weight rows must be non-negative and sum to one"
    else:
        tol = ONE_HOT_TOL if tol is None else tol
        near_one = np.abs(r - 1.0) <= tol
        near_zero = np.abs(r) <= tol
        bad = ~(np.all(near_one | near_zero, axis=1) & (near_one.sum(axis=1) == 1))
        msg = "class rows must be one-hot"
    if np.any(bad):
        raise SimplexViolation(np.flatnonzero(bad).tolist(), msg)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class ToyConfig:
    """Two Gaussian peaks whose centre and height move with a scalar latent."""

    n_train: int = 40
    n_test: int = 40
    M: int = 50
    noise_sigma: float = 0.01
    seed: int = 0
    peak_centers: tuple = (0.3, 0.7)
    center_shift: float = 0.05
    amplitude_slope: float = 0.2
    peak_width: float = 0.08

    def __post_init__(self):
        for name in ("n_train", "n_test", "M"):
            if int(getattr(self, name)) < 0 or (name == "M" and int(self.M) < 1):
                raise ValueError(f"{name} must be a positive count")
        if self.n_train + self.n_test < 1:
            raise ValueError("n_train + n_test must be at least 1")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.peak_width > 0:
            raise ValueError("peak_width must be positive")


def toy_signals(h, lam, cfg: ToyConfig) -> np.ndarray:
    """Pure signals (n, M, C) at latents ``h`` (n,) and locations ``lam``."""
    h = np.asarray(h, dtype=float).reshape(-1, 1, 1)
    lam = np.asarray(lam, dtype=float).reshape(1, -1, 1)
    centers = np.asarray(cfg.peak_centers, dtype=float).reshape(1, 1, -1)
    amp = 1.0 + cfg.amplitude_slope * h
    return amp * np.exp(-((lam - centers - cfg.center_shift * h) ** 2) / (2.0 * cfg.peak_width**2))


def mix(r, f, noise) -> np.ndarray:
    """Rows sum_c r_ic f_ijc + noise_ij."""
    return np.sum(np.asarray(r)[:, None, :] * f, axis=-1) + noise


def generate_toy(cfg: ToyConfig) -> MixtureDataset:
    rng = RngStream(cfg.seed)
    n = cfg.n_train + cfg.n_test
    n_c = len(cfg.peak_centers)
    lam = np.linspace(0.0, 1.0, cfg.M)
    h = rng.normal(size=n)
    r = rng.dirichlet(np.ones(n_c), size=n)
    noise = cfg.noise_sigma * rng.normal(size=(n, cfg.M))
    f = toy_signals(h, lam, cfg)
    y = mix(r, f, noise)
    tr = slice(0, cfg.n_train)
    te = slice(cfg.n_train, n)
    return MixtureDataset(
        y[tr], r[tr], y[te], lam, r[te], "regression", f"toy seed={cfg.seed}",
        {"h": h, "R": r, "F": f, "noise": noise},
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_matrix(path) -> tuple[np.ndarray, list | None]:
    """Numeric CSV as a 2-D array plus the header row, if any.

    A header is assumed when the first cell of the first row is not a number.
    """
    path = Path(path)
    if not path.is_file():
        raise ParseError("file not found", path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row and any(c.strip() for c in row)]
    header = None
    if rows and not _is_number(rows[0][0].strip()):
        header, rows = rows[0], rows[1:]
    if not rows:
        raise ParseError("no data rows", path)
    width = len(rows[0])
    out = np.empty((len(rows), width))
    offset = 2 if header is not None else 1
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", path, i + offset)
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell.strip())
            except ValueError:
                raise ParseError(f"not a number: {cell!r}", path, i + offset, j + 1) from None
    if not np.all(np.isfinite(out)):
        i, j = np.argwhere(~np.isfinite(out))[0]
        raise ParseError("non-finite value", path, i + offset, j + 1)
    return out, header


def write_matrix(path, a, header=None) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in a:
            w.writerow([FLOAT_FORMAT % v for v in row])


def read_vector(path) -> np.ndarray:
    a, _ = read_matrix(path)
    if a.shape[1] == 1:
        return a[:, 0]
    if a.shape[0] == 1:
        return a[0]
    raise ParseError("expected a single row or column", path)


def load_csv(path_y, path_r=None, path_lambda=None, mode="regression") -> MixtureDataset:
    """Rows of ``path_y`` with weights from ``path_r``.

    With weights every row is a training row (use :func:`split` to hold some
    out); without weights every row is a test row. Locations default to a
    uniform grid on [0, 1].
    """
    y, _ = read_matrix(path_y)
    if path_lambda is not None:
        lam = read_vector(path_lambda)
        if lam.shape[0] != y.shape[1]:
            raise ParseError(f"{lam.shape[0]} locations for {y.shape[1]} columns", path_lambda)
        if lam.shape[0] > 1 and not np.all(np.diff(lam) > 0):
            raise ParseError("locations must be strictly increasing", path_lambda)
    else:
        lam = np.linspace(0.0, 1.0, y.shape[1])
    if path_r is None:
        return MixtureDataset(np.zeros((0, y.shape[1])), np.zeros((0, 0)), y, lam, None, mode, str(path_y))
    r, _ = read_matrix(path_r)
    if r.shape[0] != y.shape[0]:
        raise ParseError(f"{r.shape[0]} weight rows for {y.shape[0]} observations", path_r)
    check_weights(r, mode)
    return MixtureDataset(y, r, np.zeros((0, y.shape[1])), lam, None, mode, str(path_y))


def split(data: MixtureDataset, test_fraction: float, seed: int) -> MixtureDataset:
    """Move a seeded random subset of training rows to the test block."""
    if not 0 <= test_fraction <= 1:
        raise ValueError("test_fraction must lie in [0, 1]")
    if data.n_test:
        raise ValueError("dataset already has test rows")
    n = data.n_train
    n_test = int(round(test_fraction * n))
    perm = RngStream(seed).permutation(n)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return MixtureDataset(
        data.Y_train[train], data.R_train[train], data.Y_train[test], data.lam,
        data.R_train[test], data.mode, f"{data.provenance} split seed={seed}",
    )


DATASET_FILES = {
    "Y_train": "Y_train.csv",
    "R_train": "R_train.csv",
    "Y_test": "Y_test.csv",
    "R_test_truth": "R_test_truth.csv",
    "lam": "lambda.csv",
}


def save_dataset(data: MixtureDataset, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    m, c = data.n_locations, data.n_components
    headers = {
        "Y_train": [f"y{j}" for j in range(m)],
        "Y_test": [f"y{j}" for j in range(m)],
        "R_train": [f"r{k}" for k in range(c)],
        "R_test_truth": [f"r{k}" for k in range(c)],
    }
    for key, name in DATASET_FILES.items():
        value = getattr(data, key)
        if value is None:
            continue
        path = d / name
        if key == "lam":
            write_matrix(path, np.asarray(value)[:, None], ["lambda"])
        else:
            write_matrix_rows(path, value, headers[key])
        written.append(path)
    return written


def write_matrix_rows(path, a, header) -> None:
    """Like :func:`write_matrix` but keeps zero-row arrays header-only."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] == 0:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
        return
    write_matrix(path, a, header)


def _read_block(path, width):
    """Matrix file that may contain only a header."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if len(lines) == 1 and not _is_number(lines[0].split(",")[0].strip()):
        return np.zeros((0, width if width is not None else len(lines[0].split(","))))
    return read_matrix(path)[0]


def load_dataset(directory, mode="regression") -> MixtureDataset:
    """Inverse of :func:`save_dataset`; ``R_test_truth.csv`` is optional."""
    d = Path(directory)
    for key in ("Y_train", "R_train", "Y_test"):
        if not (d / DATASET_FILES[key]).is_file():
            raise ParseError("file not found", d / DATASET_FILES[key])
    y = _read_block(d / "Y_train.csv", None)
    r = _read_block(d / "R_train.csv", None)
    y_test = _read_block(d / "Y_test.csv", y.shape[1])
    if y.shape[1] != y_test.shape[1]:
        raise ParseError(f"test rows have {y_test.shape[1]} columns, training rows {y.shape[1]}", d / "Y_test.csv")
    if r.shape[0] != y.shape[0]:
        raise ParseError(f"{r.shape[0]} weight rows for {y.shape[0]} observations", d / "R_train.csv")
    check_weights(r, mode)
    lam_path = d / "lambda.csv"
    lam = read_vector(lam_path) if lam_path.is_file() else np.linspace(0.0, 1.0, y.shape[1])
    if lam.shape[0] != y.shape[1]:
        raise ParseError(f"{lam.shape[0]} locations for {y.shape[1]} columns", lam_path)
    if lam.shape[0] > 1 and not np.all(np.diff(lam) > 0):
        raise ParseError("locations must be strictly increasing", lam_path)
    truth = None
    truth_path = d / "R_test_truth.csv"
    if truth_path.is_file():
        truth = _read_block(truth_path, r.shape[1])
        if truth.shape[0] != y_test.shape[0]:
            raise ParseError(f"{truth.shape[0]} truth rows for {y_test.shape[0]} test rows", truth_path)
        check_weights(truth, mode)
    return MixtureDataset(y, r, y_test, lam, truth, mode, str(d))
