"""Polynomial identification of commanded -> executed body velocity.

Each executed component is a third-order polynomial in the command with no
constant term, i.e. 19 monomials ``a_x^i a_y^j a_theta^l`` with
``0 < i + j + l <= 3``. Monomials are ordered by degree, and inside a degree
descending on ``(i, j, l)``; ``kernels.MONOMIALS`` is the single source of
that ordering for both fitting and prediction.
"""
import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.linalg

from rlpipe import kernels
from rlpipe.errors import DegenerateDataError, InvalidInputError

ACTION_LOW = np.array([-0.8, -0.7, -1.1])
ACTION_HIGH = np.array([1.1, 0.7, 1.1])
DEFAULT_GRID_COUNTS = (9, 9, 9)
CSV_COLUMNS = ("a_x", "a_y", "a_theta", "v_x", "v_y", "v_theta")


class Action(NamedTuple):
    a_x: float
    a_y: float
    a_theta: float


class BodyVelocity(NamedTuple):
    v_x: float
    v_y: float
    v_theta: float


def _monomial_name(exp):
    parts = []
    for sym, power in zip(("a_x", "a_y", "a_theta"), exp):
        if power == 1:
            parts.append(sym)
        elif power > 1:
            parts.append(f"{sym}^{power}")
    return "*".join(parts)


MONOMIAL_NAMES = tuple(_monomial_name(e) for e in kernels.MONOMIALS)


@dataclass(frozen=True)
class VelocityModel:
    """Per-output polynomial coefficients, shape (3, 19) in ``MONOMIALS`` order."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64)
        if c.shape != (3, kernels.N_FEATURES):
            raise InvalidInputError(f"coeffs must have shape (3, {kernels.N_FEATURES}), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("coeffs contain non-finite values")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def identity(cls):
        """Executed velocity equals the command."""
        c = np.zeros((3, kernels.N_FEATURES))
        c[0, 0] = c[1, 1] = c[2, 2] = 1.0
        return cls(c)

    def predict(self, a):
        return predict(self, a)

    def predict_batch(self, actions):
        return kernels.features_batch(actions) @ self.coeffs.T

    def to_dict(self):
        return {
            "order": 3,
            "monomials": kernels.MONOMIALS.tolist(),
            "coeffs": self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("order") != 3:
            raise InvalidInputError(f"unsupported polynomial order {d.get('order')!r}")
        if d.get("monomials") != kernels.MONOMIALS.tolist():
            raise InvalidInputError("monomial list does not match the expected ordering")
        return cls(np.asarray(d["coeffs"], dtype=np.float64))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InvalidInputError(f"model file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"model file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(d)


def _finite_action(a):
    arr = np.asarray(a, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise InvalidInputError(f"action must have 3 components, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"action has non-finite components: {arr.tolist()}")
    return arr


def expand_features(a):
    """Return the 19 monomial features of a single command."""
    arr = _finite_action(a)
    out = np.empty(kernels.N_FEATURES)
    return kernels.features_scalar(arr[0], arr[1], arr[2], kernels.MONOMIALS, out)


def predict(model, a):
    arr = _finite_action(a)
    return BodyVelocity(*kernels.predict_scalar(model.coeffs, kernels.MONOMIALS, arr[0], arr[1], arr[2]))


def fit(actions, velocities, rcond=1e-10):
    """Least-squares fit of a VelocityModel via column-pivoted QR.

    ``actions`` and ``velocities`` are (N, 3) arrays. Raises
    DegenerateDataError if the feature matrix is rank deficient, naming the
    monomials that cannot be identified.
    """
    A = np.asarray(actions, dtype=np.float64).reshape(-1, 3)
    V = np.asarray(velocities, dtype=np.float64).reshape(-1, 3)
    if A.shape[0] != V.shape[0]:
        raise InvalidInputError(f"{A.shape[0]} commands but {V.shape[0]} velocities")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(V))):
        raise InvalidInputError("dataset contains non-finite values")
    n_feat = kernels.N_FEATURES
    if A.shape[0] < n_feat:
        raise DegenerateDataError(f"need at least {n_feat} samples to fit, got {A.shape[0]}")
    X = kernels.features_batch(A)
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rcond * diag[0])) if diag[0] > 0 else 0
    if rank < n_feat:
        missing = ", ".join(MONOMIAL_NAMES[k] for k in sorted(piv[rank:]))
        raise DegenerateDataError(
            f"feature matrix has rank {rank} < {n_feat}; not identifiable from this data: {missing}"
        )
    z = scipy.linalg.solve_triangular(R, Q.T @ V)
    coeffs = np.empty((3, n_feat))
    coeffs[:, piv] = z.T
    return VelocityModel(coeffs)


def residual_rms(model, actions, velocities):
    """Per-output RMS of (measured - predicted)."""
    resid = np.asarray(velocities, dtype=np.float64) - model.predict_batch(actions)
    return np.sqrt(np.mean(resid**2, axis=0))


def make_grid(ranges=None, counts=DEFAULT_GRID_COUNTS):
    """Cartesian grid of commands, (prod(counts), 3), endpoints included."""
    if ranges is None:
        ranges = list(zip(ACTION_LOW, ACTION_HIGH))
    if len(ranges) != 3 or len(counts) != 3:
        raise InvalidInputError("need exactly three (lo, hi) ranges and three counts")
    axes = []
    for (lo, hi), n in zip(ranges, counts):
        if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
            raise InvalidInputError(f"invalid grid range [{lo}, {hi}]")
        if int(n) != n or n < 2:
            raise InvalidInputError(f"grid count must be an integer >= 2, got {n}")
        axes.append(np.linspace(lo, hi, int(n)))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def default_truth_model():
    """Synthetic ground truth: forward motion faster than backward, mild coupling."""
    terms = {
        # v_x
        (0, (1, 0, 0)): 0.92,
        (0, (2, 0, 0)): 0.05,
        (0, (3, 0, 0)): -0.04,
        (0, (1, 2, 0)): -0.03,
        (0, (1, 0, 2)): -0.06,
        # v_y
        (1, (0, 1, 0)): 0.85,
        (1, (1, 1, 0)): 0.04,
        (1, (0, 3, 0)): -0.05,
        (1, (0, 1, 2)): -0.03,
        # v_theta
        (2, (0, 0, 1)): 0.90,
        (2, (0, 1, 0)): 0.02,
        (2, (1, 0, 1)): 0.03,
        (2, (0, 0, 3)): -0.06,
    }
    index = {tuple(e): k for k, e in enumerate(kernels.MONOMIALS.tolist())}
    c = np.zeros((3, kernels.N_FEATURES))
    for (d, exp), value in terms.items():
        c[d, index[exp]] = value
    return VelocityModel(c)


def synthesize_dataset(truth=None, counts=DEFAULT_GRID_COUNTS, noise_sigma=0.01, repeats=1, seed=0):
    """Evaluate ``truth`` over the command grid and add Gaussian measurement noise."""
    truth = default_truth_model() if truth is None else truth
    rng = np.random.default_rng(seed)
    grid = np.tile(make_grid(counts=counts), (int(repeats), 1))
    v = truth.predict_batch(grid)
    if noise_sigma > 0:
        v = v + rng.normal(0.0, noise_sigma, size=v.shape)
    return grid, v


def read_dataset_csv(path):
    """Read ``a_x,a_y,a_theta,v_x,v_y,v_theta`` rows; returns (actions, velocities)."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except FileNotFoundError:
        raise InvalidInputError(f"dataset file not found: {path}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise InvalidInputError(f"dataset {path} is missing column(s): {', '.join(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): v for k, v in row.items() if k is not None}
            try:
                rows.append([float(row[c]) for c in CSV_COLUMNS])
            except (TypeError, ValueError):
                raise InvalidInputError(f"{path}:{lineno}: non-numeric value in row") from None
    if not rows:
        raise InvalidInputError(f"dataset {path} has no samples")
    data = np.array(rows)
    return data[:, :3], data[:, 3:]


def write_dataset_csv(path, actions, velocities):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for a, v in zip(np.asarray(actions), np.asarray(velocities)):
            w.writerow([repr(float(x)) for x in (*a, *v)])
