"""Normal linear outcome model, its score and the observed-record types.

The outcome model is ``Y = m(X, Z; beta) + eps`` with ``eps ~ N(0, sigma^2)``.
Parameters are always laid out as ``(beta_0, beta_x, beta_z..., sigma)``.

Two mean forms are supported:

* ``linear``: ``beta_0 + beta_x * x + beta_z' z``
* ``time_to_event``: ``beta_0 + beta_x * (a - x) + beta_z' z_rest`` where
  ``a`` is one column of ``Z`` (``age_column``) and ``z_rest`` the others.

Everything here is vectorised over records: ``x`` and ``y`` may be scalars
or length-n arrays and ``z`` a length-k vector or an ``(n, k)`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "Theta",
    "MeanSpec",
    "CensoredObservation",
    "MissingObservation",
    "CensoredData",
    "MissingData",
    "as_theta_vector",
    "mean_value",
    "score_full",
    "log_density_y",
    "score_polynomial",
    "linear_split",
]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Theta:
    """Regression parameters ``(beta, sigma)``.

    ``beta`` holds the intercept, the slope on the partially observed
    covariate, then one slope per remaining covariate.
    """

    beta: tuple
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if not self.sigma > 0:
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        if len(self.beta) < 2:
            raise InvalidInputError("beta needs at least an intercept and an x slope")

    @classmethod
    def from_vector(cls, vec) -> "Theta":
        vec = np.asarray(vec, dtype=float).ravel()
        return cls(tuple(vec[:-1]), float(vec[-1]))

    def to_vector(self) -> np.ndarray:
        return np.array(self.beta + (self.sigma,))

    def __len__(self):
        return len(self.beta) + 1


def as_theta_vector(theta) -> np.ndarray:
    """Return ``theta`` as a float vector, accepting :class:`Theta` or arrays."""
    if isinstance(theta, Theta):
        return theta.to_vector()
    vec = np.asarray(theta, dtype=float).ravel()
    if vec.size < 3:
        raise InvalidInputError(f"theta has length {vec.size}; need at least 3")
    return vec


@dataclass(frozen=True)
class MeanSpec:
    """Choice of mean function.

    Parameters
    ----------
    form : {"linear", "time_to_event"}
    age_column : int, optional
        Column of ``Z`` entering as ``a`` in ``(a - x)``; required for
        ``time_to_event``.
    """

    form: str = "linear"
    age_column: Optional[int] = None

    def __post_init__(self):
        if self.form not in ("linear", "time_to_event"):
            raise InvalidInputError(f"unknown mean form {self.form!r}")
        if self.form == "time_to_event" and self.age_column is None:
            raise InvalidInputError("time_to_event needs age_column")

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def time_to_event(cls, age_column: int = 0):
        return cls("time_to_event", int(age_column))

    def n_params(self, k: int) -> int:
        """Length of theta for ``k`` fully observed covariates."""
        return k + 3 if self.form == "linear" else k + 2

    def check(self, theta_len: int, k: int):
        if self.form == "time_to_event" and not 0 <= self.age_column < k:
            raise InvalidInputError(
                f"age_column {self.age_column} out of range for z of width {k}"
            )
        if theta_len != self.n_params(k):
            raise InvalidInputError(
                f"theta has length {theta_len} but z of width {k} needs {self.n_params(k)}"
            )


@dataclass(frozen=True)
class CensoredObservation:
    """One record with a right-censored covariate: ``w = min(x, c)``."""

    y: float
    w: float
    delta: int
    z: tuple

    def __post_init__(self):
        if self.delta not in (0, 1):
            raise InvalidInputError("delta must be 0 or 1")
        if not np.all(np.isfinite([self.y, self.w, *self.z])):
            raise InvalidInputError("censored record has non-finite fields")


@dataclass(frozen=True)
class MissingObservation:
    """One record with a possibly missing covariate; ``x`` is None when r = 0."""

    y: float
    x: Optional[float]
    r: int
    z: tuple

    def __post_init__(self):
        if self.r not in (0, 1):
            raise InvalidInputError("r must be 0 or 1")
        if (self.x is not None) != (self.r == 1):
            raise InvalidInputError("x must be present exactly when r = 1")


def _as_2d(z, n=None):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[None, :] if n is None or n == 1 else z[:, None]
    return z


class _Records:
    problem = ""

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def k(self) -> int:
        return self.z.shape[1]

    def __len__(self):
        return self.n

    def take(self, idx):
        idx = np.asarray(idx)
        return type(self)(self.y[idx], self.v[idx] if self.problem == "cens" else self.x[idx],
                          self.d[idx], self.z[idx])


@dataclass(frozen=True)
class CensoredData(_Records):
    """Arrays for a censored-covariate sample.

    Attributes
    ----------
    y, w : ndarray, shape (n,)
    delta : ndarray of int, shape (n,)
    z : ndarray, shape (n, k)
    """

    y: np.ndarray
    w: np.ndarray
    delta: np.ndarray
    z: np.ndarray
    problem = "cens"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        w = np.asarray(self.w, dtype=float).ravel()
        d = np.asarray(self.delta).ravel()
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if not (y.size == w.size == d.size == z.shape[0]):
            raise InvalidInputError(
                f"lengths differ: y={y.size}, w={w.size}, delta={d.size}, z={z.shape[0]}"
            )
        if not np.all(np.isin(d, (0, 1))):
            raise InvalidInputError("delta must contain only 0 and 1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(w)) and np.all(np.isfinite(z))):
            raise InvalidInputError("censored data contain non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "delta", d.astype(int))
        object.__setattr__(self, "z", z)

    @property
    def v(self):
        """Observed value of the covariate slot (here ``w``)."""
        return self.w

    @property
    def d(self):
        return self.delta

    @classmethod
    def from_records(cls, records):
        records = list(records)
        return cls([r.y for r in records], [r.w for r in records],
                   [r.delta for r in records], [list(r.z) for r in records])


@dataclass(frozen=True)
class MissingData(_Records):
    """Arrays for a missing-covariate sample; ``x`` is NaN where ``r == 0``."""

    y: np.ndarray
    x: np.ndarray
    r: np.ndarray
    z: np.ndarray
    problem = "miss"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float).ravel()
        r = np.asarray(self.r).ravel()
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if not (y.size == x.size == r.size == z.shape[0]):
            raise InvalidInputError(
                f"lengths differ: y={y.size}, x={x.size}, r={r.size}, z={z.shape[0]}"
            )
        if not np.all(np.isin(r, (0, 1))):
            raise InvalidInputError("r must contain only 0 and 1")
        if np.any(np.isfinite(x) != (r == 1)):
            raise InvalidInputError("x must be finite exactly where r = 1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "r", r.astype(int))
        object.__setattr__(self, "z", z)

    @property
    def v(self):
        """Observed covariate with unobserved entries set to 0 (always multiplied by r)."""
        return np.where(self.r == 1, self.x, 0.0)

    @property
    def d(self):
        return self.r

    @classmethod
    def from_records(cls, records):
        records = list(records)
        return cls([r.y for r in records],
                    [np.nan if r.x is None else r.x for r in records],
                    [r.r for r in records], [list(r.z) for r in records])


def linear_split(theta, z, spec: MeanSpec):
    """Write the mean as ``offset + slope * x``.

    Returns
    -------
    offset : ndarray, shape (n,)
    slope : float
        Coefficient of ``x`` in the mean (``-beta_x`` for time-to-event).
    d0, d1 : ndarray
        ``d m / d beta = d0 + d1 * x``; ``d0`` has shape ``(n, p-1)`` and
        ``d1`` shape ``(p-1,)``.
    """
    th = as_theta_vector(theta)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    n, k = z.shape
    spec.check(th.size, k)
    beta = th[:-1]
    d1 = np.zeros(beta.size)
    if spec.form == "linear":
        d0 = np.column_stack([np.ones(n), np.zeros(n), z])
        d1[1] = 1.0
        slope = beta[1]
    else:
        a = z[:, spec.age_column]
        rest = np.delete(z, spec.age_column, axis=1)
        d0 = np.column_stack([np.ones(n), a, rest])
        d1[1] = -1.0
        slope = -beta[1]
    offset = d0 @ beta
    return offset, slope, d0, d1


def mean_value(theta, x, z, spec: MeanSpec):
    """Mean ``m(x, z; beta)`` of the outcome.

    Raises
    ------
    InvalidInputError
        When theta and z lengths are inconsistent with ``spec``.
    """
    offset, slope, _, _ = linear_split(theta, z, spec)
    out = offset + slope * np.asarray(x, dtype=float)
    return out[0] if np.ndim(x) == 0 and np.asarray(z).ndim == 1 else out


def score_full(theta, y, x, z, spec: MeanSpec):
    """Full-data score ``d log f(y | x, z; theta) / d theta``.

    Returns an array of shape ``(p,)`` for a single record or ``(n, p)``.
    """
    th = as_theta_vector(theta)
    offset, slope, d0, d1 = linear_split(th, z, spec)
    x = np.asarray(x, dtype=float)
    sigma = th[-1]
    eps = np.asarray(y, dtype=float) - offset - slope * x
    eps = np.broadcast_to(eps, np.broadcast_shapes(eps.shape, x.shape, (d0.shape[0],)))
    xb = np.broadcast_to(x, eps.shape)
    dm = d0 + xb[..., None] * d1
    beta_part = dm * (eps / sigma**2)[..., None]
    sig_part = -1.0 / sigma + eps**2 / sigma**3
    out = np.concatenate([beta_part, sig_part[..., None]], axis=-1)
    single = np.ndim(y) == 0 and np.ndim(x) == 0 and np.asarray(z).ndim == 1
    return out[0] if single else out


def log_density_y(theta, y, x, z, spec: MeanSpec):
    """Log normal density of ``y`` given ``(x, z)``."""
    th = as_theta_vector(theta)
    sigma = th[-1]
    eps = np.asarray(y, dtype=float) - mean_value(th, x, z, spec)
    return -0.5 * _LOG_2PI - np.log(sigma) - 0.5 * (eps / sigma) ** 2


def score_polynomial(theta, y, z, spec: MeanSpec) -> np.ndarray:
    """Coefficients of the score as a quadratic in ``x``.

    The full-data score is ``S_j(x) = C[:, j, 0] + C[:, j, 1] x + C[:, j, 2] x^2``,
    so any conditional expectation of ``S`` reduces to the first two
    moments of ``X``.

    Returns
    -------
    ndarray, shape (n, p, 3)
    """
    th = as_theta_vector(theta)
    offset, slope, d0, d1 = linear_split(th, z, spec)
    sigma = th[-1]
    s2, s3 = sigma**2, sigma**3
    e = np.asarray(y, dtype=float) - offset
    n, q = d0.shape
    coef = np.empty((n, q + 1, 3))
    # beta_j: (d0_j + d1_j x)(e - slope x) / sigma^2
    coef[:, :q, 0] = d0 * e[:, None] / s2
    coef[:, :q, 1] = (d1[None, :] * e[:, None] - d0 * slope) / s2
    coef[:, :q, 2] = np.broadcast_to(-d1 * slope / s2, (n, q))
    coef[:, q, 0] = -1.0 / sigma + e**2 / s3
    coef[:, q, 1] = -2.0 * e * slope / s3
    coef[:, q, 2] = slope**2 / s3
    return coef
