"""Generalized entropies, their convex conjugates, and link-induced entropies.

A generalized entropy ``G`` is a strictly convex function of a single weight.
Calibration only ever touches its convex conjugate ``rho``:

* ``weight_map(v) = rho'(v) = g^{-1}(v)`` turns a dual coordinate into a weight,
* ``curvature(v) = rho''(v)`` drives both the Newton solver and the
  regression weights of the linearized estimator.

Every function accepts scalars or numpy arrays and returns the same shape.
Arguments outside the relevant domain raise :class:`~entrocal.errors.DomainError`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate, special

from entrocal.errors import DomainError, InvalidLink

__all__ = [
    "EntropyKind",
    "EntropyFamily",
    "Interval",
    "LinkKind",
    "Orientation",
    "LinkFunction",
    "LinkEntropy",
    "entropy_value",
    "conjugate_value",
    "weight_map",
    "curvature",
    "primal_gradient",
    "dual_domain",
    "weight_domain",
    "link_induced_entropy",
    "parse_entropy",
    "parse_link",
]


class Interval(NamedTuple):
    """Interval of the real line, open unless ``closed`` is set."""

    low: float
    high: float
    closed: bool = False

    def contains(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.closed:
            return (v >= self.low) & (v <= self.high)
        return (v > self.low) & (v < self.high)

    def __str__(self) -> str:
        left, right = ("[", "]") if self.closed else ("(", ")")
        return f"{left}{self.low:g}, {self.high:g}{right}"


REAL_LINE = Interval(-math.inf, math.inf)


def _result(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def _require(v, interval: Interval, what: str, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    ok = interval.contains(v)
    if not np.all(ok):
        bad = np.atleast_1d(v)[~np.atleast_1d(ok)]
        raise DomainError(
            f"{name}: {bad.size} {what} value(s) outside {interval}, e.g. {bad[0]!r}"
        )
    return v


class EntropyKind(str, enum.Enum):
    SQUARED_LOSS = "sl"
    KULLBACK_LEIBLER = "kl"
    SHIFTED_KL = "skl"
    EMPIRICAL_LIKELIHOOD = "el"
    HELLINGER = "hd"
    RENYI = "renyi"
    HUBER_TRIMMED = "huber"


@dataclass(frozen=True)
class EntropyFamily:
    """One row of the entropy catalogue.

    Parameters
    ----------
    kind : EntropyKind
    alpha : float, optional
        Renyi order; required for ``RENYI`` and must be positive (negative
        orders give a concave ``G`` on the positive half-line).
    bound : float, optional
        Trimming bound ``M`` for ``HUBER_TRIMMED``; ``math.inf`` disables
        trimming.
    """

    kind: EntropyKind
    alpha: float | None = None
    bound: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EntropyKind(self.kind))
        if self.kind is EntropyKind.RENYI:
            if self.alpha is None:
                raise ValueError("Renyi entropy needs alpha")
            if self.alpha in (0, -1):
                raise ValueError("Renyi alpha must not be 0 or -1")
            if not self.alpha > 0:
                raise ValueError(
                    f"Renyi alpha={self.alpha} gives a non-convex entropy; use alpha > 0"
                )
        elif self.alpha is not None:
            raise ValueError(f"alpha is only meaningful for Renyi, not {self.kind.value}")
        if self.kind is EntropyKind.HUBER_TRIMMED:
            if self.bound is None or not self.bound > 0:
                raise ValueError("HuberTrimmed needs bound M > 0")
        elif self.bound is not None:
            raise ValueError(f"bound is only meaningful for huber, not {self.kind.value}")

    # -- constructors -----------------------------------------------------
    @classmethod
    def squared_loss(cls):
        return cls(EntropyKind.SQUARED_LOSS)

    @classmethod
    def kl(cls):
        return cls(EntropyKind.KULLBACK_LEIBLER)

    @classmethod
    def shifted_kl(cls):
        return cls(EntropyKind.SHIFTED_KL)

    @classmethod
    def empirical_likelihood(cls):
        return cls(EntropyKind.EMPIRICAL_LIKELIHOOD)

    @classmethod
    def hellinger(cls):
        return cls(EntropyKind.HELLINGER)

    @classmethod
    def renyi(cls, alpha: float):
        return cls(EntropyKind.RENYI, alpha=float(alpha))

    @classmethod
    def huber(cls, bound: float):
        return cls(EntropyKind.HUBER_TRIMMED, bound=float(bound))

    @property
    def token(self) -> str:
        if self.kind is EntropyKind.RENYI:
            return f"renyi:{self.alpha:g}"
        if self.kind is EntropyKind.HUBER_TRIMMED:
            return f"huber:{self.bound:g}"
        return self.kind.value

    def __str__(self) -> str:
        return self.token

    # -- domains ----------------------------------------------------------
    def dual_domain(self) -> Interval:
        k = self.kind
        if k is EntropyKind.EMPIRICAL_LIKELIHOOD:
            return Interval(-math.inf, 0.0)
        if k is EntropyKind.HELLINGER:
            return Interval(-math.inf, 1.0)
        if k is EntropyKind.RENYI:
            return Interval(0.0, math.inf)
        return REAL_LINE

    def weight_domain(self) -> Interval:
        k = self.kind
        if k is EntropyKind.SQUARED_LOSS:
            return REAL_LINE
        if k is EntropyKind.SHIFTED_KL:
            return Interval(1.0, math.inf)
        if k is EntropyKind.HUBER_TRIMMED:
            return Interval(-self.bound, self.bound, closed=True)
        return Interval(0.0, math.inf)

    # -- primal side ------------------------------------------------------
    def entropy(self, w):
        """G(w)."""
        w = _require(w, self.weight_domain(), "weight", f"G[{self.token}]")
        k = self.kind
        with np.errstate(divide="ignore", invalid="ignore"):
            if k in (EntropyKind.SQUARED_LOSS, EntropyKind.HUBER_TRIMMED):
                out = 0.5 * w * w
            elif k is EntropyKind.KULLBACK_LEIBLER:
                out = special.xlogy(w, w)
            elif k is EntropyKind.SHIFTED_KL:
                out = (w - 1.0) * (np.log(w - 1.0) - 1.0)
            elif k is EntropyKind.EMPIRICAL_LIKELIHOOD:
                out = -np.log(w)
            elif k is EntropyKind.HELLINGER:
                out = (np.sqrt(w) - 1.0) ** 2
            else:
                a = self.alpha
                out = w ** (a + 1.0) / (a + 1.0)
        return _result(out)

    def gradient(self, w):
        """g(w) = G'(w), the inverse of :meth:`weight_map`."""
        w = _require(w, self.weight_domain(), "weight", f"g[{self.token}]")
        k = self.kind
        if k in (EntropyKind.SQUARED_LOSS, EntropyKind.HUBER_TRIMMED):
            out = w.copy()
        elif k is EntropyKind.KULLBACK_LEIBLER:
            out = np.log(w) + 1.0
        elif k is EntropyKind.SHIFTED_KL:
            out = np.log(w - 1.0)
        elif k is EntropyKind.EMPIRICAL_LIKELIHOOD:
            out = -1.0 / w
        elif k is EntropyKind.HELLINGER:
            out = 1.0 - 1.0 / np.sqrt(w)
        else:
            out = w**self.alpha
        return _result(out)

    # -- dual side --------------------------------------------------------
    def conjugate(self, v):
        """rho(v), the convex conjugate of G."""
        v = _require(v, self.dual_domain(), "dual", f"rho[{self.token}]")
        k = self.kind
        if k is EntropyKind.SQUARED_LOSS:
            out = 0.5 * v * v
        elif k is EntropyKind.KULLBACK_LEIBLER:
            out = np.exp(v - 1.0)
        elif k is EntropyKind.SHIFTED_KL:
            out = v + np.exp(v)
        elif k is EntropyKind.EMPIRICAL_LIKELIHOOD:
            out = -1.0 - np.log(-v)
        elif k is EntropyKind.HELLINGER:
            out = v / (1.0 - v)
        elif k is EntropyKind.RENYI:
            a = self.alpha
            out = a / (a + 1.0) * v ** ((a + 1.0) / a)
        else:
            m = self.bound
            av = np.abs(v)
            with np.errstate(invalid="ignore"):
                out = np.where(av <= m, 0.5 * v * v, m * (av - 0.5 * m))
        return _result(out)

    def weight_map(self, v):
        """rho'(v): the calibration weight attached to dual coordinate v."""
        v = _require(v, self.dual_domain(), "dual", f"rho'[{self.token}]")
        k = self.kind
        if k is EntropyKind.SQUARED_LOSS:
            out = v.copy()
        elif k is EntropyKind.KULLBACK_LEIBLER:
            out = np.exp(v - 1.0)
        elif k is EntropyKind.SHIFTED_KL:
            out = 1.0 + np.exp(v)
        elif k is EntropyKind.EMPIRICAL_LIKELIHOOD:
            out = -1.0 / v
        elif k is EntropyKind.HELLINGER:
            out = (1.0 - v) ** -2
        elif k is EntropyKind.RENYI:
            out = v ** (1.0 / self.alpha)
        else:
            out = np.clip(v, -self.bound, self.bound)
        return _result(out)

    def curvature(self, v):
        """rho''(v) >= 0."""
        v = _require(v, self.dual_domain(), "dual", f"rho''[{self.token}]")
        k = self.kind
        if k is EntropyKind.SQUARED_LOSS:
            out = np.ones_like(v)
        elif k is EntropyKind.KULLBACK_LEIBLER:
            out = np.exp(v - 1.0)
        elif k is EntropyKind.SHIFTED_KL:
            out = np.exp(v)
        elif k is EntropyKind.EMPIRICAL_LIKELIHOOD:
            out = 1.0 / (v * v)
        elif k is EntropyKind.HELLINGER:
            out = 2.0 * (1.0 - v) ** -3
        elif k is EntropyKind.RENYI:
            a = self.alpha
            out = v ** (1.0 / a - 1.0) / a
        else:
            out = (np.abs(v) <= self.bound).astype(float)
        return _result(out)


# -- module-level accessors -------------------------------------------------


def entropy_value(family, w):
    return family.entropy(w)


def conjugate_value(family, v):
    return family.conjugate(v)


def weight_map(family, v):
    return family.weight_map(v)


def curvature(family, v):
    return family.curvature(v)


def primal_gradient(family, w):
    return family.gradient(w)


def dual_domain(family) -> Interval:
    return family.dual_domain()


def weight_domain(family) -> Interval:
    return family.weight_domain()


# -- propensity links -------------------------------------------------------


class LinkKind(str, enum.Enum):
    LOGISTIC = "logit"
    LOG = "log"
    IDENTITY = "identity"
    PROBIT = "probit"
    COMPLEMENTARY_LOG_LOG = "cloglog"
    CAUCHY = "cauchy"
    POWER = "power"


class Orientation(str, enum.Enum):
    DECREASING = "decreasing"
    INCREASING = "increasing"


def _cauchy_cdf(u):
    # 1/2 + arctan(u)/pi without cancellation in the left tail
    with np.errstate(divide="ignore"):
        left = np.arctan(-1.0 / np.minimum(u, -1e-300)) / np.pi
    return np.where(u < 0, left, 0.5 + np.arctan(u) / np.pi)


def _log_norm_pdf(u):
    return -0.5 * u * u - 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LinkFunction:
    """Inverse link ``pi`` of a propensity model ``P(delta=1|x) = pi(x1' phi)``.

    ``pi`` is taken in its textbook form (e.g. ``expit`` for logistic, ``Phi``
    for probit, ``u**(-1/alpha)`` for power).  ``orientation`` records whether
    that form is increasing or decreasing; ``None`` selects the natural one.
    Increasing links are flipped, ``pi~(v) = pi(-v)``, so that the inverse
    propensity ``1/pi~`` is increasing and has a convex antiderivative.
    """

    kind: LinkKind
    alpha: float | None = None
    orientation: Orientation | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LinkKind(self.kind))
        if self.kind is LinkKind.POWER:
            if self.alpha is None or self.alpha in (0, -1):
                raise ValueError("power link needs alpha not in {0, -1}")
        elif self.alpha is not None:
            raise ValueError(f"alpha is only meaningful for the power link")
        if self.orientation is None:
            object.__setattr__(self, "orientation", self.natural_orientation)
        else:
            object.__setattr__(self, "orientation", Orientation(self.orientation))

    @classmethod
    def logistic(cls):
        return cls(LinkKind.LOGISTIC)

    @property
    def natural_orientation(self) -> Orientation:
        if self.kind is LinkKind.POWER and self.alpha > 0:
            return Orientation.DECREASING
        return Orientation.INCREASING

    @property
    def token(self) -> str:
        if self.kind is LinkKind.POWER:
            return f"power:{self.alpha:g}"
        return self.kind.value

    @property
    def _sign(self) -> float:
        return 1.0 if self.orientation is Orientation.DECREASING else -1.0

    def _arg_domain(self) -> Interval:
        if self.kind in (LinkKind.IDENTITY, LinkKind.POWER):
            return Interval(0.0, math.inf)
        return REAL_LINE

    def log_propensity(self, u):
        """log pi(u) in the textbook orientation."""
        u = _require(u, self._arg_domain(), "linear predictor", f"pi[{self.token}]")
        k = self.kind
        with np.errstate(divide="ignore", over="ignore"):
            if k is LinkKind.LOGISTIC:
                out = -np.logaddexp(0.0, -u)
            elif k is LinkKind.LOG:
                out = u.copy()
            elif k is LinkKind.IDENTITY:
                out = np.log(u)
            elif k is LinkKind.PROBIT:
                out = special.log_ndtr(u)
            elif k is LinkKind.COMPLEMENTARY_LOG_LOG:
                out = np.log(-np.expm1(-np.exp(u)))
            elif k is LinkKind.CAUCHY:
                out = np.log(_cauchy_cdf(u))
            else:
                out = -np.log(u) / self.alpha
        return out

    def propensity(self, u):
        """pi(u) in the textbook orientation."""
        return _result(np.exp(self.log_propensity(u)))

    def _dlog_propensity(self, u):
        k = self.kind
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            if k is LinkKind.LOGISTIC:
                out = special.expit(-u)
            elif k is LinkKind.LOG:
                out = np.ones_like(u)
            elif k is LinkKind.IDENTITY:
                out = 1.0 / u
            elif k is LinkKind.PROBIT:
                out = np.exp(_log_norm_pdf(u) - special.log_ndtr(u))
            elif k is LinkKind.COMPLEMENTARY_LOG_LOG:
                e = np.exp(u)
                out = np.where(e > 700.0, 0.0, e / np.expm1(np.minimum(e, 700.0)))
            elif k is LinkKind.CAUCHY:
                out = 1.0 / (np.pi * (1.0 + u * u) * _cauchy_cdf(u))
            else:
                out = -1.0 / (self.alpha * u)
        return out

    def inverse(self, p):
        """pi^{-1}(p) in the textbook orientation."""
        p = np.asarray(p, dtype=float)
        k = self.kind
        with np.errstate(divide="ignore", invalid="ignore"):
            if k is LinkKind.LOGISTIC:
                out = special.logit(p)
            elif k is LinkKind.LOG:
                out = np.log(p)
            elif k is LinkKind.IDENTITY:
                out = p.copy()
            elif k is LinkKind.PROBIT:
                out = special.ndtri(p)
            elif k is LinkKind.COMPLEMENTARY_LOG_LOG:
                out = np.log(-np.log1p(-p))
            elif k is LinkKind.CAUCHY:
                out = np.tan(np.pi * (p - 0.5))
            else:
                out = p ** (-self.alpha)
        return out


class LinkEntropy:
    """Entropy induced by a propensity link through ``rho'(v) = 1 / pi~(v)``.

    Weight map and curvature come straight from the link, computed in log
    space.  ``conjugate`` is closed-form for the logistic, log, identity and
    power links and otherwise integrates the weight map from an anchor with
    ``rho(anchor) = 0``.
    """

    def __init__(self, link: LinkFunction):
        self.link = link
        self._s = link._sign
        arg = link._arg_domain()
        if self._s > 0:
            self._dual = arg
        else:
            self._dual = Interval(-arg.high + 0.0, -arg.low + 0.0)
        if link.kind in (LinkKind.LOG, LinkKind.IDENTITY, LinkKind.POWER):
            self._weights = Interval(0.0, math.inf)
        else:
            self._weights = Interval(1.0, math.inf)
        self._validate()

    def __repr__(self) -> str:
        return f"LinkEntropy({self.link.token})"

    @property
    def token(self) -> str:
        return f"link:{self.link.token}"

    @property
    def closed_form(self) -> EntropyFamily | None:
        """The catalogue entropy this link reproduces, if any."""
        natural = self.link.orientation is self.link.natural_orientation
        k = self.link.kind
        if not natural:
            return None
        if k is LinkKind.LOGISTIC:
            return EntropyFamily.shifted_kl()
        if k is LinkKind.IDENTITY:
            return EntropyFamily.empirical_likelihood()
        if k is LinkKind.POWER and self.link.alpha > 0:
            return EntropyFamily.renyi(self.link.alpha)
        return None

    def _validate(self):
        d = self._dual
        if d.low == -math.inf and d.high == math.inf:
            grid = np.linspace(-5.0, 5.0, 201)
        elif d.low == 0.0:
            grid = np.geomspace(1e-2, 1e2, 201)
        else:
            grid = -np.geomspace(1e2, 1e-2, 201)
        q = np.asarray(self.curvature(grid))
        if not np.all(q[np.isfinite(q)] > 0):
            raise InvalidLink(
                f"1/pi~ is not increasing for link {self.link.token} with "
                f"orientation {self.link.orientation.value}"
            )

    def dual_domain(self) -> Interval:
        return self._dual

    def weight_domain(self) -> Interval:
        return self._weights

    def tilde_propensity(self, v):
        v = _require(v, self._dual, "dual", f"pi~[{self.link.token}]")
        return _result(np.exp(self.link.log_propensity(self._s * v)))

    def weight_map(self, v):
        v = _require(v, self._dual, "dual", f"rho'[{self.token}]")
        with np.errstate(over="ignore"):
            return _result(np.exp(-self.link.log_propensity(self._s * v)))

    def curvature(self, v):
        v = _require(v, self._dual, "dual", f"rho''[{self.token}]")
        u = self._s * v
        with np.errstate(over="ignore", invalid="ignore"):
            out = -self._s * self.link._dlog_propensity(u) * np.exp(
                -self.link.log_propensity(u)
            )
        return _result(out)

    def gradient(self, w):
        w = _require(w, self._weights, "weight", f"g[{self.token}]")
        return _result(self._s * self.link.inverse(1.0 / w))

    def _anchor(self) -> float:
        d = self._dual
        if d.low == -math.inf and d.high == math.inf:
            return 0.0
        return 1.0 if d.low == 0.0 else -1.0

    def conjugate(self, v):
        v = _require(v, self._dual, "dual", f"rho[{self.token}]")
        k = self.link.kind
        natural = self.link.orientation is self.link.natural_orientation
        if natural and k is LinkKind.LOG:
            return _result(np.exp(v))
        family = self.closed_form
        if family is not None:
            return family.conjugate(v)
        a = self._anchor()
        flat = np.atleast_1d(v).ravel()
        vals = np.array(
            [integrate.quad(self.weight_map, a, x, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
             for x in flat]
        )
        return _result(vals.reshape(np.shape(v)))

    def entropy(self, w):
        natural = self.link.orientation is self.link.natural_orientation
        if natural and self.link.kind is LinkKind.LOG:
            w = _require(w, self._weights, "weight", f"G[{self.token}]")
            return _result(special.xlogy(w, w) - w)
        family = self.closed_form
        if family is not None:
            return family.entropy(w)
        nu = np.asarray(self.gradient(w))
        return _result(np.asarray(w) * nu - np.asarray(self.conjugate(nu)))


def link_induced_entropy(link: LinkFunction) -> LinkEntropy:
    """Entropy whose conjugate satisfies ``rho'(v) = 1/pi~(v)``.

    Raises :class:`InvalidLink` when the orientation leaves ``1/pi~``
    decreasing.
    """
    return LinkEntropy(link)


# -- string tokens ----------------------------------------------------------

_SIMPLE = {
    "sl": EntropyKind.SQUARED_LOSS,
    "kl": EntropyKind.KULLBACK_LEIBLER,
    "skl": EntropyKind.SHIFTED_KL,
    "el": EntropyKind.EMPIRICAL_LIKELIHOOD,
    "hd": EntropyKind.HELLINGER,
}


def _parse_number(text: str, token: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"bad numeric parameter in {token!r}") from None


def parse_entropy(token: str) -> EntropyFamily:
    """Parse ``sl | kl | skl | el | hd | renyi:<alpha> | huber:<M>``."""
    t = token.strip().lower()
    if t in _SIMPLE:
        return EntropyFamily(_SIMPLE[t])
    name, sep, arg = t.partition(":")
    if sep and name == "renyi":
        return EntropyFamily.renyi(_parse_number(arg, token))
    if sep and name == "huber":
        return EntropyFamily.huber(_parse_number(arg, token))
    raise ValueError(f"unknown entropy token {token!r}")


def parse_link(token: str) -> LinkFunction:
    """Parse ``logit | log | identity | probit | cloglog | cauchy | power:<alpha>``."""
    t = token.strip().lower()
    name, sep, arg = t.partition(":")
    if name == "power":
        if not sep:
            raise ValueError("power link needs an order, e.g. power:1")
        return LinkFunction(LinkKind.POWER, alpha=_parse_number(arg, token))
    if sep:
        raise ValueError(f"link {name!r} takes no parameter")
    try:
        return LinkFunction(LinkKind(name))
    except ValueError:
        raise ValueError(f"unknown link token {token!r}") from None
