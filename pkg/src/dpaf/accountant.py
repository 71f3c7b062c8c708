"""Renyi-DP accounting for the three privatized parts of DPAF.

The three mechanisms are DPSGD on conv1 (classifier phase), DPSGD on conv2*
(GAN phase) and the noisy feature aggregate between conv2* and conv3*. Each
is a subsampled Gaussian mechanism; their RDP curves are composed additively
and converted to (epsilon, delta)-DP once at the end.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 257))

SIGMA_MIN = 1e-2
SIGMA_MAX = 1e6
BISECTION_MAX_ITER = 200
BISECTION_RTOL = 1e-6

# Terms smaller than 1e-300 times the running maximum are dropped.
_LOG_DROP = math.log(1e-300)

COMPONENTS = ("conv1", "conv2", "dpagg")


class AccountantError(ValueError):
    """Invalid accounting input."""


class InfeasibleBudgetError(AccountantError):
    """No order in the grid leaves a positive RDP budget."""


class CalibrationError(RuntimeError):
    """Noise calibration failed to converge."""


@dataclass(frozen=True)
class MechanismConfig:
    """One subsampled Gaussian mechanism, released ``iterations`` times.

    The noise standard deviation is ``noise_multiplier * sensitivity``.
    """

    sensitivity: float
    noise_multiplier: float
    subsampling_rate: float
    iterations: int

    def __post_init__(self):
        if not self.sensitivity > 0:
            raise AccountantError(f"sensitivity must be > 0, got {self.sensitivity}")
        if not self.noise_multiplier > 0:
            raise AccountantError(
                f"noise_multiplier must be > 0, got {self.noise_multiplier}"
            )
        if not 0 < self.subsampling_rate <= 1:
            raise AccountantError(
                f"subsampling_rate must be in (0, 1], got {self.subsampling_rate}"
            )
        if self.iterations < 0:
            raise AccountantError(f"iterations must be >= 0, got {self.iterations}")

    @property
    def noise_std(self) -> float:
        return self.noise_multiplier * self.sensitivity

    def with_sigma(self, sigma: float) -> "MechanismConfig":
        return MechanismConfig(
            self.sensitivity, sigma, self.subsampling_rate, self.iterations
        )

    def rdp(self, orders: Sequence[int]) -> "RdpCurve":
        """RDP curve of ``iterations`` compositions of this mechanism."""
        eps = [
            self.iterations
            * subsampled_rdp(a, self.subsampling_rate, self.sensitivity, self.noise_std)
            if self.iterations
            else 0.0
            for a in orders
        ]
        return RdpCurve(tuple(orders), tuple(eps))


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[int, ...]
    epsilons: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.epsilons):
            raise AccountantError("orders and epsilons differ in length")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise AccountantError("orders must be strictly increasing")
        if any(a < 2 or int(a) != a for a in self.orders):
            raise AccountantError("orders must be integers >= 2")
        if any(not e >= 0 for e in self.epsilons):
            raise AccountantError("RDP epsilons must be non-negative")

    def __len__(self) -> int:
        return len(self.orders)

    def scaled(self, k: float) -> "RdpCurve":
        return RdpCurve(self.orders, tuple(k * e for e in self.epsilons))


@dataclass(frozen=True)
class PrivacySpec:
    """Target budget and the three mechanism configurations.

    ``allocation`` is either a percentage triple ``(x1, x2, x3)`` summing to
    100 (``allocation_mode="percent"``) or an absolute pair ``(eps1, None,
    eps3)`` with the rest going to conv2* (``allocation_mode="absolute"``).
    Noise multipliers inside ``conv1``/``conv2``/``dpagg`` are ignored by
    calibration but used by :func:`dpaf_total_epsilon`.
    """

    epsilon_total: float
    delta: float
    conv1: MechanismConfig
    conv2: MechanismConfig
    dpagg: MechanismConfig
    allocation: tuple = (0.1, None, 0.1)
    allocation_mode: str = "absolute"

    def __post_init__(self):
        if not self.epsilon_total > 0:
            raise AccountantError(f"epsilon_total must be > 0, got {self.epsilon_total}")
        if not 0 < self.delta < 1:
            raise AccountantError(f"delta must be in (0, 1), got {self.delta}")
        self.shares()  # validates the allocation

    @property
    def components(self) -> dict[str, MechanismConfig]:
        return {"conv1": self.conv1, "conv2": self.conv2, "dpagg": self.dpagg}

    def component_epsilons(self) -> tuple[float, float, float]:
        """Per-component DP budgets implied by the allocation."""
        return tuple(s * self.epsilon_total for s in self.shares())

    def shares(self) -> tuple[float, float, float]:
        if len(self.allocation) != 3:
            raise AccountantError("allocation must have three entries")
        if self.allocation_mode == "percent":
            x = [float(v) for v in self.allocation]
            if any(v < 0 for v in x) or not math.isclose(sum(x), 100.0, abs_tol=1e-9):
                raise AccountantError(f"percentage allocation must sum to 100, got {x}")
            return tuple(v / 100.0 for v in x)
        if self.allocation_mode == "absolute":
            e1, mid, e3 = self.allocation
            if mid is not None:
                raise AccountantError("absolute allocation takes (eps1, None, eps3)")
            if e1 < 0 or e3 < 0 or not e1 + e3 < self.epsilon_total:
                raise AccountantError(
                    f"eps1 + eps3 must be < epsilon_total ({e1} + {e3} vs "
                    f"{self.epsilon_total})"
                )
            rest = self.epsilon_total - e1 - e3
            return (e1 / self.epsilon_total, rest / self.epsilon_total, e3 / self.epsilon_total)
        raise AccountantError(f"unknown allocation mode {self.allocation_mode!r}")

    def with_sigmas(self, sigmas: Sequence[float]) -> "PrivacySpec":
        c1, c2, c3 = (m.with_sigma(s) for m, s in zip(self.mechanisms(), sigmas))
        return PrivacySpec(
            self.epsilon_total, self.delta, c1, c2, c3, self.allocation, self.allocation_mode
        )

    def mechanisms(self) -> tuple[MechanismConfig, MechanismConfig, MechanismConfig]:
        return (self.conv1, self.conv2, self.dpagg)


def _check_order(alpha) -> int:
    if isinstance(alpha, bool) or int(alpha) != alpha or alpha < 2:
        raise AccountantError(f"order must be an integer >= 2, got {alpha!r}")
    return int(alpha)


def gaussian_rdp(alpha: float, sensitivity: float, sigma: float) -> float:
    """RDP of the Gaussian mechanism: ``alpha * u**2 / (2 * sigma**2)``."""
    if not alpha >= 2:
        raise AccountantError(f"order must be >= 2, got {alpha}")
    if not sensitivity > 0 or not sigma > 0:
        raise AccountantError("sensitivity and sigma must be positive")
    if math.isinf(sigma):
        return 0.0
    return alpha * sensitivity**2 / (2.0 * sigma**2)


@lru_cache(maxsize=512)
def _log_binomials(alpha: int) -> np.ndarray:
    return np.array([math.log(math.comb(alpha, j)) for j in range(alpha + 1)])


def _log_expm1(x: float) -> float:
    # log(e^x - 1) without overflow for large x
    if x > 50:
        return x + math.log1p(-math.exp(-x))
    return math.log(math.expm1(x))


def subsampled_rdp(alpha: int, gamma: float, sensitivity: float, sigma: float) -> float:
    """RDP bound of a Gaussian mechanism under subsampling without replacement.

    Evaluates, for integer ``alpha``,

        1/(alpha-1) * log(1 + gamma^2 C(alpha,2) min{4(e^{eps(2)}-1), 2 e^{eps(2)}}
                          + sum_{j=3..alpha} 2 gamma^j C(alpha,j) e^{(j-1) eps(j)})

    with ``eps(j) = j u^2 / (2 sigma^2)``. The sum is done in log space.
    """
    alpha = _check_order(alpha)
    if not 0 < gamma <= 1:
        raise AccountantError(f"subsampling rate must be in (0, 1], got {gamma}")
    if not sensitivity > 0 or not sigma > 0:
        raise AccountantError("sensitivity and sigma must be positive")
    if math.isinf(sigma):
        return 0.0
    c = sensitivity**2 / (2.0 * sigma**2)  # eps(j) = j * c
    log_gamma = math.log(gamma)
    log_binom = _log_binomials(alpha)

    eps2 = 2 * c
    if eps2 == 0.0:
        return 0.0
    log_t2 = min(math.log(4.0) + _log_expm1(eps2), math.log(2.0) + eps2)
    logs = [2 * log_gamma + log_binom[2] + log_t2]
    if alpha >= 3:
        j = np.arange(3, alpha + 1)
        rest = j * log_gamma + log_binom[3:] + (j - 1) * j * c + math.log(2.0)
        logs.extend(rest.tolist())
    logs = np.asarray(logs)
    top = logs.max()
    if top < 0:
        # log1p keeps full relative precision when the sum is tiny
        kept = logs[logs - top > _LOG_DROP]
        return math.log1p(math.fsum(np.exp(kept))) / (alpha - 1)
    kept = logs[logs - top > _LOG_DROP]
    total = math.fsum(np.exp(kept - top).tolist() + [math.exp(-top)])
    return (top + math.log(total)) / (alpha - 1)


def compose_rdp(curves: Sequence[RdpCurve]) -> RdpCurve:
    """Pointwise sum of RDP curves sharing one order grid."""
    curves = list(curves)
    if not curves:
        raise AccountantError("nothing to compose")
    orders = curves[0].orders
    for cv in curves[1:]:
        if cv.orders != orders:
            raise AccountantError("RDP curves have mismatched order grids")
    eps = tuple(math.fsum(vals) for vals in zip(*(cv.epsilons for cv in curves)))
    return RdpCurve(orders, eps)


def rdp_to_dp(alpha: float, eps_rdp: float, delta: float) -> float:
    """Convert an (alpha, eps)-RDP guarantee into (eps', delta)-DP."""
    if not alpha >= 2:
        raise AccountantError(f"order must be >= 2, got {alpha}")
    if not 0 < delta < 1:
        raise AccountantError(f"delta must be in (0, 1), got {delta}")
    return eps_rdp + math.log(1.0 / delta) / (alpha - 1)


def _validate_grid(orders: Iterable[int]) -> tuple[int, ...]:
    orders = tuple(_check_order(a) for a in orders)
    if not orders:
        raise AccountantError("order grid is empty")
    return orders


def dpaf_total_epsilon(
    spec: PrivacySpec, orders: Sequence[int] = DEFAULT_ORDERS
) -> tuple[float, int]:
    """Best (epsilon, order) over the grid for the composed DPAF mechanism."""
    orders = tuple(sorted(_validate_grid(orders)))
    total = compose_rdp([m.rdp(orders) for m in spec.mechanisms()])
    dp = [rdp_to_dp(a, e, spec.delta) for a, e in zip(total.orders, total.epsilons)]
    i = int(np.argmin(dp))
    return dp[i], total.orders[i]


def _bisect_sigma(mech: MechanismConfig, alpha: int, budget: float) -> float:
    """Smallest sigma with ``T * eps'(alpha) <= budget``, to BISECTION_RTOL."""

    def cost(sigma):
        return mech.iterations * subsampled_rdp(
            alpha, mech.subsampling_rate, 1.0, sigma
        )

    if cost(SIGMA_MIN) <= budget:
        return SIGMA_MIN
    if cost(SIGMA_MAX) > budget:
        return math.inf
    lo, hi = math.log(SIGMA_MIN), math.log(SIGMA_MAX)
    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if cost(math.exp(mid)) <= budget:
            hi = mid
        else:
            lo = mid
        if hi - lo <= BISECTION_RTOL:
            return math.exp(hi)
    raise CalibrationError(f"sigma bisection did not converge at order {alpha}")


@dataclass
class CalibrationResult:
    sigmas: tuple[float, float, float]
    achieved_epsilon: float
    order: int
    spec: PrivacySpec
    component_rdp: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        """One structured record per component, as consumed by the trainer and CLI."""
        eps_alloc = self.spec.component_epsilons()
        out = []
        for name, mech, alloc in zip(COMPONENTS, self.spec.mechanisms(), eps_alloc):
            out.append(
                {
                    "component": name,
                    "sigma": mech.noise_multiplier,
                    "iterations": mech.iterations,
                    "subsampling_rate": mech.subsampling_rate,
                    "sensitivity": mech.sensitivity,
                    "allocated_epsilon": alloc,
                    "rdp_at_order": self.component_rdp.get(name, 0.0),
                    "order": self.order,
                    "achieved_epsilon": self.achieved_epsilon,
                    "delta": self.spec.delta,
                }
            )
        return out

    def to_text(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records()]
        return "\n".join(lines) + "\n"


def calibrate_sigma(
    spec: PrivacySpec,
    orders: Sequence[int] = DEFAULT_ORDERS,
    tolerance: float = 0.01,
) -> CalibrationResult:
    """Pick per-component noise multipliers that spend ``spec.epsilon_total``.

    For every order the post-conversion RDP budget is split across the three
    components by their allocation shares and each sigma is bisected
    independently. The order minimising the largest sigma wins. A final common
    rescaling of all sigmas brings the achieved epsilon into
    ``[(1 - tolerance) * eps, eps]``.
    """
    if not tolerance > 0:
        raise AccountantError("tolerance must be positive")
    orders = tuple(sorted(_validate_grid(orders)))
    shares = spec.shares()
    mechs = spec.mechanisms()
    log_inv_delta = math.log(1.0 / spec.delta)

    best = None
    for a in orders:
        budget = spec.epsilon_total - log_inv_delta / (a - 1)
        if budget <= 0:
            continue
        sigmas = []
        for mech, share in zip(mechs, shares):
            if mech.iterations == 0:
                sigmas.append(SIGMA_MIN)
            elif share == 0:
                sigmas.append(math.inf)
            else:
                sigmas.append(_bisect_sigma(mech, a, share * budget))
        key = max(sigmas)
        if math.isfinite(key) and (best is None or key < best[0]):
            best = (key, a, sigmas)
    if best is None:
        raise InfeasibleBudgetError(
            f"epsilon_total={spec.epsilon_total} is not attainable at delta={spec.delta} "
            f"on orders {orders[0]}..{orders[-1]}"
        )
    _, alpha, sigmas = best

    def achieved(scale):
        s = spec.with_sigmas([max(x * scale, 1e-12) for x in sigmas])
        return dpaf_total_epsilon(s, orders)[0]

    target = spec.epsilon_total
    eps_now = achieved(1.0)
    if eps_now < (1 - tolerance) * target:
        # shrink all sigmas together until the budget is spent
        lo, hi = 1.0, 1.0
        for _ in range(BISECTION_MAX_ITER):
            lo *= 0.5
            if achieved(lo) > target:
                break
        else:
            raise CalibrationError("could not bracket the sigma rescaling factor")
        for _ in range(BISECTION_MAX_ITER):
            mid = 0.5 * (lo + hi)
            e = achieved(mid)
            if e > target:
                lo = mid
            else:
                hi = mid
                if e >= (1 - tolerance) * target:
                    break
        else:
            raise CalibrationError("sigma rescaling did not converge")
        sigmas = [x * hi for x in sigmas]

    final = spec.with_sigmas(sigmas)
    eps, alpha = dpaf_total_epsilon(final, orders)
    comp = {
        name: m.rdp([alpha]).epsilons[0] for name, m in zip(COMPONENTS, final.mechanisms())
    }
    return CalibrationResult(tuple(sigmas), eps, alpha, final, comp)


def agg_sensitivity(num_maps: int, side: int) -> float:
    """L2 sensitivity of SIN followed by sum-aggregation: ``sqrt(m) * p``."""
    if num_maps < 1 or side < 1:
        raise AccountantError("num_maps and side must be >= 1")
    return math.sqrt(num_maps) * side


def agg_sensitivity_at_layer(
    side: int, channels: int, filters: Sequence[int], layer: int
) -> float:
    """Aggregation sensitivity if placed after conv layer ``layer`` (0 = raw input).

    Each conv layer halves the spatial side, so the value is
    ``sqrt(c * prod(k_1..k_a)) * side / 2**a``.
    """
    if not 0 <= layer <= len(filters):
        raise AccountantError(f"layer {layer} out of range for {len(filters)} conv layers")
    if side % (2**layer):
        raise AccountantError(f"side {side} not divisible by 2**{layer}")
    maps = channels * math.prod(filters[:layer])
    return agg_sensitivity(maps, side // 2**layer)


def calibration_from_text(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def spec_to_dict(spec: PrivacySpec) -> dict:
    return asdict(spec)
