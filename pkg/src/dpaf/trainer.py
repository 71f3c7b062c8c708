"""DPAF training: DP classifier pre-training, conv1 transfer, asymmetric GAN.

Privacy-relevant releases are the three noise draws tagged ``conv1``,
``conv2`` and ``dpagg``; everything else is post-processing of those or
touches only synthetic data.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import accountant as acc
from . import mechanisms as mech
from . import nn
from .data import LabeledDataset, subsample_batches

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class BudgetExceededError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    batch_size: int = 16
    batches_per_epoch: int | None = None  # defaults to N // batch_size
    epochs: int = 1
    mu: int = 8
    n_critic: int = 1
    classifier_epochs: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.classifier_epochs < 0:
            raise ScheduleError("batch_size >= 1 and non-negative epoch counts required")
        if self.mu < 1 or self.n_critic < 1:
            raise ScheduleError("mu and n_critic must be >= 1")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ScheduleError("batches_per_epoch must be >= 1")

    def nb(self, n: int) -> int:
        """Batches per epoch for a dataset of ``n`` samples."""
        nb = self.batches_per_epoch or n // self.batch_size
        if nb < 1 or nb * self.batch_size > n:
            raise ScheduleError(
                f"{nb} batches of {self.batch_size} do not fit in {n} samples"
            )
        return nb

    def counts(self, n: int) -> dict[str, int]:
        """Number of updates of every part over a full run."""
        total = self.epochs * self.nb(n)
        return {
            "classifier": self.classifier_epochs * self.nb(n),
            "d_head": total,
            "conv2": total // self.mu,
            "generator": total // self.n_critic,
        }

    def rates(self, n: int) -> tuple[float, float, float]:
        """Subsampling rates (gamma1, gamma2, gamma3)."""
        b = self.batch_size
        return b / n, min(1.0, self.mu * b / n), b / n


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation knobs. None of these values come from the method itself."""

    lr_classifier: float = 0.05
    lr_conv1: float = 0.5
    lr_d: float = 0.1
    lr_conv2: float = 2.0
    lr_g: float = 0.01
    # per-sample gradient norms sit near 0.003 (conv1) and 0.06 (conv2) at
    # init; thresholds far above that only add noise
    clip_conv1: float = 0.02
    clip_conv2: float = 0.2
    keep_fraction: float = 0.9
    fake_agg_noise: bool = True
    # rescale the (noisy) aggregate by 1 / (B * sqrt(1 + (sigma * delta / B)^2))
    # before D's head, a public constant keeping its input O(1) at any noise
    normalize_aggregate: bool = True
    # G's per-sample pass through D sees SIN features on the aggregate's scale
    per_sample_sin: bool = True

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ScheduleError("keep_fraction must be in (0, 1]")
        if not (self.clip_conv1 > 0 and self.clip_conv2 > 0):
            raise ScheduleError("clipping thresholds must be positive")


@dataclass
class RunLedger:
    records: list[dict] = field(default_factory=list)
    counts: dict[str, int] = field(
        default_factory=lambda: {"classifier": 0, "d_head": 0, "conv2": 0, "generator": 0}
    )
    releases: dict[str, int] = field(
        default_factory=lambda: {"conv1": 0, "conv2": 0, "dpagg": 0, "dpagg_fake": 0}
    )

    def add(self, **rec) -> None:
        self.records.append(rec)

    def to_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


class EpsilonTracker:
    """Running epsilon from per-step RDP curves of the three mechanisms."""

    def __init__(self, mechanisms, delta: float, orders=acc.DEFAULT_ORDERS):
        self.orders = np.asarray(orders, dtype=np.float64)
        self.delta = delta
        self.per_step = {}
        for name, m in zip(acc.COMPONENTS, mechanisms):
            if m is None:
                self.per_step[name] = np.zeros_like(self.orders)
            else:
                self.per_step[name] = np.array(
                    [acc.subsampled_rdp(int(a), m.subsampling_rate, 1.0, m.noise_multiplier) for a in orders]
                )
        self.conv = np.log(1.0 / delta) / (self.orders - 1)

    def epsilon(self, counts: dict[str, int]) -> float:
        tot = self.conv.copy()
        for name in acc.COMPONENTS:
            if counts.get(name):
                tot = tot + counts[name] * self.per_step[name]
        return float(tot.min())


def aggregate_scale(batch_size: int, noise_std: float = 0.0) -> float:
    """``1 / (B * sqrt(1 + (noise_std / B)^2))``: maps the noisy sum to O(1)."""
    return 1.0 / (batch_size * math.sqrt(1.0 + (noise_std / batch_size) ** 2))


def _discriminator(cfg, schedule, tc, kind="discriminator", noise_std=0.0) -> nn.Network:
    b = schedule.batch_size
    if not tc.normalize_aggregate:
        return nn.build_discriminator(cfg, kind, 1.0, tc.per_sample_sin, 1.0)
    scale = aggregate_scale(b, noise_std)
    return nn.build_discriminator(cfg, kind, scale, tc.per_sample_sin, b * scale)


def _sgd(params: nn.ModelParams, grads: dict, group: str, lr: float) -> None:
    if group not in params.groups or group in params.frozen:
        return
    params.set_vector(group, params.vector(group) - lr * params.flatten(group, grads))


def _per_sample_matrix(params, grads, groups):
    return np.concatenate([params.flatten(g, grads, per_sample=True) for g in groups], axis=1)


def _apply_flat(params, groups, vec, lr):
    off = 0
    for g in groups:
        n = params.vector(g).size
        params.set_vector(g, params.vector(g) - lr * vec[off : off + n])
        off += n


def train_classifier(
    data: LabeledDataset,
    cfg: nn.NetConfig,
    schedule: TrainSchedule,
    tc: TrainConfig,
    sigma1: float,
    seed: int,
    ledger: RunLedger | None = None,
    tracker: EpsilonTracker | None = None,
):
    """Train C on class-fraction MSE; DPSGD on conv1, SGD elsewhere.

    Returns ``(params, losses)``; only ``params`` group ``conv1`` is meant to
    leave this function.
    """
    net = _discriminator(cfg, schedule, tc, "classifier")
    params = net.new_params(mech.stream(seed, "init", 0, 0))
    nb = schedule.nb(len(data))
    b = schedule.batch_size
    clip = tc.clip_conv1
    sgd_groups = [g for g in ("conv2", "conv3", "fc") if g in params.groups]
    losses = []
    for e in range(schedule.classifier_epochs):
        batches = subsample_batches(len(data), b, nb, mech.stream(seed, "batches", e, 0))
        for i, idx in enumerate(batches):
            x, y = data.images[idx], data.labels[idx]
            pred, tape = nn.forward_classifier(net, params, x)
            loss, d = nn.loss_mse_fraction(pred, nn.class_fractions(y, cfg.num_classes))
            grads, _ = net.backward(
                params, tape, d[None], per_sample=True, groups=set(sgd_groups) | {"conv1"}
            )
            per = params.flatten("conv1", grads, per_sample=True)
            noise = mech.NoiseSpec(sigma1, clip, mech.stream(seed, "conv1", e, i), "conv1")
            step = mech.noisy_clipped_mean(per, clip, noise, tc.keep_fraction, b)
            params.set_vector("conv1", params.vector("conv1") - tc.lr_conv1 * step)
            for g in sgd_groups:
                summed = {k: v.sum(0) for k, v in grads.items() if params.group_of(k) == g}
                _sgd(params, summed, g, tc.lr_classifier)
            losses.append(loss)
            if ledger is not None:
                ledger.counts["classifier"] += 1
                ledger.releases["conv1"] += noise.releases
                ledger.add(
                    phase="classifier",
                    step=len(losses),
                    component="conv1",
                    loss=loss,
                    epsilon=tracker.epsilon({"conv1": ledger.releases["conv1"]}) if tracker else None,
                    streams=[["conv1", e, i], ["batches", e, 0]],
                )
    return params, losses


def transfer_conv1(classifier_params: nn.ModelParams, cfg: nn.NetConfig, seed: int) -> nn.ModelParams:
    """Fresh D parameters with conv1 copied from C and frozen."""
    net = nn.build_discriminator(cfg, "discriminator")
    d = net.new_params(mech.stream(seed, "init", 1, 0))
    src = classifier_params.vector("conv1")
    if src.shape != d.vector("conv1").shape or classifier_params.names("conv1") != d.names("conv1"):
        raise nn.ShapeError("classifier and discriminator conv1 layouts differ")
    d.set_vector("conv1", src)
    d.freeze("conv1")
    return d


def sample_latent(rng: np.random.Generator, n: int, cfg: nn.NetConfig) -> np.ndarray:
    return rng.standard_normal((n, cfg.latent_dim))


def train_gan(
    data: LabeledDataset,
    cfg: nn.NetConfig,
    schedule: TrainSchedule,
    tc: TrainConfig,
    d_params: nn.ModelParams,
    sigma2: float,
    sigma3: float,
    seed: int,
    g_params: nn.ModelParams | None = None,
    ledger: RunLedger | None = None,
    tracker: EpsilonTracker | None = None,
):
    """Asymmetric GAN phase. Returns ``(g_params, d_params, ledger)``.

    Per global batch i (1-based): D's head (conv3*, FC*) takes an SGD step on
    the BCE of the noisy real and fake aggregates; every ``mu`` batches conv2*
    (with D's label embedding) takes a DPSGD step on the noiseless-aggregate
    BCE of the last ``mu`` cached batches; every ``n_critic`` batches G takes
    an SGD step through D without aggregation.
    """
    if "conv1" not in d_params.frozen:
        raise nn.FrozenGroupError("conv1 must be frozen before the GAN phase")
    ledger = ledger if ledger is not None else RunLedger()
    d_net = _discriminator(cfg, schedule, tc, noise_std=sigma3 * cfg.agg_sensitivity)
    g_net = nn.build_generator(cfg)
    if g_params is None:
        g_params = g_net.new_params(mech.stream(seed, "init", 2, 0))
    n = len(data)
    b = schedule.batch_size
    nb = schedule.nb(n)
    mu = schedule.mu
    delta_agg = cfg.agg_sensitivity
    head_groups = [g for g in ("conv3", "fc") if g in d_params.groups]
    dp_groups = ["conv2", "embedding"]
    clip = tc.clip_conv2
    cache: deque = deque(maxlen=mu)
    k = cfg.num_classes
    step = 0
    for e in range(schedule.epochs):
        batches = subsample_batches(n, b, nb, mech.stream(seed, "batches", e, 1))
        for bi, idx in enumerate(batches):
            step += 1
            x, y = data.images[idx], data.labels[idx]
            lat = mech.stream(seed, "latent", e, bi)
            yf = mech.stream(seed, "labels", e, bi).integers(0, k, b)
            fake, _ = g_net.forward(g_params, sample_latent(lat, b, cfg), yf)

            # (a) head update on the noisy aggregates
            real_noise = mech.NoiseSpec(sigma3, delta_agg, mech.stream(seed, "dpagg", e, bi), "dpagg")
            s_r, t_r = d_net.forward(d_params, x, y, nn.ForwardMode.with_dp_agg(real_noise))
            if tc.fake_agg_noise:
                fake_noise = mech.NoiseSpec(
                    sigma3, delta_agg, mech.stream(seed, "dpagg_fake", e, bi), "dpagg_fake"
                )
                fmode = nn.ForwardMode.with_dp_agg(fake_noise)
            else:
                fake_noise = None
                fmode = nn.ForwardMode.with_agg()
            s_f, t_f = d_net.forward(d_params, fake, yf, fmode)
            l_r, d_r = nn.loss_bce_logits(t_r.logits, 1.0)
            l_f, d_f = nn.loss_bce_logits(t_f.logits, 0.0)
            hg = set(head_groups)
            g_r, _ = d_net.backward(d_params, t_r, d_r, groups=hg, wrt_logits=True)
            g_f, _ = d_net.backward(d_params, t_f, d_f, groups=hg, wrt_logits=True)
            head_grads = {kk: g_r[kk] + g_f[kk] for kk in g_r}
            ledger.releases["dpagg"] += real_noise.releases
            if fake_noise is not None:
                ledger.releases["dpagg_fake"] += fake_noise.releases
            cache.append((x, y, fake, yf))

            # (b) conv2* DPSGD over the mu latest batches
            conv2_step = None
            if step % mu == 0:
                rows = []
                l2 = 0.0
                for cx, cy, cf, cyf in cache:
                    for imgs, labs, target in ((cx, cy, 1.0), (cf, cyf, 0.0)):
                        s, t = d_net.forward(d_params, imgs, labs, nn.ForwardMode.with_agg())
                        lv, dv = nn.loss_bce_logits(t.logits, target)
                        l2 += lv
                        grads, _ = d_net.backward(
                            d_params, t, dv, per_sample=True, groups=set(dp_groups),
                            wrt_logits=True,
                        )
                        rows.append(_per_sample_matrix(d_params, grads, dp_groups))
                # real rows come first in each pair; order is fixed by the cache
                noise2 = mech.NoiseSpec(
                    sigma2, clip, mech.stream(seed, "conv2", e, bi), "conv2"
                )
                conv2_step = mech.noisy_clipped_mean(
                    np.concatenate(rows, axis=0), clip, noise2, tc.keep_fraction, mu * b
                )
                ledger.releases["conv2"] += noise2.releases

            for g in head_groups:
                _sgd(d_params, head_grads, g, tc.lr_d)
            ledger.counts["d_head"] += 1
            eps = tracker.epsilon(_accounted(ledger)) if tracker else None
            ledger.add(
                phase="gan", step=step, component="conv3+fc", loss=l_r + l_f, epsilon=eps,
                streams=[["dpagg", e, bi], ["latent", e, bi], ["labels", e, bi]],
            )
            if conv2_step is not None:
                _apply_flat(d_params, dp_groups, conv2_step, tc.lr_conv2)
                ledger.counts["conv2"] += 1
                eps = tracker.epsilon(_accounted(ledger)) if tracker else None
                ledger.add(
                    phase="gan", step=step, component="conv2", loss=l2 / (2 * len(cache)),
                    epsilon=eps, streams=[["conv2", e, bi]],
                )

            # (c) generator update, no aggregation
            if step % schedule.n_critic == 0:
                zr = mech.stream(seed, "latent", e, bi + nb)  # fresh draw, disjoint stream
                yg = mech.stream(seed, "labels", e, bi + nb).integers(0, k, b)
                img, t_g = g_net.forward(g_params, sample_latent(zr, b, cfg), yg)
                s, t_d = d_net.forward(d_params, img, yg, nn.ForwardMode.per_sample())
                lg, dg = nn.loss_bce_logits(t_d.logits, 1.0)
                _, dx = d_net.backward(
                    d_params, t_d, dg, groups=set(), need_dx=True, wrt_logits=True
                )
                gg, _ = g_net.backward(g_params, t_g, dx)
                _sgd(g_params, gg, "generator", tc.lr_g)
                ledger.counts["generator"] += 1
                ledger.add(
                    phase="gan", step=step, component="generator", loss=lg,
                    epsilon=eps, streams=[["latent", e, bi + nb], ["labels", e, bi + nb]],
                )
    return g_params, d_params, ledger


def _accounted(ledger: RunLedger) -> dict[str, int]:
    return {
        "conv1": ledger.releases["conv1"],
        "conv2": ledger.releases["conv2"],
        "dpagg": ledger.releases["dpagg"],
    }


def generate_samples(
    g_params: nn.ModelParams, cfg: nn.NetConfig, count: int, seed: int, labels=None
) -> LabeledDataset:
    """``count`` synthetic images; labels round-robin unless given."""
    net = nn.build_generator(cfg)
    if labels is None:
        labels = np.arange(count) % cfg.num_classes
    labels = np.asarray(labels, dtype=np.int64)
    z = sample_latent(mech.stream(seed, "generate", 0, 0), len(labels), cfg)
    imgs, _ = nn.forward_generator(net, g_params, z, labels)
    return LabeledDataset(np.clip(imgs, -1.0, 1.0), labels, cfg.num_classes)


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.1
    filters: tuple[int, ...] = (8, 16)
    fc_width: int = 32


def eval_downstream(
    train: LabeledDataset, test: LabeledDataset, seed: int, ec: EvalConfig = EvalConfig()
) -> float:
    """Accuracy on ``test`` of a small non-private CNN trained on ``train``."""
    if len(train) == 0 or len(test) == 0:
        raise ValueError("empty train or test set")
    cfg = nn.NetConfig(
        layout=(1, len(ec.filters) - 1, 0) if len(ec.filters) > 1 else (1, 1, 0),
        filters=ec.filters if len(ec.filters) > 1 else ec.filters * 2,
        fc_width=ec.fc_width,
        num_classes=max(train.num_classes, test.num_classes),
        side=train.side,
        channels=train.channels,
    )
    net = nn.build_discriminator(cfg, "downstream")
    params = net.new_params()
    rng = mech.stream(seed, "eval", 0, 0)
    # non-private training; He init converges faster than the GAN's 0.02
    for name in params.names():
        if name.endswith(".w"):
            w = params[name]
            w[...] = rng.normal(0.0, math.sqrt(2.0 / np.prod(w.shape[1:])), w.shape)
    n = len(train)
    bs = min(ec.batch_size, n)
    nb = n // bs
    for e in range(ec.epochs):
        for idx in subsample_batches(n, bs, nb, mech.stream(seed, "eval", e + 1, 0)):
            probs, tape = net.forward(params, train.images[idx])
            _, d = nn.loss_cross_entropy(probs, train.labels[idx])
            grads, _ = net.backward(params, tape, d)
            for g in list(params.groups):
                _sgd(params, grads, g, ec.lr)
    correct = 0
    for start in range(0, len(test), 256):
        probs, _ = net.forward(params, test.images[start : start + 256])
        correct += int((probs.argmax(1) == test.labels[start : start + 256]).sum())
    return correct / len(test)


# ---------------------------------------------------------------------------
# the whole pipeline


@dataclass
class RunResult:
    g_params: nn.ModelParams
    d_params: nn.ModelParams
    calibration: acc.CalibrationResult
    ledger: RunLedger
    achieved_epsilon: float
    achieved_order: int
    classifier_losses: list

    def privacy_statement(self, delta: float) -> str:
        return f"achieved ({self.achieved_epsilon:.6f}, {delta:g})-DP at order {self.achieved_order}"


def privacy_spec_for(
    data_size: int,
    cfg: nn.NetConfig,
    schedule: TrainSchedule,
    epsilon: float,
    delta: float,
    allocation=(0.1, None, 0.1),
    allocation_mode: str = "absolute",
) -> acc.PrivacySpec:
    counts = schedule.counts(data_size)
    g1, g2, g3 = schedule.rates(data_size)
    return acc.PrivacySpec(
        epsilon,
        delta,
        acc.MechanismConfig(1.0, 1.0, g1, counts["classifier"]),
        acc.MechanismConfig(1.0, 1.0, g2, counts["conv2"]),
        acc.MechanismConfig(cfg.agg_sensitivity, 1.0, g3, counts["d_head"]),
        tuple(allocation),
        allocation_mode,
    )


def run_dpaf(
    data: LabeledDataset,
    cfg: nn.NetConfig,
    schedule: TrainSchedule,
    tc: TrainConfig,
    epsilon: float,
    delta: float,
    seed: int,
    allocation=(0.1, None, 0.1),
    allocation_mode: str = "absolute",
    orders=acc.DEFAULT_ORDERS,
) -> RunResult:
    """Calibrate, pre-train C, transfer conv1, train the GAN; fixed sigmas throughout."""
    spec = privacy_spec_for(len(data), cfg, schedule, epsilon, delta, allocation, allocation_mode)
    cal = acc.calibrate_sigma(spec, orders)
    s1, s2, s3 = cal.sigmas
    log.info("calibrated sigmas %.4f %.4f %.4f at order %d", s1, s2, s3, cal.order)
    tracker = EpsilonTracker(cal.spec.mechanisms(), delta, orders)
    ledger = RunLedger()
    c_params, closs = train_classifier(data, cfg, schedule, tc, s1, seed, ledger, tracker)
    d_params = transfer_conv1(c_params, cfg, seed)
    g_params, d_params, ledger = train_gan(
        data, cfg, schedule, tc, d_params, s2, s3, seed, ledger=ledger, tracker=tracker
    )
    actual = cal.spec.with_sigmas(cal.sigmas)
    actual = acc.PrivacySpec(
        actual.epsilon_total,
        actual.delta,
        _with_iters(actual.conv1, ledger.releases["conv1"]),
        _with_iters(actual.conv2, ledger.releases["conv2"]),
        _with_iters(actual.dpagg, ledger.releases["dpagg"]),
        actual.allocation,
        actual.allocation_mode,
    )
    eps, order = acc.dpaf_total_epsilon(actual, orders)
    if eps > epsilon * (1 + 1e-9):
        raise BudgetExceededError(
            f"spent epsilon {eps:.6f} exceeds target {epsilon} (releases {ledger.releases})"
        )
    return RunResult(g_params, d_params, cal, ledger, eps, order, closs)


def _with_iters(m: acc.MechanismConfig, t: int) -> acc.MechanismConfig:
    return acc.MechanismConfig(m.sensitivity, m.noise_multiplier, m.subsampling_rate, t)


def schedule_dict(s: TrainSchedule) -> dict:
    return asdict(s)
