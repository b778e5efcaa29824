"""Losses and training loops for the stamper (W + V against D) and classifiers.

The stamper objective per step is

    lam_f * l_f + lam_v * l_v + lam_d * aggregate_j(g_loss_j)

with ``l_f`` the KL between frozen-classifier predictions on clean and stamped
images, ``l_v`` the mean squared reconstruction error of the autoencoder
mapping the synthesised watermark back to the given one, and ``g_loss_j`` the
non-saturating generator loss against discriminator ``j``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from . import nets
from .dataio import ImageBatch, NetworkParams, Watermark
from .errors import DimensionError, NumericalAbort, SpecError
from .stamping import blend

log = logging.getLogger(__name__)


class ClassifierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arch: str = "F-small"
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(64, ge=1)
    optimizer: Literal["sgd-momentum", "adam"] = "sgd-momentum"
    lr: float = Field(0.01, ge=0)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int | None = None


class StamperConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(300, ge=0)
    batch_size: int = Field(32, ge=1)
    optimizer: Literal["adam", "sgd-momentum"] = "adam"
    lr: float = Field(2e-4, ge=0)
    lr_d: float | None = Field(None, ge=0)
    adam_betas: tuple[float, float] = (0.5, 0.999)
    beta: float = Field(0.5, ge=0, le=1)
    n_discriminators: int = Field(1, ge=1)
    tau: float = Field(1.0, ge=0)
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lf_mode: Literal["soft", "hard"] = "soft"
    d_arch: Literal["D", "D-literal"] = "D"
    eval_every: int = Field(50, ge=1)
    seed: int | None = None


@dataclass
class LossBreakdown:
    l_f: float
    l_v: float
    l_d: float
    l_tot: float
    d_loss: float = 0.0


# --------------------------------------------------------------------------
# loss terms


def kl_predictions(logits_clean: torch.Tensor, logits_stamped: torch.Tensor) -> torch.Tensor:
    """Batch-mean KL(softmax(clean) || softmax(stamped))."""
    return F.kl_div(
        F.log_softmax(logits_stamped, dim=1),
        F.log_softmax(logits_clean, dim=1),
        log_target=True,
        reduction="batchmean",
    )


def _frozen(params: NetworkParams, dtype: torch.dtype | None = None) -> NetworkParams:
    p = params.to(dtype) if dtype is not None else params
    return NetworkParams(p.arch, {k: v.detach() for k, v in p.tensors.items()}, p.seed, p.step)


def loss_f(
    params_f: NetworkParams, x: torch.Tensor, xw_prime: torch.Tensor, mode: str = "soft"
) -> torch.Tensor:
    """Prediction shift of the frozen classifier between clean and stamped images.

    ``soft``: KL of softmax outputs.  ``hard``: cross-entropy of the stamped
    prediction against the argmax label of the clean one.  Only ``xw_prime``
    carries gradient.
    """
    if x.shape != xw_prime.shape:
        raise DimensionError(f"clean {tuple(x.shape)} vs stamped {tuple(xw_prime.shape)}")
    frozen = _frozen(params_f, x.dtype)
    with torch.no_grad():
        ref = nets.run(frozen, x)
    out = nets.run(frozen, xw_prime)
    if mode == "hard":
        return F.cross_entropy(out, ref.argmax(dim=1))
    return kl_predictions(ref, out)


def loss_v(
    params_v: NetworkParams | None, w_planes: torch.Tensor, w_prime: torch.Tensor
) -> torch.Tensor:
    """Mean over the batch of ||V(w'_i) - w||^2 / (4 H W); ``params_v=None`` is the identity."""
    if w_prime.shape[1:] != w_planes.shape:
        raise DimensionError(f"w' {tuple(w_prime.shape)} vs w {tuple(w_planes.shape)}")
    recon = w_prime if params_v is None else nets.run(params_v, w_prime)
    return ((recon - w_planes) ** 2).mean()


def loss_d(
    params_d: NetworkParams, x_w: torch.Tensor, xw_prime: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(d_loss, g_loss): statically stamped images are "real", synthesised ones "fake"."""
    if x_w.shape != xw_prime.shape:
        raise DimensionError(f"x_w {tuple(x_w.shape)} vs x'_w {tuple(xw_prime.shape)}")
    real = nets.run(params_d, x_w)
    fake = nets.run(params_d, xw_prime)
    return bce_pair(real, fake), F.binary_cross_entropy_with_logits(fake, torch.ones_like(fake))


def bce_pair(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return 0.5 * (
        F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
        + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    )


def total_loss(l_f, l_v, l_d, lambdas: Sequence[float] = (1.0, 1.0, 1.0)):
    """Weighted sum of the three terms; unit weights give the plain sum exactly."""
    for name, value in (("l_f", l_f), ("l_v", l_v), ("l_d", l_d)):
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise NumericalAbort(f"{name} is {scalar}")
    if tuple(lambdas) == (1.0, 1.0, 1.0):
        return l_f + l_v + l_d
    lam_f, lam_v, lam_d = lambdas
    return lam_f * l_f + lam_v * l_v + lam_d * l_d


def gman_aggregate(losses: Sequence[torch.Tensor], tau: float = 1.0) -> torch.Tensor:
    """Softmax-weighted mean of generator losses (tau -> inf: mean, tau -> 0: max)."""
    if len(losses) == 1:
        return losses[0]
    stacked = torch.stack(list(losses))
    if tau == 0:
        return stacked.max()
    return (torch.softmax(stacked / tau, dim=0) * stacked).sum()


# --------------------------------------------------------------------------
# optimisation plumbing


def _leaves(params: NetworkParams) -> list[torch.Tensor]:
    """Mark trainable entries as autograd leaves (in place) and return them."""
    out = []
    for name in nets.trainable_names(params):
        t = params.tensors[name].detach().clone().requires_grad_(True)
        params.tensors[name] = t
        out.append(t)
    return out


def _optimizer(kind: str, leaves, lr, momentum=0.9, weight_decay=0.0, betas=(0.5, 0.999)):
    if kind == "adam":
        return torch.optim.Adam(leaves, lr=lr, betas=betas)
    return torch.optim.SGD(leaves, lr=lr, momentum=momentum, weight_decay=weight_decay)


def _detached(params: NetworkParams, step: int | None = None) -> NetworkParams:
    out = params.clone()
    if step is not None:
        out.step = step
    return out


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,))).permutation(n)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent; argmax ties resolve to the lowest class index."""
    if len(labels) == 0:
        raise DimensionError("accuracy of an empty batch")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


def _check_finite(value: torch.Tensor, what: str, step: int, last_good) -> None:
    if not torch.isfinite(value).all():
        raise NumericalAbort(f"{what} became {value.item()} at step {step}", step, last_good)


# --------------------------------------------------------------------------
# classifiers


def train_classifier(
    train: ImageBatch,
    cfg: ClassifierConfig,
    val: ImageBatch | None = None,
    val_stamped: ImageBatch | None = None,
) -> tuple[NetworkParams, list[dict]]:
    """Cross-entropy training; returns final parameters and per-epoch report rows.

    On a NaN loss raises :class:`NumericalAbort` carrying the last epoch's parameters.
    """
    seed = 0 if cfg.seed is None else cfg.seed
    torch.manual_seed(seed)
    params = nets.build(cfg.arch, seed, train.hw)
    leaves = _leaves(params)
    opt = _optimizer(cfg.optimizer, leaves, cfg.lr, cfg.momentum, cfg.weight_decay)
    data = torch.from_numpy(train.data)
    labels = torch.from_numpy(train.labels)
    report: list[dict] = []
    last_good = _detached(params, 0)
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(epoch_order(seed, epoch, len(train)))
        correct, seen, total = 0, 0, 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            logits = nets.run(params, data[idx], train=True)
            loss = F.cross_entropy(logits, labels[idx])
            _check_finite(loss, "classifier loss", step, last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            correct += int((logits.argmax(1) == labels[idx]).sum())
            seen += len(idx)
            total += float(loss.detach()) * len(idx)
        last_good = _detached(params, step)
        row = {"epoch": epoch + 1, "step": step, "loss": total / seen, "acc_train": 100.0 * correct / seen}
        if val is not None:
            row["acc_clean"] = accuracy(nets.predict_logits(last_good, val.data), val.labels)
        if val_stamped is not None:
            row["acc_stamped"] = accuracy(nets.predict_logits(last_good, val_stamped.data), val_stamped.labels)
        log.info("classifier %s %s", cfg.arch, row)
        report.append(row)
    return _detached(params, step), report


# --------------------------------------------------------------------------
# stamper


@dataclass
class StamperState:
    w: NetworkParams
    v: NetworkParams
    ds: list[NetworkParams]

    def all(self) -> dict[str, NetworkParams]:
        out = {"W": self.w, "V": self.v}
        out.update({f"D{j}": d for j, d in enumerate(self.ds)})
        return out


def init_stamper(cfg: StamperConfig, hw=(32, 32)) -> StamperState:
    seed = 0 if cfg.seed is None else cfg.seed
    seeds = np.random.SeedSequence(seed).generate_state(2 + cfg.n_discriminators)
    return StamperState(
        nets.build("W", int(seeds[0]), hw),
        nets.build("V", int(seeds[1]), hw),
        [nets.build(cfg.d_arch, int(s), hw) for s in seeds[2:]],
    )


def stamper_losses(
    state: StamperState,
    params_f: NetworkParams,
    x: torch.Tensor,
    w_planes: torch.Tensor,
    beta: float,
    lf_mode: str = "soft",
):
    """All loss terms for one batch: (l_f, l_v, g_losses, x_w, x'_w)."""
    w_prime = nets.synthesize_tensor(state.w, x, w_planes)
    x_w = blend(x, w_planes[:3], w_planes[3:], beta)
    xw_prime = blend(x, w_prime[:, :3], w_prime[:, 3:], beta)
    l_f = loss_f(params_f, x, xw_prime, lf_mode)
    l_v = loss_v(state.v, w_planes, w_prime)
    g_losses = [loss_d(d, x_w, xw_prime)[1] for d in state.ds]
    return l_f, l_v, g_losses, x_w, xw_prime


def train_stamper(
    params_f: NetworkParams,
    data: ImageBatch,
    w: Watermark,
    cfg: StamperConfig,
    state: StamperState | None = None,
    on_eval: Callable[[int, StamperState], None] | None = None,
) -> tuple[StamperState, list[dict]]:
    """Alternate discriminator steps and a joint W/V step for ``cfg.steps`` steps.

    ``params_f`` is never modified.  ``on_eval`` is called every ``eval_every``
    steps (and at the end) with a snapshot, e.g. to write checkpoints.
    """
    seed = 0 if cfg.seed is None else cfg.seed
    torch.manual_seed(seed)
    state = state or init_stamper(cfg, data.hw)
    if len(state.ds) != cfg.n_discriminators:
        raise SpecError(f"{len(state.ds)} discriminators for n_discriminators={cfg.n_discriminators}")
    frozen_f = _frozen(params_f)
    lr_d = cfg.lr if cfg.lr_d is None else cfg.lr_d
    gen_leaves = _leaves(state.w) + _leaves(state.v)
    opt_g = _optimizer(cfg.optimizer, gen_leaves, cfg.lr, betas=cfg.adam_betas)
    opt_ds = [_optimizer(cfg.optimizer, _leaves(d), lr_d, betas=cfg.adam_betas) for d in state.ds]
    w_planes = torch.from_numpy(w.rgba())
    images = torch.from_numpy(data.data)
    lam_f, lam_v, lam_d = cfg.lambdas
    update_gen = any(lam != 0 for lam in cfg.lambdas)

    report: list[dict] = []
    order, epoch, cursor = epoch_order(seed, 0, len(data)), 0, 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > len(order):
            epoch += 1
            order, cursor = epoch_order(seed, epoch, len(data)), 0
        x = images[torch.from_numpy(order[cursor : cursor + cfg.batch_size])]
        cursor += cfg.batch_size

        # (a) discriminators
        with torch.no_grad():
            w_prime = nets.synthesize_tensor(state.w, x, w_planes)
            x_w = blend(x, w_planes[:3], w_planes[3:], cfg.beta)
            xw_prime = blend(x, w_prime[:, :3], w_prime[:, 3:], cfg.beta)
        d_losses = []
        for d, opt in zip(state.ds, opt_ds):
            d_loss, _ = loss_d(d, x_w, xw_prime)
            _check_finite(d_loss, "d_loss", step, None)
            opt.zero_grad(set_to_none=True)
            d_loss.backward()
            opt.step()
            d_losses.append(float(d_loss.detach()))

        # (b) stamper + autoencoder
        l_f, l_v, g_losses, _, _ = stamper_losses(
            state, frozen_f, x, w_planes, cfg.beta, cfg.lf_mode
        )
        l_d = gman_aggregate(g_losses, cfg.tau)
        for name, value in (("l_f", l_f), ("l_v", l_v), ("l_d", l_d)):
            _check_finite(value, name, step, None)
        objective = total_loss(l_f, l_v, l_d, cfg.lambdas)
        opt_g.zero_grad(set_to_none=True)
        if update_gen:
            objective.backward()
            opt_g.step()

        # (c) log
        lf, lv, ld = (float(t.detach()) for t in (l_f, l_v, l_d))
        row = asdict(LossBreakdown(lf, lv, ld, lf + lv + ld, float(np.mean(d_losses))))
        row["step"] = step
        report.append(row)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            log.info("stamper step %d %s", step, row)
            if on_eval is not None:
                on_eval(step, snapshot(state, step))
    return snapshot(state, cfg.steps), report


def snapshot(state: StamperState, step: int) -> StamperState:
    return StamperState(_detached(state.w, step), _detached(state.v, step), [_detached(d, step) for d in state.ds])


# --------------------------------------------------------------------------
# gradient checking


GRAD_CHECKS = {
    # (network whose parameters are differentiated, loss) pairs
    ("W", "l_f"), ("W", "l_v"), ("V", "l_v"), ("identity", "l_v"),
    ("D", "d_loss"), ("D-literal", "d_loss"), ("W", "g_loss"), ("W", "total"), ("V", "total"),
    ("F-small", "ce"), ("F-alexnet", "ce"),
}


def _conditioned(arch_id: str, seed: int, hw, dt) -> NetworkParams:
    """Random parameters with He-scaled weights, so activations do not vanish with depth."""
    params = nets.build(arch_id, seed, hw).to(dt)
    gen = torch.Generator().manual_seed(seed + 1)
    for name, t in params.tensors.items():
        if name.endswith(".w"):
            params.tensors[name] = t * math.sqrt(6.0)
        elif name.endswith(".b"):
            params.tensors[name] = 0.1 * torch.randn(t.shape, generator=gen, dtype=dt)
    return params


def grad_check(
    arch_id: str,
    loss_selector: str,
    seed: int = 0,
    hw: tuple[int, int] = (8, 8),
    batch: int = 2,
    h: float = 1e-5,
    directions: int = 2,
    max_redraws: int = 20,
) -> float:
    """Worst relative error between autograd and central finite differences, in float64.

    Each parameter tensor of ``arch_id`` is probed along ``directions`` random
    unit directions v: autograd gives <grad, v>, the oracle gives
    (L(p + h v) - L(p - h v)) / 2h.  Each error is relative to the larger of
    the two derivatives, floored at 1e-3 of the largest derivative seen.  A direction whose probes change any ReLU
    sign or max-pool winner straddles a kink, where the finite difference is
    meaningless; it is redrawn.  ``arch_id="identity"`` differentiates ``l_v``
    with respect to the synthesised watermark itself.
    """
    if (arch_id, loss_selector) not in GRAD_CHECKS:
        raise SpecError(f"no gradient path for ({arch_id}, {loss_selector})")
    dt = torch.float64
    gen = torch.Generator().manual_seed(seed)
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(5)]
    beta = 0.5
    x = torch.rand((batch, 3, *hw), generator=gen, dtype=dt)
    w_planes = torch.rand((4, *hw), generator=gen, dtype=dt)
    labels = torch.randint(0, 10, (batch,), generator=gen)

    d_arch = "D-literal" if arch_id == "D-literal" else "D"
    state = StamperState(
        _conditioned("W", seeds[0], hw, dt),
        _conditioned("V", seeds[1], hw, dt),
        [_conditioned(d_arch, seeds[2], hw, dt)],
    )
    params_f = _conditioned("F-small", seeds[3], hw, dt)
    classifier = _conditioned(arch_id, seeds[4], hw, dt) if nets.is_classifier(arch_id) else None
    free = {"w_prime": torch.rand((batch, 4, *hw), generator=gen, dtype=dt)}

    def loss() -> torch.Tensor:
        if loss_selector == "ce":
            return F.cross_entropy(nets.run(classifier, x, train=True), labels)
        if arch_id == "identity":
            return loss_v(None, w_planes, free["w_prime"])
        if loss_selector == "d_loss":
            with torch.no_grad():
                wp = nets.synthesize_tensor(state.w, x, w_planes)
            x_w = blend(x, w_planes[:3], w_planes[3:], beta)
            return loss_d(state.ds[0], x_w, blend(x, wp[:, :3], wp[:, 3:], beta))[0]
        l_f, l_v, g_losses, _, _ = stamper_losses(state, params_f, x, w_planes, beta)
        if loss_selector == "l_f":
            return l_f
        if loss_selector == "l_v":
            return l_v
        if loss_selector == "g_loss":
            return gman_aggregate(g_losses)
        return total_loss(l_f, l_v, gman_aggregate(g_losses))

    if arch_id == "identity":
        slots = {"w_prime": free}
    else:
        owner = classifier or (state.ds[0] if arch_id.startswith("D") else getattr(state, arch_id.lower()))
        slots = {n: owner.tensors for n in nets.trainable_names(owner)}

    def evaluate(slot, name, value):
        slot[name] = value
        buffers = _bn_buffers(classifier)
        with nets.record_patterns() as patterns:
            out = loss()
        _restore(classifier, buffers)
        return out, patterns

    pairs: list[tuple[float, float]] = []
    for name, slot in slots.items():
        base = slot[name].detach().clone()
        checked = 0
        for _ in range(directions + max_redraws):
            v = torch.randn(base.shape, generator=gen, dtype=dt)
            v /= v.norm()
            probe = base.clone().requires_grad_(True)
            value, pattern = evaluate(slot, name, probe)
            (grad,) = torch.autograd.grad(value, probe)
            with torch.no_grad():
                up, pattern_up = evaluate(slot, name, base + h * v)
                down, pattern_down = evaluate(slot, name, base - h * v)
            slot[name] = base.clone()
            if not (_same(pattern, pattern_up) and _same(pattern, pattern_down)):
                continue
            pairs.append((float((grad * v).sum()), (float(up) - float(down)) / (2 * h)))
            checked += 1
            if checked == directions:
                break
        if checked == 0:
            raise NumericalAbort(f"every probe direction for {name} crossed a kink")
    # a structurally zero gradient (e.g. a bias feeding batchnorm) is judged
    # against the loss's overall gradient scale rather than its own roundoff
    floor = max(1e-10, 1e-3 * max(max(abs(a), abs(n)) for a, n in pairs))
    return max(abs(a - n) / max(abs(a), abs(n), floor) for a, n in pairs)


def _same(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def _bn_buffers(params: NetworkParams | None) -> dict[str, torch.Tensor]:
    if params is None:
        return {}
    return {k: v.clone() for k, v in params.tensors.items() if k.endswith(nets.BUFFER_SUFFIXES)}


def _restore(params: NetworkParams | None, buffers: dict[str, torch.Tensor]) -> None:
    for k, v in buffers.items():
        params.tensors[k] = v.clone()
