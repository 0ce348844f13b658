"""Constrained score-matching training.

The loss has two parts: a multiscale denoising-score-matching term (the
score at a noise-perturbed image should match the added noise) and a
penalty that pushes the local Lipschitz constant of the residual map
``T = I − H`` below ``l = 1 − m`` on balls around the training images. The
Lipschitz constant is estimated by projected gradient ascent on the
two-point ratio ``‖T(x1) − T(x2)‖ / ‖x1 − x2‖`` inside each ball; the
penalty then re-evaluates the ratio at the fixed ascent endpoints with
parameter gradients flowing. Both terms need gradients of gradients, which
the tensor core provides.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .energy import EnergyModel, save_checkpoint
from .exceptions import ConfigError, NumericalError, ShapeError
from .tensor import Tensor, grad, relu, tensor

__all__ = [
    "TrainConfig",
    "LipschitzProbe",
    "dsm_loss",
    "local_lipschitz",
    "local_lipschitz_batch",
    "penalty_from_ratios",
    "penalty",
    "Adam",
    "train",
    "write_history_csv",
]

SEPARATION_FLOOR_FACTOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    """All scalars the training objective leaves free.

    ``l = 1 − m`` always; ``delta`` is the ball radius around each training
    image (normally the worst-case deviation of the initializer from the
    references, see the MRI module). ``lam`` is the penalty weight, ramped
    by ``lam_ramp_factor`` every ``lam_ramp_every`` epochs while more than
    ``lam_ramp_violation_rate`` of probes violate the constraint.
    """

    sigma_max: float = 0.1
    m: float = 0.1
    delta: float = 1.0
    lam: float = 10.0
    ascent_steps: int = 15
    ascent_step_size: float | None = None  # defaults to delta / 10
    batch_size: int = 8
    epochs: int = 10
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    lam_ramp_factor: float = 2.0
    lam_ramp_every: int = 5
    lam_ramp_violation_rate: float = 0.01
    dtype: str = "float64"

    def __post_init__(self):
        if not (0.0 < self.m < 1.0):
            raise ConfigError(f"m must lie in (0, 1), got {self.m}")
        for name in ("sigma_max", "delta", "lr", "beta1", "beta2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.ascent_steps < 0:
            raise ConfigError(f"ascent_steps must be >= 0, got {self.ascent_steps}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def l(self) -> float:
        return 1.0 - self.m

    @property
    def step_size(self) -> float:
        return self.delta / 10.0 if self.ascent_step_size is None else self.ascent_step_size

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass(frozen=True, eq=False)
class LipschitzProbe:
    """Ascent endpoints inside one ball and the ratio they achieve."""

    x1: np.ndarray
    x2: np.ndarray
    ratio: float


# -- losses --------------------------------------------------------------------


def _stack_batch(batch: Sequence, name: str) -> np.ndarray:
    arrays = [b.numpy() if isinstance(b, Tensor) else np.asarray(b) for b in batch]
    if not arrays:
        raise ShapeError(f"{name}: empty batch")
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise ShapeError(f"{name}: element {i} has shape {a.shape}, expected {shape}")
    return np.stack(arrays)


def dsm_loss(
    model: EnergyModel,
    batch: Sequence,
    sigmas: Sequence[float],
    zs: Sequence,
) -> Tensor:
    """Mean over the batch of ``‖∇_x E(x + σz) − σz‖²``.

    The score is evaluated at the perturbed point with the graph kept, so
    the result is differentiable in the model parameters. ``sigmas`` are
    per-image noise scales, ``zs`` the matching unit-normal draws.
    """
    x = _stack_batch(batch, "dsm_loss")
    z = _stack_batch(zs, "dsm_loss noise")
    if z.shape != x.shape:
        raise ShapeError(f"dsm_loss: noise shape {z.shape} != batch shape {x.shape}")
    if len(sigmas) != x.shape[0]:
        raise ShapeError(f"dsm_loss: {len(sigmas)} sigmas for batch of {x.shape[0]}")
    sig = np.asarray(sigmas, dtype=x.dtype).reshape(-1, *([1] * (x.ndim - 1)))
    target = sig * z
    leaf = tensor(x + target, requires_grad=True)
    e = model.energy(leaf)
    (gx,) = grad(e, [leaf], create_graph=True)
    res = gx - tensor(target.astype(x.dtype))
    return (res * res).sum() * (1.0 / x.shape[0])


def _per_sample_sq_norm(t: Tensor) -> Tensor:
    axes = tuple(range(1, t.ndim))
    return (t * t).sum(axis=axes)


def _project_to_ball(points: np.ndarray, centers: np.ndarray, delta: float) -> np.ndarray:
    d = points - centers
    norms = np.sqrt((d * d).reshape(d.shape[0], -1).sum(axis=1))
    scale = np.minimum(1.0, delta / np.maximum(norms, 1e-300))
    out = centers + d * scale.reshape(-1, *([1] * (d.ndim - 1)))
    out_norms = np.sqrt(((out - centers) ** 2).reshape(d.shape[0], -1).sum(axis=1))
    assert np.all(out_norms <= delta * (1.0 + 1e-9)), "ball projection violated"
    return out


def _sample_in_ball(
    rng: np.random.Generator, centers: np.ndarray, delta: float
) -> np.ndarray:
    d = rng.standard_normal(centers.shape)
    flat = d.reshape(d.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    dim = flat.shape[1]
    radii = delta * rng.uniform(size=d.shape[0]) ** (1.0 / dim)
    scale = radii / np.maximum(norms, 1e-300)
    return centers + d * scale.reshape(-1, *([1] * (d.ndim - 1)))


def _reseparate(
    rng: np.random.Generator,
    x1: np.ndarray,
    x2: np.ndarray,
    centers: np.ndarray,
    delta: float,
    floor: float,
) -> np.ndarray:
    """Push x2 away from x1 along a random direction where the pair collapsed.

    Retries because the ball projection can move a bumped point back toward
    x1; the floor is 1e-6 of the radius, so a few tries always succeed.
    """
    for _ in range(50):
        d = x2 - x1
        dist = np.linalg.norm(d.reshape(d.shape[0], -1), axis=1)
        bad = dist < floor
        if not np.any(bad):
            return x2
        bump = rng.standard_normal(x2.shape)
        bn = np.linalg.norm(bump.reshape(bump.shape[0], -1), axis=1)
        bump = bump / bn.reshape(-1, *([1] * (x2.ndim - 1))) * (10.0 * floor)
        x2 = x2.copy()
        x2[bad] = x2[bad] + bump[bad]
        x2 = _project_to_ball(x2, centers, delta)
    raise NumericalError(
        "could not separate a degenerate probe pair",
        state={"floor": floor, "delta": delta},
    )


def _ratios_numpy(model: EnergyModel, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    t1 = model.t_map(tensor(x1)).numpy()
    t2 = model.t_map(tensor(x2)).numpy()
    num = np.linalg.norm((t1 - t2).reshape(x1.shape[0], -1), axis=1)
    den = np.linalg.norm((x1 - x2).reshape(x1.shape[0], -1), axis=1)
    return num / np.maximum(den, 1e-300)


def local_lipschitz_batch(
    model: EnergyModel,
    centers: np.ndarray,
    delta: float,
    steps: int,
    step_size: float,
    rng: np.random.Generator,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[LipschitzProbe]:
    """Projected gradient ascent on the two-point ratio, one probe per center.

    ``centers`` is ``[B, ...]``; each sample ascends independently inside
    its own ball of radius ``delta``. ``init`` warm-starts the pairs. The
    returned probes carry the best pair seen per sample (the tracked ratio
    never decreases across iterations).
    """
    if delta <= 0:
        raise ConfigError(f"ball radius must be positive, got {delta}")
    floor = SEPARATION_FLOOR_FACTOR * delta
    B = centers.shape[0]
    if init is None:
        x1 = _sample_in_ball(rng, centers, delta)
        x2 = _sample_in_ball(rng, centers, delta)
    else:
        x1 = _project_to_ball(np.asarray(init[0], dtype=centers.dtype), centers, delta)
        x2 = _project_to_ball(np.asarray(init[1], dtype=centers.dtype), centers, delta)
    x2 = _reseparate(rng, x1, x2, centers, delta, floor)

    best_r = _ratios_numpy(model, x1, x2)
    best_x1, best_x2 = x1.copy(), x2.copy()

    for _ in range(steps):
        leaf1 = tensor(x1, requires_grad=True)
        leaf2 = tensor(x2, requires_grad=True)
        t1 = model.t_map(leaf1, create_graph=True)
        t2 = model.t_map(leaf2, create_graph=True)
        num2 = _per_sample_sq_norm(t1 - t2)
        den2 = _per_sample_sq_norm(leaf1 - leaf2)
        # Tiny offset keeps the square root differentiable when T collapses.
        ratio = ((num2 + 1e-30) * den2**-1.0) ** 0.5
        g1, g2 = grad(ratio.sum(), [leaf1, leaf2])
        x1 = _project_to_ball(x1 + step_size * g1.numpy(), centers, delta)
        x2 = _project_to_ball(x2 + step_size * g2.numpy(), centers, delta)
        x2 = _reseparate(rng, x1, x2, centers, delta, floor)
        r = _ratios_numpy(model, x1, x2)
        improved = r > best_r
        best_r = np.where(improved, r, best_r)
        best_x1[improved] = x1[improved]
        best_x2[improved] = x2[improved]

    return [
        LipschitzProbe(best_x1[i], best_x2[i], float(best_r[i])) for i in range(B)
    ]


def local_lipschitz(
    model: EnergyModel,
    x,
    delta: float,
    steps: int = 15,
    step_size: float | None = None,
    seed: int = 0,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> LipschitzProbe:
    """Single-ball convenience wrapper around :func:`local_lipschitz_batch`."""
    center = x.numpy() if isinstance(x, Tensor) else np.asarray(x)
    rng = np.random.default_rng(seed)
    batched_init = None
    if init is not None:
        batched_init = (init[0][None], init[1][None])
    (probe,) = local_lipschitz_batch(
        model,
        center[None],
        delta,
        steps,
        delta / 10.0 if step_size is None else step_size,
        rng,
        init=batched_init,
    )
    return probe


def penalty_from_ratios(ratios, l: float) -> Tensor:
    """Mean of squared hinge excess: ``mean(relu(ratio − l)²)``.

    Accepts a tensor of ratios (gradients flow) or any array-like.
    """
    r = ratios if isinstance(ratios, Tensor) else tensor(np.asarray(ratios, dtype=np.float64))
    h = relu(r - float(l))
    return (h * h).mean()


def penalty(
    model: EnergyModel,
    batch: Sequence,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    fresh_restart: bool = False,
) -> tuple[Tensor, list[LipschitzProbe], Tensor]:
    """Constraint penalty for one batch of ball centers.

    Runs the ascent with parameters frozen (the endpoint search is not
    differentiated), then recomputes the ratio at the fixed endpoints with
    parameter gradients flowing. With ``fresh_restart`` a second ascent from
    random initialization runs alongside the warm-started one and the better
    pair wins per sample. Returns ``(penalty, probes, ratios)`` where
    ``ratios`` is the differentiable per-sample ratio tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    centers = _stack_batch(batch, "penalty")
    frozen = model.with_parameters(model.parameter_arrays())
    probes = local_lipschitz_batch(
        frozen, centers, cfg.delta, cfg.ascent_steps, cfg.step_size, rng, init=init
    )
    if fresh_restart and init is not None:
        fresh = local_lipschitz_batch(
            frozen, centers, cfg.delta, cfg.ascent_steps, cfg.step_size, rng, init=None
        )
        probes = [f if f.ratio > w.ratio else w for w, f in zip(probes, fresh)]
    x1 = np.stack([p.x1 for p in probes])
    x2 = np.stack([p.x2 for p in probes])
    leaf1 = tensor(x1, requires_grad=True)
    leaf2 = tensor(x2, requires_grad=True)
    t1 = model.t_map(leaf1, create_graph=True)
    t2 = model.t_map(leaf2, create_graph=True)
    num2 = _per_sample_sq_norm(t1 - t2)
    den2 = _per_sample_sq_norm(leaf1 - leaf2).detach()
    ratios = ((num2 + 1e-30) * den2**-1.0) ** 0.5
    return penalty_from_ratios(ratios, cfg.l), probes, ratios


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Standard adaptive first-order optimizer with bias correction."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(
        self, params: list[np.ndarray], grads: list[np.ndarray]
    ) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mh = self.m[i] / (1 - self.beta1**self.t)
            vh = self.v[i] / (1 - self.beta2**self.t)
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


# -- training loop -------------------------------------------------------------


def _as_image_list(dataset) -> list[np.ndarray]:
    if hasattr(dataset, "images"):
        return [np.asarray(x) for x in dataset.images]
    return [x.numpy() if isinstance(x, Tensor) else np.asarray(x) for x in dataset]


def train(
    model: EnergyModel,
    dataset,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> tuple[EnergyModel, list[dict]]:
    """Minimize ``dsm_loss + λ·penalty`` over the dataset.

    ``dataset`` is anything with an ``images`` attribute or a sequence of
    ``[2,H,W]`` arrays. Probe pairs are warm-started per image across steps
    and re-randomized once per epoch. Returns the trained model and a
    per-step history (step, epoch, dsm, penalty, lam, max_ratio, m_prime,
    loss). Aborts with a diagnostic state dump if the loss goes non-finite.
    """
    images = _as_image_list(dataset)
    if not images:
        raise ConfigError("training needs at least one image")
    dtype = cfg.np_dtype
    images = [np.asarray(x, dtype=dtype) for x in images]
    rng = np.random.default_rng(cfg.seed)

    params = [np.asarray(p, dtype=dtype) for p in model.parameter_arrays()]
    base = model.with_parameters(params)
    opt = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    lam = float(cfg.lam)

    warm: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    history: list[dict] = []
    step = 0
    n = len(images)

    for epoch in range(cfg.epochs):
        # Warm pairs persist across epochs; once per epoch each image's
        # warm-started ascent races one fresh random restart.
        fresh_pending = set(range(n))
        order = rng.permutation(n)
        epoch_violations = 0
        epoch_probes = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = [images[i] for i in idx]
            live = base.with_parameters(params, requires_grad=True)
            param_tensors = live.parameters()

            sigmas = rng.uniform(0.0, cfg.sigma_max, size=len(batch))
            zs = [rng.standard_normal(b.shape).astype(dtype) for b in batch]
            loss = dsm_loss(live, batch, sigmas, zs)
            dsm_val = loss.item()

            pen_val = 0.0
            max_ratio = float("nan")
            m_prime = float("nan")
            if lam > 0.0:
                init = None
                if all(int(i) in warm for i in idx):
                    init = (
                        np.stack([warm[int(i)][0] for i in idx]),
                        np.stack([warm[int(i)][1] for i in idx]),
                    )
                restart = any(int(i) in fresh_pending for i in idx)
                fresh_pending.difference_update(int(i) for i in idx)
                pen, probes, _ = penalty(
                    live, batch, cfg, rng=rng, init=init, fresh_restart=restart
                )
                for j, i in enumerate(idx):
                    warm[int(i)] = (probes[j].x1, probes[j].x2)
                ratios = np.array([p.ratio for p in probes])
                max_ratio = float(ratios.max())
                m_prime = float(1.0 - max_ratio)
                epoch_violations += int((ratios > cfg.l).sum())
                epoch_probes += len(probes)
                pen_val = pen.item()
                loss = loss + float(lam) * pen

            total = loss.item()
            if not np.isfinite(total):
                raise NumericalError(
                    f"non-finite loss at step {step}",
                    state={
                        "step": step,
                        "epoch": epoch,
                        "dsm": dsm_val,
                        "penalty": pen_val,
                        "lam": lam,
                        "history": history,
                    },
                )

            grads = grad(loss, param_tensors)
            params = opt.step(params, [g.numpy() for g in grads])
            history.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "dsm": dsm_val,
                    "penalty": pen_val,
                    "lam": lam,
                    "max_ratio": max_ratio,
                    "m_prime": m_prime,
                    "loss": total,
                }
            )
            step += 1

        if checkpoint_dir is not None:
            ck = Path(checkpoint_dir)
            ck.mkdir(parents=True, exist_ok=True)
            save_checkpoint(
                base.with_parameters(params),
                ck / f"epoch_{epoch:04d}.lcmt",
                meta=_train_meta(cfg, lam, epoch),
            )

        if (
            lam > 0.0
            and cfg.lam_ramp_every > 0
            and (epoch + 1) % cfg.lam_ramp_every == 0
            and epoch_probes > 0
            and epoch_violations / epoch_probes > cfg.lam_ramp_violation_rate
        ):
            lam *= cfg.lam_ramp_factor

    trained = base.with_parameters(params)
    if checkpoint_dir is not None:
        save_checkpoint(
            trained,
            Path(checkpoint_dir) / "final.lcmt",
            meta=_train_meta(cfg, lam, cfg.epochs - 1),
        )
    return trained, history


def _train_meta(cfg: TrainConfig, lam: float, epoch: int) -> dict:
    return {
        "m": cfg.m,
        "l": cfg.l,
        "delta": cfg.delta,
        "lam": lam,
        "sigma_max": cfg.sigma_max,
        "epoch": epoch,
        "seed": cfg.seed,
    }


def write_history_csv(history: list[dict], path: str | Path) -> None:
    """Per-step training record: step, dsm, penalty, max-ratio, m′ estimate."""
    import csv

    fields = ["step", "epoch", "dsm", "penalty", "lam", "max_ratio", "m_prime", "loss"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k) for k in fields})
