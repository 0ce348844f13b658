"""Convolutional energy model, its score, and the residual map.

The prior is ``E(x) = ‖x − Ψ(x)‖² / (2 σ_f²)`` where Ψ is a small CNN on the
2-channel real/imag encoding. The score ``H(x) = ∇_x E(x)`` is computed by
reverse-mode autodiff (never by a hand-derived formula), and the residual map
is ``T(x) = x − H(x)``. Training constrains T to be locally contractive,
which makes H locally monotone; :func:`score_lipschitz_bound` turns the
trained contraction constant into a certified smoothness bound for the
reconstruction solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import lcmt
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor, conv2d, grad, relu, tensor

__all__ = [
    "NetworkSpec",
    "EnergyModel",
    "init_model",
    "score_lipschitz_bound",
    "estimate_score_lipschitz",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of the residual network Ψ.

    ``layers`` convolutions with ``channels`` feature maps, ``kernel_size``
    filters, ReLU between layers (none after the last), and 2 input/output
    channels for the complex encoding. Output shape equals input shape.
    """

    layers: int = 5
    channels: int = 64
    kernel_size: int = 3
    io_channels: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.io_channels < 1:
            raise ConfigError(f"io_channels must be >= 1, got {self.io_channels}")

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        """Kernel shape of every layer, in order."""
        shapes = []
        for i in range(self.layers):
            c_in = self.io_channels if i == 0 else self.channels
            c_out = self.io_channels if i == self.layers - 1 else self.channels
            shapes.append((c_out, c_in, self.kernel_size, self.kernel_size))
        return shapes


@dataclass(frozen=True)
class EnergyModel:
    """Network parameters plus the finest noise scale σ_f.

    Immutable; training builds a fresh model per step. ``kernels``/``biases``
    are per-layer tensors. ``sigma_f`` sets the energy scale: smaller σ_f
    means a sharper prior.
    """

    spec: NetworkSpec
    kernels: tuple[Tensor, ...]
    biases: tuple[Tensor, ...]
    sigma_f: float = 0.1

    def __post_init__(self):
        if self.sigma_f <= 0:
            raise ConfigError(f"sigma_f must be positive, got {self.sigma_f}")
        want = self.spec.layer_shapes()
        if len(self.kernels) != len(want) or len(self.biases) != len(want):
            raise ConfigError(
                f"expected {len(want)} layers, got {len(self.kernels)} kernel and "
                f"{len(self.biases)} bias tensors"
            )
        for i, (k, b, shape) in enumerate(zip(self.kernels, self.biases, want)):
            if k.shape != shape:
                raise ShapeError(f"layer {i}: kernel shape {k.shape}, expected {shape}")
            if b.shape != (shape[0],):
                raise ShapeError(f"layer {i}: bias shape {b.shape}, expected ({shape[0]},)")

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> list[Tensor]:
        """Kernels and biases interleaved per layer."""
        out: list[Tensor] = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    def parameter_arrays(self) -> list[np.ndarray]:
        return [p.numpy() for p in self.parameters()]

    def with_parameters(
        self, arrays: Sequence[np.ndarray], requires_grad: bool = False
    ) -> "EnergyModel":
        """New model with the same spec and replaced parameter values."""
        if len(arrays) != 2 * self.spec.layers:
            raise ConfigError(
                f"expected {2 * self.spec.layers} parameter arrays, got {len(arrays)}"
            )
        kernels = tuple(
            tensor(arrays[2 * i], requires_grad=requires_grad)
            for i in range(self.spec.layers)
        )
        biases = tuple(
            tensor(arrays[2 * i + 1], requires_grad=requires_grad)
            for i in range(self.spec.layers)
        )
        return EnergyModel(self.spec, kernels, biases, self.sigma_f)

    def trainable(self) -> "EnergyModel":
        """Copy whose parameters are gradient-tracked leaves."""
        return self.with_parameters(self.parameter_arrays(), requires_grad=True)

    # -- evaluation ----------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if x.ndim not in (3, 4) or x.shape[-3] != self.spec.io_channels:
            raise ShapeError(
                f"expected [{self.spec.io_channels},H,W] or "
                f"[B,{self.spec.io_channels},H,W] input, got shape {x.shape}"
            )

    def psi(self, x: Tensor) -> Tensor:
        """Network forward pass; same shape as the input."""
        if not isinstance(x, Tensor):
            x = tensor(x)
        self._check_input(x)
        h = x
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            h = conv2d(h, k, b)
            if i < self.spec.layers - 1:
                h = relu(h)
        return h

    def energy(self, x: Tensor) -> Tensor:
        """Scalar ‖x − Ψ(x)‖²/(2σ_f²); for a batch, the sum over images."""
        if not isinstance(x, Tensor):
            x = tensor(x)
        r = x - self.psi(x)
        return (r * r).sum() * (0.5 / self.sigma_f**2)

    def score(self, x: Tensor, create_graph: bool = False) -> Tensor:
        """Exact reverse-mode gradient of the energy at ``x``.

        With ``create_graph=True`` the result stays differentiable (through
        both ``x`` and any gradient-tracked parameters), which the training
        losses and Hessian-vector products require.
        """
        if not isinstance(x, Tensor):
            x = tensor(x)
        if not x.requires_grad:
            x = tensor(x.numpy(), requires_grad=True)
        e = self.energy(x)
        (g,) = grad(e, [x], create_graph=create_graph)
        return g

    def t_map(self, x: Tensor, create_graph: bool = False) -> Tensor:
        """Residual map ``x − score(x)``; contractive after training."""
        if not isinstance(x, Tensor):
            x = tensor(x)
        if not x.requires_grad:
            x = tensor(x.numpy(), requires_grad=True)
        return x - self.score(x, create_graph=create_graph)


def init_model(
    spec: NetworkSpec,
    sigma_f: float = 0.1,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> EnergyModel:
    """Fan-in-scaled uniform kernel init, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    kernels = []
    biases = []
    for shape in spec.layer_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        bound = 1.0 / np.sqrt(fan_in)
        kernels.append(tensor(rng.uniform(-bound, bound, size=shape).astype(dtype)))
        biases.append(tensor(np.zeros(shape[0], dtype=dtype)))
    return EnergyModel(spec, tuple(kernels), tuple(biases), sigma_f)


def score_lipschitz_bound(m: float) -> float:
    """Certified smoothness constant 2 − m of the score.

    When the residual map is a contraction with constant ``l = 1 − m`` on a
    ball, the score is Lipschitz there with constant at most ``1 + l``.
    ``m = 1`` is the degenerate limit (score exactly the identity).
    """
    if not (0.0 < m <= 1.0):
        raise ConfigError(f"monotonicity constant m must lie in (0, 1], got {m}")
    return 2.0 - m


def estimate_score_lipschitz(
    model: EnergyModel,
    x: np.ndarray | Tensor,
    iters: int = 30,
    rng: np.random.Generator | None = None,
    tol: float = 1e-7,
) -> float:
    """Power-iteration estimate of ‖∇H(x)‖₂ via Hessian-vector products.

    Optional tighter alternative to :func:`score_lipschitz_bound` for the
    solver step size; estimates the spectral norm of the energy Hessian at
    one point.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x_leaf = tensor(x.numpy() if isinstance(x, Tensor) else np.asarray(x), requires_grad=True)
    e = model.energy(x_leaf)
    (gx,) = grad(e, [x_leaf], create_graph=True)

    v = rng.standard_normal(x_leaf.shape)
    v /= np.linalg.norm(v.reshape(-1))
    lam = 0.0
    for _ in range(iters):
        (hv,) = grad((gx * tensor(v)).sum(), [x_leaf], create_graph=True)
        hv_np = hv.numpy()
        nrm = float(np.linalg.norm(hv_np.reshape(-1)))
        if nrm == 0.0:
            return 0.0
        new_lam = float(np.abs((v * hv_np).sum()))
        v = hv_np / nrm
        if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            lam = new_lam
            break
        lam = new_lam
    return lam


# -- checkpoints ---------------------------------------------------------------


def _sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(
    model: EnergyModel, path: str | Path, meta: dict | None = None
) -> None:
    """Write parameters as concatenated tensor records plus a JSON sidecar.

    The sidecar records the architecture, σ_f, and any training metadata
    (for example the target monotonicity constant, ball radius, and
    contraction bound) under ``"training"``.
    """
    path = Path(path)
    lcmt.write_tensors(path, model.parameter_arrays())
    header = {
        "format": "lcmuse-checkpoint",
        "version": 1,
        "spec": {
            "layers": model.spec.layers,
            "channels": model.spec.channels,
            "kernel_size": model.spec.kernel_size,
            "io_channels": model.spec.io_channels,
        },
        "layer_shapes": [list(s) for s in model.spec.layer_shapes()],
        "sigma_f": model.sigma_f,
        "training": meta or {},
    }
    _sidecar_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[EnergyModel, dict]:
    """Inverse of :func:`save_checkpoint`; returns (model, training metadata)."""
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise ConfigError(f"checkpoint sidecar not found: {sidecar}")
    header = json.loads(sidecar.read_text())
    if header.get("format") != "lcmuse-checkpoint":
        raise ConfigError(f"{sidecar}: not a checkpoint sidecar")
    spec = NetworkSpec(**header["spec"])
    arrays = lcmt.read_tensors(path)
    base = init_model(spec, sigma_f=float(header["sigma_f"]))
    model = base.with_parameters(arrays)
    return model, header.get("training", {})
