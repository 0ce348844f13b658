"""SENSE-style MRI forward operator, masks, phantoms, and datasets.

The forward model is ``b = A x + n`` with ``A = S F C``: per-coil
sensitivity weighting, unitary 2-D DFT, then binary k-space sampling. Masks
are stored in the centered frame (the middle of the array is DC, where the
fully-sampled block sits); the operator shifts the mask internally so that
``apply`` composes with the package's unshifted FFT. With per-pixel
normalized coils, a unitary FFT, and a binary mask, ``‖A‖ ≤ 1``.

Everything here works on plain numpy arrays (complex internally, 2-channel
at the tensor boundary); the forward operator is linear and fixed, so it
never participates in autodiff.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import lcmt
from .exceptions import ConfigError, ConvergenceWarning, NumericalError, ShapeError
from .tensor import Tensor, from_complex, to_complex

__all__ = [
    "ForwardOperator",
    "conjugate_gradient",
    "make_mask",
    "make_coil_maps",
    "make_phantom",
    "sense_init",
    "delta_from_sense",
    "generate_dataset",
    "Dataset",
    "load_dataset",
]


def _as_complex_image(x) -> np.ndarray:
    """Accept [2,H,W] tensors/arrays or complex [H,W] arrays."""
    if isinstance(x, Tensor):
        return to_complex(x)
    x = np.asarray(x)
    if np.iscomplexobj(x):
        if x.ndim != 2:
            raise ShapeError(f"expected complex [H,W] image, got shape {x.shape}")
        return x
    return to_complex(x)


@dataclass(frozen=True, eq=False)
class ForwardOperator:
    """``A = S F C`` for one sampling mask and one set of coil maps.

    ``mask`` is a binary ``[H,W]`` array in the centered frame; ``coil_maps``
    is complex ``[N_c,H,W]`` with unit sum-of-squares at every pixel.
    """

    mask: np.ndarray
    coil_maps: np.ndarray
    _mask_shifted: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        coils = np.asarray(self.coil_maps)
        if mask.ndim != 2:
            raise ShapeError(f"mask must be [H,W], got shape {mask.shape}")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ConfigError("mask must be binary (0/1)")
        if coils.ndim != 3 or not np.iscomplexobj(coils):
            raise ShapeError(
                f"coil_maps must be complex [N_c,H,W], got shape {coils.shape}"
            )
        if coils.shape[1:] != mask.shape:
            raise ShapeError(
                f"coil_maps spatial shape {coils.shape[1:]} does not match mask {mask.shape}"
            )
        sos = np.sum(np.abs(coils) ** 2, axis=0)
        if not np.allclose(sos, 1.0, atol=1e-8):
            raise ConfigError(
                "coil maps must have unit sum-of-squares per pixel "
                f"(max deviation {np.max(np.abs(sos - 1.0)):.2e})"
            )
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "coil_maps", coils.astype(np.complex128))
        object.__setattr__(self, "_mask_shifted", np.fft.ifftshift(mask))

    @property
    def n_coils(self) -> int:
        return self.coil_maps.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.mask.shape

    # -- complex fast path ----------------------------------------------------

    def apply_complex(self, xc: np.ndarray) -> np.ndarray:
        """``[H,W]`` complex image → masked k-space ``[N_c,H,W]``."""
        if xc.shape != self.image_shape:
            raise ShapeError(f"image shape {xc.shape}, operator expects {self.image_shape}")
        return self._mask_shifted * np.fft.fft2(self.coil_maps * xc[None], norm="ortho")

    def adjoint_complex(self, yc: np.ndarray) -> np.ndarray:
        """Masked k-space ``[N_c,H,W]`` → complex image ``[H,W]``."""
        if yc.shape != (self.n_coils,) + self.image_shape:
            raise ShapeError(
                f"measurement shape {yc.shape}, operator expects "
                f"{(self.n_coils,) + self.image_shape}"
            )
        imgs = np.fft.ifft2(self._mask_shifted * yc, norm="ortho")
        return np.sum(np.conj(self.coil_maps) * imgs, axis=0)

    def normal_complex(self, xc: np.ndarray) -> np.ndarray:
        """``A^H A`` on a complex image."""
        return self.adjoint_complex(self.apply_complex(xc))

    # -- tensor boundary ------------------------------------------------------

    def apply(self, x) -> Tensor:
        """``[2,H,W]`` image → masked k-space ``[N_c,2,H,W]``."""
        return from_complex(self.apply_complex(_as_complex_image(x)))

    def adjoint(self, y) -> Tensor:
        """``[N_c,2,H,W]`` measurement → ``[2,H,W]`` image."""
        if isinstance(y, Tensor):
            yc = to_complex(y)
        else:
            y = np.asarray(y)
            yc = y if np.iscomplexobj(y) else to_complex(y)
        return from_complex(self.adjoint_complex(yc))


# -- conjugate gradient --------------------------------------------------------


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    tol: float = 1e-8,
    maxiter: int = 200,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, int, float]:
    """CG for a Hermitian PSD ``matvec`` under the real inner product.

    Works elementwise on complex arrays with ``Re⟨a,b⟩ = Re(Σ conj(a)b)``.
    Stops at relative residual ``tol``; on non-convergence returns the best
    iterate seen and emits a :class:`ConvergenceWarning`. Returns
    ``(solution, iterations, relative_residual)``.
    """

    def inner(a, b):
        return float(np.real(np.vdot(a, b)))

    x = np.zeros_like(rhs) if x0 is None else x0.copy()
    r = rhs - matvec(x)
    p = r.copy()
    rs = inner(r, r)
    rhs_norm = np.sqrt(inner(rhs, rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), 0, 0.0
    best_x, best_res = x.copy(), np.sqrt(rs) / rhs_norm
    for it in range(1, maxiter + 1):
        if np.sqrt(rs) / rhs_norm <= tol:
            return x, it - 1, np.sqrt(rs) / rhs_norm
        ap = matvec(p)
        denom = inner(p, ap)
        if denom <= 0.0:
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = inner(r, r)
        res = np.sqrt(rs_new) / rhs_norm
        if res < best_res:
            best_x, best_res = x.copy(), res
        beta = rs_new / rs
        p = r + beta * p
        rs = rs_new
    if best_res > tol:
        warnings.warn(
            f"CG did not reach tol={tol:g} within {maxiter} iterations "
            f"(best relative residual {best_res:.3e})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return best_x, maxiter, best_res


# -- masks, coils, phantoms ----------------------------------------------------


def _center_count(n: int, fraction: float) -> int:
    return max(1, int(round(n * fraction)))


def make_mask(
    kind: str,
    R: float,
    H: int,
    W: int,
    center_fraction: float = 0.08,
    seed: int = 0,
) -> np.ndarray:
    """Binary sampling mask ``[H,W]`` in the centered frame.

    ``kind`` is ``"1d"`` (random fully-sampled columns plus a fully-sampled
    center band) or ``"2d"`` (random points plus a fully-sampled center
    block). The number of samples is chosen so the realized acceleration
    matches ``R`` within 5%.
    """
    if R < 1:
        raise ConfigError(f"acceleration R must be >= 1, got {R}")
    if kind not in ("1d", "2d"):
        raise ConfigError(f"mask kind must be '1d' or '2d', got {kind!r}")
    rng = np.random.default_rng(seed)
    mask = np.zeros((H, W))
    if R == 1:
        return np.ones((H, W))
    if kind == "1d":
        budget = int(round(W / R))
        nc = _center_count(W, center_fraction)
        start = (W - nc) // 2
        center = np.arange(start, start + nc)
        if nc > budget:
            raise ConfigError(
                f"infeasible mask: {nc} center columns exceed the sampling budget {budget}"
            )
        rest = np.setdiff1d(np.arange(W), center)
        extra = rng.choice(rest, size=budget - nc, replace=False)
        cols = np.concatenate([center, extra])
        mask[:, cols] = 1.0
        realized = W / len(cols)
    else:
        budget = int(round(H * W / R))
        nch, ncw = _center_count(H, center_fraction), _center_count(W, center_fraction)
        sh, sw = (H - nch) // 2, (W - ncw) // 2
        block = np.zeros((H, W), dtype=bool)
        block[sh : sh + nch, sw : sw + ncw] = True
        n_center = int(block.sum())
        if n_center > budget:
            raise ConfigError(
                f"infeasible mask: {n_center} center points exceed the sampling budget {budget}"
            )
        mask[block] = 1.0
        rest = np.flatnonzero(~block.reshape(-1))
        extra = rng.choice(rest, size=budget - n_center, replace=False)
        mask.reshape(-1)[extra] = 1.0
        realized = H * W / mask.sum()
    if abs(realized - R) / R > 0.05:
        raise ConfigError(
            f"mask realization failed: requested R={R}, realized {realized:.3f}"
        )
    return mask


def make_coil_maps(H: int, W: int, n_coils: int = 4) -> np.ndarray:
    """Smooth complex Gaussian-bump sensitivities, unit sum-of-squares.

    Deterministic for given sizes: bump centers sit on a circle around the
    image center, each coil carrying a mild linear phase.
    """
    if n_coils < 1:
        raise ConfigError(f"n_coils must be >= 1, got {n_coils}")
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    maps = np.zeros((n_coils, H, W), dtype=np.complex128)
    radius = 0.38 * min(H, W)
    width = 0.55 * min(H, W)
    for c in range(n_coils):
        ang = 2.0 * np.pi * c / n_coils
        cy = H / 2.0 + radius * np.sin(ang)
        cx = W / 2.0 + radius * np.cos(ang)
        bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2)))
        phase = 0.4 * np.cos(ang) * (xx - W / 2.0) / W + 0.4 * np.sin(ang) * (yy - H / 2.0) / H
        maps[c] = bump * np.exp(1j * 2.0 * np.pi * phase)
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / sos[None]


def make_phantom(seed: int, H: int, W: int) -> np.ndarray:
    """Random piecewise-smooth complex phantom, complex ``[H,W]``.

    3–8 overlapping ellipses with intensities in [0.2, 1.0] on a zero
    background, a smooth low-order polynomial phase, and the maximum
    magnitude normalized to exactly 1.
    """
    if H < 16 or W < 16:
        raise ConfigError(f"phantom size must be at least 16x16, got {H}x{W}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(
        np.linspace(-1.0, 1.0, H), np.linspace(-1.0, 1.0, W), indexing="ij"
    )
    mag = np.zeros((H, W))
    n_ell = int(rng.integers(3, 9))
    for _ in range(n_ell):
        cy, cx = rng.uniform(-0.55, 0.55, size=2)
        a, b = rng.uniform(0.15, 0.55, size=2)
        theta = rng.uniform(0.0, np.pi)
        u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
        v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        mag[inside] += rng.uniform(0.2, 1.0)
    peak = mag.max()
    if peak <= 0.0:
        raise NumericalError("phantom generation produced an empty image", state={"seed": seed})
    mag /= peak
    coeffs = rng.normal(0.0, 0.6, size=6)
    phase = (
        coeffs[0]
        + coeffs[1] * xx
        + coeffs[2] * yy
        + coeffs[3] * xx * yy
        + coeffs[4] * xx**2
        + coeffs[5] * yy**2
    )
    return mag * np.exp(1j * phase)


# -- SENSE initialization ------------------------------------------------------


def sense_init(
    op: ForwardOperator,
    b,
    lam: float = 1e-2,
    cg_tol: float = 1e-8,
    cg_maxiter: int = 200,
) -> Tensor:
    """Regularized SENSE image: solves ``(A^H A + λI) x = A^H b`` by CG."""
    if lam < 0:
        raise ConfigError(f"sense_init regularization must be >= 0, got {lam}")
    bc = b if (isinstance(b, np.ndarray) and np.iscomplexobj(b)) else to_complex(
        b if isinstance(b, Tensor) else np.asarray(b)
    )
    rhs = op.adjoint_complex(bc)

    def matvec(xc):
        return op.normal_complex(xc) + lam * xc

    xc, _, _ = conjugate_gradient(matvec, rhs, tol=cg_tol, maxiter=cg_maxiter)
    return from_complex(xc)


def delta_from_sense(
    images: Sequence[np.ndarray],
    kspaces: Sequence[np.ndarray],
    ops: Sequence[ForwardOperator],
    lam: float = 1e-2,
    cg_tol: float = 1e-8,
    cg_maxiter: int = 200,
) -> float:
    """Worst-case deviation ``max_i ‖sense(b_i) − x_i‖`` over a training set.

    This is the ball radius inside which the prior's contraction property is
    enforced: reconstruction iterates start at the SENSE estimate, so the
    radius must cover the true images' distance from their SENSE estimates.
    """
    if len(images) == 0:
        raise ConfigError("delta_from_sense needs a nonempty training set")
    if not (len(images) == len(kspaces) == len(ops)):
        raise ConfigError(
            f"mismatched set sizes: {len(images)} images, {len(kspaces)} k-spaces, "
            f"{len(ops)} operators"
        )
    worst = 0.0
    for x, b, op in zip(images, kspaces, ops):
        xc = _as_complex_image(x)
        x0 = to_complex(sense_init(op, b, lam=lam, cg_tol=cg_tol, cg_maxiter=cg_maxiter))
        worst = max(worst, float(np.linalg.norm((x0 - xc).reshape(-1))))
    return worst


# -- datasets ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images, per-image masks/k-space, shared coil maps, and metadata."""

    images: tuple[np.ndarray, ...]  # [2,H,W] float64 each
    masks: tuple[np.ndarray, ...]  # [H,W] each
    kspaces: tuple[np.ndarray, ...]  # [N_c,H,W] complex each
    coil_maps: np.ndarray  # [N_c,H,W] complex
    meta: dict

    def __len__(self) -> int:
        return len(self.images)

    def operator(self, i: int) -> ForwardOperator:
        return ForwardOperator(self.masks[i], self.coil_maps)

    def operators(self) -> list[ForwardOperator]:
        return [self.operator(i) for i in range(len(self))]


def generate_dataset(
    out_dir: str | Path,
    n: int = 64,
    size: int = 32,
    accel: float = 2.0,
    mask_kind: str = "1d",
    eta: float = 0.01,
    n_coils: int = 4,
    center_fraction: float = 0.08,
    seed: int = 0,
) -> Dataset:
    """Write a synthetic dataset directory and return it.

    Layout: ``images/*.lcmt`` (2-channel images), ``masks/*.lcmt``,
    ``csm.lcmt`` (coil maps, stacked 2-channel), ``kspace/*.lcmt``
    (noisy masked measurements), ``meta.json``. The measurement noise is
    complex Gaussian with standard deviation ``eta`` (images peak at 1), and
    is only added on sampled k-space positions.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "kspace").mkdir(exist_ok=True)

    rng = np.random.default_rng(seed)
    coils = make_coil_maps(size, size, n_coils)
    lcmt.write_tensor(out / "csm.lcmt", _complex_to_channels(coils))

    images, masks, kspaces = [], [], []
    width = len(str(n - 1))
    for i in range(n):
        xc = make_phantom(seed * 100003 + i, size, size)
        mask = make_mask(
            mask_kind, accel, size, size, center_fraction=center_fraction,
            seed=seed * 999983 + i,
        )
        op = ForwardOperator(mask, coils)
        noise = rng.normal(size=(n_coils, size, size)) + 1j * rng.normal(
            size=(n_coils, size, size)
        )
        b = op.apply_complex(xc) + eta / np.sqrt(2.0) * noise * op._mask_shifted
        tag = str(i).zfill(width)
        x2 = _complex_to_channels(xc[None])[0]
        lcmt.write_tensor(out / "images" / f"{tag}.lcmt", x2)
        lcmt.write_tensor(out / "masks" / f"{tag}.lcmt", mask)
        lcmt.write_tensor(out / "kspace" / f"{tag}.lcmt", _complex_to_channels(b))
        images.append(x2)
        masks.append(mask)
        kspaces.append(b)

    meta = {
        "n": n,
        "size": size,
        "R": accel,
        "mask": mask_kind,
        "eta": eta,
        "n_coils": n_coils,
        "center_fraction": center_fraction,
        "seed": seed,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return Dataset(tuple(images), tuple(masks), tuple(kspaces), coils, meta)


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset directory written by :func:`generate_dataset`."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"not a dataset directory (missing meta.json): {root}")
    meta = json.loads(meta_path.read_text())
    coils = _channels_to_complex(lcmt.read_tensor(root / "csm.lcmt"))
    image_files = sorted((root / "images").glob("*.lcmt"))
    if not image_files:
        raise ConfigError(f"dataset has no images: {root}")
    images, masks, kspaces = [], [], []
    for f in image_files:
        images.append(lcmt.read_tensor(f))
        masks.append(lcmt.read_tensor(root / "masks" / f.name))
        kspaces.append(_channels_to_complex(lcmt.read_tensor(root / "kspace" / f.name)))
    return Dataset(tuple(images), tuple(masks), tuple(kspaces), coils, meta)


def _complex_to_channels(arr: np.ndarray) -> np.ndarray:
    """Complex ``[...,H,W]`` → real ``[...,2,H,W]``."""
    return np.stack([arr.real, arr.imag], axis=-3)


def _channels_to_complex(arr: np.ndarray) -> np.ndarray:
    out = np.take(arr, 0, axis=-3) + 1j * np.take(arr, 1, axis=-3)
    return out
