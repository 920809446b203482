"""Token-gated domain routing.

A routing layer mixes two linear views of a sublayer output ``f`` per token::

    y = g(z) * (f @ W_dom) + (1 - g(z)) * (f @ W_shared)
    g(z) = sigmoid(relu(z @ W_1 + b) @ W_2)

where ``z`` is the input the sublayer saw. One :class:`DRParams` instance is
shared by every decoder block of a model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

PLACEMENTS = ("after_san", "after_can", "shared_only", "none")


@dataclass
class DRParams:
    """Routing weights. The gated fields are ``None`` in shared-only mode."""

    w_shared: Tensor
    w_dom: Tensor | None = None
    w1: Tensor | None = None
    b: Tensor | None = None
    w2: Tensor | None = None
    noise_std: float = 0.0

    @property
    def gated(self) -> bool:
        return self.w_dom is not None

    @property
    def d_model(self) -> int:
        return self.w_shared.shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"dr.w_shared": self.w_shared}
        if self.gated:
            out.update({"dr.w_dom": self.w_dom, "dr.w1": self.w1, "dr.b": self.b, "dr.w2": self.w2})
        return out


class Routing(NamedTuple):
    """Where a model applies its routing layer inside each decoder block."""

    after_san: bool
    after_can: bool
    gated: bool

    @property
    def enabled(self) -> bool:
        return self.after_san or self.after_can


def placement_mode(config) -> Routing:
    mode = config if isinstance(config, str) else config.dr_position
    if mode == "after_san":
        return Routing(after_san=True, after_can=False, gated=True)
    if mode == "after_can":
        return Routing(after_san=False, after_can=True, gated=True)
    if mode == "shared_only":
        # the gate is pinned to 0 so only the shared path survives; it sits after SAN
        return Routing(after_san=True, after_can=False, gated=False)
    if mode == "none":
        return Routing(after_san=False, after_can=False, gated=False)
    raise ConfigError(f"unknown dr_position {mode!r}; expected one of {', '.join(PLACEMENTS)}")


def init_dr(
    d_model: int,
    d_gate_hidden: int,
    seed: int,
    gated: bool = True,
    noise_std: float = 0.0,
    dtype=np.float32,
) -> DRParams:
    """Near-identity initialisation: both paths start close to ``I`` and the gate at 0.5."""
    if d_model < 1 or d_gate_hidden < 1:
        raise ConfigError(f"routing dimensions must be >= 1, got {d_model}, {d_gate_hidden}")
    rng = np.random.default_rng(seed)
    eye = np.eye(d_model)
    w_shared_init = eye + rng.normal(0.0, 0.02, (d_model, d_model))
    w_dom_init = eye + rng.normal(0.0, 0.02, (d_model, d_model))
    limit = np.sqrt(6.0 / (d_model + d_gate_hidden))
    w1_init = rng.uniform(-limit, limit, (d_model, d_gate_hidden))

    params = DRParams(w_shared=ad.parameter(w_shared_init, "dr.w_shared", dtype), noise_std=noise_std)
    if gated:
        params.w_dom = ad.parameter(w_dom_init, "dr.w_dom", dtype)
        params.w1 = ad.parameter(w1_init, "dr.w1", dtype)
        params.b = ad.parameter(np.zeros(d_gate_hidden), "dr.b", dtype)
        params.w2 = ad.parameter(np.zeros((d_gate_hidden, 1)), "dr.w2", dtype)
    return params


def gate_logit(z: Tensor, params: DRParams) -> Tensor:
    if z.shape[-1] != params.w1.shape[0]:
        raise ShapeError(f"gate input width {z.shape[-1]} != d_model {params.w1.shape[0]}")
    return ad.matmul(ad.relu(ad.matmul(z, params.w1) + params.b), params.w2)


def gate(
    z: Tensor,
    params: DRParams,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-token gate in (0, 1), shape ``z.shape[:-1] + (1,)``.

    With ``noise_std > 0`` and ``train_mode`` set, Gaussian noise is added to
    the pre-sigmoid logit.
    """
    if not params.gated:
        raise ConfigError("shared-only routing has no gate")
    logit = gate_logit(z, params)
    if train_mode and params.noise_std > 0:
        if rng is None:
            raise ConfigError("gate noise needs a random generator")
        noise = rng.normal(0.0, params.noise_std, logit.shape).astype(logit.dtype)
        logit = logit + noise
    return ad.sigmoid(logit)


def dr_forward(
    z: Tensor,
    f_z: Tensor,
    params: DRParams,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> Tensor:
    """Route sublayer output ``f_z`` using a gate computed from sublayer input ``z``.

    When ``trace`` is a list, the gate values (numpy, shape ``[..., T]``) are
    appended to it.
    """
    if z.shape != f_z.shape:
        raise ShapeError(f"routing input {z.shape} and sublayer output {f_z.shape} differ")
    if f_z.shape[-1] != params.d_model:
        raise ShapeError(f"routing width {f_z.shape[-1]} != d_model {params.d_model}")
    shared = ad.matmul(f_z, params.w_shared)
    if not params.gated:
        return shared
    g = gate(z, params, train_mode, rng)
    if trace is not None:
        trace.append(g.data[..., 0].copy())
    dom = ad.matmul(f_z, params.w_dom)
    # g*dom + (1-g)*shared, written to keep a single product with g
    return shared + g * (dom - shared)
