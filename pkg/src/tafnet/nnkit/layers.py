"""Module/layer contract on top of the autodiff tensors.

Modules own named parameters (float64 tensors) and buffers (numpy arrays,
e.g. batch-norm running statistics). Freezing a module clears
requires_grad on its subtree so the optimizer and backward pass skip it.
"""

from __future__ import annotations

import numpy as np

from ..core import Rng
from ..errors import ParamError, ShapeError
from . import tensor as T
from .tensor import Tensor


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True
        self.frozen = False

    # -- registration ------------------------------------------------------
    def param(self, name: str, data) -> Tensor:
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, data) -> np.ndarray:
        self._buffers[name] = np.asarray(data, dtype=np.float64)
        return self._buffers[name]

    # -- traversal ----------------------------------------------------------
    def submodules(self):
        for attr in sorted(vars(self)):
            if attr.startswith("_"):
                continue
            val = getattr(self, attr)
            if isinstance(val, Module):
                yield attr, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{attr}.{i}", item

    def modules(self):
        yield self
        for _, m in self.submodules():
            yield from m.modules()

    def named_parameters(self, prefix: str = ""):
        for n, t in self._params.items():
            yield prefix + n, t
        for name, mod in self.submodules():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for n, b in self._buffers.items():
            yield prefix + n, b
        for name, mod in self.submodules():
            yield from mod.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    # -- modes ---------------------------------------------------------------
    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        for m in self.modules():
            m.frozen = True
            for t in m._params.values():
                t.requires_grad = False
        return self

    def unfreeze(self):
        for m in self.modules():
            m.frozen = False
            for t in m._params.values():
                t.requires_grad = True
        return self

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    # -- state ----------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: t.data.copy() for n, t in self.named_parameters()}
        state.update({n: b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own_params = dict(self.named_parameters())
        # buffers need the owning module so the dict entries get replaced
        buffer_owners = {}
        self._collect_buffer_owners(buffer_owners, "")
        expected = set(own_params) | set(buffer_owners)
        if set(state) != expected:
            missing = expected - set(state)
            extra = set(state) - expected
            raise ShapeError(
                f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, arr in state.items():
            if name in own_params:
                t = own_params[name]
                if t.data.shape != arr.shape:
                    raise ShapeError(
                        f"{name}: checkpoint shape {arr.shape} != model {t.data.shape}"
                    )
                t.data = np.asarray(arr, dtype=np.float64).copy()
            else:
                mod, key = buffer_owners[name]
                if mod._buffers[key].shape != arr.shape:
                    raise ShapeError(f"{name}: buffer shape mismatch")
                mod._buffers[key] = np.asarray(arr, dtype=np.float64).copy()
        return self

    def _collect_buffer_owners(self, acc: dict, prefix: str):
        for n in self._buffers:
            acc[prefix + n] = (self, n)
        for name, mod in self.submodules():
            mod._collect_buffer_owners(acc, f"{prefix}{name}.")

    # -- stochastic-state snapshots (dropout rngs), used by grad_check --------
    def rng_states(self) -> list:
        return [m.rng.get_state() for m in self.modules() if hasattr(m, "rng")]

    def set_rng_states(self, states: list):
        stochastic = [m for m in self.modules() if hasattr(m, "rng")]
        for m, s in zip(stochastic, states):
            m.rng.set_state(s)


def _uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, padding: str = "same",
                 bias: bool = True, stride: int = 1, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.padding, self.stride = padding, stride
        fan_in = cin * kernel**3
        self.weight = self.param(
            "weight", _uniform_init(rng, (cout, cin, kernel, kernel, kernel), fan_in)
        )
        self.bias = self.param("bias", _uniform_init(rng, (cout,), fan_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Affine(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.fin, self.fout = fin, fout
        self.weight = self.param("weight", _uniform_init(rng, (fin, fout), fin))
        self.bias = self.param("bias", _uniform_init(rng, (fout,), fin)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


class BatchNorm3d(Module):
    """Per-channel batch normalization over (B, C, D, H, W).

    Training mode standardizes with biased batch statistics and updates the
    running buffers as (1 - momentum) * old + momentum * batch; eval mode
    standardizes with the running statistics.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self.buffer("running_mean", np.zeros(channels))
        self.buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 5 or x.data.shape[1] != self.channels:
            raise ShapeError(
                f"batchnorm expects (B, {self.channels}, D, H, W), got {x.data.shape}"
            )
        if self.training:
            return self._forward_train(x)
        rm = self._buffers["running_mean"][None, :, None, None, None]
        rv = self._buffers["running_var"][None, :, None, None, None]
        inv = 1.0 / np.sqrt(rv + self.eps)
        xhat = T.mul(T.sub(x, rm), inv)
        g = T.reshape(self.gamma, (1, self.channels, 1, 1, 1))
        b = T.reshape(self.beta, (1, self.channels, 1, 1, 1))
        return T.add(T.mul(xhat, g), b)

    def _forward_train(self, x: Tensor) -> Tensor:
        axes = (0, 2, 3, 4)
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = self.momentum
        self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mean
        self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mean[None, :, None, None, None]) * inv[None, :, None, None, None]
        out = xhat * self.gamma.data[None, :, None, None, None] + self.beta.data[None, :, None, None, None]
        n = x.data.size // self.channels
        gamma, beta = self.gamma, self.beta

        def backward(g_out):
            dgamma = (g_out * xhat).sum(axis=axes) if gamma.requires_grad else None
            dbeta = g_out.sum(axis=axes) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                dxhat = g_out * gamma.data[None, :, None, None, None]
                s1 = dxhat.sum(axis=axes)[None, :, None, None, None]
                s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None, None]
                gx = (inv[None, :, None, None, None] / n) * (n * dxhat - s1 - xhat * s2)
            return gx, dgamma, dbeta

        return T._make(out, (x, gamma, beta), backward)


class Dropout(Module):
    """Inverted dropout; identity in eval mode. Owns its random stream."""

    def __init__(self, p: float, rng: Rng | None = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ParamError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng or Rng(0)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        mask = (self.rng.uniform(size=x.data.shape) >= self.p) / (1.0 - self.p)
        return T.mul(x, mask)


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention with bias-carrying projections."""

    def __init__(self, d_model: int, heads: int, rng: Rng | None = None):
        super().__init__()
        if d_model % heads:
            raise ParamError(f"d_model {d_model} not divisible by heads {heads}")
        rng = rng or Rng(0)
        self.d_model, self.heads = d_model, heads
        for name in ("wq", "wk", "wv", "wo"):
            setattr(self, name, self.param(name, _uniform_init(rng, (d_model, d_model), d_model)))
        for name in ("bq", "bk", "bv", "bo"):
            setattr(self, name, self.param(name, _uniform_init(rng, (d_model,), d_model)))

    def forward(self, q_in: Tensor, k_in: Tensor, v_in: Tensor):
        return T.multi_head_attention(
            q_in, k_in, v_in,
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
            self.heads,
        )
