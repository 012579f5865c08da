"""Convolutional, generative and super neuron layers, and 4-layer networks.

One layer computes::

    activation(conv2d(power_expand(bilinear_shift(x, shifts), Q), weight, bias))

so a single code path covers all three neuron models:

* ``gamma == 0, Q == 1``: plain convolution.
* ``gamma == 0, Q > 1``: generative neuron; the Q weight banks are stored
  concatenated as ``(out, in * Q, K, K)`` in power-major order.
* ``gamma > 0``: super neuron with one frozen shift per input map, shared by
  every neuron of the layer.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor
from .errors import DimensionError, ParameterError

ACTIVATIONS = ("tanh", "linear")
DEFAULT_GAMMA = 5.0
DEFAULT_KERNEL = 3
ALLOWED_Q = (3, 5, 7)


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = DEFAULT_KERNEL
    q: int = 1
    gamma: float = 0.0
    activation: str = "tanh"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError(f"channel counts must be positive: {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.q < 1:
            raise ParameterError(f"Q must be >= 1, got {self.q}")
        if self.gamma < 0:
            raise ParameterError(f"gamma must be non-negative, got {self.gamma}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def n_params(self) -> int:
        k2 = self.kernel_size * self.kernel_size
        return self.out_channels * self.in_channels * self.q * k2 + self.out_channels


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ParameterError("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_channels != b.in_channels:
                raise DimensionError(
                    f"layer {i} emits {a.out_channels} channels but layer {i + 1} expects {b.in_channels}"
                )
        if self.layers[0].gamma != 0 or self.layers[-1].gamma != 0:
            raise ParameterError("input and output layers must have gamma = 0")

    @property
    def channels(self) -> int:
        return self.layers[0].in_channels

    def to_dict(self) -> dict:
        return {"name": self.name, "layers": [asdict(s) for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(name=d["name"], layers=tuple(LayerSpec(**s) for s in d["layers"]))

    def with_hidden_gamma(self, gamma: float) -> "NetworkConfig":
        """Copy with every layer except the first and last at shift bound ``gamma``."""
        layers = list(self.layers)
        for i in range(1, len(layers) - 1):
            layers[i] = replace(layers[i], gamma=float(gamma))
        return NetworkConfig(name=self.name, layers=tuple(layers))


@dataclass
class LayerState:
    weight: np.ndarray
    bias: np.ndarray
    shifts: np.ndarray = field(default=None)  # (in_channels, 2): alpha, beta

    def __post_init__(self):
        if self.shifts is None:
            self.shifts = np.zeros((self.weight.shape[1], 2))

    def copy(self) -> "LayerState":
        return LayerState(self.weight.copy(), self.bias.copy(), self.shifts.copy())


_NAME_RE = re.compile(r"^(?:(CNN)-(\d+)|(Self|Super)-ONN-(\d+)-(\d+))$")


def build_network(name: str, channels: int = 1, gamma: float = DEFAULT_GAMMA) -> NetworkConfig:
    """Two-hidden-layer network ``c -> W -> W -> W -> c`` with 3x3 kernels.

    Accepted names: ``CNN-W``, ``Self-ONN-Q-W`` and ``Super-ONN-Q-W`` with
    Q in {3, 5, 7}. Super-ONNs get shift bound ``gamma`` on the two hidden
    layers only.
    """
    m = _NAME_RE.match(name.strip())
    if m is None:
        raise ParameterError(
            f"unrecognised model name {name!r}; expected CNN-W, Self-ONN-Q-W or Super-ONN-Q-W"
        )
    if m.group(1):
        q, width, hidden_gamma = 1, int(m.group(2)), 0.0
    else:
        q, width = int(m.group(4)), int(m.group(5))
        if q not in ALLOWED_Q:
            raise ParameterError(f"Q must be one of {ALLOWED_Q}, got {q}")
        hidden_gamma = float(gamma) if m.group(3) == "Super" else 0.0
    if width < 1:
        raise ParameterError(f"width must be positive in {name!r}")
    if channels < 1:
        raise ParameterError(f"channels must be positive, got {channels}")
    k = DEFAULT_KERNEL
    layers = (
        LayerSpec(channels, width, k, q, 0.0, "tanh"),
        LayerSpec(width, width, k, q, hidden_gamma, "tanh"),
        LayerSpec(width, width, k, q, hidden_gamma, "tanh"),
        LayerSpec(width, channels, k, q, 0.0, "linear"),
    )
    return NetworkConfig(name=name.strip(), layers=layers)


def count_params(config: NetworkConfig) -> int:
    """Trainable weights plus one bias per neuron. Frozen shifts are excluded."""
    return sum(spec.n_params for spec in config.layers)


def init_network(config: NetworkConfig, seed: int = 0) -> list[LayerState]:
    """Fan-in scaled uniform weights, zero biases, frozen uniform shifts.

    Weights and shifts come from independent streams of the same seed, so two
    configs that differ only in ``gamma`` start from identical weights, and
    the shift draws of one seed are the same unit draws scaled by ``gamma``.
    """
    weight_seq, shift_seq = np.random.SeedSequence(seed).spawn(2)
    wrng = np.random.default_rng(weight_seq)
    srng = np.random.default_rng(shift_seq)
    states = []
    for spec in config.layers:
        fan_in = spec.in_channels * spec.q * spec.kernel_size**2
        bound = fan_in**-0.5
        weight = wrng.uniform(
            -bound, bound,
            size=(spec.out_channels, spec.in_channels * spec.q, spec.kernel_size, spec.kernel_size),
        )
        bias = np.zeros(spec.out_channels)
        unit = srng.uniform(-1.0, 1.0, size=(spec.in_channels, 2))
        shifts = spec.gamma * unit if spec.gamma > 0 else np.zeros((spec.in_channels, 2))
        states.append(LayerState(weight, bias, shifts))
    return states


def check_state(spec: LayerSpec, state: LayerState) -> None:
    expected = (spec.out_channels, spec.in_channels * spec.q, spec.kernel_size, spec.kernel_size)
    if state.weight.shape != expected:
        raise DimensionError(f"weight shape {state.weight.shape} != {expected}")
    if state.bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias shape {state.bias.shape} != ({spec.out_channels},)")
    if state.shifts.shape != (spec.in_channels, 2):
        raise DimensionError(f"shift table shape {state.shifts.shape} != ({spec.in_channels}, 2)")
    if np.any(np.abs(state.shifts) > spec.gamma):
        raise ParameterError(f"shift table exceeds bound gamma={spec.gamma}")


@dataclass
class LayerCache:
    shifted: np.ndarray
    expanded: np.ndarray
    output: np.ndarray


def _has_shift(state: LayerState) -> bool:
    return bool(np.any(state.shifts != 0))


def layer_forward_cached(
    spec: LayerSpec, state: LayerState, x: np.ndarray
) -> tuple[np.ndarray, LayerCache]:
    x = tensor.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(f"layer expects {spec.in_channels} input channels, got shape {x.shape}")
    shifted = tensor.bilinear_shift(x, state.shifts) if _has_shift(state) else x
    expanded = tensor.power_expand(shifted, spec.q) if spec.q > 1 else shifted
    z = tensor.conv2d(expanded, state.weight, state.bias)
    y = np.tanh(z) if spec.activation == "tanh" else z
    return y, LayerCache(shifted, expanded, y)


def layer_forward(spec: LayerSpec, state: LayerState, x: np.ndarray) -> np.ndarray:
    return layer_forward_cached(spec, state, x)[0]


def layer_backward(
    spec: LayerSpec,
    state: LayerState,
    x: np.ndarray,
    grad_out: np.ndarray,
    cache: LayerCache | None = None,
    need_input: bool = True,
    need_params: bool = True,
):
    """Chain rule through activation, convolution, powers and shift.

    Returns ``(grad_input, grad_weight, grad_bias)``; shifts are frozen and
    receive no gradient.
    """
    if cache is None:
        _, cache = layer_forward_cached(spec, state, x)
    grad_out = tensor.as_tensor(grad_out)
    if grad_out.shape != cache.output.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != output shape {cache.output.shape}")
    if spec.activation == "tanh":
        gz = grad_out * (1.0 - cache.output * cache.output)
    else:
        gz = grad_out
    g_exp, gw, gb = tensor.conv2d_backward(
        gz, cache.expanded, state.weight, need_input=need_input, need_weight=need_params,
    )
    gx = None
    if need_input:
        g_shift = tensor.power_expand_backward(g_exp, cache.shifted, spec.q) if spec.q > 1 else g_exp
        gx = tensor.bilinear_shift_backward(g_shift, state.shifts) if _has_shift(state) else g_shift
    return gx, gw, gb


def network_forward(
    config: NetworkConfig, states: Sequence[LayerState], x: np.ndarray, keep_cache: bool = False
):
    """Run every layer. With ``keep_cache`` returns ``(y, caches)``, else ``y``."""
    if len(states) != len(config.layers):
        raise DimensionError(f"{len(config.layers)} layers but {len(states)} states")
    caches = []
    y = tensor.as_tensor(x)
    for spec, state in zip(config.layers, states):
        y, cache = layer_forward_cached(spec, state, y)
        if keep_cache:
            caches.append(cache)
        else:
            del cache
    return (y, caches) if keep_cache else y


def network_backward(
    config: NetworkConfig,
    states: Sequence[LayerState],
    x: np.ndarray,
    caches: Sequence[LayerCache],
    grad_out: np.ndarray,
    need_input: bool = False,
    need_params: bool = True,
):
    """Backpropagate ``grad_out`` through the whole network.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` is a list of
    ``(grad_weight, grad_bias)`` per layer (None entries when
    ``need_params`` is False).
    """
    n = len(config.layers)
    grads: list = [None] * n
    g = grad_out
    for i in reversed(range(n)):
        inp = x if i == 0 else caches[i - 1].output
        g, gw, gb = layer_backward(
            config.layers[i], states[i], inp, g, cache=caches[i],
            need_input=(i > 0 or need_input), need_params=need_params,
        )
        grads[i] = (gw, gb)
    return grads, g
