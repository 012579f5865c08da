"""Dense float64 kernels with exact adjoints.

All 4-D maps are laid out (batch, channels, height, width). Tensors are plain
``numpy.ndarray`` objects of dtype float64; every kernel here is a pure
function of its arguments.

Convolution follows correlation indexing with zero padding of ``(K - 1) // 2``
so spatial resolution is preserved::

    y[b, o, m, n] = bias[o] + sum_{c, r, t} w[o, c, r, t] * xpad[b, c, m + r, n + t]

The kernel is not flipped.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, ParameterError

DTYPE = np.float64


class ShiftPair(NamedTuple):
    """Fractional (row, column) displacement applied to one feature map."""

    alpha: float
    beta: float


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _check_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (B, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _check_conv(x: np.ndarray, weight: np.ndarray) -> int:
    _check_4d(x, "input")
    if weight.ndim != 4:
        raise DimensionError(f"weight must be 4-D (Cout, Cin, K, K), got shape {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {kh}")
    if cin != x.shape[1]:
        raise DimensionError(
            f"weight expects {cin} input channels, input has {x.shape[1]}"
        )
    return kh


# Upper bound on one unfolded block; keeps the working set cache-resident.
BLOCK_BYTES = 1 << 20


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    xp[:, :, p : p + h, p : p + w] = x
    return xp


def _unfold(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """Windows of an already padded ``(B, C, h + K - 1, w + K - 1)`` block.

    Returns ``(C*K*K, B*h*w)``; row ``(c, r, t)`` holds ``xp[:, c, m + r, n + t]``
    flattened in (b, m, n) order.
    """
    b, c = xp.shape[:2]
    cols = np.empty((c, k, k, b, h, w), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for r in range(k):
        for t in range(k):
            cols[:, r, t] = xt[:, :, r : r + h, t : t + w]
    return cols.reshape(c * k * k, b * h * w)


def _blocks(b: int, h: int, w: int, rows: int):
    """Split (batch, output rows) so each unfolded block stays under BLOCK_BYTES."""
    per_row = rows * w * 8
    band = max(1, min(h, BLOCK_BYTES // max(per_row, 1)))
    if band < h:
        for i in range(b):
            for r0 in range(0, h, band):
                yield slice(i, i + 1), r0, min(h, r0 + band)
    else:
        nb = max(1, BLOCK_BYTES // (per_row * h))
        for i in range(0, b, nb):
            yield slice(i, min(b, i + nb)), 0, h


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold ``x`` into a ``(C*K*K, B*H*W)`` matrix of zero-padded windows."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    return _unfold(_pad(x, (k - 1) // 2), k, h, w)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add windows back onto the map."""
    b, c, h, w = shape
    p = (k - 1) // 2
    cols = cols.reshape(c, k, k, b, h, w)
    xp = np.zeros((c, b, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for r in range(k):
        for t in range(k):
            xp[:, :, r : r + h, t : t + w] += cols[:, r, t]
    return np.ascontiguousarray(xp[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3))


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-resolution correlation, evaluated block by block."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    bias = as_tensor(bias)
    k = _check_conv(x, weight)
    cout = weight.shape[0]
    if bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
    b, c, h, w = x.shape
    wmat = weight.reshape(cout, -1)
    xp = _pad(x, (k - 1) // 2)
    y = np.empty((b, cout, h, w), dtype=DTYPE)
    for bs, r0, r1 in _blocks(b, h, w, c * k * k):
        cols = _unfold(xp[bs, :, r0 : r1 + k - 1], k, r1 - r0, w)
        yb = wmat @ cols
        yb += bias[:, None]
        y[bs, :, r0:r1] = yb.reshape(cout, -1, r1 - r0, w).transpose(1, 0, 2, 3)
    return y


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    weight: np.ndarray,
    *,
    need_input: bool = True,
    need_weight: bool = True,
) -> tuple[np.ndarray | None, np.ndarray | None, np.ndarray | None]:
    """Gradients of ``sum(grad_out * conv2d(x, weight, bias))``.

    Returns ``(grad_input, grad_weight, grad_bias)``; with ``need_input=False``
    (``need_weight=False``) the input (weight and bias) gradients are skipped
    and returned as None.
    """
    grad_out = as_tensor(grad_out)
    weight = as_tensor(weight)
    x = as_tensor(x)
    k = _check_conv(x, weight)
    cout, cin = weight.shape[:2]
    b, _, h, w = x.shape
    if grad_out.shape != (b, cout, h, w):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output {(b, cout, h, w)}"
        )
    grad_weight = grad_bias = grad_input = None
    if need_weight:
        xp = _pad(x, (k - 1) // 2)
        gw = np.zeros((cout, cin * k * k), dtype=DTYPE)
        for bs, r0, r1 in _blocks(b, h, w, cin * k * k):
            cols = _unfold(xp[bs, :, r0 : r1 + k - 1], k, r1 - r0, w)
            g = grad_out[bs, :, r0:r1].transpose(1, 0, 2, 3).reshape(cout, -1)
            gw += g @ cols.T
        grad_weight = gw.reshape(weight.shape)
        grad_bias = grad_out.sum(axis=(0, 2, 3))
    if need_input:
        # correlation of the output gradient with the flipped kernel,
        # input and output channels swapped
        flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_input = conv2d(grad_out, flipped, np.zeros(cin, dtype=DTYPE))
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# power expansion
# ---------------------------------------------------------------------------


def power_expand(x: np.ndarray, q: int) -> np.ndarray:
    """Stack ``x, x**2, ..., x**q`` along channels, power-major.

    Output channel ``(p - 1) * C + c`` holds ``x[:, c] ** p``.
    """
    x = as_tensor(x)
    _check_4d(x, "input")
    if int(q) != q or q < 1:
        raise ParameterError(f"Q must be a positive integer, got {q!r}")
    if q == 1:
        return x.copy()
    b, c, h, w = x.shape
    out = np.empty((b, c * q, h, w), dtype=DTYPE)
    out[:, :c] = x
    for p in range(1, q):
        np.multiply(out[:, (p - 1) * c : p * c], x, out=out[:, p * c : (p + 1) * c])
    return out


def power_expand_backward(grad_out: np.ndarray, x: np.ndarray, q: int) -> np.ndarray:
    x = as_tensor(x)
    grad_out = as_tensor(grad_out)
    _check_4d(x, "input")
    if int(q) != q or q < 1:
        raise ParameterError(f"Q must be a positive integer, got {q!r}")
    b, c, h, w = x.shape
    if grad_out.shape != (b, c * q, h, w):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match expanded shape {(b, c * q, h, w)}"
        )
    grad = grad_out[:, :c].copy()
    xpow = np.ones_like(x)  # x**(p-1), with 0**0 == 1
    for p in range(2, q + 1):
        xpow *= x
        grad += p * xpow * grad_out[:, (p - 1) * c : p * c]
    return grad


# ---------------------------------------------------------------------------
# bilinear shift
# ---------------------------------------------------------------------------


def _translate(x: np.ndarray, di: int, dj: int) -> np.ndarray:
    """``out[..., m, n] = x[..., m + di, n + dj]`` with zero fill."""
    h, w = x.shape[-2:]
    out = np.zeros_like(x)
    if abs(di) >= h or abs(dj) >= w:
        return out
    src_r = slice(max(di, 0), h + min(di, 0))
    dst_r = slice(max(-di, 0), h + min(-di, 0))
    src_c = slice(max(dj, 0), w + min(dj, 0))
    dst_c = slice(max(-dj, 0), w + min(-dj, 0))
    out[..., dst_r, dst_c] = x[..., src_r, src_c]
    return out


def _bilinear_taps(alpha: float, beta: float):
    """Integer offsets and weights of the (up to) four contributing pixels."""
    a0 = int(np.floor(alpha))
    b0 = int(np.floor(beta))
    fa = alpha - a0
    fb = beta - b0
    taps = []
    for di, wa in ((0, 1.0 - fa), (1, fa)):
        for dj, wb in ((0, 1.0 - fb), (1, fb)):
            weight = wa * wb
            if weight != 0.0:
                taps.append((a0 + di, b0 + dj, weight))
    return taps


def _check_shifts(x: np.ndarray, shifts) -> np.ndarray:
    _check_4d(x, "input")
    shifts = np.asarray(shifts, dtype=DTYPE)
    if shifts.size == 0:
        shifts = shifts.reshape(0, 2)
    if shifts.ndim != 2 or shifts.shape[1] != 2:
        raise DimensionError(f"shifts must be (C, 2) pairs, got shape {shifts.shape}")
    if shifts.shape[0] != x.shape[1]:
        raise DimensionError(
            f"need one shift pair per channel: {x.shape[1]} channels, {shifts.shape[0]} pairs"
        )
    return shifts


def _shift_channel(xc: np.ndarray, alpha: float, beta: float, sign: int) -> np.ndarray:
    if alpha == 0.0 and beta == 0.0:
        return xc.copy()
    out = np.zeros_like(xc)
    for di, dj, weight in _bilinear_taps(alpha, beta):
        out += weight * _translate(xc, sign * di, sign * dj)
    return out


def bilinear_shift(x: np.ndarray, shifts: Sequence[ShiftPair] | np.ndarray) -> np.ndarray:
    """Resample each channel at ``(m + alpha_c, n + beta_c)``.

    Bilinear interpolation between the four neighbouring pixels; neighbours
    outside the map count as zero, so integer shifts are exact translations.
    """
    x = as_tensor(x)
    shifts = _check_shifts(x, shifts)
    out = np.empty_like(x)
    for c, (alpha, beta) in enumerate(shifts):
        out[:, c] = _shift_channel(x[:, c], alpha, beta, +1)
    return out


def bilinear_shift_backward(
    grad_out: np.ndarray, shifts: Sequence[ShiftPair] | np.ndarray, h: int | None = None, w: int | None = None
) -> np.ndarray:
    """Adjoint of :func:`bilinear_shift` with respect to its input.

    ``h`` and ``w`` are accepted for signature symmetry; they must match
    ``grad_out`` when given.
    """
    grad_out = as_tensor(grad_out)
    shifts = _check_shifts(grad_out, shifts)
    if (h is not None and h != grad_out.shape[2]) or (w is not None and w != grad_out.shape[3]):
        raise DimensionError(f"grad_out spatial extent {grad_out.shape[2:]} != ({h}, {w})")
    grad = np.empty_like(grad_out)
    for c, (alpha, beta) in enumerate(shifts):
        grad[:, c] = _shift_channel(grad_out[:, c], alpha, beta, -1)
    return grad
