"""Minimal NN engine: differentiable layers with manual backprop, NCHW layout.

A Network is a flat list of layers; skip connections reference the output
of an earlier layer by index. Every forward retains all intermediate
activations (needed for backward and for Grad-CAM layer taps). One network
instance is single-threaded; weights are plain arrays and can be moved
between threads freely.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, StateError


class Parameter:
    """Named trainable tensor with a gradient buffer of identical shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


class Layer:
    """Base layer. Subclasses set has_skip=True if they consume a second input."""

    has_skip = False

    def __init__(self, name: str):
        self.name = name
        self.params: list[Parameter] = []

    def out_shape(self, in_shape, skip_shape=None):
        raise NotImplementedError

    def forward(self, x, skip=None):
        raise NotImplementedError

    def backward(self, grad):
        """Return grad w.r.t. main input (and skip input if has_skip)."""
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, name, in_ch, out_ch, kernel, stride=1, pad=0, dtype=np.float32):
        super().__init__(name)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.weight = Parameter(
            f"{name}.weight", np.zeros((out_ch, in_ch, kernel, kernel), dtype)
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, dtype))
        self.params = [self.weight, self.bias]

    def out_shape(self, in_shape, skip_shape=None):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expects {self.in_ch} input channels, got {c}")
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: kernel {self.kernel} too large for input {h}x{w}")
        return (self.out_ch, ho, wo)

    def forward(self, x, skip=None):
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        n = x.shape[0]
        ho = (xp.shape[2] - k) // s + 1
        wo = (xp.shape[3] - k) // s + 1
        out = np.empty((n, self.out_ch, ho, wo), x.dtype)
        out[:] = self.bias.value[None, :, None, None]
        w = self.weight.value
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di : di + s * ho : s, dj : dj + s * wo : s]
                out += np.einsum("oc,nchw->nohw", w[:, :, di, dj], patch, optimize=True)
        self._xp = xp
        return out

    def backward(self, grad):
        k, s, p = self.kernel, self.stride, self.pad
        xp = self._xp
        ho, wo = grad.shape[2], grad.shape[3]
        self.bias.grad[...] = grad.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        w = self.weight.value
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di : di + s * ho : s, dj : dj + s * wo : s]
                self.weight.grad[:, :, di, dj] = np.einsum(
                    "nohw,nchw->oc", grad, patch, optimize=True
                )
                dxp[:, :, di : di + s * ho : s, dj : dj + s * wo : s] += np.einsum(
                    "oc,nohw->nchw", w[:, :, di, dj], grad, optimize=True
                )
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class Dense(Layer):
    def __init__(self, name, in_features, out_features, dtype=np.float32):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(f"{name}.weight", np.zeros((out_features, in_features), dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype))
        self.params = [self.weight, self.bias]

    def out_shape(self, in_shape, skip_shape=None):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(
                f"{self.name}: expects flat input of {self.in_features}, got {in_shape}"
            )
        return (self.out_features,)

    def forward(self, x, skip=None):
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        self.weight.grad[...] = grad.T @ self._x
        self.bias.grad[...] = grad.sum(axis=0)
        return grad @ self.weight.value


class ReLU(Layer):
    def out_shape(self, in_shape, skip_shape=None):
        return in_shape

    def forward(self, x, skip=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Sigmoid(Layer):
    def out_shape(self, in_shape, skip_shape=None):
        return in_shape

    def forward(self, x, skip=None):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, grad):
        return grad * self._out * (1.0 - self._out)


class MaxPool2D(Layer):
    """2x2 window, stride 2. Ties route the gradient to the first max."""

    def out_shape(self, in_shape, skip_shape=None):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"{self.name}: spatial size {h}x{w} not divisible by 2")
        return (c, h // 2, w // 2)

    def forward(self, x, skip=None):
        n, c, h, w = x.shape
        xr = (
            x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4)
        )
        self._idx = xr.argmax(axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(xr, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self._in_shape
        gr = np.zeros((n, c, h // 2, w // 2, 4), grad.dtype)
        np.put_along_axis(gr, self._idx[..., None], grad[..., None], axis=-1)
        return (
            gr.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )


class NearestUpsample2D(Layer):
    """Factor-2 nearest-neighbour upsampling."""

    def out_shape(self, in_shape, skip_shape=None):
        c, h, w = in_shape
        return (c, 2 * h, 2 * w)

    def forward(self, x, skip=None):
        self._in_shape = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h, w = self._in_shape
        return grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


class GlobalAvgPool(Layer):
    """[N,C,H,W] -> [N,C] spatial mean."""

    def out_shape(self, in_shape, skip_shape=None):
        c, h, w = in_shape
        return (c,)

    def forward(self, x, skip=None):
        self._hw = x.shape[2] * x.shape[3]
        self._spatial = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        h, w = self._spatial
        return np.broadcast_to(
            grad[:, :, None, None] / self._hw, grad.shape + (h, w)
        ).copy()


class Flatten(Layer):
    def out_shape(self, in_shape, skip_shape=None):
        size = 1
        for d in in_shape:
            size *= d
        return (size,)

    def forward(self, x, skip=None):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._in_shape)


class ConcatChannels(Layer):
    """Concatenate [current, skip] along channels. Spatial sizes must match."""

    has_skip = True

    def out_shape(self, in_shape, skip_shape=None):
        c1, h1, w1 = in_shape
        c2, h2, w2 = skip_shape
        if (h1, w1) != (h2, w2):
            raise ShapeError(
                f"{self.name}: spatial mismatch {h1}x{w1} vs skip {h2}x{w2}"
            )
        return (c1 + c2, h1, w1)

    def forward(self, x, skip=None):
        self._split = x.shape[1]
        return np.concatenate([x, skip], axis=1)

    def backward(self, grad):
        return grad[:, : self._split], grad[:, self._split :]


class AddSkip(Layer):
    """Elementwise add of an earlier activation with identical shape."""

    has_skip = True

    def out_shape(self, in_shape, skip_shape=None):
        if tuple(in_shape) != tuple(skip_shape):
            raise ShapeError(f"{self.name}: shape mismatch {in_shape} vs skip {skip_shape}")
        return in_shape

    def forward(self, x, skip=None):
        return x + skip

    def backward(self, grad):
        return grad, grad


class Network:
    """Layer stack with optional skip inputs, validated at build time.

    `layers` is a list of (layer, skip_src) where skip_src is the index of
    the layer whose output feeds the skip input (or None). Activation index
    i+1 is the output of layer i; index 0 is the network input.
    """

    def __init__(self, arch_id: str, layers, input_shape, dtype=np.float32):
        self.arch_id = arch_id
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = dtype
        shapes = [self.input_shape]
        for layer, src in self.layers:
            skip_shape = None
            if layer.has_skip:
                if src is None or src >= len(shapes) - 1:
                    raise ShapeError(f"{layer.name}: invalid skip source {src}")
                skip_shape = shapes[src + 1]
            shapes.append(layer.out_shape(shapes[-1], skip_shape))
        self.shapes = shapes
        self.output_shape = shapes[-1]
        self._acts = None
        self._act_grads = None

    def parameters(self) -> list[Parameter]:
        return [p for layer, _ in self.layers for p in layer.params]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def layer_index(self, name: str) -> int:
        for i, (layer, _) in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[0] < 1:
            raise ShapeError(f"input must be [N,C,H,W] with N>=1, got {x.shape}")
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match network input {self.input_shape}"
            )
        x = np.ascontiguousarray(x, dtype=self.dtype)
        acts = [x]
        for layer, src in self.layers:
            skip = acts[src + 1] if layer.has_skip else None
            acts.append(layer.forward(acts[-1], skip))
        self._acts = acts
        self._act_grads = None
        return acts[-1]

    def backward(self, output_grad: np.ndarray) -> np.ndarray:
        if self._acts is None:
            raise StateError("backward called before forward")
        if output_grad.shape != self._acts[-1].shape:
            raise ShapeError(
                f"output_grad shape {output_grad.shape} != output {self._acts[-1].shape}"
            )
        grads = [None] * len(self._acts)
        grads[-1] = np.ascontiguousarray(output_grad, dtype=self.dtype)
        for i in reversed(range(len(self.layers))):
            layer, src = self.layers[i]
            g = grads[i + 1]
            if layer.has_skip:
                gin, gskip = layer.backward(g)
                if grads[src + 1] is None:
                    grads[src + 1] = gskip.copy()
                else:
                    grads[src + 1] = grads[src + 1] + gskip
            else:
                gin = layer.backward(g)
            if grads[i] is None:
                grads[i] = gin
            else:
                grads[i] = grads[i] + gin
        self._act_grads = grads
        return grads[0]

    def activation(self, layer_idx: int) -> np.ndarray:
        """Output of layer `layer_idx` from the last forward pass."""
        if self._acts is None:
            raise StateError("no forward pass recorded")
        return self._acts[layer_idx + 1]

    def activation_grad(self, layer_idx: int) -> np.ndarray:
        """Gradient w.r.t. the output of layer `layer_idx` from the last backward."""
        if self._act_grads is None:
            raise StateError("no backward pass recorded")
        return self._act_grads[layer_idx + 1]
