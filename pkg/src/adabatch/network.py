"""Network container: an ordered layer stack ending in softmax cross entropy.

Samples enter as rows of an (N, D) matrix. Image-input networks reshape
rows to (r, channels, height, width) for the convolution stack and
flatten back to a (features, r) column matrix at the first matrix layer
(FC or batch norm). Parameters are exposed as a flat name -> array dict
("<kind><index>/<field>") whose arrays are the live layer tensors, so
in-place optimizer updates take effect directly.
"""

import numpy as np

from .errors import ShapeError, StateError
from .layers import BNLayer, ConvLayer, FCLayer
from .tensor import seq_sum
from . import loss as loss_mod


def _layer_tag(layer, index):
    if isinstance(layer, ConvLayer):
        return f"conv{index}"
    if isinstance(layer, BNLayer):
        return f"bn{index}"
    return f"fc{index}"


class Network:
    def __init__(self, layers, input_image=None, input_dim=None):
        """input_image: (channels, height, width) for conv-first stacks;
        input_dim: feature count for matrix-first stacks. Exactly one is set."""
        if (input_image is None) == (input_dim is None):
            raise ShapeError("network: exactly one of input_image/input_dim required")
        if not layers:
            raise ShapeError("network: no layers")
        self.layers = list(layers)
        self.input_image = tuple(input_image) if input_image else None
        self.input_dim = input_dim
        self._flatten_at = None
        self._validate_stack()
        self._last_r = None

    def _validate_stack(self):
        """Walk the stack symbolically, checking that shapes compose."""
        if self.input_image:
            shape = ("image", *self.input_image)
        else:
            shape = ("matrix", self.input_dim)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConvLayer):
                if shape[0] != "image":
                    raise ShapeError(f"layer {i}: conv after a matrix layer is not supported")
                c, h, w = shape[1:]
                g = layer.geom
                if (layer.in_channels, g.m, g.n) != (c, h, w):
                    raise ShapeError(
                        f"layer {i}: conv expects ({layer.in_channels}, {g.m}, {g.n}), "
                        f"gets ({c}, {h}, {w})")
                shape = ("image", layer.out_channels, g.m_out, g.n_out)
            else:
                if shape[0] == "image":
                    if self._flatten_at is None:
                        self._flatten_at = i
                    shape = ("matrix", int(np.prod(shape[1:])))
                width = layer.width if isinstance(layer, BNLayer) else layer.n_in
                if shape[1] != width:
                    raise ShapeError(
                        f"layer {i}: expects {width} features, gets {shape[1]}")
                if isinstance(layer, FCLayer):
                    shape = ("matrix", layer.n_out)
        if shape[0] != "matrix":
            raise ShapeError("network: must end in a matrix layer producing class logits")
        self.num_classes = shape[1]

    def _to_input(self, X_rows):
        X_rows = np.asarray(X_rows)
        if X_rows.ndim != 2:
            raise ShapeError(f"network: expected (samples, features), got {X_rows.shape}")
        r = X_rows.shape[0]
        if self.input_image:
            c, h, w = self.input_image
            if X_rows.shape[1] != c * h * w:
                raise ShapeError(
                    f"network: {X_rows.shape[1]} features vs image {self.input_image}")
            return X_rows.reshape(r, c, h, w)
        if X_rows.shape[1] != self.input_dim:
            raise ShapeError(f"network: {X_rows.shape[1]} features vs dim {self.input_dim}")
        return X_rows.T

    def forward(self, X_rows, train=True):
        """Run the stack; returns (num_classes, r) logits. train=False skips
        the layer caches so concurrent evaluation cannot race."""
        x = self._to_input(X_rows)
        r = np.asarray(X_rows).shape[0]
        for i, layer in enumerate(self.layers):
            if i == self._flatten_at:
                x = x.reshape(r, -1).T
            x = layer.forward(x) if train else layer.infer(x)
        if train:
            self._last_r = r
        return x

    def backward(self, V_out):
        """Propagate an output gradient; returns (grads dict, input gradient
        in the same (samples, features) layout the forward input used)."""
        if self._last_r is None:
            raise StateError("network backward called before forward")
        grads = {}
        v = np.asarray(V_out)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            v, dw, db = layer.backward(v)
            tag = _layer_tag(layer, i)
            grads[f"{tag}/w"] = dw
            grads[f"{tag}/b"] = db
            if i == self._flatten_at:
                v = v.T.reshape(self._last_r, *self._image_shape_before(i))
        if self.input_image:
            input_grad = v.reshape(self._last_r, -1)
        else:
            input_grad = v.T
        return grads, input_grad

    def _image_shape_before(self, i):
        shape = self.input_image
        for layer in self.layers[:i]:
            if isinstance(layer, ConvLayer):
                g = layer.geom
                shape = (layer.out_channels, g.m_out, g.n_out)
        return shape

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            tag = _layer_tag(layer, i)
            for field, arr in layer.params().items():
                out[f"{tag}/{field}"] = arr
        return out

    def set_params(self, values):
        live = self.params()
        for name, arr in values.items():
            if name not in live:
                raise ShapeError(f"network: unknown parameter {name!r}")
            if live[name].shape != arr.shape:
                raise ShapeError(
                    f"network: parameter {name!r} shape {arr.shape} vs {live[name].shape}")
            live[name][...] = arr

    def loss_and_grad(self, X_rows, targets, train=True):
        """Mean cross entropy over the batch plus the logit-space gradient
        (probabilities minus one-hot), ready to feed backward()."""
        Z = self.forward(X_rows, train=train)
        losses, P = loss_mod.batch_ce(Z, targets)
        total = float(seq_sum(losses[None, :], axis=1)[0])
        return total / losses.shape[0], loss_mod.batch_grad(P, targets), losses

    def flops_forward(self, r):
        return sum(layer.flops_forward(r) for layer in self.layers)

    def flops_backward(self, r):
        return sum(layer.flops_backward(r) for layer in self.layers)
