"""Frame-level network layers with analytic forward and backward passes.

All layers operate on float64 arrays of shape (batch, time, features); the
fully connected and batch norm layers also accept (batch, features). Each
forward call records a tape on the layer; backward consumes it exactly once
and fills the layer's ``grads`` dict. Parameters live in ``params``,
non-trained state (batch norm running statistics) in ``buffers``.
"""

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
SE_EPS = 1e-9
LRELU_SLOPE = 0.01

LAYER_REGISTRY = {}


def register_layer(kind):
    def wrap(cls):
        cls.kind = kind
        LAYER_REGISTRY[kind] = cls
        return cls
    return wrap


def layer_from_config(cfg):
    """Rebuild a layer (zero-initialized) from its config() dict."""
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind not in LAYER_REGISTRY:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_REGISTRY[kind](**cfg)


def _he_weights(rng, shape, fan_in):
    if rng is None:
        return np.zeros(shape)
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Layer:
    """Common storage and traversal for all layers."""

    no_decay = frozenset()

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._tape = None

    def sublayers(self):
        return []

    def _take_tape(self):
        if self._tape is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a matching forward")
        tape, self._tape = self._tape, None
        return tape

    def zero_grads(self):
        for key, p in self.params.items():
            self.grads[key] = np.zeros_like(p)
        for _, sub in self.sublayers():
            sub.zero_grads()


def iter_params(layer, prefix=""):
    """Yield (path, owning layer, key) for every parameter tensor."""
    for key in layer.params:
        yield prefix + key, layer, key
    for name, sub in layer.sublayers():
        yield from iter_params(sub, f"{prefix}{name}.")


def iter_buffers(layer, prefix=""):
    for key in layer.buffers:
        yield prefix + key, layer, key
    for name, sub in layer.sublayers():
        yield from iter_buffers(sub, f"{prefix}{name}.")


def count_params(layer):
    return sum(owner.params[key].size for _, owner, key in iter_params(layer))


@register_layer("fully_connected")
class FullyConnected(Layer):
    """y = x W^T + b applied along the last axis."""

    def __init__(self, in_dim, out_dim, rng=None):
        super().__init__()
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.params["W"] = _he_weights(rng, (self.out_dim, self.in_dim), self.in_dim)
        self.params["b"] = np.zeros(self.out_dim)

    def config(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    def forward(self, x, train=False):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"fully_connected expects last dim {self.in_dim}, got {x.shape[-1]}")
        self._tape = {"x": x}
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dy):
        x = self._take_tape()["x"]
        flat_x = x.reshape(-1, self.in_dim)
        flat_dy = dy.reshape(-1, self.out_dim)
        self.grads["W"] = flat_dy.T @ flat_x
        self.grads["b"] = flat_dy.sum(axis=0)
        return dy @ self.params["W"]


@register_layer("conv1d")
class Conv1d(Layer):
    """Time-axis convolution with zero padding preserving sequence length.

    Kernel W has shape (k, out_dim, in_dim); tap j applies to the input
    frame at offset j - (k-1)/2, so y[t] = b + sum_j W[j] x[t+j-(k-1)/2].
    """

    def __init__(self, in_dim, out_dim, kernel_size, rng=None):
        super().__init__()
        kernel_size = int(kernel_size)
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {kernel_size}")
        self.in_dim, self.out_dim, self.kernel_size = int(in_dim), int(out_dim), kernel_size
        self.params["W"] = _he_weights(
            rng, (kernel_size, self.out_dim, self.in_dim), kernel_size * self.in_dim)
        self.params["b"] = np.zeros(self.out_dim)

    def config(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "kernel_size": self.kernel_size}

    def forward(self, x, train=False):
        if x.ndim != 3:
            raise ValueError(f"conv1d expects (batch, time, features), got shape {x.shape}")
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"conv1d expects feature dim {self.in_dim}, got {x.shape[-1]}")
        b, t, _ = x.shape
        if t < 1:
            raise ValueError("conv1d requires at least one frame")
        half = (self.kernel_size - 1) // 2
        xp = np.zeros((b, t + 2 * half, self.in_dim))
        xp[:, half:half + t] = x
        w = self.params["W"]
        y = np.broadcast_to(self.params["b"], (b, t, self.out_dim)).copy()
        for j in range(self.kernel_size):
            y += xp[:, j:j + t] @ w[j].T
        self._tape = {"xp": xp, "t": t}
        return y

    def backward(self, dy):
        tape = self._take_tape()
        xp, t = tape["xp"], tape["t"]
        half = (self.kernel_size - 1) // 2
        w = self.params["W"]
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for j in range(self.kernel_size):
            dw[j] = np.einsum("bto,bti->oi", dy, xp[:, j:j + t])
            dxp[:, j:j + t] += dy @ w[j]
        self.grads["W"] = dw
        self.grads["b"] = dy.sum(axis=(0, 1))
        return dxp[:, half:half + t]


@register_layer("lrelu")
class LeakyRelu(Layer):
    def __init__(self):
        super().__init__()

    def config(self):
        return {"kind": self.kind}

    def forward(self, x, train=False):
        scale = np.where(x >= 0, 1.0, LRELU_SLOPE)
        self._tape = {"scale": scale}
        return x * scale

    def backward(self, dy):
        return dy * self._take_tape()["scale"]


@register_layer("batch_norm")
class BatchNorm(Layer):
    """Per-feature normalization over all leading axes.

    Training mode normalizes with batch statistics (population variance)
    and updates running statistics with momentum 0.1; eval mode uses the
    running statistics.
    """

    no_decay = frozenset({"gamma", "beta"})

    def __init__(self, dim):
        super().__init__()
        self.dim = int(dim)
        self.params["gamma"] = np.ones(self.dim)
        self.params["beta"] = np.zeros(self.dim)
        self.buffers["running_mean"] = np.zeros(self.dim)
        self.buffers["running_var"] = np.ones(self.dim)

    def config(self):
        return {"kind": self.kind, "dim": self.dim}

    def forward(self, x, train=False):
        if x.shape[-1] != self.dim:
            raise ValueError(f"batch_norm expects feature dim {self.dim}, got {x.shape[-1]}")
        axes = tuple(range(x.ndim - 1))
        if train:
            n = int(np.prod(x.shape[:-1]))
            if n < 2:
                raise ValueError("batch_norm training mode needs at least 2 samples per feature")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.buffers["running_mean"] = (
                (1 - BN_MOMENTUM) * self.buffers["running_mean"] + BN_MOMENTUM * mean)
            self.buffers["running_var"] = (
                (1 - BN_MOMENTUM) * self.buffers["running_var"] + BN_MOMENTUM * var)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv_std
        self._tape = {"xhat": xhat, "inv_std": inv_std, "train": train, "axes": axes}
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy):
        tape = self._take_tape()
        xhat, inv_std, axes = tape["xhat"], tape["inv_std"], tape["axes"]
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        g = self.params["gamma"] * inv_std
        if not tape["train"]:
            return dy * g
        n = int(np.prod(dy.shape[:-1]))
        mean_dy = dy.mean(axis=axes)
        mean_dy_xhat = (dy * xhat).sum(axis=axes) / n
        return g * (dy - mean_dy - xhat * mean_dy_xhat)


@register_layer("se_module")
class SEModule(Layer):
    """Squeeze-and-excitation gate over the feature axis.

    Squeeze concatenates temporal mean and standard deviation (variance
    floored by 1e-9 under the root); excitation is FC -> LReLU -> BN ->
    FC -> sigmoid producing per-feature weights in (0,1) that multiply
    every frame of the input.
    """

    def __init__(self, dim, bottleneck=None, rng=None):
        super().__init__()
        self.dim = int(dim)
        if bottleneck is None:
            bottleneck = -(-self.dim // 8)
        self.bottleneck = max(1, int(bottleneck))
        self.fc1 = FullyConnected(2 * self.dim, self.bottleneck, rng)
        self.act = LeakyRelu()
        self.bn = BatchNorm(self.bottleneck)
        self.fc2 = FullyConnected(self.bottleneck, self.dim, rng)

    def config(self):
        return {"kind": self.kind, "dim": self.dim, "bottleneck": self.bottleneck}

    def sublayers(self):
        return [("fc1", self.fc1), ("act", self.act), ("bn", self.bn), ("fc2", self.fc2)]

    def squeeze(self, x):
        mean = x.mean(axis=1)
        var = ((x - mean[:, None, :]) ** 2).mean(axis=1)
        std = np.sqrt(var + SE_EPS)
        return mean, std

    def forward(self, x, train=False):
        if x.ndim != 3:
            raise ValueError(f"se_module expects (batch, time, features), got shape {x.shape}")
        if x.shape[1] < 1:
            raise ValueError("se_module requires at least one frame")
        if x.shape[-1] != self.dim:
            raise ValueError(f"se_module expects feature dim {self.dim}, got {x.shape[-1]}")
        mean, std = self.squeeze(x)
        z = np.concatenate([mean, std], axis=1)
        h = self.fc2.forward(self.bn.forward(
            self.act.forward(self.fc1.forward(z, train), train), train), train)
        w = 1.0 / (1.0 + np.exp(-h))
        self._tape = {"x": x, "mean": mean, "std": std, "w": w}
        return x * w[:, None, :]

    def backward(self, dy):
        tape = self._take_tape()
        x, mean, std, w = tape["x"], tape["mean"], tape["std"], tape["w"]
        t = x.shape[1]
        dw = (dy * x).sum(axis=1)
        dx = dy * w[:, None, :]
        dh = dw * w * (1.0 - w)
        dz = self.fc1.backward(self.act.backward(self.bn.backward(self.fc2.backward(dh))))
        dmean, dstd = dz[:, :self.dim], dz[:, self.dim:]
        dvar = dstd / (2.0 * std)
        # d var / d x[t] = 2 (x[t] - mean) / T exactly: the mean path cancels.
        dx += (2.0 / t) * dvar[:, None, :] * (x - mean[:, None, :])
        dx += dmean[:, None, :] / t
        return dx


@register_layer("tdnn_block")
class TdnnBlock(Layer):
    """conv1d -> LReLU -> batch norm."""

    def __init__(self, in_dim, out_dim, kernel_size, rng=None):
        super().__init__()
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.kernel_size = int(kernel_size)
        self.conv = Conv1d(in_dim, out_dim, kernel_size, rng)
        self.act = LeakyRelu()
        self.norm = BatchNorm(out_dim)

    def config(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "kernel_size": self.kernel_size}

    def sublayers(self):
        return [("conv", self.conv), ("act", self.act), ("norm", self.norm)]

    def forward(self, x, train=False):
        return self.norm.forward(self.act.forward(self.conv.forward(x, train), train), train)

    def backward(self, dy):
        return self.conv.backward(self.act.backward(self.norm.backward(dy)))


@register_layer("tdnn_se_block")
class TdnnSeBlock(Layer):
    """conv1d -> LReLU -> batch norm -> SE gate."""

    def __init__(self, in_dim, out_dim, kernel_size, se_bottleneck=None, rng=None):
        super().__init__()
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.kernel_size = int(kernel_size)
        self.conv = Conv1d(in_dim, out_dim, kernel_size, rng)
        self.act = LeakyRelu()
        self.norm = BatchNorm(out_dim)
        self.se = SEModule(out_dim, se_bottleneck, rng)

    def config(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "kernel_size": self.kernel_size, "se_bottleneck": self.se.bottleneck}

    def sublayers(self):
        return [("conv", self.conv), ("act", self.act), ("norm", self.norm), ("se", self.se)]

    def forward(self, x, train=False):
        h = self.norm.forward(self.act.forward(self.conv.forward(x, train), train), train)
        return self.se.forward(h, train)

    def backward(self, dy):
        return self.conv.backward(self.act.backward(self.norm.backward(self.se.backward(dy))))


@register_layer("res_se_block")
class ResSeBlock(Layer):
    """y = x + SE(BN(LReLU(conv1d(LReLU(FC(x)))))).

    With all branch parameters zero the block is exactly the identity:
    the conv emits zeros, BN maps them to beta = 0, and the 0.5 SE gate
    multiplies zeros.
    """

    def __init__(self, dim, kernel_size, se_bottleneck=None, rng=None):
        super().__init__()
        self.in_dim = self.out_dim = self.dim = int(dim)
        self.kernel_size = int(kernel_size)
        self.fc = FullyConnected(dim, dim, rng)
        self.act1 = LeakyRelu()
        self.conv = Conv1d(dim, dim, kernel_size, rng)
        self.act2 = LeakyRelu()
        self.norm = BatchNorm(dim)
        self.se = SEModule(dim, se_bottleneck, rng)

    def config(self):
        return {"kind": self.kind, "dim": self.dim, "kernel_size": self.kernel_size,
                "se_bottleneck": self.se.bottleneck}

    def sublayers(self):
        return [("fc", self.fc), ("act1", self.act1), ("conv", self.conv),
                ("act2", self.act2), ("norm", self.norm), ("se", self.se)]

    def forward(self, x, train=False):
        if x.shape[-1] != self.dim:
            raise ValueError(f"res_se_block expects feature dim {self.dim}, got {x.shape[-1]}")
        h = self.act1.forward(self.fc.forward(x, train), train)
        h = self.act2.forward(self.conv.forward(h, train), train)
        return x + self.se.forward(self.norm.forward(h, train), train)

    def backward(self, dy):
        dh = self.norm.backward(self.se.backward(dy))
        dh = self.conv.backward(self.act2.backward(dh))
        return dy + self.fc.backward(self.act1.backward(dh))


@register_layer("frame_network")
class FrameNetwork(Layer):
    """Ordered stack of frame-level layers."""

    def __init__(self, layers=None, layer_configs=None):
        super().__init__()
        if layers is None:
            layers = [layer_from_config(c) for c in (layer_configs or [])]
        self.layers = list(layers)

    def config(self):
        return {"kind": self.kind, "layer_configs": [l.config() for l in self.layers]}

    def sublayers(self):
        return [(f"layer{i}", l) for i, l in enumerate(self.layers)]

    @property
    def output_dim(self):
        for layer in reversed(self.layers):
            if hasattr(layer, "out_dim"):
                return layer.out_dim
            if hasattr(layer, "dim"):
                return layer.dim
        return None

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def forward_sequence(self, frames):
        """Eval-mode forward of a single (T, D) sequence -> (T, out_dim)."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError(f"expected a (T, D) matrix, got shape {frames.shape}")
        return self.forward(frames[None], train=False)[0]


# Reference stack shapes: the SE variant uses five conv blocks with kernel
# sizes (5, 5, 7, 1, 1); the residual variant fronts one SE block, then six
# residual blocks with kernels (5, 5, 7, 7, 1, 1), then a kernel-1 SE block
# producing the head features. Published dims are width=512 with out_dim
# 1500 for mean+std pooling or 128 for dictionary heads; both scale down.

def build_frame_network(arch, input_dim, width=512, out_dim=1500,
                        se_bottleneck=None, rng=None) -> FrameNetwork:
    arch = arch.replace("_", "-")
    if arch == "tdnn":
        kernels = (5, 5, 7, 1, 1)
        dims = (width, width, width, width, out_dim)
        layers, d = [], input_dim
        for k, out in zip(kernels, dims):
            layers.append(TdnnBlock(d, out, k, rng))
            d = out
    elif arch == "tdnn-se":
        kernels = (5, 5, 7, 1, 1)
        dims = (width, width, width, width, out_dim)
        layers, d = [], input_dim
        for k, out in zip(kernels, dims):
            layers.append(TdnnSeBlock(d, out, k, se_bottleneck, rng))
            d = out
    elif arch == "tdnn-res-se":
        layers = [TdnnSeBlock(input_dim, width, 5, se_bottleneck, rng)]
        for k in (5, 5, 7, 7, 1, 1):
            layers.append(ResSeBlock(width, k, se_bottleneck, rng))
        layers.append(TdnnSeBlock(width, out_dim, 1, se_bottleneck, rng))
    else:
        raise ValueError(f"unknown architecture {arch!r} (expected tdnn, tdnn-se, tdnn-res-se)")
    return FrameNetwork(layers)
