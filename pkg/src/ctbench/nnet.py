"""Small 2.5D encoder-decoder trained to map FBP slices to MBIR slices.

Everything here is plain numpy: convolutions run as windowed tensordots,
gradients are exact reverse-mode transcriptions of the forward ops, and
the optimizers are hand-rolled.  The architecture is a compact U-Net
variant: per level two same-padded k x k convs with ReLU, 2x2 max-pool
down, nearest-neighbor x2 up followed by a channel-halving conv and ReLU,
skip concatenation as (upsampled, skip), and a final 1x1 conv with no
activation.  Channel counts double per level down and halve per level up.

Units: the training and inference entry points take HU data and scale by
1/1000 before the network (and back after), so activations stay O(1).
Loss values reported by train() are on that scaled domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (Image2D, NumericalError, SliceStack, Tensor,
                   container_from_bytes, container_to_bytes)

HU_SCALE = 1000.0

OPTIMIZERS = ("adam", "sgd")

WEIGHTS_MAGIC = "ctbench-weights 1"


@dataclass(frozen=True, eq=False)
class NetSpec:
    """Architecture knobs; z_channels is the number of input slices."""

    z_channels: int = 1
    depth: int = 3
    base_channels: int = 16
    kernel: int = 3
    residual: bool = True

    def __post_init__(self):
        z = self.z_channels
        if not isinstance(z, (int, np.integer)) or z < 1 or z % 2 == 0:
            raise ValueError(f"z_channels must be odd and >= 1, got {z!r}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        k = self.kernel
        if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {k!r}")


@dataclass(eq=False)
class ParamStore:
    """Ordered mapping of layer tensor names to arrays, plus the NetSpec."""

    spec: NetSpec
    tensors: dict

    def names(self):
        return list(self.tensors)

    def n_parameters(self):
        return sum(t.size for t in self.tensors.values())

    def copy(self):
        return ParamStore(self.spec, {k: v.copy() for k, v in self.tensors.items()})


@dataclass(frozen=True, eq=False)
class TrainConfig:
    learning_rate: float = 1.0e-4
    epochs: int = 300
    batch_size: int = 4
    seed: int = 0
    optimizer: str = "adam"
    f64_mode: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass(frozen=True, eq=False)
class SlicePairSet:
    """Training pairs: Z-slice FBP windows against single MBIR slices, in HU."""

    inputs: np.ndarray
    targets: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        x, y = self.inputs, self.targets
        if x.ndim != 4 or y.ndim != 4 or y.shape[1] != 1:
            raise ValueError(
                f"need inputs (N, Z, H, W) and targets (N, 1, H, W), "
                f"got {x.shape} and {y.shape}"
            )
        if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
            raise ValueError(f"inputs {x.shape} do not match targets {y.shape}")
        if x.shape[1] % 2 == 0:
            raise ValueError(f"Z must be odd, got {x.shape[1]}")
        if self.ids and len(self.ids) != x.shape[0]:
            raise ValueError("ids length must match the number of pairs")

    def __len__(self):
        return self.inputs.shape[0]


def _conv_names(spec):
    """(name, c_in, c_out, k) for every conv in forward order."""
    base, depth, z, k = spec.base_channels, spec.depth, spec.z_channels, spec.kernel
    chans = [base * 2 ** level for level in range(depth + 1)]
    layers = []
    c_in = z
    for level in range(depth):
        layers.append((f"enc{level}.conv1", c_in, chans[level], k))
        layers.append((f"enc{level}.conv2", chans[level], chans[level], k))
        c_in = chans[level]
    layers.append(("bottleneck.conv1", chans[depth - 1], chans[depth], k))
    layers.append(("bottleneck.conv2", chans[depth], chans[depth], k))
    for level in range(depth - 1, -1, -1):
        layers.append((f"dec{level}.up", chans[level + 1], chans[level], k))
        layers.append((f"dec{level}.conv1", 2 * chans[level], chans[level], k))
        layers.append((f"dec{level}.conv2", chans[level], chans[level], k))
    layers.append(("out", chans[0], 1, 1))
    return layers


def build_unet(spec, seed, dtype=np.float32):
    """He-initialized parameters drawn in a fixed layer order from seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, c_in, c_out, k in _conv_names(spec):
        std = np.sqrt(2.0 / (c_in * k * k))
        w = rng.standard_normal((c_out, c_in, k, k), dtype=np.float64) * std
        tensors[name + ".weight"] = w.astype(dtype)
        tensors[name + ".bias"] = np.zeros(c_out, dtype=dtype)
    return ParamStore(spec, tensors)


def _conv2d(x, w, b):
    k = w.shape[2]
    pad = k // 2
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.moveaxis(y, 3, 1) + b[None, :, None, None]


def _conv2d_backward(gy, x, w):
    n, c_in, h, wid = x.shape
    k = w.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    gb = gy.sum(axis=(0, 2, 3))
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))
    gxp = np.zeros_like(xp)
    for u in range(k):
        for v in range(k):
            t = np.tensordot(gy, w[:, :, u, v], axes=([1], [0]))
            gxp[:, :, u : u + h, v : v + wid] += np.moveaxis(t, 3, 1)
    gx = gxp[:, :, pad : pad + h, pad : pad + wid] if pad else gxp
    return gx, gw, gb


def _pool2x2(x):
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = xr.argmax(axis=4)
    y = np.take_along_axis(xr, arg[..., None], axis=4)[..., 0]
    return y, arg


def _pool2x2_backward(gy, arg, shape):
    n, c, h, w = shape
    g = np.zeros((n, c, h // 2, w // 2, 4), dtype=gy.dtype)
    np.put_along_axis(g, arg[..., None], gy[..., None], axis=4)
    g = g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(n, c, h, w)


def _upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample2_backward(gy):
    n, c, h, w = gy.shape
    return gy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _check_input(spec, x):
    if x.ndim != 4 or x.shape[1] != spec.z_channels:
        raise ValueError(
            f"expected input (N, {spec.z_channels}, H, W), got {x.shape}"
        )
    h, w = x.shape[2:]
    div = 2 ** spec.depth
    if h % div or w % div:
        raise ValueError(
            f"spatial dims ({h}, {w}) must be divisible by 2^depth = {div}"
        )


def _conv_relu(tensors, name, x, cache, check):
    pre = _conv2d(x, tensors[name + ".weight"], tensors[name + ".bias"])
    if check and not np.all(np.isfinite(pre)):
        raise NumericalError(f"non-finite activation after layer {name}")
    out = np.maximum(pre, 0.0)
    if cache is not None:
        cache.append(("conv", name, x, pre))
    return out


def _forward_full(params, x, cache=None, check=False):
    """Run the network on a (N, Z, H, W) batch; optionally record a tape."""
    spec = params.spec
    _check_input(spec, x)
    tensors = params.tensors
    h = x
    skips = []
    for level in range(spec.depth):
        h = _conv_relu(tensors, f"enc{level}.conv1", h, cache, check)
        h = _conv_relu(tensors, f"enc{level}.conv2", h, cache, check)
        skips.append(h)
        h, arg = _pool2x2(h)
        if cache is not None:
            cache.append(("pool", arg, skips[-1].shape))
    h = _conv_relu(tensors, "bottleneck.conv1", h, cache, check)
    h = _conv_relu(tensors, "bottleneck.conv2", h, cache, check)
    for level in range(spec.depth - 1, -1, -1):
        h = _upsample2(h)
        h = _conv_relu(tensors, f"dec{level}.up", h, cache, check)
        h = np.concatenate([h, skips[level]], axis=1)
        h = _conv_relu(tensors, f"dec{level}.conv1", h, cache, check)
        h = _conv_relu(tensors, f"dec{level}.conv2", h, cache, check)
    out = _conv2d(h, tensors["out.weight"], tensors["out.bias"])
    if check and not np.all(np.isfinite(out)):
        raise NumericalError("non-finite activation after layer out")
    if cache is not None:
        cache.append(("out", h))
    if spec.residual:
        out = out + x[:, spec.z_channels // 2 : spec.z_channels // 2 + 1]
    return out


def forward(params, x):
    """Map (Z, H, W) or (N, Z, H, W) input to (1, H, W) / (N, 1, H, W)."""
    arr = np.asarray(x)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = _forward_full(params, arr)
    return out[0] if single else out


def loss_mse(pred, target):
    """Mean squared difference over every element."""
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    d = p.astype(np.float64) - t.astype(np.float64)
    return float(np.mean(d * d))


def backward(params, inputs, targets):
    """Loss and exact gradients of mean batch MSE for every parameter.

    Returns (loss, grads) with grads keyed exactly like params.tensors.
    """
    x = np.asarray(inputs)
    y = np.asarray(targets)
    if x.ndim != 4:
        raise ValueError(f"inputs must be (N, Z, H, W), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if y.shape != (x.shape[0], 1, x.shape[2], x.shape[3]):
        raise ValueError(f"targets shape {y.shape} does not match inputs {x.shape}")
    spec = params.spec
    tensors = params.tensors
    cache = []
    pred = _forward_full(params, x, cache=cache, check=True)
    diff = pred - y
    loss = float(np.mean(diff.astype(np.float64) ** 2))

    grads = {name: np.zeros_like(t) for name, t in tensors.items()}
    g = ((2.0 / diff.size) * diff).astype(x.dtype)

    # output 1x1 conv; the residual shortcut adds straight to the input,
    # which is not a parameter, so it contributes no gradient term
    _, h_in = cache.pop()
    g, gw, gb = _conv2d_backward(g, h_in, tensors["out.weight"])
    grads["out.weight"] += gw
    grads["out.bias"] += gb

    def pop_conv_relu(g):
        _, name, x_in, pre = cache.pop()
        g = g * (pre > 0.0)
        g, gw, gb = _conv2d_backward(g, x_in, tensors[name + ".weight"])
        grads[name + ".weight"] += gw
        grads[name + ".bias"] += gb
        return g

    skip_grads = {}
    for level in range(spec.depth):
        g = pop_conv_relu(g)  # dec{level}.conv2
        g = pop_conv_relu(g)  # dec{level}.conv1
        c = tensors[f"dec{level}.up.weight"].shape[0]
        g, skip_grads[level] = g[:, :c], g[:, c:]
        g = pop_conv_relu(g)  # dec{level}.up
        g = _upsample2_backward(g)
    g = pop_conv_relu(g)  # bottleneck.conv2
    g = pop_conv_relu(g)  # bottleneck.conv1

    for level in range(spec.depth - 1, -1, -1):
        _, arg, shape = cache.pop()
        g = _pool2x2_backward(g, arg, shape)
        g = g + skip_grads[level]
        g = pop_conv_relu(g)  # enc{level}.conv2
        g = pop_conv_relu(g)  # enc{level}.conv1
    return loss, grads


def train(pairs, spec, cfg):
    """Minimize mean MSE over the pair set; returns (params, loss_curve).

    Inputs and targets are HU; they are scaled by 1/1000 internally, so the
    reported per-epoch losses are in (HU/1000)^2 units.  Pair order is
    reshuffled each epoch from cfg.seed; the whole run is bitwise
    deterministic in single-thread mode.
    """
    if not isinstance(pairs, SlicePairSet):
        raise TypeError("pairs must be a SlicePairSet")
    if len(pairs) == 0:
        raise ValueError("pairs must be nonempty")
    if pairs.inputs.shape[1] != spec.z_channels:
        raise ValueError(
            f"pair Z = {pairs.inputs.shape[1]} does not match spec Z = {spec.z_channels}"
        )
    dtype = np.float64 if cfg.f64_mode else np.float32
    inputs = pairs.inputs.astype(dtype) / HU_SCALE
    targets = pairs.targets.astype(dtype) / HU_SCALE

    params = build_unet(spec, cfg.seed, dtype=dtype)
    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(t) for k, t in params.tensors.items()}
    v = {k: np.zeros_like(t) for k, t in params.tensors.items()}
    beta1, beta2, eps = 0.9, 0.999, 1.0e-8
    step = 0
    first_loss = None
    curve = []
    n = len(pairs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = backward(params, inputs[idx], targets[idx])
            if first_loss is None:
                first_loss = max(loss, 1.0e-12)
            if not np.isfinite(loss) or loss > 1.0e3 * first_loss:
                raise NumericalError(
                    f"training diverged at epoch {epoch + 1}: "
                    f"loss {loss:.6g} vs initial {first_loss:.6g}"
                )
            step += 1
            if cfg.optimizer == "adam":
                bc1 = 1.0 - beta1 ** step
                bc2 = 1.0 - beta2 ** step
                for key, t in params.tensors.items():
                    g = grads[key]
                    m[key] = beta1 * m[key] + (1.0 - beta1) * g
                    v[key] = beta2 * v[key] + (1.0 - beta2) * g * g
                    t -= (cfg.learning_rate * (m[key] / bc1)
                          / (np.sqrt(v[key] / bc2) + eps)).astype(dtype)
            else:
                for key, t in params.tensors.items():
                    t -= (cfg.learning_rate * grads[key]).astype(dtype)
            epoch_losses.append(loss)
        curve.append(float(np.mean(epoch_losses)))
    return params, np.asarray(curve, dtype=np.float64)


def infer_volume(params, fbp_volume):
    """Apply the network to every slice of an HU volume.

    Input windows take slices [k - (Z-1)/2 ... k + (Z-1)/2] with edge
    replication at the volume boundaries; the output has the same slice
    count, spacing and pixel size.
    """
    if not isinstance(fbp_volume, SliceStack):
        raise TypeError("fbp_volume must be a SliceStack")
    spec = params.spec
    z = spec.z_channels
    half = z // 2
    n = fbp_volume.n_slices
    vol = fbp_volume.to_array().astype(np.float32)
    windows = np.empty((n, z, vol.shape[1], vol.shape[2]), dtype=np.float32)
    for k in range(n):
        for off in range(-half, half + 1):
            windows[k, off + half] = vol[min(max(k + off, 0), n - 1)]
    out = _forward_full(params, windows / HU_SCALE) * HU_SCALE
    pixel = fbp_volume.pixel_size
    slices = tuple(Image2D(out[k, 0].astype(np.float32), pixel) for k in range(n))
    return SliceStack(slices, fbp_volume.slice_spacing)


def _netspec_fields(spec):
    return {
        "z_channels": spec.z_channels,
        "depth": spec.depth,
        "base_channels": spec.base_channels,
        "kernel": spec.kernel,
        "residual": int(spec.residual),
    }


def save_weights(path, store):
    """Write a weight file: text header with spec and index, then blobs.

    Each tensor is stored as a binary tensor container; the index lists
    (name, offset, shape) with offsets relative to the data section.
    """
    blobs = []
    index = []
    offset = 0
    for name, arr in store.tensors.items():
        blob = container_to_bytes(Tensor(arr.shape, arr.reshape(-1)))
        index.append((name, offset, arr.shape))
        blobs.append(blob)
        offset += len(blob)
    lines = [WEIGHTS_MAGIC]
    fields = _netspec_fields(store.spec)
    lines.append(" ".join(f"{k}={v}" for k, v in fields.items()))
    for name, off, shape in index:
        lines.append(f"tensor {name} {off} {','.join(str(s) for s in shape)}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_weights(path):
    """Read a weight file back into a ParamStore; validates the index."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: missing header terminator")
    lines = raw[:sep].decode("ascii").splitlines()
    if not lines or lines[0] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic line")
    kv = dict(part.split("=", 1) for part in lines[1].split())
    spec = NetSpec(
        z_channels=int(kv["z_channels"]),
        depth=int(kv["depth"]),
        base_channels=int(kv["base_channels"]),
        kernel=int(kv["kernel"]),
        residual=bool(int(kv["residual"])),
    )
    data = raw[sep + 2 :]
    tensors = {}
    for line in lines[2:]:
        parts = line.split()
        if len(parts) != 4 or parts[0] != "tensor":
            raise ValueError(f"{path}: bad index line {line!r}")
        name, off, shape_s = parts[1], int(parts[2]), parts[3]
        shape = tuple(int(s) for s in shape_s.split(","))
        tensor = container_from_bytes(data[off:])
        arr = np.asarray(tensor.data).reshape(tensor.shape)
        if tuple(tensor.shape) != shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        tensors[name] = arr
    store = ParamStore(spec, tensors)
    expected = [n + s for n, _, _, _ in _conv_names(spec) for s in (".weight", ".bias")]
    if store.names() != expected:
        raise ValueError(f"{path}: tensor names do not match the architecture")
    return store
