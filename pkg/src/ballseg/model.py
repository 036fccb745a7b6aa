"""Compact three-branch fully-convolutional segmentation network.

Layout (``c`` = base_channels, strides relative to the branch input):

    branch A, full-resolution input:  3 convs, strides 1-2-2      -> 1/4, 2c
    branch B, full-resolution input:  5 convs, strides 2-2-1-2-1  -> 1/8, 4c
    branch C, half-resolution input:  7 convs, strides 2-1-2-1-1-1-1 -> 1/8, 4c

Cascade fusion: C is resized onto B, both go through 1x1 convs, are added and
rectified; the result is resized onto A and fused the same way. A 1x1
classifier yields 2 logits at 1/4 resolution, which are bilinearly upsampled
to the input size before the channel softmax. The heatmap is the ball channel.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx

ALIGNMENT = 8
# fixed input standardisation: RGB in [0, 1] is centred, diff planes are mostly near 0
INPUT_SHIFT = np.array([0.5, 0.5, 0.5, 0.0, 0.0, 0.0], np.float32)
INPUT_SCALE = np.array([4.0, 4.0, 4.0, 8.0, 8.0, 8.0], np.float32)
MAGIC = b"BSGW"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    input_channels: int = 6
    output_classes: int = 2
    branch_resolutions: tuple = (1, 1, 0.5)

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be positive, got {self.base_channels}")
        if self.input_channels not in (3, 6):
            raise ValueError(f"input_channels must be 6 (image + diff) or 3 (image only), got {self.input_channels}")
        if self.output_classes != 2:
            raise ValueError(f"output_classes is fixed to 2, got {self.output_classes}")
        if tuple(self.branch_resolutions) != (1, 1, 0.5):
            raise ValueError(f"branch_resolutions is fixed to (1, 1, 0.5), got {self.branch_resolutions}")

    @property
    def use_diff(self):
        return self.input_channels == 6


def layer_table(config):
    """Ordered (name, in_channels, out_channels, kernel, stride) for every conv."""
    c, i = config.base_channels, config.input_channels
    return [
        ("a1", i, c, 3, 1), ("a2", c, c, 3, 2), ("a3", c, 2 * c, 3, 2),
        ("b1", i, c, 3, 2), ("b2", c, 2 * c, 3, 2), ("b3", 2 * c, 2 * c, 3, 1),
        ("b4", 2 * c, 4 * c, 3, 2), ("b5", 4 * c, 4 * c, 3, 1),
        ("c1", i, c, 3, 2), ("c2", c, 2 * c, 3, 1), ("c3", 2 * c, 2 * c, 3, 2),
        ("c4", 2 * c, 4 * c, 3, 1), ("c5", 4 * c, 4 * c, 3, 1), ("c6", 4 * c, 4 * c, 3, 1),
        ("c7", 4 * c, 4 * c, 3, 1),
        ("fuse1_low", 4 * c, 4 * c, 1, 1), ("fuse1_high", 4 * c, 4 * c, 1, 1),
        ("fuse2_low", 4 * c, 2 * c, 1, 1), ("fuse2_high", 2 * c, 2 * c, 1, 1),
        ("classifier", 2 * c, config.output_classes, 1, 1),
    ]


_LAYERS_BY_BRANCH = {b: [f"{b}{n}" for n in range(1, k + 1)] for b, k in (("a", 3), ("b", 5), ("c", 7))}


def parameter_shapes(config):
    shapes = {}
    for name, cin, cout, k, _ in layer_table(config):
        shapes[f"{name}.kernels"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


@dataclass
class ModelWeights:
    config: NetworkConfig
    params: dict
    # bumped on every update so caches from older forwards are detectable
    generation: int = 0

    def updated(self, new_params):
        return ModelWeights(self.config, new_params, self.generation + 1)


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ForwardCache:
    weights_id: int
    generation: int
    input_shape: tuple
    acts: dict = field(default_factory=dict)
    probs: np.ndarray = None


def build_network(config, seed):
    """He-initialised weights (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, cin, cout, k, _ in layer_table(config):
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"{name}.kernels"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        params[f"{name}.bias"] = np.zeros(cout, np.float32)
    return ModelWeights(config, params)


def check_input(config, x):
    if x.ndim != 4:
        raise ValueError(f"network input must be rank 4 (B, C, H, W), got shape {x.shape}")
    if x.shape[1] != config.input_channels:
        raise ValueError(
            f"input-channel mismatch: network expects {config.input_channels} channels, input has {x.shape[1]}"
        )
    H, W = x.shape[2:]
    if H % ALIGNMENT or W % ALIGNMENT:
        raise ValueError(f"input extents {H}x{W} must both be multiples of {ALIGNMENT}")


def _strides(config):
    return {name: stride for name, _, _, _, stride in layer_table(config)}


def forward(weights, x, training=False):
    """Run the network; returns the heatmap (B,1,H,W), plus a cache if ``training``."""
    x = nx.as_tensor(x)
    config = weights.config
    check_input(config, x)
    p = weights.params
    strides = _strides(config)
    H, W = x.shape[2:]
    acts = {}

    def conv(name, inp, relu=True):
        k = p[f"{name}.kernels"]
        pad = k.shape[2] // 2
        pre = nx.conv2d(inp, k, p[f"{name}.bias"], strides[name], pad)
        if training:
            acts[name + ":in"] = inp
            acts[name + ":pre"] = pre
        return nx.relu(pre) if relu else pre

    def branch(b, inp):
        for name in _LAYERS_BY_BRANCH[b]:
            inp = conv(name, inp)
        return inp

    c = config.input_channels
    x = (x - INPUT_SHIFT[:c, None, None].astype(x.dtype)) * INPUT_SCALE[:c, None, None].astype(x.dtype)
    half = nx.resize_bilinear(x, H // 2, W // 2)
    fa = branch("a", x)
    fb = branch("b", x)
    fc = branch("c", half)

    up_c = nx.resize_bilinear(fc, *fb.shape[2:])
    f1 = nx.relu(conv("fuse1_low", up_c, relu=False) + conv("fuse1_high", fb, relu=False))
    up_f1 = nx.resize_bilinear(f1, *fa.shape[2:])
    f2 = nx.relu(conv("fuse2_low", up_f1, relu=False) + conv("fuse2_high", fa, relu=False))
    logits_low = conv("classifier", f2, relu=False)
    logits = nx.resize_bilinear(logits_low, H, W)
    probs = nx.softmax_channels(logits)
    heatmap = probs[:, 1:2].copy()
    if not training:
        return heatmap
    acts.update(fc=fc, fb=fb, fa=fa, f1=f1, f2=f2, logits_low=logits_low)
    cache = ForwardCache(id(weights), weights.generation, x.shape, acts, probs)
    return heatmap, cache


def backward(weights, cache, grad_logits):
    """Parameter gradients given d(loss)/d(full-resolution logits)."""
    if cache.weights_id != id(weights) or cache.generation != weights.generation:
        raise StaleCacheError("forward cache was produced by different or since-updated weights")
    B, _, H, W = cache.input_shape
    grad_logits = nx.as_tensor(grad_logits)
    if grad_logits.shape != (B, weights.config.output_classes, H, W):
        raise ValueError(f"logit gradient shape {grad_logits.shape} does not match the cached forward pass")
    p = weights.params
    acts = cache.acts
    strides = _strides(weights.config)
    grads = {}

    def conv_back(name, upstream, input_grad=True):
        k = p[f"{name}.kernels"]
        g = nx.conv2d_backward(acts[name + ":in"], k, upstream, strides[name], k.shape[2] // 2, input_grad)
        grads[f"{name}.kernels"] = g.wrt_parameters["kernels"]
        grads[f"{name}.bias"] = g.wrt_parameters["bias"]
        return g.wrt_input

    def branch_back(b, upstream):
        names = _LAYERS_BY_BRANCH[b]
        for idx, name in enumerate(reversed(names)):
            upstream = nx.relu_backward(acts[name + ":pre"], upstream)
            upstream = conv_back(name, upstream, input_grad=idx < len(names) - 1)

    g_low = nx.resize_bilinear_backward(acts["logits_low"].shape, grad_logits)
    # f1/f2 hold post-relu values; they are > 0 exactly where the pre-activation is
    g_f2 = nx.relu_backward(acts["f2"], conv_back("classifier", g_low))
    g_up_f1 = conv_back("fuse2_low", g_f2)
    g_fa = conv_back("fuse2_high", g_f2)
    g_f1 = nx.relu_backward(acts["f1"], nx.resize_bilinear_backward(acts["f1"].shape, g_up_f1))
    g_up_c = conv_back("fuse1_low", g_f1)
    g_fb = conv_back("fuse1_high", g_f1)
    g_fc = nx.resize_bilinear_backward(acts["fc"].shape, g_up_c)

    branch_back("a", g_fa)
    branch_back("b", g_fb)
    branch_back("c", g_fc)
    return {name: grads[name] for name in p}


def predictor(weights):
    """Callable mapping an input batch to heatmaps, for the evaluation helpers."""
    def predict(batch):
        return forward(weights, batch)
    predict.input_channels = weights.config.input_channels
    return predict


# --- weights file -----------------------------------------------------------

class WeightsFormatError(ValueError):
    pass


class NotAWeightsFile(WeightsFormatError):
    pass


class UnsupportedVersion(WeightsFormatError):
    pass


class CorruptHeader(WeightsFormatError):
    pass


class TruncatedPayload(WeightsFormatError):
    pass


def weights_to_bytes(weights):
    c = weights.config
    out = [MAGIC, struct.pack("<IIIII", FORMAT_VERSION, c.base_channels, c.input_channels,
                              c.output_classes, len(weights.params))]
    for name, arr in weights.params.items():
        raw = name.encode("utf-8")
        extents = tuple(arr.shape) + (1,) * (4 - arr.ndim)
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<4I", *extents))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_weights(weights, path):
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(weights))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        end = self.pos + n
        if end > len(self.data):
            missing = end - len(self.data)
            raise TruncatedPayload(f"truncated payload: {what} is missing {missing} bytes")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk


def weights_from_bytes(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise NotAWeightsFile("not a weights file (bad magic bytes)")
    r = _Reader(data)
    r.take(4, "magic")
    (version,) = struct.unpack("<I", r.take(4, "format version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unknown weights format version {version} (supported: {FORMAT_VERSION})")
    base, cin, classes, count = struct.unpack("<IIII", r.take(16, "config block"))
    try:
        config = NetworkConfig(base_channels=base, input_channels=cin, output_classes=classes)
    except ValueError as err:
        raise CorruptHeader(f"corrupt header: {err}") from None
    expected = parameter_shapes(config)
    if count != len(expected):
        raise CorruptHeader(f"corrupt header: {count} parameters declared, config implies {len(expected)}")
    full_size = r.pos + sum(4 + len(n.encode("utf-8")) + 16 + 4 * int(np.prod(s)) for n, s in expected.items())
    if len(data) < full_size:
        raise TruncatedPayload(f"truncated payload: missing {full_size - len(data)} bytes")
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", r.take(4, "parameter name length"))
        if nlen > 256:
            raise CorruptHeader(f"corrupt header: implausible parameter name length {nlen}")
        try:
            name = r.take(nlen, "parameter name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptHeader("corrupt header: parameter name is not UTF-8") from None
        extents = struct.unpack("<4I", r.take(16, f"extents of {name!r}"))
        if name not in expected or name in params:
            raise CorruptHeader(f"corrupt header: unexpected parameter {name!r}")
        shape = expected[name]
        if extents != tuple(shape) + (1,) * (4 - len(shape)):
            raise CorruptHeader(f"corrupt header: {name!r} has extents {extents}, expected {shape}")
        n = int(np.prod(shape))
        raw = r.take(4 * n, f"data of {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(data):
        raise CorruptHeader(f"corrupt header: {len(data) - r.pos} trailing bytes after last parameter")
    return ModelWeights(config, params)


def load_weights(path):
    with open(path, "rb") as fh:
        return weights_from_bytes(fh.read())
