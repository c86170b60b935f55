"""Network assembly: the baseline encoder-classifier and the enhanced
variant that reconstructs the input through unpooling + transposed
convolution and re-encodes the reconstruction before classifying.

Also owns parameter initialization and the binary checkpoint format.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import layers
from .layers import ConvParams, DenseParams, PoolIndices
from .tensor import Rng, rand_uniform

MODES = ("baseline", "enhanced")

_CKPT_MAGIC = b"CLENET01"
_CKPT_VERSION = 1


class ArchitectureError(ValueError):
    """Configured stage dimensions are inconsistent or degenerate."""


class CheckpointError(Exception):
    pass


class CheckpointIOError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class Architecture:
    """Static description of the two-stage conv network for one patch size."""

    patch_size: int = 64
    conv1_filters: int = 64
    conv1_kernel: int = 5
    conv2_filters: int = 32
    conv2_kernel: int = 3
    pool_window: int = 3
    pool_stride: int = 3
    mode: str = "enhanced"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ArchitectureError(f"mode must be one of {MODES}, got {self.mode!r}")
        dims = self.stage_dims()
        code_elems = self.conv2_filters * dims["pool2"] ** 2
        # the dimension-reduction claim: the classifier must see fewer
        # elements than the raw patch provides
        if code_elems >= self.patch_size**2:
            raise ArchitectureError(
                f"code map has {code_elems} elements, not less than the "
                f"{self.patch_size**2} input pixels; shrink the patch or the "
                f"filter count, or increase pooling"
            )

    def stage_dims(self) -> dict[str, int]:
        """Spatial side length after each encoder stage; raises if any < 1."""
        p, s = self.pool_window, self.pool_stride
        d = {"input": self.patch_size}
        d["conv1"] = self.patch_size - self.conv1_kernel + 1
        d["pool1"] = (d["conv1"] - p) // s + 1
        d["conv2"] = d["pool1"] - self.conv2_kernel + 1
        d["pool2"] = (d["conv2"] - p) // s + 1
        for name, v in d.items():
            if v < 1:
                raise ArchitectureError(
                    f"stage {name} collapses to {v} px for patch size "
                    f"{self.patch_size}"
                )
        # the decoder inverts these dims exactly: unpooling scatters back to
        # the recorded pre-pool shape and stride-1 deconv adds kernel-1
        return d

    @property
    def code_elements(self) -> int:
        return self.conv2_filters * self.stage_dims()["pool2"] ** 2

    def param_counts(self) -> dict[str, int]:
        c1 = self.conv1_filters * (self.conv1_kernel**2) + self.conv1_filters
        c2 = (self.conv2_filters * self.conv1_filters * self.conv2_kernel**2
              + self.conv2_filters)
        head = 2 * self.code_elements + 2
        dec = (self.conv1_filters * self.conv1_kernel**2 + 1
               + self.conv2_filters * self.conv1_filters * self.conv2_kernel**2
               + self.conv1_filters)
        counts = {"baseline": c1 + c2 + head, "decoder": dec}
        counts["enhanced"] = counts["baseline"] + counts["decoder"]
        return counts


@dataclass
class NetworkParams:
    """All layer weights/biases plus Adam optimizer state."""

    arch: Architecture
    conv1: ConvParams
    conv2: ConvParams
    deconv1: ConvParams
    deconv2: ConvParams
    head: DenseParams
    adam_t: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "conv1.w": self.conv1.w, "conv1.b": self.conv1.b,
            "conv2.w": self.conv2.w, "conv2.b": self.conv2.b,
            "deconv1.w": self.deconv1.w, "deconv1.b": self.deconv1.b,
            "deconv2.w": self.deconv2.w, "deconv2.b": self.deconv2.b,
            "head.w": self.head.w, "head.b": self.head.b,
        }

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        part, leaf = name.split(".")
        setattr(getattr(self, part), leaf, value)


def _glorot(rng: Rng, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    s = float(np.sqrt(6.0 / (fan_in + fan_out)))
    n = int(np.prod(shape))
    return rng.uniform_array(n, -s, s).reshape(shape)


def init_params(arch: Architecture, rng: Rng) -> NetworkParams:
    """Glorot-uniform weights; biases start slightly positive (keeps ReLU
    units alive against the early reconstruction-gradient shock), and the
    decoder output bias starts at the patch mid-intensity so matching the
    DC level does not slam the code toward zero."""
    k1, k2 = arch.conv1_kernel, arch.conv2_kernel
    f1, f2 = arch.conv1_filters, arch.conv2_filters
    conv1 = ConvParams(
        rand_uniform(rng.derive(1), (f1, 1, k1, k1),
                     *_glorot_bounds(k1 * k1, f1 * k1 * k1)),
        np.full(f1, 0.05),
    )
    conv2 = ConvParams(
        rand_uniform(rng.derive(2), (f2, f1, k2, k2),
                     *_glorot_bounds(f1 * k2 * k2, f2 * k2 * k2)),
        np.full(f2, 0.05),
    )
    # decoder kernels are free parameters with the encoder kernels' shapes
    deconv2 = ConvParams(
        rand_uniform(rng.derive(3), (f2, f1, k2, k2),
                     *_glorot_bounds(f2 * k2 * k2, f1 * k2 * k2)),
        np.full(f1, 0.05),
    )
    deconv1 = ConvParams(
        rand_uniform(rng.derive(4), (f1, 1, k1, k1),
                     *_glorot_bounds(f1 * k1 * k1, k1 * k1)),
        np.full(1, 0.45),
    )
    code = arch.code_elements
    head = DenseParams(
        _glorot(rng.derive(5), (2, code), code, 2),
        np.zeros(2),
    )
    params = NetworkParams(arch, conv1, conv2, deconv1, deconv2, head)
    for name, t in params.tensors().items():
        params.adam_m[name] = np.zeros_like(t)
        params.adam_v[name] = np.zeros_like(t)
    return params


def _glorot_bounds(fan_in: int, fan_out: int) -> tuple[float, float]:
    s = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return -s, s


@dataclass
class ForwardTrace:
    """Stage activations of one forward pass.

    Training mode keeps everything the backward pass needs (including the
    im2col matrices); inference mode keeps only the outputs.
    """

    mode: str
    train: bool
    x: np.ndarray | None = None
    a1: np.ndarray | None = None          # conv1 pre-activation, pass 1
    p1: np.ndarray | None = None          # pooled relu(a1)
    idx1: PoolIndices | None = None
    a2: np.ndarray | None = None          # conv2 pre-activation, pass 1
    z: np.ndarray | None = None           # code: pooled relu(a2)
    idx2: PoolIndices | None = None
    u2: np.ndarray | None = None          # unpooled code
    d2: np.ndarray | None = None          # deconv2 pre-activation
    u1: np.ndarray | None = None          # unpooled relu(d2)
    x_hat: np.ndarray | None = None       # reconstruction (linear output)
    b1: np.ndarray | None = None          # conv1 pre-activation, pass 2
    q1: np.ndarray | None = None
    jdx1: PoolIndices | None = None
    b2: np.ndarray | None = None
    zp: np.ndarray | None = None          # re-encoded feature map z'
    jdx2: PoolIndices | None = None
    feats: np.ndarray | None = None       # flattened classifier input
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    cols1: np.ndarray | None = None
    cols2: np.ndarray | None = None
    cols_b1: np.ndarray | None = None
    cols_b2: np.ndarray | None = None

    def stages(self) -> dict[str, np.ndarray]:
        """Named feature maps for activation dumps, in pipeline order."""
        out = {}
        for name in ("a1", "p1", "a2", "z", "u2", "d2", "u1", "x_hat",
                     "b1", "q1", "b2", "zp"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_input(x: np.ndarray, arch: Architecture) -> None:
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (arch.patch_size, arch.patch_size):
        raise ValueError(
            f"input must be (n, 1, {arch.patch_size}, {arch.patch_size}), "
            f"got {x.shape}"
        )


def _encode(x, params, train):
    """x -> conv1 -> relu -> pool -> conv2 -> relu -> pool."""
    arch = params.arch
    cols1, cols2 = ([], []) if train else (None, None)
    a1 = layers.conv_forward(x, params.conv1, 1, cols_out=cols1)
    p1, idx1 = layers.maxpool_forward(layers.relu(a1), arch.pool_window, arch.pool_stride)
    a2 = layers.conv_forward(p1, params.conv2, 1, cols_out=cols2)
    z, idx2 = layers.maxpool_forward(layers.relu(a2), arch.pool_window, arch.pool_stride)
    return a1, p1, idx1, a2, z, idx2, (cols1[0] if train else None), (cols2[0] if train else None)


def forward_baseline(x: np.ndarray, params: NetworkParams, train: bool = False) -> ForwardTrace:
    """Plain encoder + dense(2) + softmax classification pass."""
    _check_input(x, params.arch)
    a1, p1, idx1, a2, z, idx2, cols1, cols2 = _encode(x, params, train)
    feats = z.reshape(x.shape[0], -1)
    logits = layers.dense_forward(feats, params.head)
    probs = _softmax(logits)
    if not train:
        return ForwardTrace(mode="baseline", train=False, logits=logits, probs=probs)
    return ForwardTrace(
        mode="baseline", train=True, x=x, a1=a1, p1=p1, idx1=idx1, a2=a2,
        z=z, idx2=idx2, feats=feats, logits=logits, probs=probs,
        cols1=cols1, cols2=cols2,
    )


def forward_enhanced(
    x: np.ndarray,
    params: NetworkParams,
    train: bool = False,
    reconstruction_override: np.ndarray | None = None,
) -> ForwardTrace:
    """Encode, decode back to a reconstruction, re-encode, classify.

    Pass 1 produces the code z; unpooling (with the recorded argmax
    coordinates) and transposed convolutions produce the reconstruction
    x_hat with the input's shape; pass 2 pushes x_hat through the same
    encoder weights, and the resulting feature map z' feeds the classifier.

    `reconstruction_override` substitutes a given tensor for x_hat (a
    perfect-inverse surrogate used by tests); shapes must match.
    """
    _check_input(x, params.arch)
    a1, p1, idx1, a2, z, idx2, cols1, cols2 = _encode(x, params, train)

    u2 = layers.unpool(z, idx2, a2.shape)
    d2 = layers.deconv_forward(u2, params.deconv2)
    u1 = layers.unpool(layers.relu(d2), idx1, a1.shape)
    x_hat = layers.deconv_forward(u1, params.deconv1)
    if x_hat.shape != x.shape:
        raise ArchitectureError(
            f"decoder produced {x_hat.shape}, expected {x.shape}"
        )
    if reconstruction_override is not None:
        if reconstruction_override.shape != x.shape:
            raise ValueError("reconstruction override must match the input shape")
        x_hat = reconstruction_override

    colsb1, colsb2 = ([], []) if train else (None, None)
    b1 = layers.conv_forward(x_hat, params.conv1, 1, cols_out=colsb1)
    q1, jdx1 = layers.maxpool_forward(layers.relu(b1), params.arch.pool_window,
                                      params.arch.pool_stride)
    b2 = layers.conv_forward(q1, params.conv2, 1, cols_out=colsb2)
    zp, jdx2 = layers.maxpool_forward(layers.relu(b2), params.arch.pool_window,
                                      params.arch.pool_stride)
    feats = zp.reshape(x.shape[0], -1)
    logits = layers.dense_forward(feats, params.head)
    probs = _softmax(logits)
    if not train:
        return ForwardTrace(mode="enhanced", train=False, logits=logits,
                            probs=probs, x_hat=x_hat)
    return ForwardTrace(
        mode="enhanced", train=True, x=x, a1=a1, p1=p1, idx1=idx1, a2=a2,
        z=z, idx2=idx2, u2=u2, d2=d2, u1=u1, x_hat=x_hat, b1=b1, q1=q1,
        jdx1=jdx1, b2=b2, zp=zp, jdx2=jdx2, feats=feats, logits=logits,
        probs=probs, cols1=cols1, cols2=cols2,
        cols_b1=colsb1[0], cols_b2=colsb2[0],
    )


def forward(x: np.ndarray, params: NetworkParams, train: bool = False) -> ForwardTrace:
    if params.arch.mode == "enhanced":
        return forward_enhanced(x, params, train)
    return forward_baseline(x, params, train)


def predict(x: np.ndarray, params: NetworkParams) -> np.ndarray:
    """Per-patch probability of class 1 (carcinoma); inference mode."""
    return forward(x, params, train=False).probs[:, 1].copy()


# --- checkpoint format -----------------------------------------------------
# magic (8B) | version u32 LE | descriptor length u32 LE | descriptor JSON |
# concatenated float64 LE blobs in manifest order | CRC32 u32 LE over all
# preceding bytes.

def save_checkpoint(params: NetworkParams, path: str) -> None:
    names = sorted(params.tensors().keys())
    tensors = params.tensors()
    manifest = []
    blobs = []
    for name in names:
        t = tensors[name]
        manifest.append([name, list(t.shape)])
        blobs.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    for kind in ("m", "v"):
        state = params.adam_m if kind == "m" else params.adam_v
        for name in names:
            t = state[name]
            manifest.append([f"adam_{kind}.{name}", list(t.shape)])
            blobs.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    desc = {
        "arch": asdict(params.arch),
        "adam_t": params.adam_t,
        "tensors": manifest,
    }
    desc_bytes = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()
    body = (
        _CKPT_MAGIC
        + _CKPT_VERSION.to_bytes(4, "little")
        + len(desc_bytes).to_bytes(4, "little")
        + desc_bytes
        + b"".join(blobs)
    )
    crc = zlib.crc32(body).to_bytes(4, "little")
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(body + crc)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str) -> NetworkParams:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < len(_CKPT_MAGIC) + 8 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    if zlib.crc32(raw[:-4]) != int.from_bytes(raw[-4:], "little"):
        raise CheckpointChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = len(_CKPT_MAGIC)
    version = int.from_bytes(raw[off : off + 4], "little")
    if version != _CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, expected {_CKPT_VERSION}"
        )
    off += 4
    dlen = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    try:
        desc = json.loads(raw[off : off + dlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: bad descriptor: {e}") from e
    off += dlen
    arrays = {}
    for name, shape in desc["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw) - 4:
            raise CheckpointChecksumError(f"{path}: blob for {name} truncated")
        arrays[name] = np.frombuffer(
            raw[off : off + nbytes], dtype="<f8"
        ).reshape(shape).astype(np.float64)
        off += nbytes
    arch = Architecture(**desc["arch"])
    params = NetworkParams(
        arch,
        ConvParams(arrays["conv1.w"], arrays["conv1.b"]),
        ConvParams(arrays["conv2.w"], arrays["conv2.b"]),
        ConvParams(arrays["deconv1.w"], arrays["deconv1.b"]),
        ConvParams(arrays["deconv2.w"], arrays["deconv2.b"]),
        DenseParams(arrays["head.w"], arrays["head.b"]),
        adam_t=int(desc["adam_t"]),
    )
    for name in params.tensors():
        params.adam_m[name] = arrays[f"adam_m.{name}"]
        params.adam_v[name] = arrays[f"adam_v.{name}"]
    return params
