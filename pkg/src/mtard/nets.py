"""Small feed-forward networks with exact reverse-mode gradients.

A network is described by a :class:`NetworkSpec` (layer list plus input
shape) and carried around as an immutable :class:`NetworkParams` snapshot.
``forward`` optionally returns a cache that ``backward`` consumes to produce
gradients for every parameter and for the input batch.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import CheckpointError, InvalidInputError, StaleCacheError

ROLES = ("student", "clean-teacher", "robust-teacher")
LAYER_KINDS = ("dense", "conv", "relu", "flatten")

CHECKPOINT_MAGIC = b"MTRD"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0  # dense output size or conv output channels
    kernel: int = 0

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind in ("dense", "conv"):
            d["units"] = self.units
        if self.kind == "conv":
            d["kernel"] = self.kernel
        return d


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        self.layer_shapes()

    def layer_shapes(self):
        """Input/output shape of every layer; raises on incompatible dims."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise InvalidInputError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind == "dense":
                if len(shape) != 1:
                    raise InvalidInputError(f"layer {i}: dense needs flat input, got {shape}")
                out = (layer.units,)
            elif layer.kind == "conv":
                if len(shape) != 3:
                    raise InvalidInputError(f"layer {i}: conv needs (C, H, W) input, got {shape}")
                c, h, w = shape
                k = layer.kernel
                if k < 1 or k > h or k > w:
                    raise InvalidInputError(f"layer {i}: kernel {k} does not fit {shape}")
                out = (layer.units, h - k + 1, w - k + 1)
            elif layer.kind == "flatten":
                out = (int(np.prod(shape)),)
            else:
                out = shape
            shapes.append((shape, out))
            shape = out
        if shape != (self.n_classes,):
            raise InvalidInputError(f"network output {shape} does not match {self.n_classes} classes")
        return shapes

    @property
    def n_features(self):
        return int(np.prod(self.input_shape))

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**l) for l in d["layers"]), int(d["n_classes"]))

    def fingerprint(self):
        """8-byte digest of the canonical spec."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()[:8]


def mlp_spec(n_features, hidden, n_classes):
    """Dense ReLU network ``n_features -> hidden... -> n_classes``."""
    layers = []
    for h in hidden:
        layers += [LayerSpec("dense", h), LayerSpec("relu")]
    layers.append(LayerSpec("dense", n_classes))
    return NetworkSpec((n_features,), tuple(layers), n_classes)


def conv_spec(input_shape, channels, n_classes, kernel=3):
    """``conv-relu-...-flatten-dense`` network for (C, H, W) inputs."""
    layers = []
    for c in channels:
        layers += [LayerSpec("conv", c, kernel), LayerSpec("relu")]
    layers += [LayerSpec("flatten"), LayerSpec("dense", n_classes)]
    return NetworkSpec(tuple(input_shape), tuple(layers), n_classes)


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Weights of one network. ``tensors[i]`` is ``(W, b)`` for parametric
    layer ``i`` and ``None`` for activations/flatten."""

    spec: NetworkSpec
    tensors: tuple
    role: str = "student"

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidInputError(f"unknown role {self.role!r}")

    @property
    def dtype(self):
        for t in self.tensors:
            if t is not None:
                return t[0].dtype
        return np.dtype(np.float64)

    def arrays(self):
        """Flat list of parameter arrays in layer order (W then b)."""
        out = []
        for t in self.tensors:
            if t is not None:
                out.extend(t)
        return out

    def with_arrays(self, arrays, role=None):
        it = iter(arrays)
        tensors = tuple(None if t is None else (next(it), next(it)) for t in self.tensors)
        return NetworkParams(self.spec, tensors, self.role if role is None else role)

    def with_role(self, role):
        return NetworkParams(self.spec, self.tensors, role)

    def astype(self, dtype):
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def zeros_like(self):
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def digest(self):
        """Content hash over spec, role and raw parameter bytes."""
        h = hashlib.sha256(self.spec.fingerprint() + self.role.encode())
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def equals(self, other):
        if self.spec != other.spec or self.role != other.role:
            return False
        return all(a.dtype == b.dtype and np.array_equal(a, b)
                   for a, b in zip(self.arrays(), other.arrays()))

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays())


def init_params(spec, seed, role="student", dtype=np.float64):
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(seed)
    tensors = []
    for layer, (in_shape, out_shape) in zip(spec.layers, spec.layer_shapes()):
        if layer.kind == "dense":
            fan_in = in_shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, layer.units))
            b = rng.uniform(-bound, bound, size=layer.units)
            tensors.append((W.astype(dtype), b.astype(dtype)))
        elif layer.kind == "conv":
            c_in = in_shape[0]
            fan_in = c_in * layer.kernel ** 2
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(layer.units, c_in, layer.kernel, layer.kernel))
            b = rng.uniform(-bound, bound, size=layer.units)
            tensors.append((W.astype(dtype), b.astype(dtype)))
        else:
            tensors.append(None)
    return NetworkParams(spec, tuple(tensors), role)


@dataclass
class ForwardCache:
    params: NetworkParams
    batch: np.ndarray
    activations: list = field(default_factory=list)


def _reshape_batch(spec, batch):
    x = np.asarray(batch)
    if x.ndim == len(spec.input_shape) + 1 and x.shape[1:] == spec.input_shape:
        return x
    if x.ndim == 2 and x.shape[1] == spec.n_features:
        return x.reshape((x.shape[0],) + spec.input_shape)
    raise InvalidInputError(f"batch shape {x.shape} does not match input shape {spec.input_shape}")


def _conv_forward(x, W, b):
    k = W.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, H', W', k, k
    return np.einsum("nchwij,ocij->nohw", win, W, optimize=True) + b[None, :, None, None]


def _conv_backward(x, W, g):
    k = W.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    gW = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
    gb = g.sum(axis=(0, 2, 3))
    gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    gwin = sliding_window_view(gpad, (k, k), axis=(2, 3))
    gx = np.einsum("nohwij,ocij->nchw", gwin, W[:, :, ::-1, ::-1], optimize=True)
    return gW, gb, gx


def forward(params, batch, return_cache=False):
    """Logits of shape ``(N, C)``. The input is never modified."""
    spec = params.spec
    x = _reshape_batch(spec, batch).astype(params.dtype, copy=False)
    acts = [x]
    h = x
    for layer, t in zip(spec.layers, params.tensors):
        if layer.kind == "dense":
            h = h @ t[0] + t[1]
        elif layer.kind == "conv":
            h = _conv_forward(h, *t)
        elif layer.kind == "relu":
            h = np.maximum(h, 0)
        else:
            h = h.reshape(h.shape[0], -1)
        acts.append(h)
    if return_cache:
        return h, ForwardCache(params, np.asarray(batch), acts)
    return h


def backward(params, batch, upstream, cache=None):
    """Reverse-mode gradients of ``sum(upstream * logits)``.

    Returns ``(param_grads, input_grads)``; ``param_grads`` is a
    NetworkParams-shaped snapshot and ``input_grads`` has the shape of
    ``batch``. A ``cache`` from a forward pass over different params or a
    different batch raises StaleCacheError.
    """
    if cache is None:
        _, cache = forward(params, batch, return_cache=True)
    elif cache.params is not params or not (
            cache.batch is batch or (cache.batch.shape == np.shape(batch)
                                     and np.array_equal(cache.batch, batch))):
        raise StaleCacheError("forward cache was built for different params or batch")
    spec = params.spec
    g = np.asarray(upstream, dtype=params.dtype)
    if g.shape != cache.activations[-1].shape:
        raise InvalidInputError(f"upstream shape {g.shape} != logits shape {cache.activations[-1].shape}")
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, t = spec.layers[i], params.tensors[i]
        x_in = cache.activations[i]
        if layer.kind == "dense":
            grads[i] = (x_in.T @ g, g.sum(axis=0))
            g = g @ t[0].T
        elif layer.kind == "conv":
            gW, gb, g = _conv_backward(x_in, t[0], g)
            grads[i] = (gW, gb)
        elif layer.kind == "relu":
            g = g * (x_in > 0)
        else:
            g = g.reshape(x_in.shape)
    param_grads = NetworkParams(spec, tuple(grads), params.role)
    return param_grads, g.reshape(np.shape(batch))


def predict_logits(params, X, batch_size=1024):
    """Logits for a possibly large ``X``, evaluated in chunks."""
    X = np.asarray(X)
    if len(X) == 0:
        return np.zeros((0, params.spec.n_classes), dtype=params.dtype)
    return np.concatenate([forward(params, X[i:i + batch_size]) for i in range(0, len(X), batch_size)])


# checkpoint format (little-endian):
#   "MTRD" | u16 version | u8 role | 8-byte spec fingerprint
#   | u32 spec-json length | spec json | u16 tensor count
#   | per tensor: u8 dtype bytes (4|8), u8 ndim, ndim x u32 dims, raw payload


def dump_checkpoint_bytes(params):
    spec_json = json.dumps(params.spec.to_dict(), sort_keys=True).encode()
    arrays = params.arrays()
    out = [CHECKPOINT_MAGIC,
           struct.pack("<HB", CHECKPOINT_VERSION, ROLES.index(params.role)),
           params.spec.fingerprint(),
           struct.pack("<I", len(spec_json)), spec_json,
           struct.pack("<H", len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
        out.append(struct.pack("<BB", _DTYPE_CODES[a.dtype], a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def save_checkpoint(params, path):
    with open(path, "wb") as f:
        f.write(dump_checkpoint_bytes(params))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint_bytes(buf, spec=None, role=None):
    r = _Reader(buf)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, role_idx = r.unpack("<HB")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if role_idx >= len(ROLES):
        raise CheckpointError(f"unknown role tag {role_idx}")
    fp = r.take(8)
    (n_json,) = r.unpack("<I")
    try:
        stored_spec = NetworkSpec.from_dict(json.loads(r.take(n_json).decode()))
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupt spec header: {e}") from e
    if stored_spec.fingerprint() != fp:
        raise CheckpointError("spec header does not match stored fingerprint")
    if spec is not None and spec.fingerprint() != fp:
        raise CheckpointError("checkpoint fingerprint does not match the expected network spec")
    stored_role = ROLES[role_idx]
    if role is not None and role != stored_role:
        raise CheckpointError(f"checkpoint role is {stored_role!r}, expected {role!r}")
    (n_arrays,) = r.unpack("<H")
    arrays = []
    for _ in range(n_arrays):
        code, ndim = r.unpack("<BB")
        if code not in (4, 8):
            raise CheckpointError(f"unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dtype = np.dtype("<f4" if code == 4 else "<f8")
        n = int(np.prod(shape)) * dtype.itemsize
        arrays.append(np.frombuffer(r.take(n), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("=")))
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    template = init_params(stored_spec, 0)
    expected = [a.shape for a in template.arrays()]
    if [a.shape for a in arrays] != expected:
        raise CheckpointError("tensor shapes do not match the network architecture")
    return template.with_arrays(arrays, role=stored_role)


def load_checkpoint(path, spec=None, role=None):
    """Load a checkpoint, optionally verifying spec fingerprint and role."""
    with open(path, "rb") as f:
        return parse_checkpoint_bytes(f.read(), spec=spec, role=role)
