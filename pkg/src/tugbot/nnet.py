"""Minimal layer-based network library: dense, 1-D convolution, ELU,
reverse-mode gradients, Adam, and a portable binary checkpoint format.

Everything is float64. Forward passes are pure; gradients require a
forward call with retain=True. Parameters are named "<layer_index>.<name>"
inside a network and "<net_name>/<param_name>" inside a checkpoint.

Checkpoint byte layout (version 1, little-endian):
    magic b"TBCK" | u32 version | u64 header_len | header JSON (utf-8)
    | u64 n_blobs | repeated blobs sorted by name:
        u16 name_len | name utf-8 | u8 ndim | u64 dims... | f64 data
The header JSON is {"meta": {...}, "nets": {name: arch}} with sorted keys,
where arch is either a layer-descriptor list or {"kind": "tensor", ...}.
Any language can read this layout; see dump_checkpoint_text for a
debugging dump.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(Exception):
    """Input/parameter shape mismatch; message names the offending layer."""


class GradientError(Exception):
    """Backward called without retained intermediates, or non-finite grads."""


class CheckpointError(Exception):
    """Corrupt, truncated, version- or architecture-mismatched checkpoint."""


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 w_scale: float | None = None):
        self.n_in = n_in
        self.n_out = n_out
        scale = np.sqrt(2.0 / n_in) if w_scale is None else w_scale
        if rng is None:
            self.W = np.zeros((n_in, n_out))
        else:
            self.W = rng.standard_normal((n_in, n_out)) * scale
        self.b = np.zeros(n_out)
        self._x = None

    def descriptor(self) -> dict:
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x, retain):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense({self.n_in}->{self.n_out}): got input {x.shape}")
        if retain:
            self._x = x
        return x @ self.W + self.b

    def backward(self, g):
        x = self._x
        grads = {"W": x.T @ g, "b": g.sum(axis=0)}
        return g @ self.W.T, grads


class Conv1D:
    """1-D convolution (cross-correlation), stride 1, no padding."""

    kind = "conv1d"

    def __init__(self, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator | None = None):
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        scale = np.sqrt(2.0 / (c_in * kernel))
        if rng is None:
            self.W = np.zeros((c_out, c_in, kernel))
        else:
            self.W = rng.standard_normal((c_out, c_in, kernel)) * scale
        self.b = np.zeros(c_out)
        self._win = None
        self._in_len = None

    def descriptor(self) -> dict:
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out,
                "kernel": self.kernel}

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x, retain):
        if x.ndim != 3 or x.shape[1] != self.c_in or x.shape[2] < self.kernel:
            raise ShapeError(
                f"conv1d({self.c_in}->{self.c_out},k{self.kernel}): got input {x.shape}"
            )
        B, ci, L = x.shape
        k = self.kernel
        lp = L - k + 1
        win = sliding_window_view(x, k, axis=2)  # (B, c_in, L', k)
        cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * lp, ci * k)
        if retain:
            self._win = cols
            self._in_len = L
        y = cols @ self.W.reshape(self.c_out, ci * k).T
        return y.reshape(B, lp, self.c_out).transpose(0, 2, 1) + self.b[None, :, None]

    def backward(self, g):
        B, co, lp = g.shape
        k = self.kernel
        ci = self.c_in
        gmat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * lp, co)
        dW = (gmat.T @ self._win).reshape(co, ci, k)
        db = g.sum(axis=(0, 2))
        # full correlation of g with the flipped kernel gives dx
        gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
        gwin = sliding_window_view(gpad, k, axis=2)  # (B, c_out, L_in, k)
        L = self._in_len
        gcols = np.ascontiguousarray(gwin.transpose(0, 2, 1, 3)).reshape(B * L, co * k)
        wflip = np.ascontiguousarray(self.W[:, :, ::-1].transpose(0, 2, 1)).reshape(co * k, ci)
        dx = (gcols @ wflip).reshape(B, L, ci).transpose(0, 2, 1)
        return dx, {"W": dW, "b": db}


class Elu:
    kind = "elu"

    def __init__(self):
        self._y = None
        self._mask = None

    def descriptor(self) -> dict:
        return {"kind": self.kind}

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, retain):
        mask = x > 0
        y = np.where(mask, x, np.expm1(np.minimum(x, 0.0)))
        if retain:
            self._y = y
            self._mask = mask
        return y

    def backward(self, g):
        dy = np.where(self._mask, 1.0, self._y + 1.0)
        return g * dy, {}


class Flatten:
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def descriptor(self) -> dict:
        return {"kind": self.kind}

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, retain):
        if retain:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape), {}


_LAYER_KINDS = {"dense": Dense, "conv1d": Conv1D, "elu": Elu, "flatten": Flatten}


def layer_from_descriptor(desc: dict):
    kind = desc.get("kind")
    if kind == "dense":
        return Dense(desc["n_in"], desc["n_out"])
    if kind == "conv1d":
        return Conv1D(desc["c_in"], desc["c_out"], desc["kernel"])
    if kind == "elu":
        return Elu()
    if kind == "flatten":
        return Flatten()
    raise CheckpointError(f"unknown layer kind {kind!r}")


class Network:
    """Ordered layer list with named parameters and reverse-mode gradients."""

    def __init__(self, layers: list):
        self.layers = layers
        self._retained = False

    def descriptor(self) -> list[dict]:
        return [lay.descriptor() for lay in self.layers]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, lay in enumerate(self.layers):
            for name, arr in lay.params().items():
                out[f"{i}.{name}"] = arr
        return out

    def set_param(self, name: str, value: np.ndarray):
        idx, pname = name.split(".", 1)
        lay = self.layers[int(idx)]
        cur = lay.params()[pname]
        if cur.shape != value.shape:
            raise CheckpointError(
                f"parameter {name}: expected shape {cur.shape}, got {value.shape}"
            )
        setattr(lay, pname, np.array(value, dtype=np.float64))

    @property
    def n_params(self) -> int:
        return sum(arr.size for arr in self.params().values())

    def forward(self, x, retain: bool = False) -> np.ndarray:
        y = np.asarray(x, dtype=np.float64)
        for lay in self.layers:
            y = lay.forward(y, retain)
        self._retained = retain
        return y

    def backward(self, g_out) -> dict[str, np.ndarray]:
        """Gradients of every parameter given dLoss/dOutput; also returns
        the input gradient under key "__input__"."""
        if not self._retained:
            raise GradientError("backward() requires a forward(retain=True) pass")
        g = np.asarray(g_out, dtype=np.float64)
        grads = {}
        for i in reversed(range(len(self.layers))):
            g, layer_grads = self.layers[i].backward(g)
            for name, arr in layer_grads.items():
                grads[f"{i}.{name}"] = arr
        grads["__input__"] = g
        return grads


def mlp(sizes: list[int], rng: np.random.Generator, out_scale: float = 1.0) -> Network:
    """ELU MLP; the output layer is linear with optionally shrunk init."""
    layers = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        w_scale = out_scale * np.sqrt(2.0 / sizes[i]) if last else None
        layers.append(Dense(sizes[i], sizes[i + 1], rng, w_scale=w_scale))
        if not last:
            layers.append(Elu())
    return Network(layers)


def conv1d_regressor(c_in: int, length: int, channels: int, kernel: int,
                     n_out: int, rng: np.random.Generator) -> Network:
    """Three conv1d layers, ELU between, flatten, one dense head."""
    layers = [
        Conv1D(c_in, channels, kernel, rng), Elu(),
        Conv1D(channels, channels, kernel, rng), Elu(),
        Conv1D(channels, channels, kernel, rng), Elu(),
        Flatten(),
    ]
    out_len = length - 3 * (kernel - 1)
    if out_len <= 0:
        raise ShapeError(f"conv1d_regressor: length {length} too short for 3 k={kernel} layers")
    layers.append(Dense(channels * out_len, n_out, rng))
    return Network(layers)


class Adam:
    """Standard Adam with bias correction; state is per named parameter."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(self.params[name])
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# -- checkpoints -------------------------------------------------------------

MAGIC = b"TBCK"
CKPT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(nets: dict, meta: dict, path: str | Path):
    """Write networks and free tensors; atomic (tmp file + rename)."""
    path = Path(path)
    arch = {}
    blobs = {}
    for name, net in nets.items():
        if isinstance(net, Network):
            arch[name] = net.descriptor()
            for pname, arr in net.params().items():
                blobs[f"{name}/{pname}"] = arr
        else:
            arr = np.asarray(net, dtype=np.float64)
            arch[name] = {"kind": "tensor", "shape": list(arr.shape)}
            blobs[f"{name}/data"] = arr
    header = _canonical_json({"meta": meta, "nets": arch})
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(struct.pack("<Q", len(blobs)))
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.astype("<f8").tobytes())
    tmp.replace(path)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str | Path, expected_config_hash: str | None = None):
    """Rebuild networks from a checkpoint.

    Returns (nets, meta, flags). flags["config_hash_mismatch"] is set (and a
    warning logged) when expected_config_hash differs from the stored one;
    the load still proceeds.
    """
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: version {version}, expected {CKPT_VERSION}")
        (hlen,) = struct.unpack("<Q", _read_exact(f, 8, "header length"))
        header = json.loads(_read_exact(f, hlen, "header"))
        (n_blobs,) = struct.unpack("<Q", _read_exact(f, 8, "blob count"))
        blobs = {}
        for _ in range(n_blobs):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "blob name length"))
            name = _read_exact(f, nlen, "blob name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "blob ndim"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(f, 8, f"{name} dims"))[0]
                for _ in range(ndim)
            )
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 8 * count, f"{name} data"), dtype="<f8")
            blobs[name] = data.reshape(shape).copy()

    meta = header["meta"]
    nets = {}
    for name, arch in header["nets"].items():
        if isinstance(arch, dict) and arch.get("kind") == "tensor":
            blob = blobs.get(f"{name}/data")
            if blob is None:
                raise CheckpointError(f"missing blob {name}/data")
            if list(blob.shape) != list(arch["shape"]):
                raise CheckpointError(
                    f"blob {name}/data: shape {list(blob.shape)} != declared {arch['shape']}"
                )
            nets[name] = blob
        else:
            net = Network([layer_from_descriptor(d) for d in arch])
            for pname in net.params():
                blob = blobs.get(f"{name}/{pname}")
                if blob is None:
                    raise CheckpointError(f"missing blob {name}/{pname}")
                net.set_param(pname, blob)
            nets[name] = net

    flags = {"config_hash_mismatch": False}
    if expected_config_hash is not None and meta.get("config_hash") not in (None, expected_config_hash):
        import logging

        logging.getLogger(__name__).warning(
            "checkpoint %s config hash %s != expected %s",
            path, meta.get("config_hash"), expected_config_hash,
        )
        flags["config_hash_mismatch"] = True
    return nets, meta, flags


def dump_checkpoint_text(path: str | Path) -> str:
    """Human-readable summary of a checkpoint (debugging aid)."""
    nets, meta, _ = load_checkpoint(path)
    lines = [f"checkpoint {path}", f"meta: {json.dumps(meta, sort_keys=True)}"]
    for name in sorted(nets):
        net = nets[name]
        if isinstance(net, Network):
            for pname, arr in sorted(net.params().items()):
                lines.append(
                    f"  {name}/{pname} shape={arr.shape} mean={arr.mean():+.6e} "
                    f"std={arr.std():.6e}"
                )
        else:
            lines.append(f"  {name} tensor shape={net.shape} values={np.array2string(net, precision=6)}")
    return "\n".join(lines)
