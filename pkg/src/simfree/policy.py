"""Feed-forward feedback controls u(t, x) with hand-written reverse mode.

Only per-step derivatives are ever needed: ``vᵀ ∂θ u(t, x)`` for the
simulation-free estimator and additionally ``vᵀ ∂x u(t, x)`` for the pathwise
baseline.  A forward pass returns a small tape (the layer activations of that
one evaluation) which a single reverse sweep consumes.

Inputs are batches of states ``x`` with shape ``(n, d)`` evaluated at a common
time ``t``.  Time features are computed once per call as a single row and
broadcast against the state rows, so time branches cost O(1) per step rather
than O(n).
"""

import json
import struct

import numpy as np

from . import kernels

CHECKPOINT_MAGIC = b"SFPV"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# flat parameter storage
# --------------------------------------------------------------------------

class ParamLayout:
    """Ordered registry ``name -> (offset, shape)`` over one flat vector."""

    def __init__(self, entries=None):
        self.entries = {}
        self.size = 0
        for name, shape in entries or []:
            self.add(name, shape)

    def add(self, name, shape):
        if name in self.entries:
            raise ValueError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        self.entries[name] = (self.size, shape)
        self.size += int(np.prod(shape, dtype=np.int64))
        return self.entries[name][0]

    def slice(self, name):
        off, shape = self.entries[name]
        return off, off + int(np.prod(shape, dtype=np.int64)), shape

    def to_list(self):
        return [[name, list(shape)] for name, (_, shape) in self.entries.items()]

    @classmethod
    def from_list(cls, items):
        return cls([(name, tuple(shape)) for name, shape in items])

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.to_list() == other.to_list()

    def diff(self, other):
        """Human-readable description of the first layout difference."""
        a, b = self.to_list(), other.to_list()
        for i, (x, y) in enumerate(zip(a, b)):
            if x != y:
                return f"entry {i}: {x[0]}{tuple(x[1])} vs {y[0]}{tuple(y[1])}"
        if len(a) != len(b):
            return f"{len(a)} vs {len(b)} tensors"
        return "identical"


class ParamVector:
    def __init__(self, layout, data=None):
        self.layout = layout
        if data is None:
            data = np.zeros(layout.size)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (layout.size,):
            raise ValueError(f"parameter vector has length {data.shape}, layout needs {layout.size}")
        self.data = data

    def view(self, name):
        lo, hi, shape = self.layout.slice(name)
        return self.data[lo:hi].reshape(shape)

    def copy(self):
        return ParamVector(self.layout, self.data.copy())

    def __len__(self):
        return self.layout.size


class _Grad:
    """Gradient buffer: flat ``(|θ|,)`` or per-row ``(n, |θ|)``."""

    def __init__(self, layout, data):
        self.layout = layout
        self.data = data
        self.per_sample = data.ndim == 2

    def view(self, name):
        lo, hi, shape = self.layout.slice(name)
        if self.per_sample:
            return self.data[:, lo:hi].reshape((self.data.shape[0],) + shape)
        return self.data[lo:hi].reshape(shape)


def save_checkpoint(path, params, arch=None):
    header = json.dumps({"layout": params.layout.to_list(), "arch": arch or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", params.layout.size))
        fh.write(np.ascontiguousarray(params.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(ParamVector, arch dict)``; raises :class:`CheckpointError` on corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12 + hlen
    if len(blob) < pos + 8:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        meta = json.loads(blob[12:pos].decode("utf-8"))
        layout = ParamLayout.from_list(meta["layout"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from exc
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if count != layout.size or len(blob) != pos + 8 * count:
        raise CheckpointError(
            f"{path}: truncated or corrupt checkpoint (expected {layout.size} values, "
            f"file holds {(len(blob) - pos) // 8})")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return ParamVector(layout, data), meta.get("arch", {})


def export_text(path, params):
    with open(path, "w") as fh:
        for name, (off, shape) in params.layout.entries.items():
            vals = " ".join(repr(float(v)) for v in params.view(name).ravel())
            fh.write(f"{name} {off} {'x'.join(map(str, shape)) or 'scalar'}\n{vals}\n")


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def _tanh_grad(a):
    return 1.0 - a * a


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(a):
    return (a > 0.0).astype(a.dtype)


ACTIVATIONS = {"tanh": (np.tanh, _tanh_grad), "relu": (_relu, _relu_grad)}


def fourier_encode(t, num_freqs, T=1.0):
    """``[sin(2π f t/T) for f=1..F] + [cos(2π f t/T) for f=1..F]``."""
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    ang = 2.0 * np.pi * np.arange(1, num_freqs + 1) * (t / T)
    return np.concatenate([np.sin(ang), np.cos(ang)])


class _Dense:
    """Affine map of one or more inputs: ``z = b + Σ_j inputs[j] @ W_jᵀ``."""

    def __init__(self, name, in_dims, out, bias=True):
        self.name = name
        self.in_dims = list(in_dims)
        self.out = out
        self.bias = bias
        self.w_names = [f"{name}.W{j}" for j in range(len(in_dims))]
        self.b_name = f"{name}.b"

    def register(self, layout):
        for wn, k in zip(self.w_names, self.in_dims):
            layout.add(wn, (self.out, k))
        if self.bias:
            layout.add(self.b_name, (self.out,))

    def init(self, params, rng, scheme, zero):
        fan_in = sum(self.in_dims)
        bound = 1.0 / np.sqrt(fan_in) if scheme == "torch" else np.sqrt(3.0 / fan_in)
        for wn in self.w_names:
            w = params.view(wn)
            w[...] = 0.0 if zero else rng.uniform(-bound, bound, size=w.shape)
        if self.bias:
            b = params.view(self.b_name)
            b[...] = 0.0 if zero else rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=b.shape)

    def forward(self, params, inputs):
        z = None
        for wn, inp in zip(self.w_names, inputs):
            term = inp @ params.view(wn).T
            z = term if z is None else z + term
        if self.bias:
            z = z + params.view(self.b_name)
        return z

    def backward(self, params, inputs, dz, grad, need_inputs):
        rows = dz.shape[0]
        per_sample = grad.per_sample
        dsum = None
        dins = []
        for wn, inp, need in zip(self.w_names, inputs, need_inputs):
            shared = inp.shape[0] == 1 and rows > 1
            gW = grad.view(wn)
            if per_sample:
                kernels.accumulate_outer(gW, dz, inp)
            elif shared:
                if dsum is None:
                    dsum = dz.sum(axis=0, keepdims=True)
                gW += dsum.T @ inp
            else:
                gW += dz.T @ inp
            if need:
                W = params.view(wn)
                if shared and not per_sample:
                    if dsum is None:
                        dsum = dz.sum(axis=0, keepdims=True)
                    dins.append(dsum @ W)
                else:
                    dins.append(dz @ W)
            else:
                dins.append(None)
        if self.bias:
            gb = grad.view(self.b_name)
            if per_sample:
                gb += dz
            else:
                gb += dz.sum(axis=0)
        return dins


class _Mlp:
    """Dense layers with an activation after every layer but (optionally) the last."""

    def __init__(self, name, in_dims, widths, out, activation="tanh", final_act=False, bias=True):
        dims = list(widths) + [out]
        self.layers = []
        ins = list(in_dims)
        for i, w in enumerate(dims):
            self.layers.append(_Dense(f"{name}.{i}", ins, w, bias=bias))
            ins = [w]
        self.act, self.act_grad = ACTIVATIONS[activation]
        self.final_act = final_act

    def register(self, layout):
        for layer in self.layers:
            layer.register(layout)

    def init(self, params, rng, scheme, zero_last):
        for i, layer in enumerate(self.layers):
            layer.init(params, rng, scheme, zero_last and i == len(self.layers) - 1)

    def _activated(self, i):
        return i < len(self.layers) - 1 or self.final_act

    def forward(self, params, inputs):
        tape = []
        cur = inputs
        a = None
        for i, layer in enumerate(self.layers):
            z = layer.forward(params, cur)
            a = self.act(z) if self._activated(i) else z
            tape.append((cur, a))
            cur = [a]
        return a, tape

    def backward(self, params, tape, dout, grad, need_inputs):
        d = dout
        n = len(self.layers)
        for i in range(n - 1, -1, -1):
            inputs, a = tape[i]
            if self._activated(i):
                d = d * self.act_grad(a)
            need = need_inputs if i == 0 else [True]
            dins = self.layers[i].backward(params, inputs, d, grad, need)
            if i == 0:
                return dins
            d = dins[0]


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

class Policy:
    """Common evaluation and VJP plumbing; subclasses define ``_forward``/``_backward``."""

    kind = "base"

    def _finish(self):
        self.params = ParamVector(self.layout)

    @property
    def num_params(self):
        return self.layout.size

    def set_params(self, params):
        if not isinstance(params, ParamVector):
            params = ParamVector(self.layout, params)
        if params.layout != self.layout:
            raise CheckpointError(f"parameter layout mismatch: {params.layout.diff(self.layout)}")
        self.params = params

    def _time_row(self, t):
        parts = []
        if self.time_input:
            parts.append([t / self.horizon])
        if self.num_freqs:
            parts.append(fourier_encode(t, self.num_freqs, self.horizon))
        return np.concatenate(parts)[None, :] if parts else None

    def forward(self, t, x):
        x = np.asarray(x, dtype=float)
        u, _ = self._forward(t, np.atleast_2d(x))
        return u[0] if x.ndim == 1 else u

    def forward_tape(self, t, x):
        return self._forward(t, np.atleast_2d(np.asarray(x, dtype=float)))

    def vjp_tape(self, tape, v, out=None, per_sample=False, want_input=False):
        """Reverse sweep of one recorded step.

        Returns ``(gθ, gx)`` where ``gθ = Σ_rows vᵀ∂θu`` (shape ``(|θ|,)``) or the
        per-row gradients ``(n, |θ|)`` when ``per_sample``; gradients are added
        into ``out`` when given.  ``gx`` is ``vᵀ∂x u`` per row or ``None``.
        """
        v = np.atleast_2d(np.asarray(v, dtype=float))
        if out is None:
            out = np.zeros((v.shape[0], self.layout.size) if per_sample else self.layout.size)
        gx = self._backward(tape, v, _Grad(self.layout, out), want_input)
        return out, gx

    def vjp_params(self, t, x, v, out=None, per_sample=False):
        """``vᵀ ∂θ u(t, x)`` summed over rows (or per row), flattened to the parameter layout."""
        x = np.asarray(x, dtype=float)
        _, tape = self.forward_tape(t, x)
        g, _ = self.vjp_tape(tape, v, out=out, per_sample=per_sample)
        return g

    def vjp_input(self, t, x, v):
        """``vᵀ ∂x u(t, x)``, one row per state."""
        x = np.asarray(x, dtype=float)
        _, tape = self.forward_tape(t, x)
        _, gx = self.vjp_tape(tape, v, want_input=True)
        return gx[0] if x.ndim == 1 else gx


class MlpPolicy(Policy):
    """Plain MLP on ``[time features, x]``.

    Time features are ``t/T`` (when ``time_input``) followed by ``num_freqs``
    Fourier pairs.  With ``widths=()`` this is a single affine (or, with
    ``bias=False``, linear) map.
    """

    kind = "mlp"

    def __init__(self, dim, widths=(64, 64, 64), activation="tanh", num_freqs=0,
                 time_input=True, bias=True, horizon=1.0):
        self.dim = dim
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.num_freqs = int(num_freqs)
        self.time_input = bool(time_input)
        self.bias = bool(bias)
        self.horizon = float(horizon)
        tdim = (1 if self.time_input else 0) + 2 * self.num_freqs
        self.tdim = tdim
        in_dims = ([tdim] if tdim else []) + [dim]
        self.net = _Mlp("mlp", in_dims, self.widths, dim, activation, bias=bias)
        self.layout = ParamLayout()
        self.net.register(self.layout)
        self._finish()

    def arch(self):
        return {"kind": "mlp", "dim": self.dim, "widths": list(self.widths), "activation": self.activation,
                "num_freqs": self.num_freqs, "time_input": self.time_input, "bias": self.bias,
                "horizon": self.horizon}

    def init(self, rng, zero_last_layer=False, scheme="lecun"):
        self.net.init(self.params, rng, scheme, zero_last_layer)

    def _forward(self, t, x):
        tf = self._time_row(t)
        inputs = [x] if tf is None else [tf, x]
        u, tape = self.net.forward(self.params, inputs)
        if u.shape[0] != x.shape[0]:
            u = np.broadcast_to(u, (x.shape[0], u.shape[1])).copy()
        return u, tape

    def _backward(self, tape, v, grad, want_input):
        need = [False] * (len(tape[0][0]) - 1) + [want_input]
        dins = self.net.backward(self.params, tape, v, grad, need)
        return dins[-1] if want_input else None


class PisPolicy(Policy):
    """``u(t, x) = nn1(t, x) + nn2(t) ⊙ score(x)``.

    nn1 embeds time (Fourier features → two layers) and state (two layers)
    separately, concatenates the features and maps them through a three-layer
    head; nn2 is a time-only network producing a scalar or per-coordinate gate.
    """

    kind = "pis"

    def __init__(self, dim, score_fn, score_vjp=None, num_freqs=64, feat_width=64,
                 head_widths=(64, 64), gate_widths=(64, 64), gate="scalar", activation="tanh",
                 horizon=1.0, time_input=False):
        if gate not in ("scalar", "vector"):
            raise ValueError("gate must be 'scalar' or 'vector'")
        self.dim = dim
        self.score_fn = score_fn
        self.score_vjp = score_vjp
        self.num_freqs = int(num_freqs)
        self.time_input = bool(time_input)
        self.horizon = float(horizon)
        self.feat_width = int(feat_width)
        self.head_widths = tuple(head_widths)
        self.gate_widths = tuple(gate_widths)
        self.gate = gate
        self.activation = activation
        tdim = (1 if self.time_input else 0) + 2 * self.num_freqs
        if tdim == 0:
            raise ValueError("PisPolicy needs time features")
        fw = self.feat_width
        self.t_net = _Mlp("nn1.t", [tdim], [fw], fw, activation, final_act=True)
        self.x_net = _Mlp("nn1.x", [dim], [fw], fw, activation, final_act=True)
        self.head = _Mlp("nn1.head", [fw, fw], self.head_widths, dim, activation)
        self.gate_net = _Mlp("nn2", [tdim], self.gate_widths, 1 if gate == "scalar" else dim, activation)
        self.layout = ParamLayout()
        for net in (self.t_net, self.x_net, self.head, self.gate_net):
            net.register(self.layout)
        self._finish()

    def arch(self):
        return {"kind": "pis", "dim": self.dim, "num_freqs": self.num_freqs, "feat_width": self.feat_width,
                "head_widths": list(self.head_widths), "gate_widths": list(self.gate_widths),
                "gate": self.gate, "activation": self.activation, "horizon": self.horizon,
                "time_input": self.time_input}

    def init(self, rng, zero_last_layer=False, scheme="lecun"):
        self.t_net.init(self.params, rng, scheme, False)
        self.x_net.init(self.params, rng, scheme, False)
        self.head.init(self.params, rng, scheme, zero_last_layer)
        self.gate_net.init(self.params, rng, scheme, zero_last_layer)

    def components(self, t, x):
        """``(nn1(t, x), nn2(t), score(x))`` with ``u = nn1 + nn2 * score``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tf = self._time_row(t)
        ht, _ = self.t_net.forward(self.params, [tf])
        hx, _ = self.x_net.forward(self.params, [x])
        o1, _ = self.head.forward(self.params, [ht, hx])
        g, _ = self.gate_net.forward(self.params, [tf])
        return o1, g, self.score_fn(x)

    def _forward(self, t, x):
        tf = self._time_row(t)
        ht, tape_t = self.t_net.forward(self.params, [tf])
        hx, tape_x = self.x_net.forward(self.params, [x])
        o1, tape_h = self.head.forward(self.params, [ht, hx])
        g, tape_g = self.gate_net.forward(self.params, [tf])
        s = self.score_fn(x)
        u = o1 + g * s
        return u, (x, s, g, tape_t, tape_x, tape_h, tape_g)

    def _backward(self, tape, v, grad, want_input):
        x, s, g, tape_t, tape_x, tape_h, tape_g = tape
        d_ht, d_hx = self.head.backward(self.params, tape_h, v, grad, [True, True])
        self.t_net.backward(self.params, tape_t, d_ht, grad, [False])
        (dx,) = self.x_net.backward(self.params, tape_x, d_hx, grad, [want_input])
        dg = v * s
        if self.gate == "scalar":
            dg = dg.sum(axis=1, keepdims=True)
        if not grad.per_sample:
            dg = dg.sum(axis=0, keepdims=True)
        self.gate_net.backward(self.params, tape_g, dg, grad, [False])
        if not want_input:
            return None
        if self.score_vjp is None:
            raise NotImplementedError("input VJP through the score needs score_vjp")
        return dx + self.score_vjp(x, g * v)


def build_policy(arch, score_fn=None, score_vjp=None):
    arch = dict(arch)
    kind = arch.pop("kind", "mlp")
    if kind == "mlp":
        return MlpPolicy(**arch)
    if kind == "pis":
        if score_fn is None:
            raise ValueError("PIS policy needs a score function")
        return PisPolicy(score_fn=score_fn, score_vjp=score_vjp, **arch)
    raise ValueError(f"unknown policy kind {kind!r}")


def init_policy(arch, rng, zero_last_layer=False, scheme="lecun", score_fn=None, score_vjp=None):
    """Build and initialise a policy; ``rng`` is a seed or numpy Generator."""
    policy = build_policy(arch, score_fn, score_vjp)
    policy.init(np.random.default_rng(rng), zero_last_layer=zero_last_layer, scheme=scheme)
    return policy


PIS_FUNNEL = {"kind": "pis", "num_freqs": 64, "feat_width": 64, "head_widths": [64, 64],
              "gate_widths": [64, 64], "gate": "scalar", "activation": "tanh"}


class ZeroPolicy:
    """u ≡ 0 without parameters."""

    def __init__(self, dim):
        self.dim = dim

    def forward(self, t, x):
        return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))
