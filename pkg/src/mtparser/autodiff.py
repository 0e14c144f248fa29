"""Dense reverse-mode automatic differentiation over a per-sentence tape.

Values are numpy vectors/matrices. A :class:`Tape` records every primitive
executed with an input that requires a gradient; :meth:`Tape.backward`
replays the records in reverse. Parameter leaves share their gradient buffer
with the owning :class:`NamedParameter`, so backward accumulates straight into
the parameter's gradient accumulator.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

DEBUG = bool(os.environ.get("MTPARSER_DEBUG"))

ARCHIVE_FORMAT = "mtparser-archive"
ARCHIVE_VERSION = 1


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class GoldMaskedError(ValueError):
    """The gold action is illegal under the mask it is trained with."""


class Var:
    __slots__ = ("value", "grad", "requires_grad", "is_leaf")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, grad: Optional[np.ndarray] = None):
        self.value = value
        self.requires_grad = requires_grad
        self.grad = grad
        self.is_leaf = grad is not None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"


def _acc(var: Var, g: np.ndarray) -> None:
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=var.value.dtype)
    else:
        var.grad += g


class Tape:
    """Ordered record of executed primitives for one forward computation."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: List[Tuple[Tuple[Var, ...], Callable[[], None]]] = []
        self._params: Dict[str, Var] = {}

    def param(self, p: "NamedParameter") -> Var:
        v = self._params.get(p.name)
        if v is None:
            if self.enabled:
                v = Var(p.value, True, p.grad)
            else:
                v = Var(p.value)
            self._params[p.name] = v
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64))

    def record(self, outs: Tuple[Var, ...], backward: Callable[[], None]) -> None:
        if DEBUG:
            for o in outs:
                assert np.all(np.isfinite(o.value)), "non-finite value on tape"
        self.records.append((outs, backward))

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Var, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(loss)/d(param) into every reachable parameter's gradient.

        ``seed`` replaces the all-ones output gradient, which back-propagates
        the projection ``sum(seed * loss)`` of a non-scalar output.
        """
        if not loss.requires_grad:
            return
        for outs, _ in self.records:
            for o in outs:
                o.grad = None
        loss.grad = np.ones_like(loss.value) if seed is None else np.array(seed, dtype=loss.value.dtype)
        for outs, fn in reversed(self.records):
            if any(o.grad is not None for o in outs):
                fn()


def _tracked(*xs: Var) -> bool:
    return any(x.requires_grad for x in xs)


def _out(tape: Tape, value: np.ndarray, *inputs: Var) -> Var:
    return Var(value, tape.enabled and _tracked(*inputs))


# -- primitives -------------------------------------------------------------

def lookup(tape: Tape, table: Var, idx: int) -> Var:
    """Row ``idx`` of an embedding table."""
    if table.value.ndim != 2 or not 0 <= idx < table.value.shape[0]:
        raise ShapeError(f"lookup: index {idx} into table of shape {table.shape}")
    out = _out(tape, table.value[idx], table)
    if out.requires_grad:
        def backward():
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            table.grad[idx] += out.grad
        tape.record((out,), backward)
    return out


def concat(tape: Tape, *xs: Var) -> Var:
    for x in xs:
        if x.value.ndim != 1:
            raise ShapeError(f"concat: expected vectors, got shapes {[x.shape for x in xs]}")
    out = _out(tape, np.concatenate([x.value for x in xs]), *xs)
    if out.requires_grad:
        def backward():
            start = 0
            for x in xs:
                size = x.value.shape[0]
                _acc(x, out.grad[start:start + size])
                start += size
        tape.record((out,), backward)
    return out


def affine(tape: Tape, W: Var, x: Var, b: Optional[Var] = None) -> Var:
    """``W @ x + b``."""
    return affine_sum(tape, [(W, x)], b)


def affine_sum(tape: Tape, pairs: Sequence[Tuple[Var, Var]], b: Optional[Var] = None) -> Var:
    """``sum_k W_k @ x_k + b``; one affine map stored as column blocks."""
    rows = pairs[0][0].value.shape[0]
    for W, x in pairs:
        if W.value.ndim != 2 or x.value.ndim != 1 or W.value.shape != (rows, x.value.shape[0]):
            raise ShapeError(f"affine: W{W.shape} cannot map x{x.shape} to {rows} rows")
    if b is not None and b.value.shape != (rows,):
        raise ShapeError(f"affine: bias {b.shape} does not match {rows} rows")
    value = pairs[0][0].value @ pairs[0][1].value
    for W, x in pairs[1:]:
        value = value + W.value @ x.value
    if b is not None:
        value = value + b.value
    inputs = [v for pair in pairs for v in pair] + ([b] if b is not None else [])
    out = _out(tape, value, *inputs)
    if out.requires_grad:
        def backward():
            g = out.grad
            for W, x in pairs:
                if W.requires_grad:
                    _acc(W, np.outer(g, x.value))
                if x.requires_grad:
                    _acc(x, W.value.T @ g)
            if b is not None:
                _acc(b, g)
        tape.record((out,), backward)
    return out


def relu(tape: Tape, x: Var) -> Var:
    out = _out(tape, np.maximum(x.value, 0.0), x)
    if out.requires_grad:
        def backward():
            _acc(x, out.grad * (x.value > 0))
        tape.record((out,), backward)
    return out


def tanh(tape: Tape, x: Var) -> Var:
    out = _out(tape, np.tanh(x.value), x)
    if out.requires_grad:
        def backward():
            _acc(x, out.grad * (1.0 - out.value ** 2))
        tape.record((out,), backward)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(tape: Tape, x: Var) -> Var:
    out = _out(tape, _sigmoid(x.value), x)
    if out.requires_grad:
        def backward():
            _acc(x, out.grad * out.value * (1.0 - out.value))
        tape.record((out,), backward)
    return out


def add(tape: Tape, a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape}")
    out = _out(tape, a.value + b.value, a, b)
    if out.requires_grad:
        def backward():
            _acc(a, out.grad)
            _acc(b, out.grad)
        tape.record((out,), backward)
    return out


def mul(tape: Tape, a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape}")
    out = _out(tape, a.value * b.value, a, b)
    if out.requires_grad:
        def backward():
            _acc(a, out.grad * b.value)
            _acc(b, out.grad * a.value)
        tape.record((out,), backward)
    return out


def add_n(tape: Tape, xs: Sequence[Var]) -> Var:
    """Sum of same-shaped values (used to accumulate per-transition losses)."""
    if not xs:
        return tape.const(0.0)
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ShapeError("add_n: mismatched shapes")
    out = _out(tape, np.sum([x.value for x in xs], axis=0), *xs)
    if out.requires_grad:
        def backward():
            for x in xs:
                _acc(x, out.grad)
        tape.record((out,), backward)
    return out


def dropout(tape: Tape, x: Var, rate: float, rng: np.random.Generator) -> Var:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    out = _out(tape, x.value * keep, x)
    if out.requires_grad:
        def backward():
            _acc(x, out.grad * keep)
        tape.record((out,), backward)
    return out


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the legal entries; illegal entries get probability exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("masked softmax: no legal entry")
    z = np.where(mask, logits, -np.inf)
    z = z - z[mask].max()
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum()


def softmax_cross_entropy(tape: Tape, logits: Var, mask, gold: int) -> Var:
    """Negative log-probability of ``gold`` under the masked softmax."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: mask {mask.shape} vs logits {logits.shape}")
    if not mask[gold]:
        raise GoldMaskedError(f"gold index {gold} is masked out")
    probs = masked_softmax(logits.value, mask)
    out = _out(tape, np.array(-np.log(probs[gold])), logits)
    if out.requires_grad:
        def backward():
            g = probs.copy()
            g[gold] -= 1.0
            _acc(logits, out.grad * g)
        tape.record((out,), backward)
    return out


def lstm_cell(tape: Tape, x: Var, h_prev: Var, c_prev: Var, W_x: Var, W_h: Var, b: Var) -> Tuple[Var, Var]:
    """One LSTM step with input/forget/output gates and a tanh candidate.

    Gate pre-activations are stacked as ``[i; f; o; g]`` in ``W_x @ x +
    W_h @ h_prev + b``.
    """
    H = h_prev.value.shape[0]
    if W_x.value.shape != (4 * H, x.value.shape[0]) or W_h.value.shape != (4 * H, H) or b.value.shape != (4 * H,):
        raise ShapeError(f"lstm_cell: x{x.shape} h{h_prev.shape} W_x{W_x.shape} W_h{W_h.shape} b{b.shape}")
    z = W_x.value @ x.value + W_h.value @ h_prev.value + b.value
    gates = _sigmoid(z[:3 * H])
    i, f, o = gates[:H], gates[H:2 * H], gates[2 * H:]
    g = np.tanh(z[3 * H:])
    c = f * c_prev.value + i * g
    tc = np.tanh(c)
    h = o * tc
    track = tape.enabled and _tracked(x, h_prev, c_prev, W_x, W_h, b)
    h_out, c_out = Var(h, track), Var(c, track)
    if track:
        def backward():
            dh = h_out.grad if h_out.grad is not None else 0.0
            dc = c_out.grad if c_out.grad is not None else np.zeros(H)
            dc = dc + dh * o * (1.0 - tc ** 2)
            dz = np.empty(4 * H)
            dz[:H] = dc * g * i * (1.0 - i)
            dz[H:2 * H] = dc * c_prev.value * f * (1.0 - f)
            dz[2 * H:3 * H] = dh * tc * o * (1.0 - o)
            dz[3 * H:] = dc * i * (1.0 - g ** 2)
            if W_x.requires_grad:
                _acc(W_x, np.outer(dz, x.value))
            if W_h.requires_grad:
                _acc(W_h, np.outer(dz, h_prev.value))
            _acc(b, dz)
            if x.requires_grad:
                _acc(x, W_x.value.T @ dz)
            if h_prev.requires_grad:
                _acc(h_prev, W_h.value.T @ dz)
            _acc(c_prev, dc * f)
        tape.record((h_out, c_out), backward)
    return h_out, c_out


# -- parameters -------------------------------------------------------------

@dataclass
class NamedParameter:
    name: str
    value: np.ndarray
    grad: np.ndarray
    owner: str = "shared"

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def glorot_uniform(shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def initial_value(kind: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if kind == "matrix":
        return glorot_uniform(shape, rng)
    if kind == "bias":
        return np.zeros(shape)
    if kind == "embedding":
        return rng.uniform(-0.01, 0.01, size=shape)
    raise ValueError(f"unknown initializer {kind!r}")


class ParameterStore:
    """Named tensors with gradient accumulators and ownership tags."""

    def __init__(self, dtype=np.float64):
        self.params: Dict[str, NamedParameter] = {}
        self.dtype = np.dtype(dtype)
        self.step = 0

    def add(self, name: str, value: np.ndarray, owner: str = "shared") -> NamedParameter:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.ascontiguousarray(value, dtype=self.dtype)
        p = NamedParameter(name, value, np.zeros_like(value), owner)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> NamedParameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[NamedParameter]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> List[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def restore(self, values: Dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self.params[name].value[...] = value

    def save(self, path, manifest: Optional[dict] = None) -> None:
        save_archive(path, self, manifest or {})


_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_archive(path, store: ParameterStore, manifest: dict) -> None:
    """Write a versioned archive: ``manifest.json`` plus one little-endian
    float64 ``.npy`` member per tensor. Identical stores give identical bytes."""
    tensors = []
    with zipfile.ZipFile(path, "w") as zf:
        for k, p in enumerate(store):
            member = f"tensors/{k:05d}.npy"
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(p.value, dtype="<f8"), allow_pickle=False)
            _write_member(zf, member, buf.getvalue())
            tensors.append({"name": p.name, "owner": p.owner, "shape": list(p.value.shape), "member": member})
        header = {"format": ARCHIVE_FORMAT, "version": ARCHIVE_VERSION, "byte_order": "little",
                  "dtype": "float64", "step": store.step, "tensors": tensors}
        header.update(manifest)
        _write_member(zf, "manifest.json", json.dumps(header, indent=1, sort_keys=True).encode("utf-8"))


def load_archive(path) -> Tuple[ParameterStore, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
        if manifest.get("format") != ARCHIVE_FORMAT:
            raise ValueError(f"{path}: not a model archive")
        if manifest.get("version") != ARCHIVE_VERSION:
            raise ValueError(f"{path}: unsupported archive version {manifest.get('version')}")
        store = ParameterStore()
        for entry in manifest["tensors"]:
            array = np.lib.format.read_array(io.BytesIO(zf.read(entry["member"])), allow_pickle=False)
            if list(array.shape) != entry["shape"]:
                raise ValueError(f"{path}: tensor {entry['name']} has shape {array.shape}, manifest says {entry['shape']}")
            store.add(entry["name"], array, entry["owner"])
        store.step = manifest.get("step", 0)
    return store, manifest


# -- finite differences -----------------------------------------------------

def numeric_gradient(f: Callable[[], float], array: np.ndarray, eps: float = 1e-5,
                     indices: Optional[Iterable[Tuple[int, ...]]] = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``array`` (perturbed in place).

    Entries not listed in ``indices`` are left as NaN.
    """
    grad = np.full(array.shape, np.nan)
    if indices is None:
        indices = np.ndindex(*array.shape)
    for idx in indices:
        orig = array[idx]
        array[idx] = orig + eps
        plus = f()
        array[idx] = orig - eps
        minus = f()
        array[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the entries where ``numeric`` is defined."""
    sel = ~np.isnan(numeric)
    a, n = analytic[sel], numeric[sel]
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
