"""Append-only reverse-mode tape with explicit saved-activation policies.

Every node declares what it keeps for its backward and how: a full float32
copy, a 4-bit blob, a 1-bit mask, or nothing. ``Tape.live_activation_bytes``
sums those declarations, so memory claims can be audited against a real
forward pass instead of estimated.

Nodes whose inputs are all frozen never require a gradient; they record
``NoSave`` and the backward traversal skips them entirely.
"""

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .quant import NumericError, QuantBlob


class TapeError(RuntimeError):
    pass


class RegistrationError(TapeError):
    pass


class CorruptedTapeError(TapeError):
    pass


class ContractError(TapeError):
    pass


class StoragePolicy(enum.Enum):
    FULL32 = "Full32"
    QUANT4 = "Quant4"
    MASK1 = "Mask1"
    NOSAVE = "NoSave"


def payload_nbytes(policy: StoragePolicy, elements: int) -> int:
    """Bytes needed to keep ``elements`` values under ``policy``."""
    if policy is StoragePolicy.FULL32:
        return 4 * elements
    if policy is StoragePolicy.QUANT4:
        return (elements + 1) // 2 + 8
    if policy is StoragePolicy.MASK1:
        return (elements + 7) // 8
    return 0


@dataclass(frozen=True)
class SavedActivation:
    policy: StoragePolicy
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.policy is StoragePolicy.NOSAVE and self.payload:
            raise TapeError("a NoSave record cannot carry a payload")
        for name, item in self.payload.items():
            is_blob = isinstance(item, QuantBlob)
            if self.policy is StoragePolicy.FULL32 and is_blob:
                raise TapeError(f"Full32 payload {name!r} must be a tensor, got a blob")
            if self.policy in (StoragePolicy.QUANT4, StoragePolicy.MASK1) and not is_blob:
                raise TapeError(f"{self.policy.value} payload {name!r} must be a QuantBlob")

    @classmethod
    def full(cls, **tensors):
        return cls(StoragePolicy.FULL32, {k: np.array(v, copy=True) for k, v in tensors.items()})

    @classmethod
    def blob(cls, name, blob: QuantBlob):
        policy = StoragePolicy.MASK1 if blob.bits == 1 else StoragePolicy.QUANT4
        return cls(policy, {name: blob})

    @property
    def elements(self) -> int:
        return sum(int(np.prod(v.shape, dtype=np.int64)) for v in self.payload.values())

    @property
    def nbytes(self) -> int:
        if self.policy is StoragePolicy.FULL32:
            return 4 * self.elements
        return sum(b.nbytes for b in self.payload.values())


NOSAVE = SavedActivation(StoragePolicy.NOSAVE)


@dataclass
class TapeNode:
    id: int
    op_kind: str
    parent_ids: tuple
    saved: SavedActivation
    output_shape: tuple
    requires_grad: bool
    tag: Optional[str] = None
    ctx: dict = field(default_factory=dict)

    def get(self, name):
        """Fetch a saved item, failing loudly if the forward did not keep it."""
        item = self.saved.payload.get(name)
        if item is None:
            raise CorruptedTapeError(
                f"node {self.id} ({self.op_kind}, tag={self.tag}) has no saved {name!r}")
        return item


@dataclass(frozen=True)
class OpDef:
    policies: frozenset
    backward: Optional[Callable]


OPS: dict = {}


def register_op(kind: str, policies, backward=None):
    """Register an op kind with its allowed save policies and backward rule.

    ``backward(node, grad, needs, tape)`` returns one gradient (or None) per
    parent; ``needs[i]`` says whether parent ``i`` wants one.
    """
    OPS[kind] = OpDef(frozenset(policies), backward)
    return backward


register_op("leaf", [StoragePolicy.NOSAVE])


class Var:
    """Handle to a tape node together with its forward value."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape, node_id, value):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def node(self) -> TapeNode:
        return self.tape.nodes[self.id]

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(id={self.id}, kind={self.node.op_kind}, shape={self.shape})"


class GradStore(dict):
    """Node id -> accumulated gradient."""

    def of(self, var):
        return self.get(var.id if isinstance(var, Var) else var)


class Tape:
    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=False, tag=None) -> Var:
        value = np.asarray(value)
        node_id = self.record("leaf", (), NOSAVE, value, tag=tag, requires_grad=requires_grad)
        return Var(self, node_id, value)

    def record(self, op_kind, parent_ids, saved, output, *, tag=None, ctx=None, requires_grad=None) -> int:
        if op_kind not in OPS:
            raise RegistrationError(f"op kind {op_kind!r} is not registered")
        parent_ids = tuple(int(p) for p in parent_ids)
        for p in parent_ids:
            if not 0 <= p < len(self.nodes):
                raise TapeError(f"parent id {p} is not on the tape (length {len(self.nodes)})")
        if saved is None:
            saved = NOSAVE
        if requires_grad is None:
            requires_grad = any(self.nodes[p].requires_grad for p in parent_ids)
        allowed = OPS[op_kind].policies
        if saved.policy not in allowed and not (saved.policy is StoragePolicy.NOSAVE and not requires_grad):
            raise TapeError(f"{op_kind} nodes may save {sorted(p.value for p in allowed)}, got {saved.policy.value}")
        node = TapeNode(len(self.nodes), op_kind, parent_ids, saved, tuple(np.shape(output)),
                        bool(requires_grad), tag, dict(ctx or {}))
        self.nodes.append(node)
        return node.id

    def apply(self, op_kind, parents, output, saved=None, *, tag=None, **ctx) -> Var:
        node_id = self.record(op_kind, [p.id for p in parents], saved, output, tag=tag, ctx=ctx)
        return Var(self, node_id, output)

    def backward(self, loss) -> GradStore:
        return backward(self, loss)

    def live_activation_bytes(self) -> int:
        return live_activation_bytes(self)

    def bytes_by_tag(self) -> dict:
        out = {}
        for node in self.nodes:
            if node.saved.policy is StoragePolicy.NOSAVE:
                continue
            key = node.tag or f"#{node.id}:{node.op_kind}"
            out[key] = out.get(key, 0) + node.saved.nbytes
        return out


def live_activation_bytes(tape: Tape) -> int:
    return sum(node.saved.nbytes for node in tape.nodes)


def backward(tape: Tape, loss) -> GradStore:
    loss_id = loss.id if isinstance(loss, Var) else int(loss)
    if not 0 <= loss_id < len(tape.nodes):
        raise TapeError(f"loss node {loss_id} is not on the tape")
    root = tape.nodes[loss_id]
    if int(np.prod(root.output_shape, dtype=np.int64)) != 1:
        raise ContractError(f"backward needs a scalar loss, node {loss_id} has shape {root.output_shape}")
    grads = GradStore()
    dtype = loss.value.dtype if isinstance(loss, Var) else np.float32
    grads[loss_id] = np.ones(root.output_shape, dtype=dtype)
    for node in reversed(tape.nodes[:loss_id + 1]):
        g = grads.get(node.id)
        if g is None or not node.requires_grad or not node.parent_ids:
            continue
        needs = [tape.nodes[p].requires_grad for p in node.parent_ids]
        if not any(needs):
            continue
        op = OPS[node.op_kind]
        if op.backward is None:
            raise CorruptedTapeError(f"op {node.op_kind!r} has no backward rule")
        parent_grads = op.backward(node, g, needs, tape)
        for pid, need, pg in zip(node.parent_ids, needs, parent_grads):
            if not need or pg is None:
                continue
            expected = tape.nodes[pid].output_shape
            if tuple(pg.shape) != expected:
                raise CorruptedTapeError(
                    f"{node.op_kind} produced a gradient of shape {pg.shape} for node {pid} of shape {expected}")
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return grads


def finite_diff_check(model, params, select=None, h=1e-3, eps=1e-8, dtype=np.float64):
    """Largest relative error between tape gradients and central differences.

    ``model(tape, leaves)`` builds a scalar loss from ``leaves`` (name -> Var).
    Only the parameters named in ``select`` (default: all) are differentiated
    and perturbed. Runs in float64 by default.
    """
    return max(gradient_errors(model, params, select, h, eps, dtype).values(), default=0.0)


def gradient_errors(model, params, select=None, h=1e-3, eps=1e-8, dtype=np.float64) -> dict:
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    values = {k: np.array(v, dtype=dtype, copy=True) for k, v in params.items()}
    names = list(values) if select is None else list(select)

    def loss_value(with_grad):
        tape = Tape()
        leaves = {k: tape.leaf(v, requires_grad=with_grad and k in names, tag=k) for k, v in values.items()}
        loss = model(tape, leaves)
        val = float(np.asarray(loss.value).reshape(()))
        if not np.isfinite(val):
            raise NumericError(f"loss is not finite ({val})")
        return tape, leaves, loss, val

    tape, leaves, loss, _ = loss_value(True)
    grads = backward(tape, loss)
    errors = {}
    for name in names:
        analytic = grads.of(leaves[name])
        if analytic is None:
            analytic = np.zeros_like(values[name])
        worst = 0.0
        flat = values[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = loss_value(False)[3]
            flat[i] = keep - h
            f_minus = loss_value(False)[3]
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / (abs(numeric) + eps))
        errors[name] = worst
    return errors
