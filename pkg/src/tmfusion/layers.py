"""Trainable building blocks: dense, dropout, batch norm, LSTM, SGD, checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .numerics import Tensor

CHECKPOINT_MAGIC = b"TMF1"


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Container of named parameters, buffers and sub-modules, in declaration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._decay: dict[str, bool] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_parameter(self, name: str, value: np.ndarray, decay: bool = False) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        self._decay[name] = decay
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor, bool]]:
        for name, t in self._params.items():
            yield prefix + name, t, self._decay[name]
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _ in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t, _ in self.named_parameters()}
        state.update({name: arr.copy() for name, arr in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: t for name, t, _ in self.named_parameters()}
        buffers = dict(self.named_buffers())
        missing = (set(own) | set(buffers)) - set(state)
        if missing:
            raise FormatError(f"checkpoint lacks entries {sorted(missing)}")
        for name, t in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {value.shape}, model shape {t.shape}")
            t.data = value.copy()
        for name, arr in buffers.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != arr.shape:
                raise DimensionError(f"buffer {name}: checkpoint shape {value.shape}, model shape {arr.shape}")
            arr[...] = value

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_(self) -> None:
        for t in self.parameters():
            t.data[...] = 0.0


class Dense(Module):
    """``activation(x @ W.T + b)`` with ``W`` stored as ``out x in``."""

    ACTIVATIONS = ("none", "relu", "softmax")

    def __init__(self, in_features: int, out_features: int, activation: str = "none",
                 rng: np.random.Generator | None = None, decay: bool = False):
        super().__init__()
        if activation not in self.ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.weight = self.add_parameter(
            "weight", glorot_uniform(rng, in_features, out_features, (out_features, in_features)), decay)
        self.bias = self.add_parameter("bias", np.zeros(out_features), decay)

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: Dense, x) -> Tensor:
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise DimensionError(f"dense layer expects (batch, {layer.in_features}), got {x.shape}")
    out = x @ layer.weight.T + layer.bias
    if layer.activation == "relu":
        return nx.relu(out)
    if layer.activation == "softmax":
        return nx.softmax(out, axis=-1)
    return out


@dataclass
class DropoutSpec:
    keep_probability: float = 1.0
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 < self.keep_probability <= 1.0:
            raise ConfigError(f"keep_probability must lie in (0, 1], got {self.keep_probability}")
        if self.mode not in ("train", "inference"):
            raise ConfigError(f"dropout mode must be 'train' or 'inference', got {self.mode!r}")


def dropout_mask(keep: float, shape, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(shape) < keep) / keep


def dropout_apply(spec: DropoutSpec, x, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept entries are scaled by ``1/keep`` so expectations match."""
    x = nx.as_tensor(x)
    if spec.mode == "inference" or spec.keep_probability == 1.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    return x * dropout_mask(spec.keep_probability, x.shape, rng)


class BatchNorm(Module):
    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if eps <= 0:
            raise ConfigError("batch norm epsilon must be positive")
        if not 0.0 < momentum < 1.0:
            raise ConfigError("batch norm momentum must lie in (0, 1)")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.scale = self.add_parameter("scale", np.ones(num_features))
        self.shift = self.add_parameter("shift", np.zeros(num_features))
        self.running_mean = self._buffers["running_mean"] = np.zeros(num_features)
        self.running_var = self._buffers["running_var"] = np.ones(num_features)

    def __call__(self, x, mode: str = "train") -> Tensor:
        return batchnorm_forward(self, x, mode)


def batchnorm_forward(bn: BatchNorm, x, mode: str = "train") -> Tensor:
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != bn.num_features:
        raise DimensionError(f"batch norm expects (batch, {bn.num_features}), got {x.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ContractError("batch norm in train mode needs a batch of at least 2")
        mu = x.mean(axis=0)
        centred = x - mu
        var = (centred * centred).mean(axis=0)
        xhat = centred * nx.power(var + bn.eps, -0.5)
        m = bn.momentum
        bn.running_mean[...] = (1 - m) * bn.running_mean + m * mu.data
        bn.running_var[...] = (1 - m) * bn.running_var + m * var.data
    elif mode == "inference":
        xhat = (x - bn.running_mean) * (1.0 / np.sqrt(bn.running_var + bn.eps))
    else:
        raise ConfigError(f"unknown batch norm mode {mode!r}")
    return xhat * bn.scale + bn.shift


class LstmCell(Module):
    """One LSTM cell; gate blocks are ordered input, forget, candidate, output."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None):
        super().__init__()
        if input_size < 1 or hidden_size < 1:
            raise ConfigError("LSTM sizes must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        w_ih = np.concatenate([glorot_uniform(rng, input_size, h, (input_size, h)) for _ in range(4)], axis=1)
        w_hh = np.concatenate([glorot_uniform(rng, h, h, (h, h)) for _ in range(4)], axis=1)
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0
        self.w_ih = self.add_parameter("w_ih", w_ih)
        self.w_hh = self.add_parameter("w_hh", w_hh)
        self.bias = self.add_parameter("bias", bias)

    @staticmethod
    def parameter_count(input_size: int, hidden_size: int) -> int:
        return 4 * hidden_size * (input_size + hidden_size + 1)

    def step(self, x_t, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        hs = self.hidden_size
        z = nx.as_tensor(x_t) @ self.w_ih + h @ self.w_hh + self.bias
        i = nx.sigmoid(z[:, :hs])
        f = nx.sigmoid(z[:, hs:2 * hs])
        g = nx.tanh(z[:, 2 * hs:3 * hs])
        o = nx.sigmoid(z[:, 3 * hs:])
        c_new = f * c + i * g
        h_new = o * nx.tanh(c_new)
        return h_new, c_new


class Lstm(Module):
    """Stacked, optionally bidirectional LSTM over variable-length sequences.

    Sequences in a batch are right-padded; at steps past a sequence's end its
    state is carried unchanged, so the final state is the state after the last
    real element. No padding is visible to callers.
    """

    def __init__(self, input_size: int, hidden_size: int, num_layers: int = 1,
                 bidirectional: bool = False, rng: np.random.Generator | None = None,
                 max_length: int = 272):
        super().__init__()
        if num_layers not in (1, 2):
            raise ConfigError("only 1 or 2 LSTM layers are supported")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.bidirectional = bidirectional
        self.max_length = max_length
        dirs = 2 if bidirectional else 1
        self.cells: list[list[LstmCell]] = []
        for layer in range(num_layers):
            in_size = input_size if layer == 0 else hidden_size * dirs
            row = []
            for d in range(dirs):
                cell = LstmCell(in_size, hidden_size, rng)
                self.add_module(f"l{layer}{'rb'[d] if bidirectional else ''}", cell)
                row.append(cell)
            self.cells.append(row)

    @property
    def output_size(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)

    def forward(self, sequences: Sequence[np.ndarray], keep_probability: float = 1.0,
                rng: np.random.Generator | None = None) -> Tensor:
        """Final hidden state for each sequence, shape ``(batch, output_size)``."""
        lengths = np.array([len(s) for s in sequences])
        if len(sequences) == 0:
            raise ContractError("LSTM forward on an empty batch")
        if np.any(lengths < 1):
            raise ContractError("LSTM forward on an empty sequence")
        if np.any(lengths > self.max_length):
            raise ContractError(f"sequence longer than the configured maximum {self.max_length}")
        for s in sequences:
            if s.ndim != 2 or s.shape[1] != self.input_size:
                raise DimensionError(f"LSTM expects (T, {self.input_size}) sequences, got {s.shape}")
        batch, steps = len(sequences), int(lengths.max())
        padded = np.zeros((steps, batch, self.input_size))
        for b, s in enumerate(sequences):
            padded[: len(s), b] = s
        masks = np.arange(steps)[:, None] < lengths[None, :]
        inputs: list = [padded[t] for t in range(steps)]
        final = None
        for layer, row in enumerate(self.cells):
            fwd_out, fwd_last = _run(row[0], inputs, masks)
            if self.bidirectional:
                rev_in = _reverse(inputs, lengths)
                bwd_out, bwd_last = _run(row[1], rev_in, masks)
                bwd_out = _reverse(bwd_out, lengths)
                outs = [nx.concat([a, b], axis=1) for a, b in zip(fwd_out, bwd_out)]
                final = nx.concat([fwd_last, bwd_last], axis=1)
            else:
                outs, final = fwd_out, fwd_last
            if keep_probability < 1.0:
                # one mask per sequence, shared by every step
                mask = dropout_mask(keep_probability, (batch, outs[0].shape[1]), rng)
                outs = [o * mask for o in outs] if layer + 1 < self.num_layers else outs
                final = final * mask
            inputs = outs
        return final


def _run(cell: LstmCell, inputs: list, masks: np.ndarray) -> tuple[list[Tensor], Tensor]:
    batch = masks.shape[1]
    h = Tensor(np.zeros((batch, cell.hidden_size)))
    c = Tensor(np.zeros((batch, cell.hidden_size)))
    outs = []
    for t, x_t in enumerate(inputs):
        h_new, c_new = cell.step(x_t, h, c)
        m = masks[t][:, None]
        if m.all():
            h, c = h_new, c_new
        else:
            h, c = nx.where(m, h_new, h), nx.where(m, c_new, c)
        outs.append(h)
    return outs, h


def _reverse(steps_list: list, lengths: np.ndarray) -> list:
    """Reverse each sequence within its own length; padding stays at the end."""
    total = len(steps_list)
    batch = len(lengths)
    t_idx = np.zeros((total, batch), dtype=int)
    for t in range(total):
        t_idx[t] = np.where(t < lengths, lengths - 1 - t, t)
    b_idx = np.arange(batch)
    if all(isinstance(s, np.ndarray) for s in steps_list):
        arr = np.stack(steps_list)
        return [arr[t_idx[t], b_idx] for t in range(total)]
    stacked = nx.stack(steps_list, axis=0)
    return [stacked[t_idx[t], b_idx] for t in range(total)]


def lstm_sequence_forward(lstm: Lstm, sequence) -> Tensor:
    """Final hidden state of one ``(T, input)`` sequence, shape ``(output_size,)``."""
    seq = np.asarray(sequence.data if isinstance(sequence, Tensor) else sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ContractError(f"expected a non-empty (T, {lstm.input_size}) sequence, got {seq.shape}")
    return lstm.forward([seq])[0]


class SGD:
    """SGD with momentum; ``v <- mu v + g + lam theta``, ``theta <- theta - lr v``.

    The decay term only applies to parameters registered with ``decay=True``.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        if isinstance(params, Module):
            params = list(params.named_parameters())
        self.entries = [(name, t, bool(decay)) for name, t, decay in params]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t, _ in self.entries}

    def step(self) -> None:
        for name, t, _ in self.entries:
            if t.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
        for name, t, decay in self.entries:
            v = self.velocity[name]
            v *= self.momentum
            v += t.grad
            if decay and self.weight_decay:
                v += self.weight_decay * t.data
            t.data -= self.lr * v


def optimizer_step(state: SGD) -> None:
    state.step()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, module: Module | None, hyperparameters: dict,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write ``TMF1``: magic, header length, ``key=value`` text, float64 LE blocks.

    Blocks are the module's parameters, then its buffers, then ``extra``, each
    in declaration order.
    """
    blocks = []
    if module is not None:
        blocks += [(name, t.data) for name, t, _ in module.named_parameters()]
        blocks += list(module.named_buffers())
    for name, arr in (extra or {}).items():
        blocks.append((name, np.asarray(arr, dtype=np.float64)))
    lines = [f"{k}={_fmt_value(v)}" for k, v in hyperparameters.items()]
    for name, arr in blocks:
        lines.append(f"param:{name}={'x'.join(str(n) for n in arr.shape) or 'scalar'}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _fmt_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a TMF1 checkpoint")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = raw[8:8 + hlen].decode("utf-8")
    hyper: dict[str, str] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for line in header.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("param:"):
            shape = () if value == "scalar" else tuple(int(n) for n in value.split("x"))
            shapes.append((key[6:], shape))
        else:
            hyper[key] = value
    offset = 8 + hlen
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise FormatError(f"{path}: payload truncated at parameter {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return hyper, params
