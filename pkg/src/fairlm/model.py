"""Compact stacked-LSTM language model with exact hand-computed gradients.

Everything runs at 64-bit precision in numpy. The forward pass can record a
cache of intermediates; ``backward`` consumes that cache and a gradient with
respect to the logits, returning gradients for every parameter tensor. This
keeps the whole backward path open to finite-difference verification.

Checkpoint format (binary, little-endian):

    bytes 0..3   magic "FLM" + one ASCII version digit ("FLM1")
    6 x uint32   vocab_size, embed_dim, hidden_units, num_layers,
                 seq_len, vocab_min_count
    1 x float64  dropout
    tensors      row-major float64, in order: embedding; then per layer
                 w_x, w_h, b (gate order i, f, g, o on the fused axis);
                 then w_out, b_out
    vocabulary   newline-joined UTF-8 token list (vocab_size entries)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Vocabulary

MAGIC = b"FLM"
VERSION = 1

# slices of the fused 4H gate axis
GATE_ORDER = "ifgo"


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Magic bytes or version digit do not match."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared contents."""


class CheckpointShapeError(CheckpointError):
    """Declared shapes and stored data disagree."""


@dataclass(frozen=True)
class ModelHyper:
    """Architecture and training-window hyperparameters."""

    embed_dim: int = 300
    hidden_units: int = 300
    num_layers: int = 2
    seq_len: int = 35
    dropout: float = 0.25

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_units, self.num_layers, self.seq_len) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class LayerParams:
    w_x: np.ndarray  # (input_dim, 4H)
    w_h: np.ndarray  # (H, 4H)
    b: np.ndarray    # (4H,)


@dataclass
class ModelParams:
    """All trainable tensors. Immutable by convention during evaluation."""

    embedding: np.ndarray  # (V, D)
    layers: list[LayerParams]
    w_out: np.ndarray      # (H, V)
    b_out: np.ndarray      # (V,)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden_units(self) -> int:
        return self.w_out.shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "ModelParams":
        return ModelParams(
            embedding=self.embedding.copy(),
            layers=[LayerParams(l.w_x.copy(), l.w_h.copy(), l.b.copy())
                    for l in self.layers],
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
        )


def named_tensors(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    """Fixed (name, tensor) ordering shared by checkpoints, grads and updates."""
    out: list[tuple[str, np.ndarray]] = [("embedding", params.embedding)]
    for i, layer in enumerate(params.layers):
        out.append((f"layer{i}.w_x", layer.w_x))
        out.append((f"layer{i}.w_h", layer.w_h))
        out.append((f"layer{i}.b", layer.b))
    out.append(("w_out", params.w_out))
    out.append(("b_out", params.b_out))
    return out


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in named_tensors(params)}


@dataclass
class HiddenState:
    """Per-layer (h, c) activations, each of shape (batch, hidden)."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, num_layers: int, hidden_units: int, batch: int = 1) -> "HiddenState":
        return cls([(np.zeros((batch, hidden_units)), np.zeros((batch, hidden_units)))
                    for _ in range(num_layers)])

    @property
    def batch(self) -> int:
        return self.layers[0][0].shape[0]


def init_params(hyper: ModelHyper, vocab_size: int, seed: int,
                embedding_file: str | Path | None = None,
                vocab: Vocabulary | None = None) -> ModelParams:
    """Deterministic initialization from a seed.

    Embedding and output projection weights are uniform in [-0.1, 0.1];
    recurrent weights are uniform in [-1/sqrt(H), 1/sqrt(H)]; biases start at
    zero. If an embedding file is given, rows for tokens that appear in it
    are overwritten (requires the vocabulary for the token->id map).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    d, h = hyper.embed_dim, hyper.hidden_units
    embedding = rng.uniform(-0.1, 0.1, size=(vocab_size, d))
    layers = []
    scale = 1.0 / np.sqrt(h)
    for i in range(hyper.num_layers):
        in_dim = d if i == 0 else h
        layers.append(LayerParams(
            w_x=rng.uniform(-scale, scale, size=(in_dim, 4 * h)),
            w_h=rng.uniform(-scale, scale, size=(h, 4 * h)),
            b=np.zeros(4 * h),
        ))
    w_out = rng.uniform(-0.1, 0.1, size=(h, vocab_size))
    b_out = np.zeros(vocab_size)
    params = ModelParams(embedding=embedding, layers=layers, w_out=w_out, b_out=b_out)
    if embedding_file is not None:
        if vocab is None:
            raise ValueError("embedding overlay requires the vocabulary")
        _apply_embedding_overlay(params, embedding_file, vocab)
    return params


def _apply_embedding_overlay(params: ModelParams, path: str | Path,
                             vocab: Vocabulary) -> None:
    d = params.embed_dim
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        token, values = fields[0], fields[1:]
        if len(values) != d:
            raise ValueError(f"{path}: line {lineno}: expected {d} values for "
                             f"{token!r}, got {len(values)}")
        if token in vocab:
            params.embedding[vocab.ids[token]] = np.array([float(v) for v in values])


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction). Strictly positive output."""
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class _LayerCache:
    inputs: np.ndarray      # (B, T, in_dim), post-dropout input to this layer
    gates_i: np.ndarray     # (B, T, H)
    gates_f: np.ndarray
    gates_g: np.ndarray
    gates_o: np.ndarray
    cells: np.ndarray       # (B, T, H)
    tanh_cells: np.ndarray
    hidden: np.ndarray      # (B, T, H)
    h0: np.ndarray          # (B, H)
    c0: np.ndarray
    drop_mask: np.ndarray | None  # scaled inverted-dropout mask on the output


@dataclass
class ForwardCache:
    ids: np.ndarray
    layer_caches: list[_LayerCache]


def _check_ids(ids: np.ndarray, vocab_size: int) -> None:
    if ids.size and (int(ids.min()) < 0 or int(ids.max()) >= vocab_size):
        raise ValueError(f"token id out of range for vocabulary of size {vocab_size}")


def _run(params: ModelParams, ids: np.ndarray, state: HiddenState,
         dropout: float, rng: np.random.Generator | None,
         want_cache: bool) -> tuple[np.ndarray, HiddenState, ForwardCache | None]:
    batch, steps = ids.shape
    hn = params.hidden_units
    x = params.embedding[ids]  # (B, T, D)
    caches: list[_LayerCache] = []
    new_layers: list[tuple[np.ndarray, np.ndarray]] = []
    for li, layer in enumerate(params.layers):
        h, c = state.layers[li]
        h0, c0 = h, c
        gi = np.empty((batch, steps, hn))
        gf = np.empty((batch, steps, hn))
        gg = np.empty((batch, steps, hn))
        go = np.empty((batch, steps, hn))
        cells = np.empty((batch, steps, hn))
        tanh_cells = np.empty((batch, steps, hn))
        hidden = np.empty((batch, steps, hn))
        for t in range(steps):
            a = x[:, t] @ layer.w_x + h @ layer.w_h + layer.b
            i = sigmoid(a[:, :hn])
            f = sigmoid(a[:, hn:2 * hn])
            g = np.tanh(a[:, 2 * hn:3 * hn])
            o = sigmoid(a[:, 3 * hn:])
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            gi[:, t], gf[:, t], gg[:, t], go[:, t] = i, f, g, o
            cells[:, t], tanh_cells[:, t], hidden[:, t] = c, tc, h
        new_layers.append((h, c))
        mask = None
        out = hidden
        if li < params.num_layers - 1 and dropout > 0.0:
            if rng is None:
                raise ValueError("dropout requires an explicit random generator")
            keep = 1.0 - dropout
            mask = (rng.random(hidden.shape) < keep).astype(np.float64) / keep
            out = hidden * mask
        if want_cache:
            caches.append(_LayerCache(inputs=x, gates_i=gi, gates_f=gf, gates_g=gg,
                                      gates_o=go, cells=cells, tanh_cells=tanh_cells,
                                      hidden=hidden, h0=h0, c0=c0, drop_mask=mask))
        x = out
    logits = x @ params.w_out + params.b_out
    cache = ForwardCache(ids=ids, layer_caches=caches) if want_cache else None
    return logits, HiddenState(new_layers), cache


def forward_batch(params: ModelParams, ids: np.ndarray,
                  state: HiddenState | None = None, train_mode: bool = False,
                  dropout: float = 0.0,
                  rng: np.random.Generator | None = None,
                  want_cache: bool = False):
    """Run the stacked LSTM over an id batch of shape (batch, steps).

    Returns (logits, new_state) or (logits, new_state, cache) when
    want_cache is set. Dropout applies between layers only, and only in
    train mode, drawing from the supplied generator.
    """
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(ids, params.vocab_size)
    if state is None:
        state = HiddenState.zeros(params.num_layers, params.hidden_units, ids.shape[0])
    eff_dropout = dropout if train_mode else 0.0
    logits, new_state, cache = _run(params, ids, state, eff_dropout, rng, want_cache)
    if want_cache:
        return logits, new_state, cache
    return logits, new_state


def forward(params: ModelParams, input_ids, state: HiddenState | None = None,
            train_mode: bool = False, dropout: float = 0.0,
            rng: np.random.Generator | None = None):
    """Single-sequence forward pass: ids of shape (steps,) -> logits (steps, V)."""
    ids = np.asarray(input_ids, dtype=np.int64).reshape(1, -1)
    logits, new_state = forward_batch(params, ids, state, train_mode, dropout, rng)
    return logits[0], new_state


def backward(params: ModelParams, cache: ForwardCache,
             dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate dlogits (B, T, V) through the cached forward pass.

    Gradients are truncated at the window boundary: the initial hidden state
    is treated as a constant. Returns a dict keyed like named_tensors.
    """
    grads = zero_grads(params)
    batch, steps, _ = dlogits.shape
    hn = params.hidden_units

    top = cache.layer_caches[-1]
    top_out = top.hidden if top.drop_mask is None else top.hidden * top.drop_mask
    flat_h = top_out.reshape(batch * steps, hn)
    flat_d = dlogits.reshape(batch * steps, -1)
    grads["w_out"] += flat_h.T @ flat_d
    grads["b_out"] += flat_d.sum(axis=0)
    dh_seq = (flat_d @ params.w_out.T).reshape(batch, steps, hn)
    if top.drop_mask is not None:
        # only possible if a caller applied dropout on the top layer; _run never does
        dh_seq = dh_seq * top.drop_mask

    for li in range(params.num_layers - 1, -1, -1):
        lc = cache.layer_caches[li]
        layer = params.layers[li]
        dx_seq = np.zeros_like(lc.inputs)
        dh_carry = np.zeros((batch, hn))
        dc_carry = np.zeros((batch, hn))
        gw_x = grads[f"layer{li}.w_x"]
        gw_h = grads[f"layer{li}.w_h"]
        gb = grads[f"layer{li}.b"]
        for t in range(steps - 1, -1, -1):
            i = lc.gates_i[:, t]
            f = lc.gates_f[:, t]
            g = lc.gates_g[:, t]
            o = lc.gates_o[:, t]
            tc = lc.tanh_cells[:, t]
            c_prev = lc.cells[:, t - 1] if t > 0 else lc.c0
            h_prev = lc.hidden[:, t - 1] if t > 0 else lc.h0

            dh = dh_seq[:, t] + dh_carry
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_carry
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_carry = dc * f

            da = np.concatenate([di * i * (1.0 - i),
                                 df * f * (1.0 - f),
                                 dg * (1.0 - g * g),
                                 do * o * (1.0 - o)], axis=1)
            gw_x += lc.inputs[:, t].T @ da
            gw_h += h_prev.T @ da
            gb += da.sum(axis=0)
            dx_seq[:, t] = da @ layer.w_x.T
            dh_carry = da @ layer.w_h.T
        if li > 0:
            below = cache.layer_caches[li - 1]
            dh_seq = dx_seq if below.drop_mask is None else dx_seq * below.drop_mask
        else:
            np.add.at(grads["embedding"], cache.ids, dx_seq)
    return grads


def next_token_distribution(params: ModelParams, seed_ids) -> np.ndarray:
    """Softmax at the final position after running the seed from a zero state."""
    ids = np.asarray(seed_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("seed sequence must be non-empty")
    logits, _ = forward(params, ids)
    return softmax(logits[-1])


def save_checkpoint(params: ModelParams, hyper: ModelHyper, vocab: Vocabulary,
                    path: str | Path) -> None:
    """Write a checkpoint per the format documented in the module docstring."""
    if params.vocab_size != len(vocab):
        raise CheckpointShapeError("parameter vocab size does not match the vocabulary")
    parts = [MAGIC + str(VERSION).encode("ascii")]
    parts.append(struct.pack("<6I", params.vocab_size, params.embed_dim,
                             params.hidden_units, params.num_layers,
                             hyper.seq_len, vocab.min_count))
    parts.append(struct.pack("<d", hyper.dropout))
    for _, tensor in named_tensors(params):
        parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    parts.append("\n".join(vocab.tokens).encode("utf-8"))
    Path(path).write_bytes(b"".join(parts))


def _expected_shapes(v: int, d: int, h: int, layers: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = [("embedding", (v, d))]
    for i in range(layers):
        in_dim = d if i == 0 else h
        shapes.append((f"layer{i}.w_x", (in_dim, 4 * h)))
        shapes.append((f"layer{i}.w_h", (h, 4 * h)))
        shapes.append((f"layer{i}.b", (4 * h,)))
    shapes.append(("w_out", (h, v)))
    shapes.append(("b_out", (v,)))
    return shapes


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelHyper, Vocabulary]:
    """Load a checkpoint, validating version, length and shapes."""
    blob = Path(path).read_bytes()
    header_len = 4 + 6 * 4 + 8
    if len(blob) < 4:
        raise CheckpointTruncatedError(f"{path}: file too short for magic bytes")
    if blob[:3] != MAGIC or blob[3:4] != str(VERSION).encode("ascii"):
        raise CheckpointVersionError(
            f"{path}: bad magic/version {blob[:4]!r}, expected {MAGIC + b'1'!r}")
    if len(blob) < header_len:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    v, d, h, layers, seq_len, min_count = struct.unpack("<6I", blob[4:28])
    (dropout,) = struct.unpack("<d", blob[28:36])
    if min(v, d, h, layers, seq_len) < 1:
        raise CheckpointShapeError(f"{path}: non-positive dimension in header")

    shapes = _expected_shapes(v, d, h, layers)
    offset = header_len
    tensors: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(blob):
            raise CheckpointTruncatedError(f"{path}: truncated in tensor {name}")
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)),
                            offset=offset).reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointShapeError(f"{path}: non-finite values in tensor {name}")
        tensors[name] = arr
        offset += nbytes

    tokens = blob[offset:].decode("utf-8").split("\n") if offset < len(blob) else []
    if len(tokens) != v:
        raise CheckpointShapeError(
            f"{path}: vocabulary holds {len(tokens)} tokens, header says {v}")
    try:
        vocab = Vocabulary(tokens, min_count=min_count)
    except ValueError as exc:
        raise CheckpointShapeError(f"{path}: invalid vocabulary: {exc}") from exc

    layer_params = [LayerParams(w_x=tensors[f"layer{i}.w_x"],
                                w_h=tensors[f"layer{i}.w_h"],
                                b=tensors[f"layer{i}.b"]) for i in range(layers)]
    params = ModelParams(embedding=tensors["embedding"], layers=layer_params,
                         w_out=tensors["w_out"], b_out=tensors["b_out"])
    hyper = ModelHyper(embed_dim=d, hidden_units=h, num_layers=layers,
                       seq_len=seq_len, dropout=dropout)
    return params, hyper, vocab
