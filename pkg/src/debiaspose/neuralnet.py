"""A small numpy MLP: two (dense, batch-norm, ReLU, dropout) blocks and a
linear output layer, trained with Adam on a mean-squared-error loss.

Parameters live in plain arrays; gradients and optimizer moments are dicts
keyed by the names in :data:`PARAM_NAMES`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyDataset

BN_EPS = 1e-5

PARAM_NAMES = (
    "block1.W", "block1.b", "block1.bn_gamma", "block1.bn_beta",
    "block2.W", "block2.b", "block2.bn_gamma", "block2.bn_beta",
    "output.W", "output.b",
)
# checkpoint payload order, running statistics included
CHECKPOINT_ORDER = (
    "block1.W", "block1.b", "block1.bn_gamma", "block1.bn_beta",
    "block1.bn_running_mean", "block1.bn_running_var",
    "block2.W", "block2.b", "block2.bn_gamma", "block2.bn_beta",
    "block2.bn_running_mean", "block2.bn_running_var",
    "output.W", "output.b",
)
CHECKPOINT_MAGIC = b"DBPCKPT1"


@dataclass
class LinearBlock:
    W: np.ndarray
    b: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    dropout_rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if np.any(self.bn_running_var < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def init(cls, in_dim, out_dim, dropout_rate, rng):
        bound = np.sqrt(6.0 / in_dim)
        return cls(
            W=rng.uniform(-bound, bound, size=(out_dim, in_dim)),
            b=np.zeros(out_dim),
            bn_gamma=np.ones(out_dim),
            bn_beta=np.zeros(out_dim),
            bn_running_mean=np.zeros(out_dim),
            bn_running_var=np.ones(out_dim),
            dropout_rate=dropout_rate,
        )

    def copy(self):
        return LinearBlock(
            self.W.copy(), self.b.copy(), self.bn_gamma.copy(), self.bn_beta.copy(),
            self.bn_running_mean.copy(), self.bn_running_var.copy(), self.dropout_rate,
        )


@dataclass
class MlpModel:
    block1: LinearBlock
    block2: LinearBlock
    W_out: np.ndarray
    b_out: np.ndarray
    seed: int = 0

    def __post_init__(self):
        i, h, o = self.input_dim, self.hidden_dim, self.output_dim
        if self.block1.W.shape != (h, i) or self.block2.W.shape != (h, h) or self.W_out.shape != (o, h):
            raise DimensionMismatch("layer shapes do not chain input -> hidden -> hidden -> output")

    @classmethod
    def init(cls, input_dim, output_dim, hidden_dim=1024, dropout_rate=0.5, seed=0):
        """Kaiming-uniform weights, zero biases, identity batch norm."""
        rng = np.random.default_rng(seed)
        b1 = LinearBlock.init(input_dim, hidden_dim, dropout_rate, rng)
        b2 = LinearBlock.init(hidden_dim, hidden_dim, dropout_rate, rng)
        bound = np.sqrt(6.0 / hidden_dim)
        W_out = rng.uniform(-bound, bound, size=(output_dim, hidden_dim))
        return cls(b1, b2, W_out, np.zeros(output_dim), seed=seed)

    @property
    def input_dim(self):
        return self.block1.W.shape[1]

    @property
    def hidden_dim(self):
        return self.block1.W.shape[0]

    @property
    def output_dim(self):
        return self.W_out.shape[0]

    @property
    def dropout_rate(self):
        return self.block1.dropout_rate

    def params(self) -> dict:
        """Trainable arrays by name (views, not copies)."""
        return {
            "block1.W": self.block1.W, "block1.b": self.block1.b,
            "block1.bn_gamma": self.block1.bn_gamma, "block1.bn_beta": self.block1.bn_beta,
            "block2.W": self.block2.W, "block2.b": self.block2.b,
            "block2.bn_gamma": self.block2.bn_gamma, "block2.bn_beta": self.block2.bn_beta,
            "output.W": self.W_out, "output.b": self.b_out,
        }

    def state(self) -> dict:
        d = self.params()
        for k, blk in (("block1", self.block1), ("block2", self.block2)):
            d[f"{k}.bn_running_mean"] = blk.bn_running_mean
            d[f"{k}.bn_running_var"] = blk.bn_running_var
        return d

    def with_params(self, params: dict) -> "MlpModel":
        """New model with trainable arrays replaced; running stats copied."""
        new = self.copy()
        new._assign({k: np.array(v, dtype=np.float64) for k, v in params.items()})
        return new

    def _assign(self, params: dict) -> None:
        for k, blk in (("block1", self.block1), ("block2", self.block2)):
            blk.W = params[f"{k}.W"]
            blk.b = params[f"{k}.b"]
            blk.bn_gamma = params[f"{k}.bn_gamma"]
            blk.bn_beta = params[f"{k}.bn_beta"]
        self.W_out = params["output.W"]
        self.b_out = params["output.b"]

    def copy(self) -> "MlpModel":
        return MlpModel(self.block1.copy(), self.block2.copy(), self.W_out.copy(), self.b_out.copy(), self.seed)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 20
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1
    seed: int = 0
    hidden_dim: int = 1024
    dropout_rate: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch statistics")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
            v={k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()},
        )


@dataclass
class BlockTape:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    bn_out: np.ndarray
    relu_mask: np.ndarray
    drop_mask: np.ndarray  # already scaled by 1/(1-p)


@dataclass
class Tape:
    train: bool
    blocks: list = field(default_factory=list)
    h: np.ndarray = None  # input to the output layer


def _block_forward(blk: LinearBlock, x, train, rng, drop_mask):
    z = x @ blk.W.T + blk.b
    if train:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
    else:
        mean, var = blk.bn_running_mean, blk.bn_running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean) * inv_std
    y = blk.bn_gamma * xhat + blk.bn_beta
    relu_mask = y > 0
    a = np.where(relu_mask, y, 0.0)
    if train and blk.dropout_rate > 0:
        if drop_mask is None:
            keep = rng.random(a.shape) >= blk.dropout_rate
            drop_mask = keep / (1.0 - blk.dropout_rate)
        a = a * drop_mask
    else:
        drop_mask = np.ones_like(a)
    return a, BlockTape(x, xhat, inv_std, mean, var, y, relu_mask, drop_mask)


def forward(model: MlpModel, batch, mode: str = "eval", rng=None, dropout_masks=None):
    """Run the network.

    Parameters
    ----------
    model : MlpModel
    batch : array, shape (n, input_dim)
    mode : {"train", "eval"}
        Train mode uses batch statistics and samples dropout masks from
        ``rng``; eval mode uses running statistics and no dropout.
    dropout_masks : pair of arrays, optional
        Replay previously recorded (scaled) dropout masks instead of sampling.

    Returns
    -------
    outputs, tape
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionMismatch(f"expected (n, {model.input_dim}) input, got {x.shape}")
    train = mode == "train"
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if train and x.shape[0] < 2:
        raise DimensionMismatch("train mode needs a batch of at least 2 rows")
    if train and rng is None and dropout_masks is None and model.dropout_rate > 0:
        raise ValueError("train mode with dropout needs an rng")
    tape = Tape(train=train)
    masks = dropout_masks or (None, None)
    for blk, mask in zip((model.block1, model.block2), masks):
        x, bt = _block_forward(blk, x, train, rng, mask)
        tape.blocks.append(bt)
    tape.h = x
    return x @ model.W_out.T + model.b_out, tape


def mse_loss(pred, target, mask=None):
    """Mean squared error and its gradient with respect to ``pred``.

    With a boolean ``mask`` the mean runs over the selected entries only and
    unselected entries receive zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    if mask is None:
        n = diff.size
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), diff.shape)
        diff = np.where(mask, diff, 0.0)
        n = max(int(mask.sum()), 1)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def _block_backward(blk: LinearBlock, bt: BlockTape, da, prefix, grads):
    da = da * bt.drop_mask
    dy = np.where(bt.relu_mask, da, 0.0)
    grads[f"{prefix}.bn_gamma"] = np.sum(dy * bt.xhat, axis=0)
    grads[f"{prefix}.bn_beta"] = np.sum(dy, axis=0)
    dxhat = dy * blk.bn_gamma
    n = dxhat.shape[0]
    dz = (bt.inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - bt.xhat * np.sum(dxhat * bt.xhat, axis=0))
    grads[f"{prefix}.W"] = dz.T @ bt.x
    grads[f"{prefix}.b"] = dz.sum(axis=0)
    return dz @ blk.W


def backward(model: MlpModel, tape: Tape, dout) -> dict:
    """Exact parameter gradients for a train-mode tape."""
    if not tape.train:
        raise ValueError("backward needs a tape recorded in train mode")
    dout = np.asarray(dout, dtype=np.float64)
    grads = {}
    grads["output.W"] = dout.T @ tape.h
    grads["output.b"] = dout.sum(axis=0)
    da = dout @ model.W_out
    da = _block_backward(model.block2, tape.blocks[1], da, "block2", grads)
    _block_backward(model.block1, tape.blocks[0], da, "block1", grads)
    return {k: grads[k] for k in PARAM_NAMES}


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not modified."""
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[k] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def _update_running_stats(model: MlpModel, tape: Tape, momentum: float) -> None:
    for blk, bt in zip((model.block1, model.block2), tape.blocks):
        blk.bn_running_mean = (1.0 - momentum) * blk.bn_running_mean + momentum * bt.mean
        blk.bn_running_var = (1.0 - momentum) * blk.bn_running_var + momentum * bt.var


def train_epochs(model: MlpModel, inputs, targets, cfg: TrainConfig, mask=None, loss_scale=None):
    """Mini-batch Adam training.

    Returns the trained copy of ``model`` and the mean training loss of each
    epoch. A trailing batch with a single row is dropped for that epoch
    (batch norm cannot use it). ``loss_scale`` (per output column) rescales
    residuals for the reported loss only; gradients are unaffected.
    """
    X = np.asarray(inputs, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyDataset("no training samples")
    if X.shape[0] < 2:
        raise EmptyDataset("need at least two samples for batch statistics")
    if Y.shape[0] != X.shape[0]:
        raise DimensionMismatch("inputs and targets differ in length")
    M = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), Y.shape)
    rng = np.random.default_rng(cfg.seed)
    model = model.copy()
    params = {k: v.copy() for k, v in model.params().items()}
    state = AdamState.zeros_like(params)
    trace = []
    n = X.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            model._assign(params)
            out, tape = forward(model, X[idx], "train", rng=rng)
            bm = None if M is None else M[idx]
            loss, dout = mse_loss(out, Y[idx], bm)
            if loss_scale is not None:
                loss, _ = mse_loss(out * loss_scale, Y[idx] * loss_scale, bm)
            grads = backward(model, tape, dout)
            params, state = adam_step(params, grads, state, cfg)
            _update_running_stats(model, tape, cfg.bn_momentum)
            total += loss * len(idx)
            seen += len(idx)
        trace.append(total / seen)
    model._assign(params)
    return model, trace


def save_checkpoint(path, model: MlpModel, extra: dict | None = None) -> None:
    """Write ``magic, header length, JSON header, little-endian f8 payload``."""
    state = model.state()
    header = {
        "dims": {"input": model.input_dim, "hidden": model.hidden_dim, "output": model.output_dim},
        "hyperparameters": {"dropout_rate": model.dropout_rate, "bn_eps": BN_EPS,
                            "init": "kaiming_uniform"},
        "seed": model.seed,
        "order": list(CHECKPOINT_ORDER),
        "shapes": {k: list(state[k].shape) for k in CHECKPOINT_ORDER},
    }
    if extra:
        header.update(extra)
    head = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(state[k], dtype="<f8").tobytes() for k in CHECKPOINT_ORDER)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path) -> MlpModel:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off:off + n])
    off += n
    arrays = {}
    for k in header["order"]:
        shape = tuple(header["shapes"][k])
        count = int(np.prod(shape))
        arrays[k] = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
    if off != len(data):
        raise ValueError("checkpoint payload length does not match header")
    p = header["hyperparameters"]["dropout_rate"]

    def blk(name):
        return LinearBlock(*(arrays[f"{name}.{f}"] for f in
                             ("W", "b", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")), dropout_rate=p)

    return MlpModel(blk("block1"), blk("block2"), arrays["output.W"], arrays["output.b"], seed=header["seed"])
