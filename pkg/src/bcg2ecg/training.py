"""Reverse-mode gradients, MSE loss, Adam, and the mini-batch training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .transformer import (
    Activation,
    ModelConfig,
    ModelParams,
    QK_INITS,
    forward,
    init_params,
    stack_heads,
    unstack_heads,
)

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-4
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    dtype: str = "float32"
    qk_init: str = "aligned"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        np.dtype(self.dtype)
        if self.qk_init not in QK_INITS:
            raise ValueError(f"qk_init must be one of {QK_INITS}")

    def to_dict(self) -> dict:
        return asdict(self)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. `pred`.

    For a batch [B, S] this is the mean of the per-segment MSEs.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 / n) * diff


def _layer_norm_backward(dy, xhat, inv_std, gain):
    dgain = np.einsum("bsd,bsd->d", dy, xhat)
    dbias = dy.sum(axis=(0, 1))
    dxhat = dy * gain
    dx = inv_std * (
        dxhat - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def backward(acts: Activation, grad_pred: np.ndarray, params: ModelParams) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every tensor in `params`.

    `grad_pred` is dLoss/dpred with the shape `forward` returned.
    """
    config = params.config
    if acts.config is not None and acts.config != config:
        raise ValueError("activations were produced by a different model config")
    if len(acts.layers) != config.n_layers:
        raise ValueError("activation cache does not match the number of layers")
    dy = np.asarray(grad_pred, dtype=params.dtype)
    if acts.squeeze:
        dy = dy[None]
    if dy.shape != acts.x.shape:
        raise ValueError(f"grad_pred shape {np.shape(grad_pred)} does not match forward input")

    grads: dict[str, np.ndarray] = {}
    w_out = params["output_proj.weight"]
    grads["output_proj.weight"] = (_flat(acts.final).T @ dy.reshape(-1))[:, None]
    grads["output_proj.bias"] = np.array([dy.sum()], dtype=params.dtype)
    dh = dy[:, :, None] * w_out[:, 0]

    h_heads = config.n_heads
    scale = 1.0 / np.sqrt(config.d_k)
    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        c = acts.layers[i]
        lp = params.layer(i)

        dr2, grads[p + "norm2.gain"], grads[p + "norm2.bias"] = _layer_norm_backward(
            dh, c["xhat2"], c["inv2"], lp["norm2.gain"]
        )
        # feed-forward sublayer
        grads[p + "ffn.w2"] = _flat(c["a"]).T @ _flat(dr2)
        grads[p + "ffn.b2"] = dr2.sum(axis=(0, 1))
        df1 = dr2 @ lp["ffn.w2"].T
        df1 *= c["f1"] > 0
        grads[p + "ffn.w1"] = _flat(c["n1"]).T @ _flat(df1)
        grads[p + "ffn.b1"] = df1.sum(axis=(0, 1))
        dn1 = dr2 + df1 @ lp["ffn.w1"].T

        dr1, grads[p + "norm1.gain"], grads[p + "norm1.bias"] = _layer_norm_backward(
            dn1, c["xhat1"], c["inv1"], lp["norm1.gain"]
        )
        # attention sublayer
        u = c["u"]
        grads[p + "attn.w_o"] = _flat(c["concat"]).T @ _flat(dr1)
        dconcat = dr1 @ lp["attn.w_o"].T
        b, s, _ = dconcat.shape
        da = dconcat.reshape(b, s, h_heads, config.d_k).transpose(0, 2, 1, 3)
        prob = c["p"]
        dp = da @ np.swapaxes(c["v"], -1, -2)
        dv = np.swapaxes(prob, -1, -2) @ da
        dscores = prob * (dp - (dp * prob).sum(axis=-1, keepdims=True))
        dscores *= scale
        dq = dscores @ c["k"]
        dk = np.swapaxes(dscores, -1, -2) @ c["q"]

        du = dr1.copy()
        for name, d in (("w_q", dq), ("w_k", dk), ("w_v", dv)):
            d_cat = d.transpose(0, 2, 1, 3).reshape(b, s, -1)
            w = lp["attn." + name]
            grads[p + "attn." + name] = unstack_heads(_flat(u).T @ _flat(d_cat), h_heads)
            du += d_cat @ stack_heads(w).T
        dh = du

    grads["input_proj.weight"] = np.einsum("bsd,bs->d", dh, acts.x)[None, :]
    grads["input_proj.bias"] = dh.sum(axis=(0, 1))
    return {name: grads[name] for name in params.names()}


def loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray):
    pred, acts = forward(x, params)
    loss, dpred = mse_loss(pred, y)
    return loss, backward(acts, dpred, params)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.tensors.items()},
            v={k: np.zeros_like(a) for k, a in params.tensors.items()},
        )


def adam_step(params: ModelParams, grads: dict, state: OptimizerState, config: TrainConfig):
    """One bias-corrected Adam update. Updates `params` and `state` in place and returns both."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {k}")
        if g.shape != params[k].shape or state.m[k].shape != g.shape:
            raise ValueError(f"shape mismatch for {k}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    lr_t = float(config.learning_rate * np.sqrt(1 - b2 ** state.t) / (1 - b1 ** state.t))
    # epsilon is applied to the bias-corrected second moment, as in the
    # textbook update: w -= lr * m_hat / (sqrt(v_hat) + eps)
    eps_hat = float(config.epsilon * np.sqrt(1 - b2 ** state.t))
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        params[k] -= (lr_t * m / (np.sqrt(v) + eps_hat)).astype(params[k].dtype, copy=False)
    return params, state


def fit(
    inputs: np.ndarray,
    targets: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: Optional[ModelParams] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> tuple[ModelParams, list[float]]:
    """Train on arrays of shape [N, seq_len]; returns params and per-epoch mean loss."""
    dtype = np.dtype(train_config.dtype)
    x_all = np.asarray(inputs, dtype=dtype)
    y_all = np.asarray(targets, dtype=dtype)
    if x_all.ndim != 2 or x_all.shape != y_all.shape or x_all.shape[0] == 0:
        raise ValueError("inputs and targets must be matching non-empty [N, seq_len] arrays")
    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    if params is None:
        params = init_params(
            model_config, seed=int(seeds[0].generate_state(1)[0]), dtype=dtype, qk_init=train_config.qk_init
        )
    else:
        params = params.astype(dtype)
    rng = np.random.default_rng(seeds[1])
    state = OptimizerState.zeros_like(params)
    n = x_all.shape[0]
    bs = train_config.batch_size
    history = []
    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, a in enumerate(range(0, n, bs)):
            idx = order[a : a + bs]
            loss, grads = loss_and_grads(params, x_all[idx], y_all[idx])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch} batch {bi}", epoch, bi
                )
            try:
                adam_step(params, grads, state, train_config)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch} batch {bi}", epoch, bi) from exc
            total += loss * len(idx)
        history.append(total / n)
        log.debug("epoch %d mean loss %.6g", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return params, history


def train(
    dataset: Sequence,
    model_config: ModelConfig,
    train_config: TrainConfig,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> tuple[ModelParams, list[float]]:
    """Train on SegmentPairs (BCG in, ECG target). Degenerate segments are rejected."""
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    bad = [s.key for s in dataset if s.degenerate]
    if bad:
        raise ValueError(f"{len(bad)} degenerate segments in training set, e.g. {bad[0]}")
    x = np.stack([s.bcg for s in dataset])
    y = np.stack([s.ecg for s in dataset])
    return fit(x, y, model_config, train_config, on_epoch=on_epoch)
