"""Decoder-only autoregressive transformer over the unified vocabulary.

Pre-norm blocks, learned absolute positions, GELU feed-forward, untied
output head (so head rows can be trained independently of the embedding).
Forward and backward passes are written out explicitly; parameters live in a
flat dict keyed by checkpoint section names ("lm.embed", "lm.layer{i}.*",
"lm.head.weight", "lm.head.bias").
"""

from __future__ import annotations

import numpy as np

from . import nn
from .config import ModelConfig
from .errors import DivergenceError, EmptyLossError, ShapeError, TokenRangeError

NEG_INF = -1e9  # additive causal bias; underflows to exactly 0 after softmax


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Seeded Gaussian init (scale 0.02), zero biases, unit layer-norm gains."""
    rng = rng if rng is not None else nn.rng_for(cfg.seed)

    def gauss(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(np.float32)

    d, v = cfg.d_model, cfg.vocab_size
    params: dict[str, np.ndarray] = {
        "lm.embed": gauss(v, d),
        "lm.pos": gauss(cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"lm.layer{i}"
        params[f"{p}.ln1.weight"] = np.ones(d, dtype=np.float32)
        params[f"{p}.ln1.bias"] = np.zeros(d, dtype=np.float32)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{name}"] = gauss(d, d)
        # no key bias: softmax is invariant to constant per-row score shifts,
        # so a key bias would be a dead parameter with identically zero gradient
        for name in ("bq", "bv", "bo"):
            params[f"{p}.attn.{name}"] = np.zeros(d, dtype=np.float32)
        params[f"{p}.ln2.weight"] = np.ones(d, dtype=np.float32)
        params[f"{p}.ln2.bias"] = np.zeros(d, dtype=np.float32)
        params[f"{p}.ff.w1"] = gauss(cfg.d_ff, d)
        params[f"{p}.ff.b1"] = np.zeros(cfg.d_ff, dtype=np.float32)
        params[f"{p}.ff.w2"] = gauss(d, cfg.d_ff)
        params[f"{p}.ff.b2"] = np.zeros(d, dtype=np.float32)
    params["lm.ln_f.weight"] = np.ones(d, dtype=np.float32)
    params["lm.ln_f.bias"] = np.zeros(d, dtype=np.float32)
    params["lm.head.weight"] = gauss(v, d)
    params["lm.head.bias"] = np.zeros(v, dtype=np.float32)
    return params


def _check_tokens(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (B, T), got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ShapeError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise TokenRangeError(f"token id outside [0, {cfg.vocab_size})")
    return tokens


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def forward(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    cfg: ModelConfig,
    want_cache: bool = False,
):
    """tokens (B, T) -> logits (B, T, V); causal, deterministic.

    With ``want_cache`` returns (logits, cache) for :func:`backward`.
    """
    tokens = _check_tokens(tokens, cfg)
    b, t = tokens.shape
    dtype = params["lm.embed"].dtype
    x = params["lm.embed"][tokens] + params["lm.pos"][:t]
    causal = np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)
    scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)

    layer_caches = []
    for i in range(cfg.n_layers):
        p = f"lm.layer{i}"
        y1, ln1_cache = nn.layer_norm(x, params[f"{p}.ln1.weight"], params[f"{p}.ln1.bias"])
        q = _split_heads(nn.linear(y1, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"]), cfg.n_heads)
        k = _split_heads(y1 @ params[f"{p}.attn.wk"].T, cfg.n_heads)
        v = _split_heads(nn.linear(y1, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"]), cfg.n_heads)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + causal
        probs = nn.softmax(scores)
        ctx = _merge_heads(probs @ v)
        attn_out = nn.linear(ctx, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
        x2 = x + attn_out
        y2, ln2_cache = nn.layer_norm(x2, params[f"{p}.ln2.weight"], params[f"{p}.ln2.bias"])
        h1 = nn.linear(y2, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"])
        a1, tanh1 = nn.gelu_fwd(h1)
        x3 = x2 + nn.linear(a1, params[f"{p}.ff.w2"], params[f"{p}.ff.b2"])
        if want_cache:
            layer_caches.append(
                (x, ln1_cache, y1, q, k, v, probs, ctx, x2, ln2_cache, y2, h1, tanh1, a1)
            )
        x = x3

    hf, lnf_cache = nn.layer_norm(x, params["lm.ln_f.weight"], params["lm.ln_f.bias"])
    logits = nn.linear(hf, params["lm.head.weight"], params["lm.head.bias"])
    if not want_cache:
        return logits
    return logits, (tokens, layer_caches, lnf_cache, hf)


def backward(
    params: dict[str, np.ndarray],
    cache,
    dlogits: np.ndarray,
    cfg: ModelConfig,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every parameter, given d loss / d logits."""
    tokens, layer_caches, lnf_cache, hf = cache
    b, t = tokens.shape
    scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
    grads: dict[str, np.ndarray] = {}

    dhf, dw, db = nn.linear_backward(dlogits, hf, params["lm.head.weight"])
    grads["lm.head.weight"] = dw
    grads["lm.head.bias"] = db
    dx, dg, dbias = nn.layer_norm_backward(dhf, lnf_cache)
    grads["lm.ln_f.weight"] = dg
    grads["lm.ln_f.bias"] = dbias

    for i in reversed(range(cfg.n_layers)):
        p = f"lm.layer{i}"
        x, ln1_cache, y1, q, k, v, probs, ctx, x2, ln2_cache, y2, h1, tanh1, a1 = layer_caches[i]

        # feed-forward sub-block: x3 = x2 + w2(gelu(w1(ln2(x2))))
        da1, dw2, db2 = nn.linear_backward(dx, a1, params[f"{p}.ff.w2"])
        grads[f"{p}.ff.w2"] = dw2
        grads[f"{p}.ff.b2"] = db2
        dh1 = da1 * nn.gelu_grad(h1, tanh1)
        dy2, dw1, db1 = nn.linear_backward(dh1, y2, params[f"{p}.ff.w1"])
        grads[f"{p}.ff.w1"] = dw1
        grads[f"{p}.ff.b1"] = db1
        dx2, dg2, dbias2 = nn.layer_norm_backward(dy2, ln2_cache)
        grads[f"{p}.ln2.weight"] = dg2
        grads[f"{p}.ln2.bias"] = dbias2
        dx2 = dx2 + dx  # residual

        # attention sub-block: x2 = x + wo(attend(ln1(x)))
        dctx, dwo, dbo = nn.linear_backward(dx2, ctx, params[f"{p}.attn.wo"])
        grads[f"{p}.attn.wo"] = dwo
        grads[f"{p}.attn.bo"] = dbo
        dctx_h = _split_heads(dctx, cfg.n_heads)
        dprobs = dctx_h @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx_h
        dscores = nn.softmax_backward(dprobs, probs)
        dq = dscores @ k * scale
        dk = dscores.transpose(0, 1, 3, 2) @ q * scale
        dy1 = np.zeros_like(y1)
        for name, dhead in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = _merge_heads(dhead)
            dpart, dwn, dbn = nn.linear_backward(dflat, y1, params[f"{p}.attn.{name}"])
            grads[f"{p}.attn.{name}"] = dwn
            if name != "wk":  # key projection has no bias
                grads[f"{p}.attn.b{name[1]}"] = dbn
            dy1 += dpart
        dx_ln1, dg1, dbias1 = nn.layer_norm_backward(dy1, ln1_cache)
        grads[f"{p}.ln1.weight"] = dg1
        grads[f"{p}.ln1.bias"] = dbias1
        dx = dx2 + dx_ln1

    dembed = np.zeros_like(params["lm.embed"])
    np.add.at(dembed, tokens, dx)
    grads["lm.embed"] = dembed
    dpos = np.zeros_like(params["lm.pos"])
    dpos[:t] = dx.sum(axis=0)
    grads["lm.pos"] = dpos
    return grads


def loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean cross-entropy over masked positions (computed in float64)."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise EmptyLossError("loss mask has no true positions")
    lg = logits.astype(np.float64)
    lse = np.log(np.sum(np.exp(lg - lg.max(axis=-1, keepdims=True)), axis=-1)) + lg.max(axis=-1)
    target_logit = np.take_along_axis(lg, targets[..., None], axis=-1)[..., 0]
    nll = lse - target_logit
    return float(nll[mask].mean())


def loss_and_dlogits(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """Weighted cross-entropy sum(w * nll) / sum(w) and its logits gradient."""
    w = np.asarray(weights, dtype=np.float64)
    total_w = float(w.sum())
    if total_w <= 0.0:
        raise EmptyLossError("loss weights sum to zero")
    lg = logits.astype(np.float64)
    mx = lg.max(axis=-1, keepdims=True)
    e = np.exp(lg - mx)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    nll = np.log(z)[..., 0] + mx[..., 0] - np.take_along_axis(lg, targets[..., None], -1)[..., 0]
    value = float((w * nll).sum() / total_w)

    dlogits = probs
    batch_idx = np.indices(targets.shape)
    dlogits[batch_idx[0], batch_idx[1], targets] -= 1.0
    dlogits *= (w / total_w)[..., None]
    return value, dlogits.astype(logits.dtype)


def lm_loss_and_grads(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    target_weights: np.ndarray,
    cfg: ModelConfig,
):
    """Next-token objective on a (B, T) batch.

    ``target_weights`` is (B, T): the weight of predicting tokens[:, t] from
    its prefix; position 0 is ignored (never a target).
    """
    inputs = tokens[:, :-1]
    targets = tokens[:, 1:]
    weights = np.asarray(target_weights)[:, 1:]
    logits, cache = forward(params, inputs, cfg, want_cache=True)
    value, dlogits = loss_and_dlogits(logits, targets, weights)
    grads = backward(params, cache, dlogits, cfg)
    return value, grads


def train_step(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    target_weights: np.ndarray,
    opt: nn.SgdMomentum,
    cfg: ModelConfig,
    lr: float,
    grad_clip: float = 0.0,
    step_index: int = 0,
    frozen_head_rows: np.ndarray | None = None,
) -> float:
    """One optimizer update on all parameters; returns the loss.

    ``frozen_head_rows`` (bool vector over the vocab) pins those output-head
    rows: their gradients are zeroed, so with zero-initialized momentum the
    rows never move.
    """
    value, grads = lm_loss_and_grads(params, tokens, target_weights, cfg)
    if not np.isfinite(value):
        raise DivergenceError("LM training loss is non-finite", step=step_index, learning_rate=lr)
    if grad_clip:
        nn.clip_grads(grads, grad_clip)
    if frozen_head_rows is not None:
        grads["lm.head.weight"][frozen_head_rows] = 0.0
        grads["lm.head.bias"][frozen_head_rows] = 0.0
    opt.step(params, grads, lr)
    return value
