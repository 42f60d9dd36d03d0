"""Multi-view transformer: encoder, MAE decoder, action decoder and their losses.

Parameters live in a flat ``dict[str, ndarray]`` whose keys are prefixed by
the sub-network they belong to (``enc.``, ``mae.``, ``act.``).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import layers as L
from .patches import MaskStrategy, N_VIEWS, detokenize_views, select_channels, token_channel_mask
from .renderer import N_CHANNELS

PARTS = ("enc", "mae", "act")
ACTION_DIM = 8


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    enc_layers: int = 2
    dec_layers: int = 1
    heads: int = 4
    patch: int = 8
    image_size: int = 64
    goal_vocab: int = 8
    act_layers: int = 1
    strategy: str = "rgb_only"
    seed: int = 0
    n_views: int = N_VIEWS

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.image_size % self.patch:
            raise ValueError(
                f"patch size P={self.patch} must divide image size "
                f"W=H={self.image_size}"
            )
        object.__setattr__(self, "strategy", MaskStrategy(self.strategy).value)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(hidden=1024, enc_layers=8, dec_layers=2, heads=8, patch=10, image_size=220)
        base.update(kw)
        return cls(**base)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * N_CHANNELS

    @property
    def out_channels(self) -> int:
        return len(MaskStrategy(self.strategy).channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ToyAction:
    a_pos: np.ndarray
    a_rot: np.ndarray
    a_open: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.a_pos, self.a_rot, [self.a_open]])


@dataclass
class PretrainSample:
    tokens: np.ndarray
    flags: np.ndarray
    target: np.ndarray


@dataclass
class FinetuneSample:
    tokens: np.ndarray
    flags: np.ndarray
    goal: int
    action: ToyAction


# ---------------------------------------------------------------------------
# parameters


def _block_shapes(pre, H):
    s = {}
    for ln in ("ln1", "ln2"):
        s[f"{pre}{ln}.g"] = (H,)
        s[f"{pre}{ln}.b"] = (H,)
    for proj in ("q", "k", "v", "o"):
        s[f"{pre}attn.{proj}_w"] = (H, H)
        s[f"{pre}attn.{proj}_b"] = (H,)
    s[f"{pre}mlp.fc1_w"] = (H, 4 * H)
    s[f"{pre}mlp.fc1_b"] = (4 * H,)
    s[f"{pre}mlp.fc2_w"] = (4 * H, H)
    s[f"{pre}mlp.fc2_b"] = (H,)
    return s


def param_shapes(cfg: ModelConfig, parts=PARTS) -> dict:
    """Ordered name -> shape map for the requested sub-networks."""
    H = cfg.hidden
    s = {}
    if "enc" in parts:
        s["enc.patch_w"] = (cfg.token_dim, H)
        s["enc.patch_b"] = (H,)
        s["enc.mask_emb"] = (H,)
        s["enc.view_emb"] = (cfg.n_views, H)
        s["enc.pos_emb"] = (cfg.n_tokens, H)
        for i in range(cfg.enc_layers):
            s.update(_block_shapes(f"enc.blocks.{i}.", H))
        s["enc.norm.g"] = (H,)
        s["enc.norm.b"] = (H,)
    if "mae" in parts:
        for i in range(cfg.dec_layers):
            s.update(_block_shapes(f"mae.blocks.{i}.", H))
        s["mae.norm.g"] = (H,)
        s["mae.norm.b"] = (H,)
        s["mae.head_w"] = (H, cfg.patch * cfg.patch * cfg.out_channels)
        s["mae.head_b"] = (cfg.patch * cfg.patch * cfg.out_channels,)
    if "act" in parts:
        s["act.goal_emb"] = (cfg.goal_vocab, H)
        for i in range(cfg.act_layers):
            s.update(_block_shapes(f"act.blocks.{i}.", H))
        s["act.norm.g"] = (H,)
        s["act.norm.b"] = (H,)
        s["act.head_w"] = (H, ACTION_DIM)
        s["act.head_b"] = (ACTION_DIM,)
    return s


def count_params(cfg: ModelConfig, parts=PARTS) -> int:
    return int(sum(np.prod(shape) for shape in param_shapes(cfg, parts).values()))


def _trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, parts=PARTS, dtype=np.float32, seed=None) -> dict:
    """Deterministic init: truncated normal (std 0.02) for weights and
    embeddings, zeros for biases and norm offsets, ones for norm scales.

    Each part draws from its own stream so that, e.g., the action decoder's
    initial weights do not depend on whether the MAE decoder exists.
    """
    seed = cfg.seed if seed is None else seed
    params = {}
    for part in parts:
        rng = np.random.default_rng([seed & (2**64 - 1), PARTS.index(part)])
        for name, shape in param_shapes(cfg, (part,)).items():
            if name.endswith(".g"):
                arr = np.ones(shape)
            elif name.endswith("_b") or name.endswith(".b"):
                arr = np.zeros(shape)
            else:
                arr = _trunc_normal(rng, shape)
            params[name] = arr.astype(dtype)
    return params


def cast_params(params: dict, dtype) -> dict:
    return {k: v.astype(dtype) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward passes


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


def _stack(x, p, prefix, n_layers, heads):
    caches = []
    for i in range(n_layers):
        x, c = L.block_forward(x, p, f"{prefix}.blocks.{i}.", heads)
        caches.append(c)
    return x, caches


def _stack_backward(dx, caches, p, prefix, grads):
    for i in reversed(range(len(caches))):
        dx = L.block_backward(dx, caches[i], p, f"{prefix}.blocks.{i}.", grads)
    return dx


def _encode(tokens, flags, params, cfg):
    V, N, D = tokens.shape
    if (V, N, D) != (cfg.n_views, cfg.n_tokens, cfg.token_dim):
        raise ValueError(
            f"token array {tokens.shape} does not match config "
            f"({cfg.n_views}, {cfg.n_tokens}, {cfg.token_dim})"
        )
    _check_finite("encoder input tokens", tokens)
    dtype = params["enc.patch_w"].dtype
    x = tokens.reshape(V * N, D).astype(dtype, copy=False)
    f = flags.reshape(V * N, 1).astype(dtype)
    e = (
        x @ params["enc.patch_w"]
        + params["enc.patch_b"]
        + np.tile(params["enc.pos_emb"], (V, 1))
        + np.repeat(params["enc.view_emb"], N, axis=0)
        + f * params["enc.mask_emb"]
    )
    h, blocks = _stack(e, params, "enc", cfg.enc_layers, cfg.heads)
    z, c_norm = L.layer_norm_forward(h, params["enc.norm.g"], params["enc.norm.b"])
    return z, (x, f, blocks, c_norm, V, N)


def _encode_backward(dz, cache, params, grads):
    x, f, blocks, c_norm, V, N = cache
    dh = L.layer_norm_backward(dz, c_norm, "enc.norm", grads)
    de = _stack_backward(dh, blocks, params, "enc", grads)
    L.accumulate(grads, "enc.patch_w", x.T @ de)
    L.accumulate(grads, "enc.patch_b", de.sum(axis=0))
    L.accumulate(grads, "enc.pos_emb", de.reshape(V, N, -1).sum(axis=0))
    L.accumulate(grads, "enc.view_emb", de.reshape(V, N, -1).sum(axis=1))
    L.accumulate(grads, "enc.mask_emb", (f * de).sum(axis=0))


def encode(masked_tokens, mask_flags, params, cfg: ModelConfig, return_cache=False):
    """Embed all ``5N`` tokens and run the encoder blocks jointly across views.

    Returns the latent ``z`` of shape ``(5N, hidden)``, view-major.
    """
    z, cache = _encode(np.asarray(masked_tokens), np.asarray(mask_flags), params, cfg)
    return (z, cache) if return_cache else z


def _check_strategy(params, cfg, strategy):
    strategy = MaskStrategy(strategy)
    want = cfg.patch * cfg.patch * len(strategy.channels)
    have = params["mae.head_b"].shape[0]
    if want != have:
        raise ValueError(
            f"MAE head outputs {have} values per token but strategy '{strategy.value}' "
            f"needs {want}"
        )
    return strategy


def _mae_decode(z, params, cfg):
    h, blocks = _stack(z, params, "mae", cfg.dec_layers, cfg.heads)
    hn, c_norm = L.layer_norm_forward(h, params["mae.norm.g"], params["mae.norm.b"])
    out = hn @ params["mae.head_w"] + params["mae.head_b"]
    return out, (blocks, c_norm, hn)


def _mae_decode_backward(dout, cache, params, grads):
    blocks, c_norm, hn = cache
    dhn = L.linear_backward(dout, hn, params["mae.head_w"], "mae.head", grads)
    dh = L.layer_norm_backward(dhn, c_norm, "mae.norm", grads)
    return _stack_backward(dh, blocks, params, "mae", grads)


def mae_decode_tokens(z, params, cfg: ModelConfig, strategy=None):
    """Per-token predictions ``(5, N, P*P*C')``."""
    _check_strategy(params, cfg, strategy or cfg.strategy)
    out, _ = _mae_decode(z, params, cfg)
    return out.reshape(cfg.n_views, cfg.n_tokens, -1)


def mae_decode(z, params, cfg: ModelConfig, strategy=None):
    """Reconstructed views ``(5, H, W, C')`` with C' = 3 (rgb_only) or 10."""
    tok = mae_decode_tokens(z, params, cfg, strategy)
    return detokenize_views(tok, (cfg.grid, cfg.grid), cfg.patch)


def recon_loss(pred, target, strategy) -> float:
    """Mean over views and pixels of the squared L2 pixel error.

    ``target`` may carry all 10 channels; it is restricted to the strategy's
    channel set. Every pixel counts, masked or not.
    """
    strategy = MaskStrategy(strategy)
    pred = np.asarray(pred)
    target = np.asarray(target)
    if target.shape[-1] == N_CHANNELS and pred.shape[-1] != N_CHANNELS:
        target = target[..., list(strategy.channels)]
    if pred.shape != target.shape or pred.ndim != 4:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.shape[-1] != len(strategy.channels):
        raise ValueError(f"expected {len(strategy.channels)} channels for {strategy.value}")
    V, H, W, _ = pred.shape
    r = pred - target
    return float((r * r).sum() / (V * W * H))


def _action_decode(z, goal, params, cfg):
    if not 0 <= goal < cfg.goal_vocab:
        raise ValueError(f"goal id {goal} outside vocabulary of {cfg.goal_vocab}")
    seq = np.concatenate([z, params["act.goal_emb"][goal][None, :]], axis=0)
    h, blocks = _stack(seq, params, "act", cfg.act_layers, cfg.heads)
    hn, c_norm = L.layer_norm_forward(h[-1:], params["act.norm.g"], params["act.norm.b"])
    out = (hn @ params["act.head_w"] + params["act.head_b"])[0]
    return out, (blocks, c_norm, hn, goal, seq.shape[0])


def _action_decode_backward(dout, cache, params, grads):
    blocks, c_norm, hn, goal, T = cache
    dhn = L.linear_backward(dout[None, :], hn, params["act.head_w"], "act.head", grads)
    dlast = L.layer_norm_backward(dhn, c_norm, "act.norm", grads)
    dh = np.zeros((T, dlast.shape[1]), dtype=dlast.dtype)
    dh[-1] = dlast[0]
    dseq = _stack_backward(dh, blocks, params, "act", grads)
    demb = np.zeros_like(params["act.goal_emb"])
    demb[goal] = dseq[-1]
    L.accumulate(grads, "act.goal_emb", demb)
    return dseq[:-1]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def head_to_action(out) -> ToyAction:
    raw = out[3:7]
    return ToyAction(
        a_pos=np.array(out[:3], dtype=np.float64),
        a_rot=np.asarray(raw / np.linalg.norm(raw), dtype=np.float64),
        a_open=float(_sigmoid(float(out[7]))),
    )


def action_decode(z, goal: int, params, cfg: ModelConfig) -> ToyAction:
    """Append the goal token, run the action block, read the goal row's output."""
    out, _ = _action_decode(z, int(goal), params, cfg)
    return head_to_action(out)


# ---------------------------------------------------------------------------
# losses with gradients


def _pretrain_one(sample, params, cfg, masked_only, grads, backward=True):
    z, enc_cache = _encode(sample.tokens, sample.flags, params, cfg)
    out, dec_cache = _mae_decode(z, params, cfg)
    V, N = cfg.n_views, cfg.n_tokens
    target = np.asarray(sample.target).reshape(V * N, -1)
    r = out - target
    if masked_only:
        w = np.asarray(sample.flags, dtype=out.dtype).reshape(V * N, 1)
        n_pix = max(float(w.sum()) * cfg.patch * cfg.patch, 1.0)
        loss = float((w * r * r).sum() / n_pix)
        dout = 2.0 * w * r / n_pix
    else:
        n_pix = V * cfg.image_size * cfg.image_size
        loss = float((r * r).sum() / n_pix)
        dout = 2.0 * r / n_pix
    if backward:
        dz = _mae_decode_backward(dout, dec_cache, params, grads)
        _encode_backward(dz, enc_cache, params, grads)
    m = np.asarray(sample.flags).reshape(V * N)
    masked_mse = float((r[m] ** 2).sum() / (m.sum() * cfg.patch**2)) if m.any() else float("nan")
    return loss, {"masked_mse": masked_mse}


def action_loss(out, action: ToyAction):
    """Finetune loss on the raw 8-vector head output and its gradient."""
    pos, raw, logit = out[:3], out[3:7], out[7]
    y = float(action.a_open)
    dpos = pos - action.a_pos
    n = np.linalg.norm(raw)
    q = raw / n
    c = float(q @ action.a_rot)
    l_pos = float(dpos @ dpos)
    l_rot = 1.0 - abs(c)
    l_open = float(np.logaddexp(0.0, logit) - y * logit)
    dout = np.empty_like(out)
    dout[:3] = 2.0 * dpos
    dq = -np.sign(c) * np.asarray(action.a_rot, dtype=out.dtype)
    dout[3:7] = (dq - q * (q @ dq)) / n
    dout[7] = _sigmoid(logit) - y
    return l_pos + l_rot + l_open, dout, {"pos_err": float(np.sqrt(l_pos))}


def _finetune_one(sample, params, cfg, grads, backward=True):
    z, enc_cache = _encode(sample.tokens, sample.flags, params, cfg)
    out, act_cache = _action_decode(z, int(sample.goal), params, cfg)
    loss, dout, info = action_loss(out, sample.action)
    if not backward:
        return loss, info
    dz = _action_decode_backward(dout, act_cache, params, grads)
    _encode_backward(dz, enc_cache, params, grads)
    return loss, info


def _sample_loss(sample, params, cfg, mode, masked_only):
    g = {}
    if mode == "pretrain":
        loss, info = _pretrain_one(sample, params, cfg, masked_only, g)
    else:
        loss, info = _finetune_one(sample, params, cfg, g)
    return loss, g, info


def batch_loss(batch, params, cfg: ModelConfig, mode="pretrain", masked_only=False) -> float:
    """Forward-only batch-mean loss (same value as ``loss_and_grads``)."""
    total = 0.0
    for sample in batch:
        if mode == "pretrain":
            loss, _ = _pretrain_one(sample, params, cfg, masked_only, {}, backward=False)
        else:
            loss, _ = _finetune_one(sample, params, cfg, {}, backward=False)
        total += loss
    return total / len(batch)


def loss_and_grads(batch, params, cfg: ModelConfig, mode="pretrain", masked_only=False,
                   workers=1):
    """Batch-mean loss and its exact gradient for every tensor in ``params``.

    Samples may be processed on ``workers`` threads; their gradients are always
    summed in batch order, then divided by the batch size. Returns
    ``(loss, grads, info)``.
    """
    if not batch:
        raise ValueError("empty batch")
    if mode == "pretrain":
        _check_strategy(params, cfg, cfg.strategy)
    elif mode != "finetune":
        raise ValueError(f"unknown mode {mode!r}")

    def run(sample):
        return _sample_loss(sample, params, cfg, mode, masked_only)

    if workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(batch))) as ex:
            results = list(ex.map(run, batch))
    else:
        results = [run(s) for s in batch]
    total = 0.0
    grads = {}
    infos = []
    for loss, g, info in results:
        total += loss
        infos.append(info)
        for k, v in g.items():
            L.accumulate(grads, k, v)
    n = len(batch)
    loss = total / n
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        g = np.zeros_like(p) if g is None else (g / n).astype(p.dtype, copy=False)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        out[k] = g
    info = {}
    for key in infos[0]:
        vals = [i[key] for i in infos if np.isfinite(i[key])]
        info[key] = float(np.mean(vals)) if vals else float("nan")
    return loss, out, info


def target_tokens(tokens, cfg: ModelConfig, strategy=None):
    """Reconstruction targets in token space for the given strategy."""
    strategy = MaskStrategy(strategy or cfg.strategy)
    return select_channels(tokens, cfg.patch, strategy.channels)


__all__ = [
    "ModelConfig",
    "ToyAction",
    "PretrainSample",
    "FinetuneSample",
    "init_params",
    "param_shapes",
    "count_params",
    "encode",
    "mae_decode",
    "mae_decode_tokens",
    "recon_loss",
    "action_decode",
    "loss_and_grads",
    "action_loss",
    "target_tokens",
    "token_channel_mask",
]
