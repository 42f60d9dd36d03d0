"""Forward/backward pairs for the transformer building blocks.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes the upstream gradient and the cache, writes parameter gradients into
the ``grads`` dict under the parameter's full name, and returns the gradient
with respect to its input. Inputs are 2-D ``(T, H)`` sequences.
"""

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def accumulate(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dy, x, w, name, grads):
    accumulate(grads, name + "_w", x.T @ dy)
    accumulate(grads, name + "_b", dy.sum(axis=0))
    return dy @ w.T


def layer_norm_forward(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(dy, cache, name, grads):
    xhat, rstd, g = cache
    accumulate(grads, name + ".g", (dy * xhat).sum(axis=0))
    accumulate(grads, name + ".b", dy.sum(axis=0))
    dxhat = dy * g
    return rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(x, p, pre, heads):
    """Multi-head self-attention over all rows of ``x``."""
    T, H = x.shape
    dh = H // heads
    scale = 1.0 / np.sqrt(dh)
    q = x @ p[pre + "q_w"] + p[pre + "q_b"]
    k = x @ p[pre + "k_w"] + p[pre + "k_b"]
    v = x @ p[pre + "v_w"] + p[pre + "v_b"]
    qh = q.reshape(T, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(T, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(T, heads, dh).transpose(1, 0, 2)
    a = softmax((qh @ kh.transpose(0, 2, 1)) * scale)
    o = (a @ vh).transpose(1, 0, 2).reshape(T, H)
    y = o @ p[pre + "o_w"] + p[pre + "o_b"]
    return y, (x, qh, kh, vh, a, o, scale)


def attention_backward(dy, cache, p, pre, grads):
    x, qh, kh, vh, a, o, scale = cache
    heads, T, dh = qh.shape
    H = heads * dh
    do = linear_backward(dy, o, p[pre + "o_w"], pre + "o", grads)
    doh = do.reshape(T, heads, dh).transpose(1, 0, 2)
    da = doh @ vh.transpose(0, 2, 1)
    dvh = a.transpose(0, 2, 1) @ doh
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 2, 1) @ qh
    dq = dqh.transpose(1, 0, 2).reshape(T, H)
    dk = dkh.transpose(1, 0, 2).reshape(T, H)
    dv = dvh.transpose(1, 0, 2).reshape(T, H)
    dx = linear_backward(dq, x, p[pre + "q_w"], pre + "q", grads)
    dx = dx + linear_backward(dk, x, p[pre + "k_w"], pre + "k", grads)
    dx = dx + linear_backward(dv, x, p[pre + "v_w"], pre + "v", grads)
    return dx


def mlp_forward(x, p, pre):
    h = x @ p[pre + "fc1_w"] + p[pre + "fc1_b"]
    a, gcache = gelu_forward(h)
    y = a @ p[pre + "fc2_w"] + p[pre + "fc2_b"]
    return y, (x, a, gcache)


def mlp_backward(dy, cache, p, pre, grads):
    x, a, gcache = cache
    da = linear_backward(dy, a, p[pre + "fc2_w"], pre + "fc2", grads)
    dh = gelu_backward(da, gcache)
    return linear_backward(dh, x, p[pre + "fc1_w"], pre + "fc1", grads)


def block_forward(x, p, pre, heads):
    """Pre-norm transformer block: ``x + attn(ln1 x)`` then ``+ mlp(ln2 .)``."""
    h1, c_ln1 = layer_norm_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    a, c_attn = attention_forward(h1, p, pre + "attn.", heads)
    x1 = x + a
    h2, c_ln2 = layer_norm_forward(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
    m, c_mlp = mlp_forward(h2, p, pre + "mlp.")
    return x1 + m, (c_ln1, c_attn, c_ln2, c_mlp)


def block_backward(dy, cache, p, pre, grads):
    c_ln1, c_attn, c_ln2, c_mlp = cache
    dh2 = mlp_backward(dy, c_mlp, p, pre + "mlp.", grads)
    dx1 = dy + layer_norm_backward(dh2, c_ln2, pre + "ln2", grads)
    dh1 = attention_backward(dx1, c_attn, p, pre + "attn.", grads)
    return dx1 + layer_norm_backward(dh1, c_ln1, pre + "ln1", grads)


def attention_probs(cache):
    """Softmax weights ``(heads, T, T)`` from a block cache."""
    return cache[1][4]
