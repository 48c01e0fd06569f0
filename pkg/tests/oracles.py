"""Plain-numpy reference implementations used as test oracles.

Nothing here touches the autodiff engine: attention is written as explicit
per-query loops so it can check the vectorised, masked code paths.
"""

import numpy as np


def np_softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def np_mha(x, params):
    """Multi-head attention of a ``(n, D)`` array with an attention module's weights."""
    n, d = x.shape
    h = params.heads
    dh = d // h
    qkv = x @ params.qkv.weight.data + params.qkv.bias.data
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    out = np.zeros((n, d))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(n):
            logits = np.array([q[i, sl] @ k[j, sl] for j in range(n)]) / np.sqrt(dh)
            out[i, sl] = np_softmax(logits) @ v[:, sl]
    return out @ params.proj.weight.data + params.proj.bias.data


def np_layernorm(x, ln):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * ln.gamma.data + ln.beta.data


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def np_ffn(x, ffn):
    hdn = np_gelu(x @ ffn.fc1.weight.data + ffn.fc1.bias.data)
    return hdn @ ffn.fc2.weight.data + ffn.fc2.bias.data


def extract_attend_scatter(x, params, rows):
    """Vanilla attention on ``x[rows]`` only, scattered back into a zero array."""
    out = np.zeros_like(x)
    rows = list(rows)
    if rows:
        out[rows] = np_mha(x[rows], params)
    return out


def joint_oracle(x, params, pose, cls_attend=True):
    """Pose-aware joint attention over one sequence ``(1 + S*T, D)``."""
    rows = ([0] if cls_attend else []) + [1 + i for i in np.flatnonzero(pose)]
    return extract_attend_scatter(x, params, rows)


def spatial_oracle(x, params, pose, S, T, cls_attend=True):
    """Per-frame attention with the class token replicated and averaged over frames."""
    d = x.shape[1]
    out = np.zeros_like(x)
    cls_acc = np.zeros(d)
    pose = np.asarray(pose, bool).reshape(T, S)
    for t in range(T):
        frame = np.vstack([x[:1], x[1 + t * S:1 + (t + 1) * S]])
        rows = ([0] if cls_attend else []) + [1 + s for s in np.flatnonzero(pose[t])]
        fo = extract_attend_scatter(frame, params, rows)
        cls_acc += fo[0]
        out[1 + t * S:1 + (t + 1) * S] = fo[1:]
    out[0] = cls_acc / T
    return out


def temporal_oracle(x, params, S, T):
    out = np.zeros_like(x)
    for s in range(S):
        idx = [1 + t * S + s for t in range(T)]
        out[idx] = np_mha(x[idx], params)
    return out


def block_oracle(blk, x, pose, S, T):
    """Pre-norm PAAB on one sequence with numpy oracles."""
    attend = blk.cls_mode == "attend"
    if blk.variant == "Factorized PA-STA":
        x = x + temporal_oracle(np_layernorm(x, blk.norm_t), blk.attn_t, S, T)
    h = np_layernorm(x, blk.norm)
    if blk.variant == "Joint PA-STA":
        x = x + joint_oracle(h, blk.attn, pose, attend)
    else:
        x = x + spatial_oracle(h, blk.attn, pose, S, T, attend)
    return x + np_ffn(np_layernorm(x, blk.norm_f), blk.ffn)
