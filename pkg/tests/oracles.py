"""Independent literal replays of the sequential manipulation pseudocode.

Pure-python scalar arithmetic, no numpy vectorization, so the main
implementation is checked against a genuinely separate evaluation path.
"""
from __future__ import annotations


def _dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def _add_scaled(u, s, v):
    return [a + s * b for a, b in zip(u, v)]


def global_manipulation_oracle(v_cls, steps):
    """steps: dicts with keys e, a (or None), target_scale, enhance."""
    v = [float(x) for x in v_cls]
    for step in steps:
        e = [float(x) for x in step["e"]]
        a = [float(x) for x in step["a"]] if step["a"] is not None else None
        scale = float(step["target_scale"])
        if a is not None:
            if step["enhance"]:
                v = _add_scaled(v, -_dot(v, a), a)
                v = _add_scaled(v, scale - _dot(v, e), e)
            else:
                diff = [ei - ai for ei, ai in zip(e, a)]
                v = _add_scaled(v, scale, diff)
        else:
            if step["enhance"]:
                v = _add_scaled(v, scale, e)
            else:
                v = _add_scaled(v, scale - _dot(v, e), e)
    return v


def omega_oracle(m_i, d, ts, r):
    ts0, ts1, ts2, ts3 = ts
    if m_i <= ts0:
        return -d * r
    if m_i <= ts1:
        return -d * r + d * r * (m_i - ts0) / (ts1 - ts0)
    if m_i <= ts2:
        return 0.5 * d * (m_i - ts1) / (ts2 - ts1)
    if m_i <= ts3:
        return 0.5 * d + 0.5 * d * (m_i - ts2) / (ts3 - ts2)
    return d


def local_manipulation_oracle(v_locals, v_cls, steps):
    """steps: dicts with keys e, a (or None), c, target_scale, enhance, ts, r."""
    tokens = [[float(x) for x in row] for row in v_locals]
    cls_vec = [float(x) for x in v_cls]
    for step in steps:
        e = [float(x) for x in step["e"]]
        a = [float(x) for x in step["a"]] if step["a"] is not None else None
        c = [float(x) for x in step["c"]]
        scale = float(step["target_scale"])
        ts, r = step["ts"], step["r"]

        if a is not None:
            if step["enhance"]:
                d = scale - _dot(cls_vec, a)
                beta = 1.0
            else:
                d = scale - _dot(cls_vec, e)
                beta = 0.0
        else:
            d = scale

        raw = [_dot(tok, c) for tok in tokens]
        lo, hi = min(raw), max(raw)
        if hi - lo < 1e-12:
            m = [0.5] * len(raw)
        else:
            m = [(x - lo) / (hi - lo) for x in raw]
        omega = [omega_oracle(mi, d, ts, r) for mi in m]

        if a is not None:
            diff = [ei - ai for ei, ai in zip(e, a)]
            tokens = [_add_scaled(tok, omega[i] + beta * _dot(tok, a), diff)
                      for i, tok in enumerate(tokens)]
        else:
            tokens = [_add_scaled(tok, omega[i], e) for i, tok in enumerate(tokens)]
    return tokens
