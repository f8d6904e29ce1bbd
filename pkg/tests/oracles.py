"""Independent straight-line reference implementations.

Everything here is written as plain 64-bit loop nests over numpy scalars
(or the simplest possible array expressions), deliberately sharing no
code with the library: these are the second route that the fast
implementations are checked against.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# tensor ops
# ---------------------------------------------------------------------------

def conv2d_oracle(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                  padding: str = "same") -> np.ndarray:
    """x [B,Ci,H,W], w [Co,Ci,k,k], b [Co]; zero padding."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    co, ci, k, _ = w.shape
    pad = (k - 1) // 2 if padding == "same" else 0
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = xp.shape[2] - k + 1
    wo = xp.shape[3] - k + 1
    y = np.zeros((x.shape[0], co, ho, wo))
    for n in range(x.shape[0]):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[n, c, i + di, j + dj] * w[o, c, di, dj]
                    y[n, o, i, j] = acc + b[o]
    return y


def transposed_conv2d_oracle(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x [B,Ci,H,W], w [Ci,Co,2,2], stride 2."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bsz, ci, h, ww = x.shape
    co = w.shape[1]
    y = np.zeros((bsz, co, 2 * h, 2 * ww))
    for n in range(bsz):
        for c in range(ci):
            for o in range(co):
                for i in range(h):
                    for j in range(ww):
                        for di in range(2):
                            for dj in range(2):
                                y[n, o, 2 * i + di, 2 * j + dj] += (
                                    x[n, c, i, j] * w[c, o, di, dj]
                                )
    return y


def maxpool2d_oracle(x: np.ndarray) -> np.ndarray:
    """x [B,C,H,W] with even H, W; 2x2 non-overlapping max."""
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    y = np.zeros((b, c, h // 2, w // 2))
    for n in range(b):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best = -math.inf
                    for di in range(2):
                        for dj in range(2):
                            v = x[n, ch, 2 * i + di, 2 * j + dj]
                            if v > best:
                                best = v
                    y[n, ch, i, j] = best
    return y


def affine_oracle(x: np.ndarray, w: np.ndarray,
                  b: np.ndarray | None = None) -> np.ndarray:
    """x [..., n] @ w.T with w [m, n] (+ b [m])."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    lead = x.shape[:-1]
    xf = x.reshape(-1, x.shape[-1])
    y = np.zeros((xf.shape[0], w.shape[0]))
    for r in range(xf.shape[0]):
        for m in range(w.shape[0]):
            acc = 0.0
            for n in range(w.shape[1]):
                acc += xf[r, n] * w[m, n]
            if b is not None:
                acc += float(b[m])
            y[r, m] = acc
    return y.reshape(lead + (w.shape[0],))


def softmax_oracle(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-stabilized softmax along one axis."""
    x = np.asarray(x, dtype=np.float64)
    moved = np.moveaxis(x, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    out = np.zeros_like(flat)
    for r in range(flat.shape[0]):
        peak = max(float(v) for v in flat[r])
        exps = [math.exp(float(v) - peak) for v in flat[r]]
        total = sum(exps)
        for i, e in enumerate(exps):
            out[r, i] = e / total
    return np.moveaxis(out.reshape(moved.shape), -1, axis)


def _sig(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def lstm_cell_oracle(h_prev: np.ndarray, c_prev: np.ndarray, x: np.ndarray,
                     gates: dict) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step per row.

    ``gates`` maps "forget"/"input"/"output"/"cell" to (w_h [U,U],
    w_x [U,F], b [U]).  Gate preactivation is h @ w_h.T + x @ w_x.T + b.
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n, u = h_prev.shape
    h_out = np.zeros((n, u))
    c_out = np.zeros((n, u))

    def pre(name, row, j):
        w_h, w_x, b = gates[name]
        acc = float(b[j])
        for a in range(u):
            acc += h_prev[row, a] * float(w_h[j, a])
        for a in range(x.shape[1]):
            acc += x[row, a] * float(w_x[j, a])
        return acc

    for r in range(n):
        for j in range(u):
            f = _sig(pre("forget", r, j))
            i = _sig(pre("input", r, j))
            o = _sig(pre("output", r, j))
            g = math.tanh(pre("cell", r, j))
            c = f * c_prev[r, j] + i * g
            h_out[r, j] = o * math.tanh(c)
            c_out[r, j] = c
    return h_out, c_out


def attention_weights_oracle(h_seq, w1, b1, w2, b2) -> np.ndarray:
    """h_seq: list of [B,2U,h,w] maps -> [T,B] softmax over time.

    Per step: per-pixel tanh MLP score, averaged over pixels.
    """
    t_steps = len(h_seq)
    bsz = h_seq[0].shape[0]
    scores = np.zeros((t_steps, bsz))
    for t, h_map in enumerate(h_seq):
        h_map = np.asarray(h_map, dtype=np.float64)
        _, ch, hh, ww = h_map.shape
        for n in range(bsz):
            acc = 0.0
            for i in range(hh):
                for j in range(ww):
                    vec = h_map[n, :, i, j]
                    hidden = [
                        math.tanh(affine_scalar(vec, w1, b1, m))
                        for m in range(np.asarray(w1).shape[0])
                    ]
                    acc += affine_scalar(np.array(hidden), w2, b2, 0)
            scores[t, n] = acc / (hh * ww)
    return softmax_oracle(scores, axis=0)


def affine_scalar(vec, w, b, m) -> float:
    """Row m of vec @ w.T + b with w [m_out, n_in]."""
    w = np.asarray(w, dtype=np.float64)
    acc = float(np.asarray(b, dtype=np.float64)[m])
    for a in range(w.shape[1]):
        acc += float(vec[a]) * w[m, a]
    return acc


def aggregate_oracle(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """x [T,...] with alpha [T], or x [T,B,...] with alpha [T,B];
    weighted sum over the time axis."""
    x = np.asarray(x, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    out = np.zeros(x.shape[1:])
    for t in range(x.shape[0]):
        if alpha.ndim == 1:
            out += alpha[t] * x[t]
        else:
            for n in range(x.shape[1]):
                out[n] += alpha[t, n] * x[t, n]
    return out


def aggregate_skips_oracle(skips_per_step, alpha) -> list[np.ndarray]:
    """skips_per_step[t][k] -> one aggregated map per level k."""
    levels = len(skips_per_step[0])
    out = []
    for k in range(levels):
        stack = np.stack([np.asarray(skips_per_step[t][k], dtype=np.float64)
                          for t in range(len(skips_per_step))])
        out.append(aggregate_oracle(stack, alpha))
    return out


def cross_entropy_oracle(probs: np.ndarray, labels: np.ndarray,
                         ignore_label: int = 255,
                         floor: float = 1e-12) -> float:
    """Mean -log p_true over non-ignored pixels; probs [B,L,H,W]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    total = 0.0
    count = 0
    for n in range(labels.shape[0]):
        for i in range(labels.shape[1]):
            for j in range(labels.shape[2]):
                lab = int(labels[n, i, j])
                if lab == ignore_label:
                    continue
                p = float(probs[n, lab, i, j])
                total += -math.log(max(p, floor))
                count += 1
    if count == 0:
        raise ValueError("all pixels ignored")
    return total / count


# ---------------------------------------------------------------------------
# label cleaning
# ---------------------------------------------------------------------------

def clean_labels_oracle(y: np.ndarray, min_size: int = 10,
                        ignore_label: int = 255) -> np.ndarray:
    """Per-class 1-px 8-neighborhood erosion, then flood-fill removal of
    8-connected components smaller than min_size."""
    y = np.asarray(y)
    h, w = y.shape
    out = np.full((h, w), ignore_label, dtype=np.uint8)
    for cls in sorted(set(int(v) for v in y.ravel())):
        if cls == ignore_label:
            continue
        eroded = np.zeros((h, w), dtype=bool)
        for i in range(h):
            for j in range(w):
                if int(y[i, j]) != cls:
                    continue
                ok = True
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        ni, nj = i + di, j + dj
                        if ni < 0 or nj < 0 or ni >= h or nj >= w:
                            ok = False
                        elif int(y[ni, nj]) != cls:
                            ok = False
                eroded[i, j] = ok
        seen = np.zeros((h, w), dtype=bool)
        for i in range(h):
            for j in range(w):
                if not eroded[i, j] or seen[i, j]:
                    continue
                stack = [(i, j)]
                seen[i, j] = True
                component = []
                while stack:
                    ci, cj = stack.pop()
                    component.append((ci, cj))
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            ni, nj = ci + di, cj + dj
                            if (0 <= ni < h and 0 <= nj < w
                                    and eroded[ni, nj] and not seen[ni, nj]):
                                seen[ni, nj] = True
                                stack.append((ni, nj))
                if len(component) >= min_size:
                    for ci, cj in component:
                        out[ci, cj] = cls
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion_oracle(truth: np.ndarray, pred: np.ndarray, num_classes: int,
                     ignore_label: int = 255) -> np.ndarray:
    """Truth-by-prediction counts via an explicit pixel loop."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(truth.ravel(), pred.ravel()):
        if int(t) == ignore_label:
            continue
        out[int(t), int(p)] += 1
    return out


def f1_oracle(tp: int, fp: int, fn: int) -> float:
    return 2.0 * tp / (2.0 * tp + fp + fn)
