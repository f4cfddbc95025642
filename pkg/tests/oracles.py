"""Reference implementations written independently of the package code."""

import numpy as np


def iou_oracle(a, b):
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += bool(x and y)
        union += bool(x or y)
    return 0.0 if union == 0 else inter / union


def refine_replay(probs, M1, M2, t_iou, fill=0.5):
    """Line-by-line replay of the IoU matching and refinement pseudo-code.

    The double loop ranges over the current members of M1 and M2, so a mask
    deleted from its set takes no further part in matching. Pixels outside
    every candidate mask keep ``probs > fill``.
    """
    M1 = list(M1)
    M2 = list(M2)
    cover = np.zeros(probs.shape, dtype=bool)
    for m in M1 + M2:
        cover |= m
    i = 0
    while i < len(M1):
        deleted = False
        j = 0
        while j < len(M2):
            if iou_oracle(M1[i], M2[j]) > t_iou:
                del M1[i]
                del M2[j]
                deleted = True
                break
            j += 1
        if not deleted:
            i += 1
    M12 = M1 + M2
    Mc = np.zeros(probs.shape, dtype=bool)
    for m in M12:
        if (m * probs).sum() / m.sum() > t_iou:
            Mc |= m
    return Mc | (~cover & (probs > fill)), M12


def random_masks(rng, k, shape):
    """``k`` non-empty masks: random rectangles, sometimes near-copies of earlier ones."""
    out = []
    h, w = shape
    for _ in range(k):
        if out and rng.random() < 0.4:
            m = out[rng.integers(len(out))].copy()
            r, c = rng.integers(0, h), rng.integers(0, w)
            m[r, c] = not m[r, c]
            if not m.any():
                m[r, c] = True
        else:
            r0, c0 = rng.integers(0, h - 1), rng.integers(0, w - 1)
            r1, c1 = rng.integers(r0 + 1, h + 1), rng.integers(c0 + 1, w + 1)
            m = np.zeros(shape, dtype=bool)
            m[r0:r1, c0:c1] = True
        out.append(m)
    return out
