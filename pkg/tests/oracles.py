"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools
import math

import numpy as np
import torch


def surface_voxels(mask):
    """Voxels of ``mask`` with a 6-neighbour outside it (grid border counts as outside)."""
    mask = np.asarray(mask, bool)
    out = []
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < mask.shape[axis] or not mask[tuple(nb)]:
                    out.append(idx)
                    break
            else:
                continue
            break
    return np.array(out, dtype=float).reshape(-1, 3)


def brute_sdt(mask, spacing=(1.0, 1.0, 1.0)):
    mask = np.asarray(mask, bool)
    surf = surface_voxels(mask)
    if len(surf) == 0 or mask.all():
        return np.full(mask.shape, np.inf)
    sp = np.asarray(spacing)
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in mask.shape], indexing="ij"), -1).reshape(-1, 3)
    d = np.sqrt((((grid[:, None, :] - surf[None]) * sp) ** 2).sum(-1)).min(1).reshape(mask.shape)
    return np.where(mask, -d, d)


def linear_percentile(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def brute_hd95(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)):
    """All-pairs surface distances, pooled in both directions, hand-rolled percentile."""
    a, b = surface_voxels(pred_mask), surface_voxels(gt_mask)
    if len(a) == 0 or len(b) == 0:
        return None
    sp = np.asarray(spacing)
    d = np.sqrt((((a[:, None, :] - b[None, :, :]) * sp) ** 2).sum(-1))
    pooled = np.concatenate([d.min(1), d.min(0)]).tolist()
    return linear_percentile(pooled, 95)


def fd_gradient_check(fn, tensors, coords=None, h=1e-6, rng=None, n=6, floor=1e-6):
    """Compare autograd to central differences on a few coordinates of each tensor.

    Returns the worst relative error, |g_fd - g_an| / max(|g_fd|, |g_an|, floor).
    The floor keeps round-off in near-zero gradients from dominating.
    ``fn`` maps the tensors to a scalar.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    out = fn(*tensors)
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.detach().view(-1)
        picks = rng.choice(flat.numel(), size=min(n, flat.numel()), replace=False)
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = float(fn(*tensors))
                flat[i] = orig - h
                dn = float(fn(*tensors))
                flat[i] = orig
            num = (up - dn) / (2 * h)
            an = g.reshape(-1)[i].item()
            scale = max(abs(num), abs(an), floor)
            worst = max(worst, abs(num - an) / scale)
    return worst


def soft_dice_ref(probs, onehot, eps):
    """Loop version of 1 - mean_c (2 sum pg + eps) / (sum p + sum g + eps)."""
    b, c = probs.shape[:2]
    total = 0.0
    for i in range(b):
        for k in range(c):
            p, g = probs[i, k].ravel(), onehot[i, k].ravel()
            total += 1 - (2 * sum(p * g) + eps) / (sum(p) + sum(g) + eps)
    return total / (b * c)


def cross_entropy_ref(logits, labels):
    b, c = logits.shape[:2]
    vals = []
    for i in range(b):
        for idx in itertools.product(*[range(n) for n in logits.shape[2:]]):
            z = [logits[(i, k) + idx] for k in range(c)]
            m = max(z)
            lse = m + math.log(sum(math.exp(x - m) for x in z))
            vals.append(lse - z[labels[(i,) + idx]])
    return sum(vals) / len(vals)
